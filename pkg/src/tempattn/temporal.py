"""Temporal Transformer with a CLS token and a final attention-pooling layer."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .encoder import EmbeddingSequence, EncoderConfig, FrameEncoder
from .trajgen import Label, Trajectory


@dataclass
class TemporalConfig:
    n_layers: int = 8
    n_heads: int = 4
    model_dim: int = 64
    ff_dim: int | None = None  # defaults to 4 * model_dim
    dropout: float = 0.1
    use_positional_encoding: bool = True

    def __post_init__(self):
        if self.ff_dim is None:
            self.ff_dim = 4 * self.model_dim
        if self.model_dim % self.n_heads:
            raise ValueError("model_dim must be divisible by n_heads")
        if self.model_dim % 2:
            raise ValueError("model_dim must be even for sinusoidal encodings")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")


@dataclass
class AttentionProfile:
    weights: np.ndarray  # [T], exactly zero at padded slots
    pad_mask: np.ndarray | None = None  # [T] bool, True = real frame

    @property
    def length(self) -> int:
        return len(self.weights) if self.pad_mask is None else int(self.pad_mask.sum())

    def real(self) -> np.ndarray:
        """Weights of the real frames, in frame order."""
        if self.pad_mask is None:
            return self.weights
        return self.weights[self.pad_mask]


@dataclass
class Prediction:
    logit: float
    probability: float
    label: Label
    attention: AttentionProfile


def positional_encoding(n_positions: int, dim: int) -> np.ndarray:
    """Sinusoidal table [n_positions, dim]; row 0 is the CLS slot."""
    if dim % 2:
        raise ValueError("dim must be even")
    pos = np.arange(n_positions, dtype=np.float64)[:, None]
    rate = 10000.0 ** (np.arange(0, dim, 2, dtype=np.float64) / dim)
    pe = np.empty((n_positions, dim), dtype=np.float64)
    pe[:, 0::2] = np.sin(pos / rate)
    pe[:, 1::2] = np.cos(pos / rate)
    return pe


def _dropout(x, p, training, generator):
    if not training or p == 0.0:
        return x
    keep = torch.rand(x.shape, generator=generator, dtype=x.dtype) >= p
    return x * keep / (1.0 - p)


class EncoderBlock(nn.Module):
    """Pre-norm self-attention + feed-forward block."""

    def __init__(self, dim, n_heads, ff_dim, dropout):
        super().__init__()
        self.n_heads = n_heads
        self.dropout = dropout
        self.norm1 = nn.LayerNorm(dim)
        self.qkv = nn.Linear(dim, 3 * dim)
        self.out = nn.Linear(dim, dim)
        self.norm2 = nn.LayerNorm(dim)
        self.ff1 = nn.Linear(dim, ff_dim)
        self.ff2 = nn.Linear(ff_dim, dim)

    def forward(self, x, key_mask, generator=None):
        B, T, D = x.shape
        dh = D // self.n_heads
        q, k, v = self.qkv(self.norm1(x)).view(B, T, 3, self.n_heads, dh).permute(2, 0, 3, 1, 4)
        scores = q @ k.transpose(-1, -2) / math.sqrt(dh)
        scores = scores.masked_fill(~key_mask[:, None, None, :], float("-inf"))
        attn = _dropout(scores.softmax(dim=-1), self.dropout, self.training, generator)
        h = (attn @ v).transpose(1, 2).reshape(B, T, D)
        x = x + _dropout(self.out(h), self.dropout, self.training, generator)
        h = self.ff2(_dropout(F.gelu(self.ff1(self.norm2(x))), self.dropout, self.training, generator))
        return x + _dropout(h, self.dropout, self.training, generator)


class AttentionPool(nn.Module):
    """Single-head attention with the CLS state as query and frame states as keys/values."""

    def __init__(self, dim):
        super().__init__()
        self.q = nn.Linear(dim, dim)
        self.k = nn.Linear(dim, dim)
        self.v = nn.Linear(dim, dim)
        self.out = nn.Linear(dim, dim)

    def forward(self, cls, frames, pad_mask):
        scores = (self.k(frames) @ self.q(cls)[:, :, None]).squeeze(-1) / math.sqrt(cls.shape[-1])
        weights = scores.masked_fill(~pad_mask, float("-inf")).softmax(dim=-1)
        pooled = self.out((weights[:, :, None] * self.v(frames)).sum(dim=1))
        return pooled, weights


class TemporalModel(nn.Module):
    def __init__(self, config: TemporalConfig, input_dim: int | None = None):
        super().__init__()
        self.config = config
        D = config.model_dim
        input_dim = D if input_dim is None else input_dim
        self.adapter = nn.Identity() if input_dim == D else nn.Linear(input_dim, D)
        self.cls = nn.Parameter(torch.randn(D) * 0.02)
        self.blocks = nn.ModuleList(
            EncoderBlock(D, config.n_heads, config.ff_dim, config.dropout) for _ in range(config.n_layers)
        )
        self.norm_pre = nn.LayerNorm(D)
        self.pool = AttentionPool(D)
        self.norm_post = nn.LayerNorm(D)
        self.head = nn.Linear(D, 1)
        self.generator = None  # torch.Generator for dropout, set by the trainer

    def forward(self, emb, pad_mask):
        """emb [B, T, D_in], pad_mask [B, T] -> (logits [B], attention [B, T])."""
        pad_mask = pad_mask.bool()
        if not pad_mask.any(dim=1).all():
            raise ValueError("every sequence needs at least one real frame")
        x = self.adapter(emb)
        B, T, D = x.shape
        tokens = torch.cat([self.cls.expand(B, 1, D), x], dim=1)
        if self.config.use_positional_encoding:
            tokens = tokens + torch.as_tensor(positional_encoding(T + 1, D), dtype=x.dtype)
        key_mask = torch.cat([pad_mask.new_ones(B, 1), pad_mask], dim=1)
        for blk in self.blocks:
            tokens = blk(tokens, key_mask, self.generator)
        tokens = self.norm_pre(tokens)
        cls_out = tokens[:, 0]
        pooled, weights = self.pool(cls_out, tokens[:, 1:], pad_mask)
        logits = self.head(cls_out + self.norm_post(pooled)).squeeze(-1)
        return logits, weights


class FateModel(nn.Module):
    """Frame encoder + temporal model + linear head."""

    def __init__(self, encoder_config: EncoderConfig, temporal_config: TemporalConfig,
                 decision_threshold: float = 0.5):
        super().__init__()
        self.encoder_config = encoder_config
        self.temporal_config = temporal_config
        self.decision_threshold = decision_threshold
        self.encoder = FrameEncoder(encoder_config)
        self.temporal = TemporalModel(temporal_config, input_dim=encoder_config.embed_dim)

    def forward(self, frames, pad_mask):
        emb = self.encoder.encode_sequences(frames, pad_mask)
        return self.temporal(emb, pad_mask)

    def set_generator(self, generator) -> None:
        self.temporal.generator = generator


def batch_frames(trajs: list[Trajectory], dtype=torch.float32):
    """Stack trajectories into end-padded tensors (frames [B,T,C,H,W], pad_mask [B,T])."""
    T = max(t.length for t in trajs)
    _, C, H, W = trajs[0].frames.shape
    frames = np.zeros((len(trajs), T, C, H, W), dtype=np.float32)
    mask = np.zeros((len(trajs), T), dtype=bool)
    for i, tr in enumerate(trajs):
        valid = tr.valid_mask()
        frames[i, : tr.length] = tr.frames * valid[:, None, None, None]
        mask[i, : tr.length] = valid
    return torch.as_tensor(frames, dtype=dtype), torch.as_tensor(mask)


def forward(emb: EmbeddingSequence, model: TemporalModel, training: bool = False,
            threshold: float = 0.5) -> Prediction:
    """Classify one embedded sequence."""
    was_training = model.training
    model.train(training)
    try:
        with torch.set_grad_enabled(training):
            logits, weights = model(emb.values[None], emb.pad_mask[None])
    finally:
        model.train(was_training)
    return _prediction(float(logits[0]), weights[0].detach().cpu().numpy(), emb.pad_mask.numpy(), threshold)


def _prediction(logit: float, weights: np.ndarray, pad_mask: np.ndarray, threshold: float) -> Prediction:
    prob = 1.0 / (1.0 + math.exp(-logit)) if logit > -700 else 0.0
    label = Label.APOPTOSIS if prob >= threshold else Label.MITOSIS
    return Prediction(logit=logit, probability=prob, label=label,
                      attention=AttentionProfile(weights=weights.astype(np.float64),
                                                pad_mask=np.asarray(pad_mask, dtype=bool)))


@torch.no_grad()
def predict(model: FateModel, trajs: list[Trajectory], batch_size: int = 32) -> list[Prediction]:
    """Inference (dropout off) in fixed-size batches, in input order."""
    was_training = model.training
    model.eval()
    dtype = next(model.parameters()).dtype
    out = []
    try:
        for i in range(0, len(trajs), batch_size):
            chunk = trajs[i:i + batch_size]
            frames, mask = batch_frames(chunk, dtype)
            logits, weights = model(frames, mask)
            for j, tr in enumerate(chunk):
                out.append(_prediction(float(logits[j]), weights[j, : tr.length].numpy(),
                                       tr.valid_mask(), model.decision_threshold))
    finally:
        model.train(was_training)
    return out


def extract_attention(model: FateModel, traj: Trajectory) -> AttentionProfile:
    """Pooling-layer weights over the frames of ``traj`` (CLS is not in the support)."""
    return predict(model, [traj], batch_size=1)[0].attention
