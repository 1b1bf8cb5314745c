"""Per-frame convolutional encoder."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F


@dataclass
class EncoderConfig:
    in_channels: int = 3
    image_size: tuple[int, int] = (32, 32)
    conv_blocks: list[tuple[int, int, int]] = field(default_factory=lambda: [(16, 3, 2), (32, 3, 2), (64, 3, 2)])
    embed_dim: int = 64

    def __post_init__(self):
        self.image_size = tuple(int(v) for v in self.image_size)
        self.conv_blocks = [tuple(int(v) for v in blk) for blk in self.conv_blocks]
        if self.embed_dim < 8:
            raise ValueError("embed_dim must be >= 8")
        if not self.conv_blocks:
            raise ValueError("at least one conv block is required")
        for out_ch, k, s in self.conv_blocks:
            if out_ch < 1 or k < 1 or s < 1:
                raise ValueError(f"invalid conv block {(out_ch, k, s)}")


@dataclass
class EmbeddingSequence:
    values: torch.Tensor  # [T, D]
    pad_mask: torch.Tensor  # [T] bool, True = real frame


class FrameEncoder(nn.Module):
    """conv -> ReLU blocks, spatial mean pool, linear projection to ``embed_dim``."""

    def __init__(self, config: EncoderConfig):
        super().__init__()
        self.config = config
        convs = []
        ch = config.in_channels
        for out_ch, k, s in config.conv_blocks:
            convs.append(nn.Conv2d(ch, out_ch, k, stride=s, padding=k // 2))
            ch = out_ch
        self.convs = nn.ModuleList(convs)
        self.proj = nn.Linear(ch, config.embed_dim)

    def forward(self, frames: torch.Tensor) -> torch.Tensor:
        """frames: [N, C, H, W] -> [N, D]"""
        x = frames
        for conv in self.convs:
            x = F.relu(conv(x))
        return self.proj(x.mean(dim=(2, 3)))

    def check_input(self, shape) -> None:
        C, H, W = shape[-3:]
        cfg = self.config
        if C != cfg.in_channels or (H, W) != tuple(cfg.image_size):
            raise ValueError(f"frame shape {(C, H, W)} does not match encoder input "
                             f"{(cfg.in_channels, *cfg.image_size)}")

    def encode_sequences(self, frames: torch.Tensor, pad_mask: torch.Tensor) -> torch.Tensor:
        """frames [B, T, C, H, W], pad_mask [B, T] -> [B, T, D] with zeros at padded slots.

        Only real frames go through the network.
        """
        self.check_input(frames.shape)
        B, T = pad_mask.shape
        flat = frames.reshape(B * T, *frames.shape[2:])
        keep = pad_mask.reshape(-1)
        out = flat.new_zeros(B * T, self.config.embed_dim)
        if keep.any():
            out[keep] = self(flat[keep])
        return out.reshape(B, T, -1)


def embed_frames(frames, encoder: FrameEncoder, pad_mask=None) -> EmbeddingSequence:
    """Embed one trajectory's frames [T, C, H, W] frame by frame."""
    x = torch.as_tensor(np.asarray(frames) if not torch.is_tensor(frames) else frames)
    if x.ndim != 4:
        raise ValueError(f"expected [T, C, H, W], got {tuple(x.shape)}")
    x = x.to(next(encoder.parameters()).dtype)
    if pad_mask is None:
        pad_mask = torch.ones(x.shape[0], dtype=torch.bool)
    pad_mask = torch.as_tensor(pad_mask, dtype=torch.bool)
    values = encoder.encode_sequences(x[None], pad_mask[None])[0]
    return EmbeddingSequence(values=values, pad_mask=pad_mask)
