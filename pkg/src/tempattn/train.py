"""Class-balanced, augmented, deterministic end-to-end training."""

from __future__ import annotations

import copy
import csv
import hashlib
import logging
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from scipy.ndimage import gaussian_filter

from .encoder import EncoderConfig
from .temporal import FateModel, TemporalConfig, batch_frames
from .trajgen import Label, Trajectory

log = logging.getLogger(__name__)

LOG_FIELDS = ("epoch", "train_loss", "val_loss", "val_bacc", "lr", "seconds")


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    batch_size: int = 4
    learning_rate: float = 1e-5
    weight_decay: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    max_epochs: int = 86
    patience: int = 10
    p_hflip: float = 0.5
    p_vflip: float = 0.5
    p_jitter: float = 0.5
    p_blur: float = 0.3
    p_end_mask: float = 0.5
    end_mask_range: tuple[float, float] = (0.10, 0.50)
    jitter_scale: tuple[float, float] = (0.9, 1.1)
    jitter_offset: tuple[float, float] = (-0.05, 0.05)
    blur_sigma: tuple[float, float] = (0.3, 1.0)
    # head cropping drops a random leading segment of the visible frames,
    # keeping at least head_crop_min_frames of them; off by default
    p_head_crop: float = 0.0
    head_crop_min_frames: int = 5
    eval_batch_size: int = 32
    torch_threads: int = 1
    record_wall_time: bool = True  # False leaves the seconds column empty, making logs byte-reproducible
    master_seed: int = 0

    def __post_init__(self):
        for name in ("betas", "end_mask_range", "jitter_scale", "jitter_offset", "blur_sigma"):
            setattr(self, name, tuple(float(v) for v in getattr(self, name)))
        lo, hi = self.end_mask_range
        if not 0.0 < lo < hi < 1.0:
            raise ValueError("end_mask_range must satisfy 0 < low < high < 1")
        if self.head_crop_min_frames < 1:
            raise ValueError("head_crop_min_frames must be >= 1")
        for name in ("p_hflip", "p_vflip", "p_jitter", "p_blur", "p_end_mask", "p_head_crop"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        if self.batch_size < 1 or self.max_epochs < 1 or self.patience < 1:
            raise ValueError("batch_size, max_epochs and patience must be positive")

    @property
    def probs(self) -> dict[str, float]:
        return {"hflip": self.p_hflip, "vflip": self.p_vflip, "jitter": self.p_jitter,
                "blur": self.p_blur, "end_mask": self.p_end_mask, "head_crop": self.p_head_crop}


@dataclass
class TrainState:
    epoch: int = 0
    best_val_loss: float = math.inf
    best_epoch: int = -1
    best_params: dict | None = None
    epochs_without_improvement: int = 0
    rng_state: dict = field(default_factory=dict)


@dataclass
class TrainResult:
    model: FateModel
    log: list[dict]
    state: TrainState


def sampler_weights(labels: Sequence) -> np.ndarray:
    """Inverse class frequency per sample, so both classes carry equal draw mass."""
    labs = np.array([int(Label.parse(l)) for l in labels])
    counts = np.bincount(labs, minlength=2)
    if (counts == 0).any():
        raise ValueError("both classes must be present to balance sampling")
    return 1.0 / counts[labs]


def derive_seed(*parts) -> int:
    digest = hashlib.blake2b(":".join(str(p) for p in parts).encode(), digest_size=8).digest()
    return int.from_bytes(digest, "little") >> 1


def augment(traj: Trajectory, config: TrainConfig, rng: np.random.Generator) -> Trajectory:
    """Apply the stochastic training augmentations to one trajectory.

    Geometric and photometric transforms are drawn once per sequence and applied
    to every frame. End-masking zeroes a tail segment and marks it as padding.
    Head cropping then removes a leading segment of the visible frames, so the
    rest move to earlier positions; together they cut a random sub-window.
    """
    p = config.probs
    # a coin and a parameter are always drawn, keeping the stream layout fixed
    coins = rng.random(5)
    scale = rng.uniform(*config.jitter_scale, size=traj.frames.shape[1])
    shift = rng.uniform(*config.jitter_offset, size=traj.frames.shape[1])
    sigma = rng.uniform(*config.blur_sigma)
    frac = rng.uniform(*config.end_mask_range)
    crop_coin, crop_u = rng.random(2)

    frames = traj.frames
    masks = traj.masks
    if coins[0] < p["hflip"]:
        frames = frames[..., ::-1]
        masks = None if masks is None else masks[..., ::-1]
    if coins[1] < p["vflip"]:
        frames = frames[..., ::-1, :]
        masks = None if masks is None else masks[..., ::-1, :]
    if coins[2] < p["jitter"]:
        frames = np.clip(frames * scale[None, :, None, None] + shift[None, :, None, None], 0.0, 1.0)
    if coins[3] < p["blur"]:
        frames = gaussian_filter(frames, sigma=(0, 0, sigma, sigma), mode="constant")
    valid = traj.valid
    if coins[4] < p["end_mask"]:
        T = traj.length
        n_mask = min(max(int(round(frac * T)), math.ceil(config.end_mask_range[0] * T)),
                     math.floor(config.end_mask_range[1] * T))
        if n_mask > 0:
            valid = traj.valid_mask().copy()
            valid[T - n_mask:] = False
            frames = np.array(frames)
            frames[T - n_mask:] = 0.0
    n_visible = int(np.count_nonzero(valid)) if valid is not None else traj.length
    if crop_coin < p["head_crop"] and n_visible > config.head_crop_min_frames:
        cut = n_visible - (config.head_crop_min_frames + int(crop_u * (n_visible - config.head_crop_min_frames + 1)))
        if cut > 0:
            frames = frames[cut:]
            masks = None if masks is None else masks[cut:]
            valid = traj.valid_mask()[cut:] if valid is None else valid[cut:]
    if frames is traj.frames and valid is traj.valid:
        return traj
    return traj.replace(frames=np.ascontiguousarray(frames, dtype=np.float32),
                        masks=None if masks is None else np.ascontiguousarray(masks), valid=valid)


def collate(batch: Sequence[Trajectory], dtype=torch.float32):
    """End-pad a batch to its longest sequence -> (frames, pad_mask, labels)."""
    if not batch:
        raise ValueError("empty batch")
    frames, mask = batch_frames(list(batch), dtype)
    labels = torch.tensor([float(t.label) for t in batch], dtype=dtype)
    return frames, mask, labels


def batch_loss(model: FateModel, batch: Sequence[Trajectory]) -> torch.Tensor:
    dtype = next(model.parameters()).dtype
    frames, mask, labels = collate(batch, dtype)
    logits, _ = model(frames, mask)
    return F.binary_cross_entropy_with_logits(logits, labels)


@torch.no_grad()
def evaluate_loss(model: FateModel, trajs: Sequence[Trajectory], batch_size: int = 32):
    """Mean BCE and balanced accuracy over ``trajs`` (inference mode)."""
    from .evaluation import ConfusionMatrix, balanced_accuracy

    model.eval()
    total, n = 0.0, 0
    y_true, y_pred = [], []
    for i in range(0, len(trajs), batch_size):
        chunk = list(trajs[i:i + batch_size])
        dtype = next(model.parameters()).dtype
        frames, mask, labels = collate(chunk, dtype)
        logits, _ = model(frames, mask)
        total += float(F.binary_cross_entropy_with_logits(logits, labels, reduction="sum"))
        n += len(chunk)
        y_true.extend(int(v) for v in labels)
        y_pred.extend(int(v) for v in (torch.sigmoid(logits) >= model.decision_threshold))
    cm = ConfusionMatrix.from_labels(y_true, y_pred)
    try:
        bacc = balanced_accuracy(cm)
    except ValueError:
        bacc = float("nan")
    return total / max(n, 1), bacc


def build_model(encoder_config: EncoderConfig, temporal_config: TemporalConfig, seed: int) -> FateModel:
    torch.manual_seed(derive_seed(seed, "init"))
    return FateModel(encoder_config, temporal_config)


def train_loop(train: Sequence[Trajectory], val: Sequence[Trajectory], encoder_config: EncoderConfig,
               temporal_config: TemporalConfig, config: TrainConfig, log_path=None, log_header=(),
               progress: Callable[[dict], None] | None = None) -> TrainResult:
    """Train from scratch; return the parameters with the lowest validation loss."""
    torch.set_num_threads(max(1, config.torch_threads))
    torch.use_deterministic_algorithms(True)
    seed = config.master_seed
    model = build_model(encoder_config, temporal_config, seed)
    gen = torch.Generator().manual_seed(derive_seed(seed, "dropout"))
    model.set_generator(gen)
    opt = torch.optim.AdamW(model.parameters(), lr=config.learning_rate, betas=config.betas,
                            eps=config.eps, weight_decay=config.weight_decay)
    weights = sampler_weights([t.label for t in train])
    probs = weights / weights.sum()
    state = TrainState()
    rows: list[dict] = []
    writer = None
    fh = None
    if log_path is not None:
        fh = open(log_path, "w", newline="")
        for line in log_header:
            fh.write(f"# {line}\n")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(LOG_FIELDS)
    try:
        for epoch in range(1, config.max_epochs + 1):
            t0 = time.perf_counter()
            sampler = np.random.default_rng(derive_seed(seed, "sampler", epoch))
            order = sampler.choice(len(train), size=len(train), replace=True, p=probs)
            model.train()
            losses = []
            for b in range(0, len(order), config.batch_size):
                idx = order[b:b + config.batch_size]
                batch = [augment(train[i], config, np.random.default_rng(derive_seed(seed, "aug", epoch, b + j)))
                         for j, i in enumerate(idx)]
                loss = batch_loss(model, batch)
                if not torch.isfinite(loss):
                    raise TrainingDiverged(f"non-finite training loss at epoch {epoch}, step {b // config.batch_size}")
                opt.zero_grad(set_to_none=True)
                loss.backward()
                opt.step()
                losses.append(loss.item())
            val_loss, val_bacc = evaluate_loss(model, val, config.eval_batch_size)
            if not math.isfinite(val_loss):
                raise TrainingDiverged(f"non-finite validation loss at epoch {epoch}")
            row = {"epoch": epoch, "train_loss": float(np.mean(losses)), "val_loss": val_loss,
                   "val_bacc": val_bacc, "lr": config.learning_rate,
                   "seconds": time.perf_counter() - t0}
            rows.append(row)
            if writer is not None:
                secs = f"{row['seconds']:.2f}" if config.record_wall_time else ""
                writer.writerow([epoch, f"{row['train_loss']:.8f}", f"{val_loss:.8f}", f"{val_bacc:.6f}",
                                 f"{config.learning_rate:g}", secs])
                fh.flush()
            log.info("epoch %d train_loss %.4f val_loss %.4f val_bacc %.4f (%.1fs)",
                     epoch, row["train_loss"], val_loss, val_bacc, row["seconds"])
            if progress is not None:
                progress(row)
            state.epoch = epoch
            if val_loss < state.best_val_loss:
                state.best_val_loss = val_loss
                state.best_epoch = epoch
                state.best_params = copy.deepcopy(model.state_dict())
                state.epochs_without_improvement = 0
            else:
                state.epochs_without_improvement += 1
                if state.epochs_without_improvement >= config.patience:
                    log.info("early stop at epoch %d (best %d)", epoch, state.best_epoch)
                    break
    finally:
        if fh is not None:
            fh.close()
    state.rng_state = {"dropout": gen.get_state()}
    model.load_state_dict(state.best_params)
    model.set_generator(None)
    model.eval()
    return TrainResult(model=model, log=rows, state=state)
