"""Synthetic cell trajectories, the binary trajectory container and dataset splits.

Each synthetic trajectory is a single noisy ellipse ("the cell") rendered into a
fixed-size multi-channel patch per frame. Two fates are planted:

* mitosis: over the last ``late_window`` frames the cell grows and rounds up;
* apoptosis: the designated channel is elevated over a broad contiguous window
  (at least half the sequence) that stops ``broad_window_min_gap`` frames before
  the end, with a mild size increase and no rounding.

Mitosis trajectories may additionally carry a decoy window that looks exactly
like the apoptosis window, so that the late rounding is the only fully
reliable mitosis cue.
"""

from __future__ import annotations

import csv
import enum
import hashlib
import json
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

MIN_LENGTH = 11
MAGIC = b"TRJ1"
_HEADER = struct.Struct("<4I")


class TrajectoryFormatError(ValueError):
    """Raised when a trajectory container cannot be decoded."""


class Label(enum.IntEnum):
    MITOSIS = 0
    APOPTOSIS = 1

    @property
    def text(self) -> str:
        return self.name.lower()

    @classmethod
    def parse(cls, value) -> "Label":
        if isinstance(value, Label):
            return value
        if isinstance(value, str):
            try:
                return cls[value.strip().upper()]
            except KeyError:
                raise ValueError(f"unknown label {value!r}") from None
        return cls(int(value))


@dataclass
class Trajectory:
    frames: np.ndarray  # [T, C, H, W] float32 in [0, 1]
    label: Label
    traj_id: str
    source_id: str = ""
    masks: np.ndarray | None = None  # [T, H, W] uint8
    valid: np.ndarray | None = None  # [T] bool, False = padded (end-masked) slot
    generator_seed: int | None = None
    min_length: int = MIN_LENGTH

    @property
    def length(self) -> int:
        return int(self.frames.shape[0])

    @property
    def n_valid(self) -> int:
        return self.length if self.valid is None else int(self.valid.sum())

    def valid_mask(self) -> np.ndarray:
        if self.valid is None:
            return np.ones(self.length, dtype=bool)
        return self.valid.astype(bool)

    def validate(self, check_length: bool = True) -> None:
        f = self.frames
        if f.ndim != 4:
            raise ValueError(f"frames must be [T,C,H,W], got shape {f.shape}")
        if check_length and f.shape[0] < self.min_length:
            raise ValueError(f"{self.traj_id}: length {f.shape[0]} < min_length {self.min_length}")
        if not np.all(np.isfinite(f)) or f.min(initial=0.0) < 0.0 or f.max(initial=0.0) > 1.0:
            raise ValueError(f"{self.traj_id}: pixel values must be finite and in [0, 1]")
        if self.masks is not None:
            T, _, H, W = f.shape
            if self.masks.shape != (T, H, W):
                raise ValueError(f"{self.traj_id}: masks shape {self.masks.shape} != {(T, H, W)}")
        if self.valid is not None and self.valid.shape != (f.shape[0],):
            raise ValueError(f"{self.traj_id}: valid mask must have shape ({f.shape[0]},)")

    def replace(self, **changes) -> "Trajectory":
        kw = dict(
            frames=self.frames, label=self.label, traj_id=self.traj_id,
            source_id=self.source_id, masks=self.masks, valid=self.valid,
            generator_seed=self.generator_seed, min_length=self.min_length,
        )
        kw.update(changes)
        return Trajectory(**kw)


@dataclass
class SyntheticSpec:
    n_sequences: int = 2500
    class_fraction_apoptosis: float = 0.3
    length_range: tuple[int, int] = (20, 60)
    patch_size: tuple[int, int] = (32, 32)
    channels: int = 3
    designated_channel: int = 0
    # appearance shared by both classes
    base_major_axis: tuple[float, float] = (5.5, 7.0)  # semi-axis, px
    base_aspect: tuple[float, float] = (1.5, 1.9)
    baseline_intensity: tuple[float, float] = (0.40, 0.50)
    noise_std: float = 0.05
    # late-window (mitosis) signal
    late_window: int = 5
    mitosis_growth: float = 1.6  # area factor at the final frame
    circularization: float = 1.0  # share of the aspect excess removed by the final frame
    # broad-window (apoptosis) signal
    broad_window_fraction: tuple[float, float] = (0.5, 0.65)
    broad_window_min_gap: int = 10  # frames between window end and sequence end
    intensity_gain: float = 0.25
    apoptosis_growth: float = 1.15
    # decoy designated-channel windows on mitosis trajectories
    mitosis_decoy_prob: float = 0.35
    decoy_gain: float = 0.25
    decoy_growth: float = 1.15
    master_seed: int = 0

    def __post_init__(self):
        self.length_range = tuple(int(v) for v in self.length_range)
        self.patch_size = tuple(int(v) for v in self.patch_size)
        for name in ("base_major_axis", "base_aspect", "baseline_intensity", "broad_window_fraction"):
            setattr(self, name, tuple(float(v) for v in getattr(self, name)))
        self.validate()

    def validate(self) -> None:
        t_min, t_max = self.length_range
        if self.n_sequences < 0:
            raise ValueError("n_sequences must be >= 0")
        if not 0.0 < self.class_fraction_apoptosis < 1.0:
            raise ValueError("class_fraction_apoptosis must lie in (0, 1)")
        if t_min <= 10 or t_max < t_min:
            raise ValueError(f"length_range {self.length_range}: need 10 < T_min <= T_max")
        if not 1 <= self.late_window < t_min:
            raise ValueError("late_window must satisfy 1 <= w < T_min")
        if self.noise_std < 0:
            raise ValueError("noise_std must be >= 0")
        if not 0 <= self.designated_channel < self.channels:
            raise ValueError("designated_channel out of range")
        lo, hi = self.broad_window_fraction
        if not 0.5 <= lo <= hi <= 1.0:
            raise ValueError("broad_window_fraction must satisfy 0.5 <= low <= high <= 1")
        if self.broad_window_min_gap < 0 or math.ceil(t_min / 2) > t_min - self.broad_window_min_gap:
            raise ValueError("broad_window_min_gap leaves no room for a half-length window at T_min")
        if not 0.0 <= self.mitosis_decoy_prob <= 1.0:
            raise ValueError("mitosis_decoy_prob must lie in [0, 1]")
        if min(self.base_major_axis) <= 0 or min(self.base_aspect) < 1.0:
            raise ValueError("axes must be positive and aspect >= 1")


def trajectory_seed(master_seed: int, index: int) -> int:
    """Per-trajectory seed, a hash of (master_seed, index)."""
    digest = hashlib.blake2b(f"{master_seed}:{index}".encode(), digest_size=8).digest()
    return int.from_bytes(digest, "little") >> 1


def render_cell(center, axes, orientation, per_channel_intensity, patch_size, noise_std, rng):
    """Render one filled ellipse. Returns (frame [C,H,W] float32, mask [H,W] uint8).

    ``center`` is (row, col) in pixel coordinates, ``axes`` the (major, minor)
    semi-axes and ``orientation`` the angle of the major axis from the column
    axis. Parts outside the patch are clipped.
    """
    a, b = float(axes[0]), float(axes[1])
    if a <= 0 or b <= 0:
        raise ValueError("axes must be positive")
    intensity = np.asarray(per_channel_intensity, dtype=np.float64)
    if intensity.min(initial=0.0) < 0 or intensity.max(initial=0.0) > 1:
        raise ValueError("intensities must lie in [0, 1]")
    H, W = patch_size
    rows, cols = np.mgrid[0:H, 0:W]
    dy = rows - center[0]
    dx = cols - center[1]
    c, s = math.cos(orientation), math.sin(orientation)
    u = dx * c + dy * s
    v = -dx * s + dy * c
    mask = (u / a) ** 2 + (v / b) ** 2 <= 1.0
    frame = intensity[:, None, None] * mask[None]
    if noise_std > 0:
        frame = frame + rng.normal(0.0, noise_std, size=frame.shape)
    frame = np.clip(frame, 0.0, 1.0).astype(np.float32)
    return frame, mask.astype(np.uint8)


def _broad_window(spec: SyntheticSpec, T: int, rng) -> tuple[int, int]:
    frac = rng.uniform(*spec.broad_window_fraction)
    longest = T - spec.broad_window_min_gap
    L = min(max(math.ceil(frac * T), math.ceil(T / 2)), longest)
    end = int(rng.integers(L, longest + 1))
    return end - L, end


def generate_trajectory(spec: SyntheticSpec, label, rng, traj_id: str = "traj", source_id: str = "synthetic",
                        generator_seed: int | None = None) -> Trajectory:
    label = Label.parse(label)
    # every random draw happens regardless of class, so a null-signal spec
    # yields identical frames for both labels under the same seed
    T = int(rng.integers(spec.length_range[0], spec.length_range[1] + 1))
    H, W = spec.patch_size
    major0 = rng.uniform(*spec.base_major_axis)
    aspect0 = rng.uniform(*spec.base_aspect)
    area0 = major0 * (major0 / aspect0)
    theta = rng.uniform(0.0, math.pi)
    base = rng.uniform(*spec.baseline_intensity, size=spec.channels)
    start, end = _broad_window(spec, T, rng)
    decoy = rng.random() < spec.mitosis_decoy_prob
    steps = rng.normal(0.0, 0.3, size=(T, 2))
    drift = rng.normal(0.0, 0.05, size=T)
    size_jitter = rng.normal(1.0, 0.03, size=T)
    flicker = rng.normal(0.0, 0.01, size=(T, spec.channels))

    w = spec.late_window
    centre = np.array([H // 2, W // 2], dtype=np.float64)
    offset = np.zeros(2)
    frames = np.empty((T, spec.channels, H, W), dtype=np.float32)
    masks = np.empty((T, H, W), dtype=np.uint8)
    dc = spec.designated_channel
    for t in range(T):
        offset = np.clip(offset + steps[t], -1.5, 1.5)
        theta += drift[t]
        area = area0 * size_jitter[t]
        aspect = aspect0
        intensity = base + flicker[t]
        in_window = start <= t < end
        if label is Label.MITOSIS:
            late = t - (T - w)
            if late >= 0:
                p = (late + 1) / w
                area *= 1.0 + (spec.mitosis_growth - 1.0) * p
                aspect = aspect0 + (1.0 - aspect0) * spec.circularization * p
            if decoy and in_window:
                intensity[dc] += spec.decoy_gain
                area *= spec.decoy_growth
        elif in_window:
            intensity[dc] += spec.intensity_gain
            area *= spec.apoptosis_growth
        minor = math.sqrt(area / aspect)
        frames[t], masks[t] = render_cell(
            centre + offset, (aspect * minor, minor), theta, np.clip(intensity, 0.0, 1.0),
            (H, W), spec.noise_std, rng,
        )
    traj = Trajectory(frames=frames, label=label, traj_id=traj_id, source_id=source_id,
                      masks=masks, generator_seed=generator_seed)
    traj.validate()
    return traj


def dataset_labels(spec: SyntheticSpec) -> list[Label]:
    n_apo = round(spec.n_sequences * spec.class_fraction_apoptosis)
    labels = np.array([1] * n_apo + [0] * (spec.n_sequences - n_apo))
    rng = np.random.default_rng(trajectory_seed(spec.master_seed, -1))
    return [Label(int(v)) for v in rng.permutation(labels)]


def generate_one(spec: SyntheticSpec, index: int, label) -> Trajectory:
    seed = trajectory_seed(spec.master_seed, index)
    return generate_trajectory(spec, label, np.random.default_rng(seed), traj_id=f"traj{index:05d}",
                               source_id=f"synthetic-{spec.master_seed}", generator_seed=seed)


def _generate_star(args):
    return generate_one(*args)


def generate_dataset(spec: SyntheticSpec, threads: int = 1) -> list[Trajectory]:
    """Generate ``spec.n_sequences`` trajectories; the result does not depend on ``threads``."""
    jobs = [(spec, i, lab) for i, lab in enumerate(dataset_labels(spec))]
    if threads <= 1 or len(jobs) < 2:
        return [_generate_star(j) for j in jobs]
    from concurrent.futures import ProcessPoolExecutor

    with ProcessPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(_generate_star, jobs, chunksize=16))


# ---------------------------------------------------------------- splits

@dataclass
class DatasetSplit:
    train: list[str]
    val: list[str]
    test: list[str]
    ratios: tuple[float, float, float] = (0.8, 0.1, 0.1)
    seed: int = 0

    def assignment(self) -> dict[str, str]:
        out = {}
        for name in ("train", "val", "test"):
            for tid in getattr(self, name):
                out[tid] = name
        return out

    def max_fraction_deviation(self, labels: dict[str, Label]) -> float:
        """Largest gap (as a fraction) between a split's apoptosis share and the global share."""
        values = list(labels.values())
        glob = sum(v is Label.APOPTOSIS for v in values) / len(values)
        worst = 0.0
        for ids in (self.train, self.val, self.test):
            if ids:
                frac = sum(labels[t] is Label.APOPTOSIS for t in ids) / len(ids)
                worst = max(worst, abs(frac - glob))
        return worst


def _apportion(n: int, ratios: Sequence[float]) -> list[int]:
    raw = [n * r for r in ratios]
    counts = [math.floor(x) for x in raw]
    order = sorted(range(len(raw)), key=lambda i: (-(raw[i] - counts[i]), i))
    for i in order[: n - sum(counts)]:
        counts[i] += 1
    return counts


def split_dataset(labels: Iterable[tuple[str, Label]], ratios=(0.8, 0.1, 0.1), seed: int = 0,
                  min_per_class: int = 10) -> DatasetSplit:
    """Stratified train/val/test split, deterministic given ``seed``."""
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or abs(sum(ratios) - 1.0) > 1e-9 or min(ratios) < 0:
        raise ValueError(f"ratios must be three non-negative numbers summing to 1, got {ratios}")
    by_class: dict[Label, list[str]] = {Label.MITOSIS: [], Label.APOPTOSIS: []}
    for tid, lab in labels:
        by_class[Label.parse(lab)].append(tid)
    for lab, ids in by_class.items():
        if len(ids) < min_per_class:
            raise ValueError(f"cannot stratify: {len(ids)} {lab.text} sequences (< {min_per_class})")
    # split sizes first, then the apoptotic count of each split in proportion to
    # its size, so every split's class share is within one sequence of the global one
    n_total = sum(len(v) for v in by_class.values())
    sizes = _apportion(n_total, ratios)
    n_apo = _apportion(len(by_class[Label.APOPTOSIS]), [s / n_total for s in sizes])
    counts = {Label.APOPTOSIS: n_apo, Label.MITOSIS: [s - a for s, a in zip(sizes, n_apo)]}
    rng = np.random.default_rng(seed)
    parts: list[list[str]] = [[], [], []]
    for lab in (Label.MITOSIS, Label.APOPTOSIS):
        ids = sorted(by_class[lab])
        ids = [ids[i] for i in rng.permutation(len(ids))]
        pos = 0
        for k, n in enumerate(counts[lab]):
            parts[k].extend(ids[pos:pos + n])
            pos += n
    return DatasetSplit(*(sorted(p) for p in parts), ratios=ratios, seed=seed)


# ---------------------------------------------------------------- container I/O

def sidecar_path(path) -> Path:
    return Path(path).with_suffix(".json")


def save_trajectory(traj: Trajectory, path) -> None:
    path = Path(path)
    T, C, H, W = traj.frames.shape
    parts = [MAGIC, _HEADER.pack(T, C, H, W), np.ascontiguousarray(traj.frames, dtype="<f4").tobytes()]
    if traj.masks is None:
        parts.append(b"\x00")
    else:
        parts.append(b"\x01")
        parts.append(np.ascontiguousarray(traj.masks, dtype=np.uint8).tobytes())
    path.write_bytes(b"".join(parts))
    meta = {
        "traj_id": traj.traj_id,
        "source_id": traj.source_id,
        "label": traj.label.text,
        "min_length": traj.min_length,
        "generator_seed": traj.generator_seed,
        "shape": [T, C, H, W],
    }
    sidecar_path(path).write_text(json.dumps(meta, indent=1) + "\n")


def load_trajectory(path) -> Trajectory:
    path = Path(path)
    blob = path.read_bytes()
    if blob[:4] != MAGIC:
        raise TrajectoryFormatError(f"{path}: bad magic {blob[:4]!r}")
    if len(blob) < 4 + _HEADER.size:
        raise TrajectoryFormatError(f"{path}: truncated header")
    T, C, H, W = _HEADER.unpack_from(blob, 4)
    if min(T, C, H, W) == 0:
        raise TrajectoryFormatError(f"{path}: zero dimension in header {(T, C, H, W)}")
    pos = 4 + _HEADER.size
    n_px = T * C * H * W
    if len(blob) < pos + 4 * n_px + 1:
        raise TrajectoryFormatError(f"{path}: truncated payload")
    frames = np.frombuffer(blob, dtype="<f4", count=n_px, offset=pos).reshape(T, C, H, W).astype(np.float32)
    pos += 4 * n_px
    flag = blob[pos]
    pos += 1
    masks = None
    if flag == 1:
        n_mask = T * H * W
        if len(blob) != pos + n_mask:
            raise TrajectoryFormatError(f"{path}: mask payload has {len(blob) - pos} bytes, expected {n_mask}")
        masks = np.frombuffer(blob, dtype=np.uint8, count=n_mask, offset=pos).reshape(T, H, W).copy()
    elif flag == 0:
        if len(blob) != pos:
            raise TrajectoryFormatError(f"{path}: {len(blob) - pos} trailing bytes")
    else:
        raise TrajectoryFormatError(f"{path}: invalid has_mask flag {flag}")
    try:
        meta = json.loads(sidecar_path(path).read_text())
        label = Label.parse(meta["label"])
    except (OSError, KeyError, ValueError) as exc:
        raise TrajectoryFormatError(f"{path}: unreadable sidecar ({exc})") from exc
    if "shape" in meta and tuple(meta["shape"]) != (T, C, H, W):
        raise TrajectoryFormatError(f"{path}: header dimensions {(T, C, H, W)} do not match "
                                    f"sidecar {tuple(meta['shape'])}")
    traj = Trajectory(frames=frames, label=label, traj_id=meta.get("traj_id", path.stem),
                      source_id=meta.get("source_id", ""), masks=masks,
                      generator_seed=meta.get("generator_seed"),
                      min_length=int(meta.get("min_length", MIN_LENGTH)))
    try:
        traj.validate(check_length=False)
    except ValueError as exc:
        raise TrajectoryFormatError(f"{path}: {exc}") from exc
    return traj


# ---------------------------------------------------------------- manifest

MANIFEST_FIELDS = ("traj_id", "path", "label", "split")


@dataclass
class ManifestRow:
    traj_id: str
    path: str
    label: Label
    split: str


def write_manifest(path, rows: Iterable[ManifestRow], header_lines: Sequence[str] = ()) -> None:
    path = Path(path)
    with path.open("w", newline="") as fh:
        for line in header_lines:
            fh.write(f"# {line}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(MANIFEST_FIELDS)
        for r in rows:
            w.writerow([r.traj_id, r.path, r.label.text, r.split])


def read_manifest(path) -> list[ManifestRow]:
    path = Path(path)
    with path.open(newline="") as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    reader = csv.DictReader(lines)
    if tuple(reader.fieldnames or ()) != MANIFEST_FIELDS:
        raise ValueError(f"{path}: manifest header must be {','.join(MANIFEST_FIELDS)}")
    return [ManifestRow(r["traj_id"], r["path"], Label.parse(r["label"]), r["split"]) for r in reader]


def load_split(manifest_path, split: str) -> list[Trajectory]:
    manifest_path = Path(manifest_path)
    rows = [r for r in read_manifest(manifest_path) if r.split == split]
    return [load_trajectory(manifest_path.parent / r.path) for r in rows]
