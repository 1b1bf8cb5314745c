"""Attention-based explainability: frame partitions, aggregated attention
profiles and high- vs low-attention feature statistics."""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .temporal import AttentionProfile
from .trajgen import Label

CATEGORY_THRESHOLDS = ((0.147, "negligible"), (0.33, "small"), (0.474, "medium"))


def task_seed(*parts) -> int:
    """Deterministic seed for one (sequence, feature) task, independent of execution order."""
    digest = hashlib.blake2b(":".join(str(p) for p in parts).encode(), digest_size=8).digest()
    return int.from_bytes(digest, "little") >> 1


# ---------------------------------------------------------------- partitions

@dataclass
class AttentionPartition:
    tau: float
    high_indices: np.ndarray
    low_indices: np.ndarray

    @property
    def degenerate(self) -> bool:
        return self.low_indices.size == 0


def partition_frames(weights, quantile: float = 0.9, method: str = "linear") -> AttentionPartition:
    """Split frames at the ``quantile`` of their attention weights; ties go to the high set."""
    if isinstance(weights, AttentionProfile):
        weights = weights.real()
    w = np.asarray(weights, dtype=np.float64)
    if w.size < 2:
        raise ValueError("need at least two frames to partition")
    tau = float(np.quantile(w, quantile, method=method))
    tau = min(tau, float(w.max()))  # guard against interpolation round-off above the max
    high = np.flatnonzero(w >= tau)
    low = np.flatnonzero(w < tau)
    return AttentionPartition(tau=tau, high_indices=high, low_indices=low)


# ---------------------------------------------------------------- aggregation

@dataclass
class AggregatedAttention:
    label: Label
    mean_weight: np.ndarray  # [W] indexed by offset from the final frame
    normalized: np.ndarray
    n_contributing: np.ndarray


def _minmax(v: np.ndarray) -> np.ndarray:
    ok = np.isfinite(v)
    lo, hi = v[ok].min(), v[ok].max()
    if hi == lo:
        return np.where(ok, 1.0, np.nan)
    return (v - lo) / (hi - lo)


def aggregate_attention(profiles: Iterable[tuple[Label, np.ndarray]], window: int = 50,
                        scope: str = "class") -> dict[Label, AggregatedAttention]:
    """Align profiles to their final frame and average per offset, per class.

    Offsets beyond every contributing sequence's length are dropped. With
    ``scope="class"`` each class curve is min-max scaled on its own; with
    ``scope="global"`` the min and max are pooled over both classes.
    """
    sums: dict[Label, np.ndarray] = {}
    counts: dict[Label, np.ndarray] = {}
    for label, w in profiles:
        label = Label.parse(label)
        w = np.asarray(w, dtype=np.float64)
        if w.size == 0:
            continue
        s = sums.setdefault(label, np.zeros(window))
        c = counts.setdefault(label, np.zeros(window, dtype=np.int64))
        tail = w[::-1][:window]
        s[: tail.size] += tail
        c[: tail.size] += 1
    if not sums:
        raise ValueError("need at least one non-empty profile")
    means = {}
    for label in sums:
        n_off = int(np.max(np.flatnonzero(counts[label]))) + 1
        means[label] = sums[label][:n_off] / counts[label][:n_off]
    if scope == "global":
        allv = np.concatenate(list(means.values()))
        lo, hi = allv.min(), allv.max()
        norm = {k: (v - lo) / (hi - lo) if hi > lo else np.ones_like(v) for k, v in means.items()}
    elif scope == "class":
        norm = {k: _minmax(v) for k, v in means.items()}
    else:
        raise ValueError(f"unknown scope {scope!r}")
    return {k: AggregatedAttention(k, means[k], norm[k], counts[k][: means[k].size]) for k in sorted(means)}


# ---------------------------------------------------------------- statistics

def permutation_test(x, y, iterations: int = 50_000, rng=None, chunk: int = 4096) -> float:
    """Two-sided permutation test on |mean(x) - mean(y)| with add-one correction."""
    x = np.asarray(x, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    if x.size == 0 or y.size == 0:
        raise ValueError("both samples must be non-empty")
    rng = np.random.default_rng(rng)
    pooled = np.concatenate([x, y])
    nx, ny = x.size, y.size
    total = pooled.sum()
    observed = abs(x.mean() - y.mean())
    # relative slack so permutations that tie the observed split are counted despite round-off
    tol = 1e-12 * max(1.0, float(np.abs(pooled).max()))
    hits = 0
    done = 0
    while done < iterations:
        m = min(chunk, iterations - done)
        perm = rng.permuted(np.broadcast_to(pooled, (m, pooled.size)), axis=1)
        sx = perm[:, :nx].sum(axis=1)
        stat = np.abs(sx / nx - (total - sx) / ny)
        hits += int(np.count_nonzero(stat >= observed - tol))
        done += m
    return (1 + hits) / (1 + iterations)


def cliffs_delta(x, y) -> float:
    """(#{x_i > y_j} - #{x_i < y_j}) / (|x| |y|), counted exactly via sorting."""
    x = np.asarray(x, dtype=np.float64).ravel()
    y = np.sort(np.asarray(y, dtype=np.float64).ravel())
    if x.size == 0 or y.size == 0:
        raise ValueError("both samples must be non-empty")
    less = np.searchsorted(y, x, side="left")  # y_j < x_i
    greater = y.size - np.searchsorted(y, x, side="right")  # y_j > x_i
    return int(less.sum() - greater.sum()) / (x.size * y.size)


def median_ci(values, level: float = 0.95, resamples: int = 10_000, rng=None) -> tuple[float, float, float]:
    """Sample median with a percentile-bootstrap confidence interval."""
    v = np.asarray(values, dtype=np.float64).ravel()
    if v.size == 0:
        raise ValueError("need at least one value")
    med = float(np.median(v))
    if v.size == 1 or np.all(v == v[0]):
        return med, med, med
    rng = np.random.default_rng(rng)
    meds = np.empty(resamples)
    step = max(1, 2_000_000 // v.size)
    for i in range(0, resamples, step):
        idx = rng.integers(0, v.size, size=(min(step, resamples - i), v.size))
        meds[i:i + idx.shape[0]] = np.median(v[idx], axis=1)
    alpha = (1.0 - level) / 2.0
    lo, hi = np.quantile(meds, [alpha, 1.0 - alpha])
    # the percentile interval can miss the sample median on tiny, lumpy samples
    return med, float(min(lo, med)), float(max(hi, med))


def effect_category(delta: float) -> str:
    a = abs(delta)
    for bound, name in CATEGORY_THRESHOLDS:
        if a < bound:
            return name
    return "large"


# ---------------------------------------------------------------- report

@dataclass
class SequenceEffect:
    traj_id: str
    label: Label
    feature: str
    n_high: int
    n_low: int
    p_value: float
    cliffs_delta: float


@dataclass
class FeatureSummary:
    feature: str
    label: Label
    median_delta: float
    ci_low: float
    ci_high: float
    category: str
    n_sequences: int


@dataclass
class EffectSizeReport:
    rows: list[SequenceEffect]
    summary: list[FeatureSummary]
    metadata: dict = field(default_factory=dict)

    def lookup(self, feature: str, label) -> FeatureSummary:
        label = Label.parse(label)
        for s in self.summary:
            if s.feature == feature and s.label is label:
                return s
        raise KeyError((feature, label))


def effect_report(partitions: Mapping[str, AttentionPartition], labels: Mapping[str, Label],
                  features: Mapping[tuple[str, int], Mapping[str, float]], feature_names: Sequence[str],
                  permutations: int = 50_000, resamples: int = 10_000, level: float = 0.95,
                  seed: int = 0, frame_indices: Mapping[str, np.ndarray] | None = None,
                  metadata: dict | None = None) -> EffectSizeReport:
    """High- vs low-attention feature differences per sequence, summarised per feature and class.

    ``partitions`` holds indices into each sequence's real frames; ``frame_indices``
    optionally maps those to frame numbers in the feature table (identity otherwise).
    Frames without a feature row, or with a non-finite value, are skipped.
    """
    rows: list[SequenceEffect] = []
    degenerate = 0
    excluded: dict[str, int] = {f: 0 for f in feature_names}
    for tid in sorted(partitions):
        part = partitions[tid]
        if part.degenerate:
            degenerate += 1
            continue
        frames_of = (lambda idx: idx) if frame_indices is None else (lambda idx, m=frame_indices[tid]: m[idx])
        hi_frames = frames_of(part.high_indices)
        lo_frames = frames_of(part.low_indices)
        for feat in feature_names:
            hv = _values(features, tid, hi_frames, feat)
            lv = _values(features, tid, lo_frames, feat)
            if hv.size == 0 or lv.size == 0:
                excluded[feat] += 1
                continue
            p = permutation_test(hv, lv, permutations, rng=task_seed(seed, tid, feat))
            rows.append(SequenceEffect(tid, Label.parse(labels[tid]), feat, hv.size, lv.size, p,
                                       cliffs_delta(hv, lv)))
    summary = []
    for feat in feature_names:
        for label in (Label.MITOSIS, Label.APOPTOSIS):
            deltas = [r.cliffs_delta for r in rows if r.feature == feat and r.label is label]
            if not deltas:
                continue
            med, lo, hi = median_ci(deltas, level, resamples, rng=task_seed(seed, "ci", feat, label.text))
            summary.append(FeatureSummary(feat, label, med, lo, hi, effect_category(med), len(deltas)))
    meta = {"n_sequences": len(partitions), "degenerate_sequences": degenerate,
            "excluded_per_feature": excluded, "permutations": permutations,
            "bootstrap_resamples": resamples, "ci_level": level, "seed": seed}
    meta.update(metadata or {})
    return EffectSizeReport(rows, summary, meta)


def _values(features, tid, frames, feat) -> np.ndarray:
    out = []
    for f in frames:
        row = features.get((tid, int(f)))
        if row is None:
            continue
        v = row[feat]
        if math.isfinite(v):
            out.append(v)
    return np.asarray(out, dtype=np.float64)
