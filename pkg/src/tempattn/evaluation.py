"""Classification metrics and the truncate-tail / keep-last-k sweep protocols."""

from __future__ import annotations

import enum
import warnings
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Sequence

from .trajgen import Label, Trajectory


@dataclass(frozen=True)
class ConfusionMatrix:
    """Counts with apoptosis as the positive class."""

    tp: int
    fn: int
    fp: int
    tn: int

    def __post_init__(self):
        if min(self.tp, self.fn, self.fp, self.tn) < 0:
            raise ValueError("counts must be non-negative")

    @classmethod
    def from_labels(cls, y_true, y_pred) -> "ConfusionMatrix":
        tp = fn = fp = tn = 0
        for t, p in zip(y_true, y_pred, strict=True):
            t, p = int(t), int(p)
            if t == Label.APOPTOSIS:
                tp += p == Label.APOPTOSIS
                fn += p != Label.APOPTOSIS
            else:
                fp += p == Label.APOPTOSIS
                tn += p != Label.APOPTOSIS
        return cls(tp, fn, fp, tn)

    @property
    def total(self) -> int:
        return self.tp + self.fn + self.fp + self.tn

    def recall_apoptosis(self) -> float:
        if self.tp + self.fn == 0:
            raise ValueError("no apoptotic samples")
        return float(Fraction(self.tp, self.tp + self.fn))

    def recall_mitosis(self) -> float:
        if self.tn + self.fp == 0:
            raise ValueError("no mitotic samples")
        return float(Fraction(self.tn, self.tn + self.fp))

    def rows(self) -> list[tuple[str, str, int, float]]:
        """(true, predicted, count, fraction of the true-label row)."""
        out = []
        for true, (a, b) in (("apoptosis", (self.tp, self.fn)), ("mitosis", (self.fp, self.tn))):
            row_total = a + b
            for pred, n in (("apoptosis", a), ("mitosis", b)):
                out.append((true, pred, n, n / row_total if row_total else float("nan")))
        return out


def balanced_accuracy(cm: ConfusionMatrix) -> float:
    if cm.tp + cm.fn == 0 or cm.tn + cm.fp == 0:
        raise ValueError("balanced accuracy needs samples of both classes")
    return float((Fraction(cm.tp, cm.tp + cm.fn) + Fraction(cm.tn, cm.tn + cm.fp)) / 2)


def _f1(tp: int, fp: int, fn: int) -> Fraction:
    denom = 2 * tp + fp + fn
    return Fraction(2 * tp, denom) if tp else Fraction(0)


def f1_macro(cm: ConfusionMatrix) -> float:
    """Unweighted mean of the apoptosis and mitosis F1 scores (0 for a class never predicted)."""
    if cm.tp + cm.fn == 0 or cm.tn + cm.fp == 0:
        raise ValueError("macro F1 needs samples of both classes")
    return float((_f1(cm.tp, cm.fp, cm.fn) + _f1(cm.tn, cm.fn, cm.fp)) / 2)


# ---------------------------------------------------------------- protocols

class Protocol(str, enum.Enum):
    TRUNCATE_TAIL = "truncate_tail"
    KEEP_LAST = "keep_last"


EXCLUDED = None


def _slice(traj: Trajectory, start: int, stop: int) -> Trajectory:
    return traj.replace(
        frames=traj.frames[start:stop],
        masks=None if traj.masks is None else traj.masks[start:stop],
        valid=None if traj.valid is None else traj.valid[start:stop],
    )


def truncate_tail(traj: Trajectory, k: int) -> Trajectory | None:
    """Drop the last ``k`` frames; ``None`` (excluded) when nothing would remain."""
    if k < 0:
        raise ValueError("k must be >= 0")
    if k == 0:
        return traj
    if traj.length <= k:
        return EXCLUDED
    return _slice(traj, 0, traj.length - k)


def keep_last(traj: Trajectory, k: int) -> Trajectory:
    """Keep only the final ``min(k, T)`` frames."""
    if k < 1:
        raise ValueError("k must be >= 1")
    if k >= traj.length:
        return traj
    return _slice(traj, traj.length - k, traj.length)


def apply_protocol(protocol: Protocol, traj: Trajectory, k: int) -> Trajectory | None:
    protocol = Protocol(protocol)
    if protocol is Protocol.TRUNCATE_TAIL:
        return truncate_tail(traj, k)
    return keep_last(traj, k)


# ---------------------------------------------------------------- evaluation

@dataclass
class EvalResult:
    cm: ConfusionMatrix
    predictions: list = field(repr=False, default_factory=list)

    @property
    def metrics(self) -> dict[str, float]:
        return metric_dict(self.cm)


def _safe(fn, cm):
    try:
        return fn(cm)
    except ValueError:
        return float("nan")


def metric_dict(cm: ConfusionMatrix) -> dict[str, float]:
    return {
        "n": cm.total,
        "bacc": _safe(balanced_accuracy, cm),
        "f1_macro": _safe(f1_macro, cm),
        "recall_apoptosis": _safe(ConfusionMatrix.recall_apoptosis, cm),
        "recall_mitosis": _safe(ConfusionMatrix.recall_mitosis, cm),
    }


def evaluate(model, trajs: Sequence[Trajectory], batch_size: int = 32) -> EvalResult:
    from .temporal import predict

    preds = predict(model, list(trajs), batch_size=batch_size)
    cm = ConfusionMatrix.from_labels([t.label for t in trajs], [p.label for p in preds])
    return EvalResult(cm=cm, predictions=preds)


@dataclass
class SweepPoint:
    k: int
    n_sequences: int
    bacc: float
    f1_macro: float
    recall_apoptosis: float
    recall_mitosis: float


@dataclass
class SweepCurve:
    protocol: Protocol
    points: list[SweepPoint]

    def point(self, k: int) -> SweepPoint:
        for p in self.points:
            if p.k == k:
                return p
        raise KeyError(k)


def sweep(model, test: Sequence[Trajectory], protocol, k_values: Sequence[int], batch_size: int = 32) -> SweepCurve:
    """Evaluate ``model`` on the protocol-transformed test set for every ``k``."""
    protocol = Protocol(protocol)
    ks = sorted(set(int(k) for k in k_values))
    if not ks:
        raise ValueError("k_values must not be empty")
    points = []
    for k in ks:
        kept = [t for t in (apply_protocol(protocol, tr, k) for tr in test) if t is not None]
        if not kept:
            warnings.warn(f"{protocol.value} k={k} excludes every sequence; point dropped")
            continue
        m = evaluate(model, kept, batch_size).metrics
        points.append(SweepPoint(k, len(kept), m["bacc"], m["f1_macro"], m["recall_apoptosis"], m["recall_mitosis"]))
    return SweepCurve(protocol, points)
