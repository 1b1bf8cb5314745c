"""Run configuration: one YAML file plus dotted-key overrides.

Layout::

    seed: 7
    split: {ratios: [0.8, 0.1, 0.1]}
    data: {...}        # SyntheticSpec fields
    encoder: {...}     # EncoderConfig fields
    temporal: {...}    # TemporalConfig fields
    train: {...}       # TrainConfig fields
    eval: {...}        # EvalConfig fields
    explain: {...}     # ExplainConfig fields

Overrides are ``section.key=value`` strings whose value is parsed as YAML,
e.g. ``train.learning_rate=3e-4`` or ``data.length_range=[20,60]``.
The top-level ``seed`` is the single master seed; it replaces the
``master_seed`` of the data and train sections.
"""

from __future__ import annotations

import hashlib
import json
import re
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import yaml

from .encoder import EncoderConfig
from .temporal import TemporalConfig
from .train import TrainConfig
from .trajgen import SyntheticSpec


class _Loader(yaml.SafeLoader):
    """Safe loader that also reads exponent floats without a dot (``1e-5``)."""


_Loader.add_implicit_resolver(
    "tag:yaml.org,2002:float",
    re.compile(r"""^[-+]?(?:[0-9][0-9_]*(?:\.[0-9_]*)?(?:[eE][-+]?[0-9]+)?|\.[0-9_]+(?:[eE][-+]?[0-9]+)?
                |[-+]?\.(?:inf|Inf|INF)|\.(?:nan|NaN|NAN))$""", re.X),
    list("-+0123456789."),
)


def _yaml(text: str):
    return yaml.load(text, Loader=_Loader)


@dataclass
class EvalConfig:
    batch_size: int = 32
    truncate_k: list[int] = field(default_factory=lambda: list(range(0, 51, 5)))
    keep_last_k: list[int] = field(default_factory=lambda: [1, 2, 3, 5, 10, 15, 20, 30, 40, 50, 60])


@dataclass
class ExplainConfig:
    quantile: float = 0.9
    quantile_method: str = "linear"
    permutations: int = 50_000
    bootstrap_resamples: int = 10_000
    ci_level: float = 0.95
    window: int = 50
    normalize_scope: str = "class"
    correct_only: bool = True
    central_radius: float = 8.0


@dataclass
class SplitConfig:
    ratios: tuple[float, float, float] = (0.8, 0.1, 0.1)

    def __post_init__(self):
        self.ratios = tuple(float(r) for r in self.ratios)


SECTIONS = {
    "split": SplitConfig,
    "data": SyntheticSpec,
    "encoder": EncoderConfig,
    "temporal": TemporalConfig,
    "train": TrainConfig,
    "eval": EvalConfig,
    "explain": ExplainConfig,
}


@dataclass
class RunConfig:
    seed: int = 0
    split: SplitConfig = field(default_factory=SplitConfig)
    data: SyntheticSpec = field(default_factory=SyntheticSpec)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    temporal: TemporalConfig = field(default_factory=TemporalConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    explain: ExplainConfig = field(default_factory=ExplainConfig)

    def to_dict(self) -> dict:
        return _plain(asdict(self))

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:12]

    def dump(self, path) -> None:
        Path(path).write_text(yaml.safe_dump(self.to_dict(), sort_keys=False))


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def apply_override(doc: dict, override: str) -> None:
    if "=" not in override:
        raise ValueError(f"override {override!r} is not of the form key=value")
    key, raw = override.split("=", 1)
    parts = key.strip().split(".")
    node = doc
    for p in parts[:-1]:
        node = node.setdefault(p, {})
        if not isinstance(node, dict):
            raise ValueError(f"override {override!r}: {p} is not a section")
    node[parts[-1]] = _yaml(raw)


def build_config(doc: dict | None = None, overrides=()) -> RunConfig:
    doc = dict(doc or {})
    for ov in overrides:
        apply_override(doc, ov)
    unknown = set(doc) - set(SECTIONS) - {"seed"}
    if unknown:
        raise ValueError(f"unknown config sections: {sorted(unknown)}")
    seed = int(doc.get("seed", 0))
    kwargs = {"seed": seed}
    for name, cls in SECTIONS.items():
        section = dict(doc.get(name) or {})
        valid = {f.name for f in fields(cls)}
        bad = set(section) - valid
        if bad:
            raise ValueError(f"unknown keys in [{name}]: {sorted(bad)}")
        if "master_seed" in valid:
            section["master_seed"] = seed
        kwargs[name] = cls(**section)
    return RunConfig(**kwargs)


def load_config(path=None, overrides=()) -> RunConfig:
    doc = {}
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"config not found: {path}")
        doc = _yaml(path.read_text()) or {}
    return build_config(doc, overrides)
