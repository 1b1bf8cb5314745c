"""Named-tensor parameter blobs and the model manifest.

Blob layout (little-endian), one record per tensor until end of file::

    u16 name_length | UTF-8 name | u32 rank | u32 dims[rank] | float32 data
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict
from pathlib import Path

import numpy as np
import torch

from .encoder import EncoderConfig
from .temporal import FateModel, TemporalConfig


class CheckpointFormatError(ValueError):
    pass


def encode_tensors(tensors: dict[str, np.ndarray]) -> bytes:
    parts = []
    for name, arr in tensors.items():
        raw = name.encode("utf-8")
        arr = np.asarray(arr, dtype="<f4")
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        parts.append(arr.tobytes(order="C"))
    return b"".join(parts)


def decode_tensors(blob: bytes) -> dict[str, np.ndarray]:
    out: dict[str, np.ndarray] = {}
    pos = 0
    try:
        while pos < len(blob):
            (n,) = struct.unpack_from("<H", blob, pos)
            pos += 2
            if pos + n > len(blob):
                raise CheckpointFormatError("truncated tensor name")
            name = blob[pos:pos + n].decode("utf-8")
            pos += n
            (rank,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            dims = struct.unpack_from(f"<{rank}I", blob, pos)
            pos += 4 * rank
            count = int(np.prod(dims, dtype=np.int64))
            if pos + 4 * count > len(blob):
                raise CheckpointFormatError(f"truncated data for tensor {name!r}")
            out[name] = np.frombuffer(blob, dtype="<f4", count=count, offset=pos).reshape(dims).copy()
            pos += 4 * count
    except struct.error as exc:
        raise CheckpointFormatError(f"truncated checkpoint: {exc}") from exc
    return out


def save_checkpoint(model: torch.nn.Module, path) -> None:
    state = {k: v.detach().cpu().numpy() for k, v in model.state_dict().items()}
    Path(path).write_bytes(encode_tensors(state))


def load_state(path) -> dict[str, torch.Tensor]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    return {k: torch.from_numpy(v) for k, v in decode_tensors(path.read_bytes()).items()}


def model_manifest(model: FateModel, checkpoint_name: str, extra: dict | None = None) -> dict:
    doc = {
        "encoder": asdict(model.encoder_config),
        "temporal": asdict(model.temporal_config),
        "decision_threshold": model.decision_threshold,
        "checkpoint": checkpoint_name,
    }
    doc.update(extra or {})
    return doc


def save_model(model: FateModel, directory, extra: dict | None = None,
               checkpoint_name: str = "checkpoint.bin", manifest_name: str = "model.json") -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    save_checkpoint(model, directory / checkpoint_name)
    doc = model_manifest(model, checkpoint_name, extra)
    (directory / manifest_name).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return directory / manifest_name


def load_model(manifest_path) -> FateModel:
    manifest_path = Path(manifest_path)
    if not manifest_path.exists():
        raise FileNotFoundError(f"model manifest not found: {manifest_path}")
    doc = json.loads(manifest_path.read_text())
    model = FateModel(EncoderConfig(**doc["encoder"]), TemporalConfig(**doc["temporal"]),
                      decision_threshold=float(doc.get("decision_threshold", 0.5)))
    state = load_state(manifest_path.parent / doc["checkpoint"])
    model.load_state_dict(state)
    model.eval()
    return model
