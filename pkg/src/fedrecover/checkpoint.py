"""Checkpoint serialization: float32 payload plus a readable manifest.

Every parameter dict is written as one flat little-endian 32-bit float
array per named parameter, concatenated into a single payload, with a
text manifest listing ``name shape byte_offset`` per line. Loading casts
back up to float64, so a round trip quantizes values to float32
precision; a second round trip is then exact. All communication byte
counts in the federated runner come from these serialized sizes.
"""

from __future__ import annotations

import io
from pathlib import Path

import numpy as np

from .tensor import Tensor

MANIFEST_HEADER = "#checkpoint v1"


def _array_of(value) -> np.ndarray:
    return value.data if isinstance(value, Tensor) else np.asarray(value, dtype=np.float64)


def serialize_params(params: dict) -> tuple[bytes, str]:
    """Serialize a name->array/Tensor dict; returns (payload, manifest)."""
    buf = io.BytesIO()
    lines = [MANIFEST_HEADER]
    for name in sorted(params):
        arr = _array_of(params[name])
        shape = ",".join(str(n) for n in arr.shape) or "scalar"
        lines.append(f"{name} {shape} {buf.tell()}")
        buf.write(arr.astype("<f4").tobytes())
    return buf.getvalue(), "\n".join(lines) + "\n"


def deserialize_params(payload: bytes, manifest: str) -> dict[str, np.ndarray]:
    """Inverse of ``serialize_params``; values come back as float64."""
    lines = manifest.strip().split("\n")
    if not lines or lines[0] != MANIFEST_HEADER:
        raise ValueError("unrecognized checkpoint manifest header")
    out: dict[str, np.ndarray] = {}
    for ln in lines[1:]:
        try:
            name, shape_s, off_s = ln.split(" ")
            shape = () if shape_s == "scalar" else tuple(int(n) for n in shape_s.split(","))
            offset = int(off_s)
        except ValueError as exc:
            raise ValueError(f"malformed manifest line: {ln!r}") from exc
        count = int(np.prod(shape)) if shape else 1
        flat = np.frombuffer(payload, dtype="<f4", count=count, offset=offset)
        arr = flat.astype(np.float64).reshape(shape)
        out[name] = arr if shape else arr.reshape(())
    return out


def serialized_bytes(params: dict) -> int:
    """Bytes on the wire for one parameter dict: payload plus manifest."""
    payload, manifest = serialize_params(params)
    return len(payload) + len(manifest.encode("utf-8"))


def write_checkpoint(params: dict, path: str | Path) -> None:
    """Write ``<path>.bin`` and ``<path>.index`` next to each other."""
    path = Path(path)
    payload, manifest = serialize_params(params)
    path.with_suffix(".bin").write_bytes(payload)
    path.with_suffix(".index").write_text(manifest, encoding="utf-8")


def read_checkpoint(path: str | Path) -> dict[str, np.ndarray]:
    path = Path(path)
    payload = path.with_suffix(".bin").read_bytes()
    manifest = path.with_suffix(".index").read_text(encoding="utf-8")
    return deserialize_params(payload, manifest)


def params_hash(params: dict) -> str:
    """Order-independent sha256 over full-precision parameter bytes."""
    import hashlib

    h = hashlib.sha256()
    for name in sorted(params):
        arr = _array_of(params[name])
        h.update(name.encode("utf-8"))
        h.update(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return h.hexdigest()
