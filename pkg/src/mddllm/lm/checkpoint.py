"""Versioned binary checkpoints for base models and adapters.

Layout::

    magic      8 bytes   b"MDDLLMCK"
    version    uint32 LE
    header_len uint32 LE
    header     UTF-8 JSON: {"kind", "config", "tensors": [{"name", "dtype",
               "shape", "offset", "nbytes", "quant"?}], "meta"}
    data       raw little-endian tensor bytes, offsets relative to data start
    checksum   32-byte SHA-256 of everything above

A 4-bit tensor is stored as two entries, ``<name>#packed`` (uint8) and
``<name>#scales`` (float32), both tagged with the original shape.
Adapters are written to their own file with ``kind = "adapter"``.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np
import torch

from .lora import LoraAdapter, LoraConfig
from .model import ModelConfig, ModelParams
from .quant import QuantizedTensor

MAGIC = b"MDDLLMCK"
VERSION = 1
_DTYPES = {"float32": np.dtype("<f4"), "float64": np.dtype("<f8"), "uint8": np.dtype("u1")}
_TORCH = {"float32": torch.float32, "float64": torch.float64}


class CheckpointError(ValueError):
    pass


def _dtype_tag(arr: np.ndarray) -> str:
    for tag, dt in _DTYPES.items():
        if arr.dtype == dt or arr.dtype == dt.newbyteorder("="):
            return tag
    raise CheckpointError(f"unsupported dtype {arr.dtype}")


def _pack(kind: str, config: dict, arrays: list[tuple[str, np.ndarray, dict]], meta: dict) -> bytes:
    table, chunks, offset = [], [], 0
    for name, arr, extra in arrays:
        tag = _dtype_tag(arr)
        raw = np.ascontiguousarray(arr, dtype=_DTYPES[tag]).tobytes()
        table.append({"name": name, "dtype": tag, "shape": list(arr.shape), "offset": offset,
                      "nbytes": len(raw), **extra})
        chunks.append(raw)
        offset += len(raw)
    header = json.dumps({"kind": kind, "config": config, "tensors": table, "meta": meta},
                        sort_keys=True, separators=(",", ":")).encode()
    body = MAGIC + struct.pack("<II", VERSION, len(header)) + header + b"".join(chunks)
    return body + hashlib.sha256(body).digest()


def _unpack(blob: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    if len(blob) < len(MAGIC) + 8 + 32 or blob[: len(MAGIC)] != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    body, digest = blob[:-32], blob[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError("checksum mismatch: file is corrupt or truncated")
    version, hlen = struct.unpack_from("<II", body, len(MAGIC))
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    start = len(MAGIC) + 8
    header = json.loads(body[start:start + hlen])
    data = body[start + hlen:]
    arrays = {}
    for t in header["tensors"]:
        raw = data[t["offset"]:t["offset"] + t["nbytes"]]
        arrays[t["name"]] = np.frombuffer(raw, dtype=_DTYPES[t["dtype"]]).reshape(t["shape"]).copy()
    return header, arrays


def _atomic_write(path: Path, blob: bytes) -> str:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(blob)
    tmp.replace(path)
    return hashlib.sha256(blob).hexdigest()


def _tensor_array(t: torch.Tensor) -> np.ndarray:
    return t.detach().cpu().numpy()


def save_base(params: ModelParams, path: str | Path, meta: dict | None = None) -> str:
    """Write a base model; returns the file's SHA-256."""
    arrays = []
    for name in sorted(params.tensors):
        t = params.tensors[name]
        if isinstance(t, QuantizedTensor):
            q = {"quant": {"of": name, "shape": list(t.shape)}}
            arrays.append((f"{name}#packed", t.packed, q))
            arrays.append((f"{name}#scales", t.scales, q))
        else:
            arrays.append((name, _tensor_array(t), {}))
    config = {k: getattr(params.config, k) for k in params.config.__dataclass_fields__}
    return _atomic_write(Path(path), _pack("base", config, arrays, meta or {}))


def load_base(path: str | Path) -> ModelParams:
    header, arrays = _unpack(Path(path).read_bytes())
    if header["kind"] != "base":
        raise CheckpointError(f"expected a base checkpoint, found {header['kind']!r}")
    tensors: dict = {}
    for entry in header["tensors"]:
        name = entry["name"]
        if "quant" in entry:
            orig = entry["quant"]["of"]
            if orig not in tensors:
                tensors[orig] = QuantizedTensor(arrays[f"{orig}#packed"], arrays[f"{orig}#scales"],
                                                tuple(entry["quant"]["shape"]))
        else:
            tensors[name] = torch.from_numpy(arrays[name])
    return ModelParams(ModelConfig(**header["config"]), tensors)


def save_adapter(adapter: LoraAdapter, path: str | Path, meta: dict | None = None) -> str:
    arrays = [(k, _tensor_array(adapter.tensors[k]), {}) for k in sorted(adapter.tensors)]
    cfg = {"r": adapter.config.r, "alpha": adapter.config.alpha, "targets": list(adapter.config.targets),
           "init_std": adapter.config.init_std}
    return _atomic_write(Path(path), _pack("adapter", cfg, arrays, meta or {}))


def load_adapter(path: str | Path) -> LoraAdapter:
    header, arrays = _unpack(Path(path).read_bytes())
    if header["kind"] != "adapter":
        raise CheckpointError(f"expected an adapter checkpoint, found {header['kind']!r}")
    cfg = dict(header["config"])
    cfg["targets"] = tuple(cfg["targets"])
    return LoraAdapter(LoraConfig(**cfg), {k: torch.from_numpy(v) for k, v in arrays.items()})


def read_meta(path: str | Path) -> dict:
    header, _ = _unpack(Path(path).read_bytes())
    return header["meta"]


def file_hash(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
