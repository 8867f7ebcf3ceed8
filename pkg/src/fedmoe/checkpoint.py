"""Portable checkpoint container.

Layout (all integers little-endian)::

    b"DFCK"                      magic
    u32                          format version
    u32 + bytes                  config, canonical UTF-8 JSON
    u32 + bytes                  manifest, canonical UTF-8 JSON list of [name, shape]
    float64[...]                 weights, manifest order, row-major

The serialized length is the model size charged to the communication ledger.
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
from pathlib import Path

import numpy as np

from .models import DenseLm, LmConfig, MoeConfig, MoeLm, param_shapes
from .tensor import Tensor

MAGIC = b"DFCK"
VERSION = 1


class CheckpointError(ValueError):
    pass


def canonical_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False).encode("utf-8")


def _config_payload(model) -> dict:
    if isinstance(model, MoeLm):
        return {"kind": "moe", **model.config.to_dict()}
    return {"kind": "dense", **model.config.to_dict()}


def header_bytes(model) -> bytes:
    cfg = canonical_json(_config_payload(model))
    manifest = canonical_json([[n, list(p.shape)] for n, p in model.params.items()])
    return (MAGIC + struct.pack("<I", VERSION) + struct.pack("<I", len(cfg)) + cfg
            + struct.pack("<I", len(manifest)) + manifest)


def save_bytes(model) -> bytes:
    parts = [header_bytes(model)]
    for p in model.params.values():
        parts.append(np.ascontiguousarray(p.data, dtype="<f8").tobytes())
    return b"".join(parts)


def load_bytes(blob: bytes):
    view = memoryview(blob)
    if len(blob) < 12 or bytes(view[:4]) != MAGIC:
        raise CheckpointError("bad magic")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    off = 8
    try:
        (n,) = struct.unpack_from("<I", blob, off)
        cfg = json.loads(bytes(view[off + 4:off + 4 + n]).decode("utf-8"))
        off += 4 + n
        (n,) = struct.unpack_from("<I", blob, off)
        manifest = json.loads(bytes(view[off + 4:off + 4 + n]).decode("utf-8"))
        off += 4 + n
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"malformed header: {exc}") from None

    kind = cfg.pop("kind", None)
    try:
        if kind == "dense":
            config, cls = LmConfig.from_dict(cfg), DenseLm
        elif kind == "moe":
            config, cls = MoeConfig.from_dict(cfg), MoeLm
        else:
            raise CheckpointError(f"unknown model kind {kind!r}")
    except (TypeError, KeyError) as exc:
        raise CheckpointError(f"malformed config: {exc}") from None

    expected = param_shapes(config)
    got = [(name, tuple(shape)) for name, shape in manifest]
    if got != list(expected.items()):
        raise CheckpointError("weight manifest does not match config")
    total = sum(math.prod(s) for _, s in got)
    if len(blob) - off != 8 * total:
        raise CheckpointError(f"expected {8 * total} weight bytes, found {len(blob) - off}")
    flat = np.frombuffer(blob, dtype="<f8", count=total, offset=off).astype(np.float64)
    params = {}
    pos = 0
    for name, shape in got:
        n = math.prod(shape)
        params[name] = Tensor(flat[pos:pos + n].reshape(shape), requires_grad=True)
        pos += n
    return cls(config, params)


def save(model, path) -> int:
    """Write a checkpoint file and return its byte length."""
    blob = save_bytes(model)
    Path(path).write_bytes(blob)
    return len(blob)


def load(path):
    return load_bytes(Path(path).read_bytes())


def tensor_sha256(arr: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(arr, dtype="<f8").tobytes()).hexdigest()


def model_sha256(model) -> str:
    return hashlib.sha256(save_bytes(model)).hexdigest()
