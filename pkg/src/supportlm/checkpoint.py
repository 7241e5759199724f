"""Versioned binary checkpoint container.

Layout: magic, format version, config JSON block, metadata JSON block, then
named parameter blobs in sorted-name order, then a SHA-256 checksum of all
preceding bytes. The checksum doubles as the snapshot's content hash, which
downstream artifacts (support indexes, feature caches) record to bind
themselves to the exact parameters they were computed from.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .hashutil import sha256_hex
from .model import ModelConfig, ModelSnapshot

MAGIC = b"SLMCKPT1"
VERSION = 1
_DTYPES = {"float64": 0, "float32": 1}
_DTYPES_INV = {0: np.float64, 1: np.float32}


def _block(data: bytes) -> bytes:
    return struct.pack("<I", len(data)) + data


def serialize_snapshot(snap: ModelSnapshot) -> bytes:
    parts = [MAGIC, struct.pack("<I", VERSION)]
    parts.append(_block(snap.config.to_json().encode()))
    meta = {
        "step": snap.step,
        "val_loss": snap.val_loss,
        "head_stationary": snap.head_stationary,
        "head_lambda": snap.head_lambda,
        "head_grad_max": snap.head_grad_max,
        "head_fit_n": snap.head_fit_n,
    }
    parts.append(_block(json.dumps(meta, sort_keys=True).encode()))
    names = sorted(snap.params)
    parts.append(struct.pack("<I", len(names)))
    for name in names:
        arr = np.ascontiguousarray(snap.params[name])
        if arr.dtype.name not in _DTYPES:
            raise ValueError(f"unsupported parameter dtype {arr.dtype} for {name!r}")
        parts.append(_block(name.encode()))
        parts.append(struct.pack("<BB", _DTYPES[arr.dtype.name], arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    body = b"".join(parts)
    return body + bytes.fromhex(sha256_hex(body))


def snapshot_hash(snap: ModelSnapshot) -> str:
    return sha256_hex(serialize_snapshot(snap))


def save_checkpoint(snap: ModelSnapshot, path) -> str:
    data = serialize_snapshot(snap)
    Path(path).write_bytes(data)
    return sha256_hex(data)


class CheckpointError(ValueError):
    pass


def load_checkpoint(path) -> ModelSnapshot:
    data = Path(path).read_bytes()
    if len(data) < len(MAGIC) + 4 + 32 or data[: len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file (bad magic)")
    body, checksum = data[:-32], data[-32:]
    if bytes.fromhex(sha256_hex(body)) != checksum:
        raise CheckpointError(f"{path}: checksum mismatch, file corrupt")
    off = len(MAGIC)
    (version,) = struct.unpack_from("<I", body, off)
    off += 4
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")

    def read_block(off):
        (n,) = struct.unpack_from("<I", body, off)
        off += 4
        return body[off : off + n], off + n

    cfg_json, off = read_block(off)
    meta_json, off = read_block(off)
    cfg = ModelConfig.from_json(cfg_json.decode())
    meta = json.loads(meta_json.decode())
    (n_params,) = struct.unpack_from("<I", body, off)
    off += 4
    params: dict[str, np.ndarray] = {}
    for _ in range(n_params):
        name_b, off = read_block(off)
        dt_code, ndim = struct.unpack_from("<BB", body, off)
        off += 2
        shape = struct.unpack_from(f"<{ndim}I", body, off)
        off += 4 * ndim
        dtype = _DTYPES_INV[dt_code]
        nbytes = int(np.prod(shape)) * np.dtype(dtype).itemsize
        arr = np.frombuffer(body[off : off + nbytes], dtype=dtype).reshape(shape).copy()
        off += nbytes
        params[name_b.decode()] = arr
    return ModelSnapshot(
        config=cfg,
        params=params,
        step=meta["step"],
        val_loss=meta["val_loss"],
        head_stationary=meta["head_stationary"],
        head_lambda=meta["head_lambda"],
        head_grad_max=meta["head_grad_max"],
        head_fit_n=meta["head_fit_n"],
    )
