"""Checkpoint feature maps for predicting supportness.

Three feature kinds per sample: the final hidden vector, the concatenation of
all layer hiddens, and the per-sample gradient of p(y|x) with respect to
every parameter, flattened in sorted-parameter order and pushed through a
seeded +-1/sqrt(k) sign projection. One seed yields one projection matrix per
run; its content hash is exposed so callers can verify that.

Gradients are computed by batch-size-1 backward passes and are meant to be
computed once per checkpoint and cached on disk.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .corpus import Corpus
from .hashutil import array_sha256, sha256_hex
from .model import ModelSnapshot, run_model, sample_hiddens
from .rng import stream

KINDS = ("last-hidden", "all-hidden", "projected-gradient")


@dataclass(frozen=True)
class FeatureSpec:
    kind: str
    proj_dim: int = 512
    proj_seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"feature kind must be one of {KINDS}, got {self.kind!r}")
        if self.kind == "projected-gradient" and self.proj_dim < 1:
            raise ValueError("projection dimension must be >= 1")

    def fingerprint(self) -> str:
        if self.kind == "projected-gradient":
            return f"{self.kind}-k{self.proj_dim}-s{self.proj_seed}"
        return self.kind

    def dim(self, cfg) -> int:
        if self.kind == "last-hidden":
            return cfg.d_model
        if self.kind == "all-hidden":
            return cfg.d_model * cfg.n_layers
        return self.proj_dim


def parameter_order(params: dict[str, np.ndarray]) -> list[str]:
    return sorted(params)


def flat_param_size(params: dict[str, np.ndarray]) -> int:
    return int(sum(v.size for v in params.values()))


def projection_matrix(seed: int, k: int, p: int) -> np.ndarray:
    """Dense sign matrix with entries +-1, to be scaled by 1/sqrt(k)."""
    rng = stream(seed, "gradient-projection")
    return (rng.integers(0, 2, size=(k, p), dtype=np.int8) * 2 - 1).astype(np.int8)


def projection_hash(signs: np.ndarray) -> str:
    return array_sha256(signs)


def per_sample_gradients(
    snapshot: ModelSnapshot,
    corpus: Corpus,
    sample_ids: np.ndarray,
    progress=None,
) -> "_GradientRows":
    """Iterator over flattened d p(y|x) / d theta rows, float64."""
    return _GradientRows(snapshot.astype("f64"), corpus, np.asarray(sample_ids), progress)


class _GradientRows:
    def __init__(self, snap, corpus, sample_ids, progress):
        self.snap = snap
        self.corpus = corpus
        self.sample_ids = sample_ids
        self.names = parameter_order(snap.params)
        self.size = flat_param_size(snap.params)
        self._progress = progress

    def __iter__(self):
        cfg = self.snap.config
        for j, sid in enumerate(self.sample_ids):
            prefix = self.corpus.prefix(int(sid))
            y = self.corpus.target(int(sid))
            wrapped = {k: T.Var(v, name=k) for k, v in self.snap.params.items()}
            logits, _ = run_model(wrapped, cfg, prefix[None, :])
            flat = T.reshape(logits, (prefix.size, cfg.vocab_size))
            last = T.reshape(T.gather_rows(flat, np.array([prefix.size - 1])), (cfg.vocab_size,))
            grads = T.backward(T.softmax_target_prob(last, y), [wrapped[k] for k in self.names])
            yield np.concatenate([g.reshape(-1) for g in grads])
            if self._progress and (j + 1) % 1000 == 0:
                self._progress(j + 1, self.sample_ids.size)


def extract_features(
    snapshot: ModelSnapshot,
    corpus: Corpus,
    spec: FeatureSpec,
    sample_ids: np.ndarray,
) -> np.ndarray:
    """Feature matrix [n, dim] in float64 for the given samples."""
    sample_ids = np.asarray(sample_ids)
    if spec.kind == "last-hidden":
        h = sample_hiddens(snapshot, corpus, sample_ids)
        return np.ascontiguousarray(h[:, -1, :])
    if spec.kind == "all-hidden":
        h = sample_hiddens(snapshot, corpus, sample_ids)
        return h.reshape(h.shape[0], -1)
    snap = snapshot.astype("f64")
    p_total = flat_param_size(snap.params)
    signs = projection_matrix(spec.proj_seed, spec.proj_dim, p_total)
    proj_t = signs.astype(np.float64).T / np.sqrt(spec.proj_dim)  # [P, k]
    out = np.empty((sample_ids.size, spec.proj_dim))
    batch = 256
    buf = np.empty((batch, p_total))
    row = 0
    filled = 0
    for g in per_sample_gradients(snap, corpus, sample_ids):
        buf[filled] = g
        filled += 1
        if filled == batch:
            out[row : row + filled] = buf @ proj_t
            row += filled
            filled = 0
    if filled:
        out[row : row + filled] = buf[:filled] @ proj_t
    return out


# ---------------------------------------------------------------------------
# feature cache files
# ---------------------------------------------------------------------------

MAGIC = b"SLMFEAT1"


def save_features(path, matrix: np.ndarray, checkpoint_hash: str, spec: FeatureSpec, sample_ids) -> None:
    matrix = np.ascontiguousarray(matrix, dtype=np.float64)
    sample_ids = np.ascontiguousarray(sample_ids, dtype=np.int64)
    header = json.dumps(
        {
            "checkpoint": checkpoint_hash,
            "spec": spec.fingerprint(),
            "rows": int(matrix.shape[0]),
            "dim": int(matrix.shape[1]),
        },
        sort_keys=True,
    ).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        fh.write(sample_ids.tobytes())
        fh.write(matrix.tobytes())


def load_features(path):
    data = Path(path).read_bytes()
    if data[: len(MAGIC)] != MAGIC:
        raise ValueError(f"{path}: not a feature cache file")
    off = len(MAGIC)
    (hlen,) = struct.unpack_from("<I", data, off)
    off += 4
    meta = json.loads(data[off : off + hlen].decode())
    off += hlen
    n, d = meta["rows"], meta["dim"]
    ids = np.frombuffer(data[off : off + 8 * n], dtype=np.int64).copy()
    off += 8 * n
    matrix = np.frombuffer(data[off : off + 8 * n * d], dtype=np.float64).reshape(n, d).copy()
    return matrix, ids, meta


def cached_features(
    cache_dir,
    snapshot: ModelSnapshot,
    corpus: Corpus,
    spec: FeatureSpec,
    sample_ids: np.ndarray,
) -> np.ndarray:
    """Fetch from the cache keyed by (checkpoint hash, spec); compute on miss."""
    cache_dir = Path(cache_dir)
    cache_dir.mkdir(parents=True, exist_ok=True)
    ck = snapshot.content_hash()
    key = sha256_hex(f"{ck}:{spec.fingerprint()}:{array_sha256(np.asarray(sample_ids))}".encode())[:24]
    path = cache_dir / f"features-{key}.bin"
    if path.exists():
        matrix, ids, meta = load_features(path)
        if meta["checkpoint"] == ck and meta["spec"] == spec.fingerprint() and np.array_equal(ids, sample_ids):
            return matrix
    matrix = extract_features(snapshot, corpus, spec, sample_ids)
    save_features(path, matrix, ck, spec, sample_ids)
    return matrix
