"""Support-sample extraction and the head-decomposition identity check.

For sample i and token v the coefficient is alpha_{i,v} = 1[y_i = v] -
p(v|x_i). A sample supports v when |alpha_{i,v}| >= tau: either its own
target is predicted with low confidence (Type-1, alpha = 1 - p(y_i|x_i)) or
it confidently predicts the wrong token v (Type-2, alpha = -p(v|x_i), found
by scanning every probability above tau, not just the argmax).

Only the sparse support entries and per-sample scalars are kept; full
probability rows are streamed and discarded.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .corpus import Corpus
from .model import ModelSnapshot, phi_matrix, stream_probability_rows
from .tensor import log_softmax_rows

TYPE1, TYPE2 = 1, 2

INDEX_FORMAT = "supportlm-index"
INDEX_VERSION = 1


@dataclass
class SupportIndex:
    """Sparse support relation plus per-sample annotation scalars.

    Covered sample ids are sorted; entry arrays are sorted by (sample, token).
    """

    checkpoint_hash: str
    tau: float
    gamma: float
    sample_ids: np.ndarray
    target: np.ndarray
    p_target: np.ndarray
    importance: np.ndarray  # s_i = max_v |alpha_{i,v}|
    argmax_token: np.ndarray
    memorized: np.ndarray
    entry_sample: np.ndarray
    entry_token: np.ndarray
    entry_alpha: np.ndarray
    entry_type: np.ndarray

    @property
    def n_samples(self) -> int:
        return int(self.sample_ids.size)

    def is_support(self) -> np.ndarray:
        return self.importance >= self.tau

    def support_ids(self) -> np.ndarray:
        return self.sample_ids[self.is_support()]

    def nonsupport_ids(self) -> np.ndarray:
        return self.sample_ids[~self.is_support()]

    def memorized_ids(self) -> np.ndarray:
        return self.sample_ids[self.memorized]

    def entries_for_token(self, v: int, entry_type: int | None = None):
        sel = self.entry_token == v
        if entry_type is not None:
            sel &= self.entry_type == entry_type
        return self.entry_sample[sel]

    def support_counts_per_token(self) -> dict[int, int]:
        tokens, counts = np.unique(self.entry_token, return_counts=True)
        return {int(t): int(c) for t, c in zip(tokens, counts)}

    def importance_of(self, sample_ids: np.ndarray) -> np.ndarray:
        pos = np.searchsorted(self.sample_ids, sample_ids)
        if (pos >= self.n_samples).any() or (self.sample_ids[pos] != sample_ids).any():
            raise KeyError("sample id not covered by this index")
        return self.importance[pos]


class _AlphaScan:
    """Accumulates per-sample scalars and sparse support entries from prob rows."""

    def __init__(self, sample_ids: np.ndarray, tau: float):
        self.tau = tau
        self.sample_ids = sample_ids
        n = sample_ids.size
        self.p_target = np.empty(n)
        self.importance = np.empty(n)
        self.argmax_token = np.empty(n, dtype=np.int64)
        self._slot = {int(s): i for i, s in enumerate(sample_ids)}
        self._es: list[np.ndarray] = []
        self._et: list[np.ndarray] = []
        self._ea: list[np.ndarray] = []
        self._ety: list[np.ndarray] = []

    def consume(self, ids, targets, probs):
        tau = self.tau
        rows = np.arange(ids.size)
        py = probs[rows, targets]
        # ties resolved to the lowest token id (np.argmax keeps the first max)
        amax = probs.argmax(axis=1)
        wrong = probs.copy()
        wrong[rows, targets] = -1.0
        max_wrong = wrong.max(axis=1)
        pos = np.array([self._slot[int(i)] for i in ids], dtype=np.int64)
        self.p_target[pos] = py
        self.importance[pos] = np.maximum(1.0 - py, max_wrong)
        self.argmax_token[pos] = amax

        t1 = np.nonzero(1.0 - py >= tau)[0]
        if t1.size:
            self._es.append(ids[t1])
            self._et.append(targets[t1])
            self._ea.append(1.0 - py[t1])
            self._ety.append(np.full(t1.size, TYPE1, dtype=np.int8))
        r2, v2 = np.nonzero(wrong >= tau)
        if r2.size:
            self._es.append(ids[r2])
            self._et.append(v2.astype(np.int64))
            self._ea.append(-probs[r2, v2])
            self._ety.append(np.full(r2.size, TYPE2, dtype=np.int8))

    def build(self, checkpoint_hash: str, gamma: float, targets: np.ndarray) -> SupportIndex:
        if self._es:
            es = np.concatenate(self._es)
            et = np.concatenate(self._et)
            ea = np.concatenate(self._ea)
            ety = np.concatenate(self._ety)
            order = np.lexsort((et, es))
            es, et, ea, ety = es[order], et[order], ea[order], ety[order]
        else:
            es = np.empty(0, np.int64)
            et = np.empty(0, np.int64)
            ea = np.empty(0, np.float64)
            ety = np.empty(0, np.int8)
        return SupportIndex(
            checkpoint_hash=checkpoint_hash,
            tau=self.tau,
            gamma=gamma,
            sample_ids=self.sample_ids,
            target=targets,
            p_target=self.p_target,
            importance=self.importance,
            argmax_token=self.argmax_token,
            memorized=(self.argmax_token == targets) & (self.p_target >= gamma),
            entry_sample=es,
            entry_token=et,
            entry_alpha=ea,
            entry_type=ety,
        )


def _check_thresholds(tau: float, gamma: float) -> None:
    if not (0.0 < tau <= 1.0):
        raise ValueError(f"tau must lie in (0, 1], got {tau}")
    if not (0.0 <= gamma <= 1.0):
        raise ValueError(f"gamma must lie in [0, 1], got {gamma}")


def compute_alphas(
    snapshot: ModelSnapshot,
    corpus: Corpus,
    tau: float,
    gamma: float = 0.5,
    sample_ids: np.ndarray | None = None,
) -> SupportIndex:
    _check_thresholds(tau, gamma)
    if sample_ids is None:
        sample_ids = (
            corpus.split_ids("train") if corpus.split_tags is not None else np.arange(corpus.n_samples)
        )
    sample_ids = np.sort(np.asarray(sample_ids))
    scan = _AlphaScan(sample_ids, tau)
    stream_probability_rows(snapshot, corpus, sample_ids, scan.consume)
    return scan.build(snapshot.content_hash(), gamma, corpus.sample_target[sample_ids])


def index_from_features(
    phi: np.ndarray,
    theta: np.ndarray,
    targets: np.ndarray,
    tau: float,
    gamma: float = 0.5,
    sample_ids: np.ndarray | None = None,
    checkpoint_hash: str = "",
) -> SupportIndex:
    """Annotate from an explicit (features, head) pair instead of a snapshot.

    Used wherever the head under study is not the model's own (layer probes,
    controls on synthetic features). Probability rows are softmax(phi theta^T).
    """
    _check_thresholds(tau, gamma)
    phi = np.asarray(phi, dtype=np.float64)
    targets = np.asarray(targets)
    if sample_ids is None:
        sample_ids = np.arange(phi.shape[0])
    sample_ids = np.asarray(sample_ids)
    scan = _AlphaScan(sample_ids, tau)
    chunk = 8192
    for start in range(0, phi.shape[0], chunk):
        sl = slice(start, min(start + chunk, phi.shape[0]))
        probs = np.exp(log_softmax_rows(phi[sl] @ theta.T))
        scan.consume(sample_ids[sl], targets[sl], probs)
    return scan.build(checkpoint_hash, gamma, targets)


def memorized_set(
    snapshot: ModelSnapshot,
    corpus: Corpus,
    gamma: float,
    sample_ids: np.ndarray | None = None,
) -> np.ndarray:
    """Ids of samples predicted argmax-correctly with confidence >= gamma."""
    if not (0.0 <= gamma <= 1.0):
        raise ValueError(f"gamma must lie in [0, 1], got {gamma}")
    if sample_ids is None:
        sample_ids = (
            corpus.split_ids("train") if corpus.split_tags is not None else np.arange(corpus.n_samples)
        )
    sample_ids = np.sort(np.asarray(sample_ids))
    flags = np.zeros(sample_ids.size, dtype=bool)
    slot = {int(s): i for i, s in enumerate(sample_ids)}

    def consume(ids, targets, probs):
        rows = np.arange(ids.size)
        ok = (probs.argmax(axis=1) == targets) & (probs[rows, targets] >= gamma)
        pos = np.array([slot[int(i)] for i in ids], dtype=np.int64)
        flags[pos] = ok

    stream_probability_rows(snapshot, corpus, sample_ids, consume)
    return sample_ids[flags]


@dataclass
class ReconstructionReport:
    checkpoint_hash: str
    lam: float
    n_samples: int
    rel_error: np.ndarray  # per token
    max_rel_error: float
    worst_token: int
    eps: float


def verify_representer(
    snapshot: ModelSnapshot,
    corpus: Corpus,
    lam: float | None = None,
    sample_ids: np.ndarray | None = None,
    eps: float = 1e-8,
) -> ReconstructionReport:
    """Rebuild every head row from the per-sample decomposition and compare.

    theta_hat_v = 1/(2 N lam) * sum_i (1[y_i = v] - p(v|x_i)) phi(x_i); at a
    stationary head this equals theta_v exactly, so the relative error is a
    direct audit of the identity. Refuses non-stationary heads, where the
    comparison is meaningless.
    """
    if not snapshot.head_stationary:
        raise ValueError(
            "snapshot head is not flagged stationary; refit it first (reconstruction "
            "is only an identity at a stationary point)"
        )
    if lam is None:
        lam = snapshot.head_lambda
    elif snapshot.head_lambda is not None and not np.isclose(lam, snapshot.head_lambda):
        raise ValueError(
            f"lam {lam} does not match the head's fit lam {snapshot.head_lambda}"
        )
    if sample_ids is None:
        sample_ids = (
            corpus.split_ids("train") if corpus.split_tags is not None else np.arange(corpus.n_samples)
        )
    sample_ids = np.asarray(sample_ids)
    if snapshot.head_fit_n is not None and sample_ids.size != snapshot.head_fit_n:
        raise ValueError(
            f"verification set has {sample_ids.size} samples but the head was fit on "
            f"{snapshot.head_fit_n}; the identity only holds over the fit set"
        )

    snap = snapshot.astype("f64")
    theta = snap.head_matrix()
    phi = phi_matrix(snap, corpus, sample_ids)
    targets = corpus.sample_target[sample_ids]
    n = sample_ids.size
    theta_hat = np.zeros_like(theta)
    chunk = 8192
    for start in range(0, n, chunk):
        sl = slice(start, min(start + chunk, n))
        logits = phi[sl] @ theta.T
        resid = -np.exp(log_softmax_rows(logits))
        resid[np.arange(resid.shape[0]), targets[sl]] += 1.0
        theta_hat += resid.T @ phi[sl]
    theta_hat /= 2.0 * n * lam

    num = np.linalg.norm(theta - theta_hat, axis=1)
    den = np.maximum(np.linalg.norm(theta, axis=1), eps)
    rel = num / den
    return ReconstructionReport(
        checkpoint_hash=snapshot.content_hash(),
        lam=float(lam),
        n_samples=n,
        rel_error=rel,
        max_rel_error=float(rel.max()),
        worst_token=int(rel.argmax()),
        eps=eps,
    )


def threshold_sweep(index: SupportIndex, taus) -> list[dict]:
    """Support count and proportion at each threshold, from importance scores.

    Uses the gamma-independent importance s_i, so one annotation pass serves
    the whole grid; counts are non-increasing in tau by construction.
    """
    taus = list(taus)
    if any(not (0.0 < t <= 1.0) for t in taus):
        raise ValueError("all tau grid values must lie in (0, 1]")
    out = []
    for t in taus:
        c = int((index.importance >= t).sum())
        out.append({"tau": float(t), "support_count": c, "proportion": c / max(index.n_samples, 1)})
    return out


# ---------------------------------------------------------------------------
# index file format
# ---------------------------------------------------------------------------


def save_index(index: SupportIndex, path) -> None:
    """Header line binding (checkpoint, tau, gamma), then one row per entry."""
    header = {
        "format": INDEX_FORMAT,
        "version": INDEX_VERSION,
        "checkpoint": index.checkpoint_hash,
        "tau": index.tau,
        "gamma": index.gamma,
        "n_samples": index.n_samples,
        "n_entries": int(index.entry_sample.size),
    }
    with open(path, "w", newline="") as fh:
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        writer = csv.writer(fh)
        writer.writerow(["sample_id", "token", "alpha", "type"])
        for s, t, a, ty in zip(
            index.entry_sample, index.entry_token, index.entry_alpha, index.entry_type
        ):
            writer.writerow([int(s), int(t), repr(float(a)), int(ty)])


def save_annotations(index: SupportIndex, path) -> None:
    """Per-sample summary CSV for reporting."""
    sup = index.is_support()
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["sample_id", "target", "p_target", "importance", "argmax", "memorized", "is_support"]
        )
        for i in range(index.n_samples):
            writer.writerow(
                [
                    int(index.sample_ids[i]),
                    int(index.target[i]),
                    repr(float(index.p_target[i])),
                    repr(float(index.importance[i])),
                    int(index.argmax_token[i]),
                    int(index.memorized[i]),
                    int(sup[i]),
                ]
            )


def load_index(path, annotations_path=None) -> SupportIndex:
    with open(path) as fh:
        header = json.loads(fh.readline())
        if header.get("format") != INDEX_FORMAT or header.get("version") != INDEX_VERSION:
            raise ValueError(f"{path}: not a version-{INDEX_VERSION} support index file")
        reader = csv.reader(fh)
        next(reader)  # column names
        rows = list(reader)
    es = np.array([int(r[0]) for r in rows], dtype=np.int64)
    et = np.array([int(r[1]) for r in rows], dtype=np.int64)
    ea = np.array([float(r[2]) for r in rows], dtype=np.float64)
    ety = np.array([int(r[3]) for r in rows], dtype=np.int8)

    kw = dict(
        sample_ids=np.empty(0, np.int64),
        target=np.empty(0, np.int64),
        p_target=np.empty(0, np.float64),
        importance=np.empty(0, np.float64),
        argmax_token=np.empty(0, np.int64),
        memorized=np.empty(0, bool),
    )
    if annotations_path is not None:
        with open(annotations_path) as fh:
            reader = csv.reader(fh)
            next(reader)
            arows = list(reader)
        kw = dict(
            sample_ids=np.array([int(r[0]) for r in arows], dtype=np.int64),
            target=np.array([int(r[1]) for r in arows], dtype=np.int64),
            p_target=np.array([float(r[2]) for r in arows]),
            importance=np.array([float(r[3]) for r in arows]),
            argmax_token=np.array([int(r[4]) for r in arows], dtype=np.int64),
            memorized=np.array([bool(int(r[5])) for r in arows]),
        )
    return SupportIndex(
        checkpoint_hash=header["checkpoint"],
        tau=header["tau"],
        gamma=header["gamma"],
        entry_sample=es,
        entry_token=et,
        entry_alpha=ea,
        entry_type=ety,
        **kw,
    )
