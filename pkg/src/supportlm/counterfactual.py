"""Head-space subtraction counterfactuals.

Removing a sample set R subtracts its decomposition contribution from every
head row: theta_u -= 1/(2 N lam) * sum_{i in R} (1[y_i = u] - p(u|x_i)) *
phi(x_i). In exact mode the head must be stationary so the scale is literal;
approximate mode rescales by a least-squares scalar fit between the head and
its reconstruction. The subtraction itself never recomputes probabilities;
effects on other tokens show up only in evaluation.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .corpus import Corpus
from .model import ModelSnapshot, evaluate_nll, phi_matrix
from .representer import TYPE1, TYPE2, SupportIndex
from .rng import stream
from .tensor import log_softmax_rows

SELECTORS = ("sv", "type1", "type2", "random", "ids")


@dataclass(frozen=True)
class SubtractionSpec:
    token: int
    selector: str  # one of SELECTORS
    lam: float | None = None  # defaults to the snapshot's head-fit lam
    n: int | None = None  # defaults to the snapshot's head-fit sample count
    seed: int = 0  # draws the size-matched random set
    ids: tuple[int, ...] = ()  # explicit removal set for selector == "ids"

    def __post_init__(self):
        if self.selector not in SELECTORS:
            raise ValueError(f"selector must be one of {SELECTORS}, got {self.selector!r}")


@dataclass
class CounterfactualReport:
    token: int
    selector: str
    n_removed: int
    loss_full_before: float
    loss_full_after: float
    loss_subset_before: float
    loss_subset_after: float
    mean_p_before: float
    mean_p_after: float
    n_subset: int


def resolve_removal_set(spec: SubtractionSpec, index: SupportIndex) -> np.ndarray:
    if spec.selector == "ids":
        return np.array(sorted(set(spec.ids)), dtype=np.int64)
    sv = index.entries_for_token(spec.token)
    if spec.selector == "sv":
        return np.unique(sv)
    if spec.selector == "type1":
        return np.unique(index.entries_for_token(spec.token, TYPE1))
    if spec.selector == "type2":
        return np.unique(index.entries_for_token(spec.token, TYPE2))
    # random: size-matched to |S_v|, without replacement
    rng = stream(spec.seed, f"counterfactual-random-{spec.token}")
    k = np.unique(sv).size
    return np.sort(rng.choice(index.sample_ids, size=k, replace=False))


def reconstruction_delta(
    snapshot: ModelSnapshot,
    corpus: Corpus,
    removal_ids: np.ndarray,
    lam: float,
    n: int,
) -> np.ndarray:
    """The decomposition partial sum over `removal_ids`, scaled by 1/(2 N lam)."""
    snap = snapshot.astype("f64")
    theta = snap.head_matrix()
    delta = np.zeros_like(theta)
    if removal_ids.size == 0:
        return delta
    phi = phi_matrix(snap, corpus, removal_ids)
    targets = corpus.sample_target[removal_ids]
    chunk = 8192
    for start in range(0, removal_ids.size, chunk):
        sl = slice(start, min(start + chunk, removal_ids.size))
        logits = phi[sl] @ theta.T
        resid = -np.exp(log_softmax_rows(logits))
        resid[np.arange(resid.shape[0]), targets[sl]] += 1.0
        delta += resid.T @ phi[sl]
    return delta / (2.0 * n * lam)


def subtract(
    snapshot: ModelSnapshot,
    spec: SubtractionSpec,
    index: SupportIndex,
    corpus: Corpus,
    mode: str = "exact",
) -> tuple[ModelSnapshot, np.ndarray]:
    """New snapshot with the removal set's head contribution subtracted.

    Returns (modified snapshot, removal ids). Only the head matrix changes;
    the result is no longer flagged stationary.
    """
    if index.checkpoint_hash != snapshot.content_hash():
        raise ValueError("support index was computed from a different checkpoint")
    if mode not in ("exact", "approx"):
        raise ValueError(f"mode must be 'exact' or 'approx', got {mode!r}")
    if mode == "exact" and not snapshot.head_stationary:
        raise ValueError(
            "exact subtraction requires a stationary head (the 1/(2*N*lam) scale "
            "is only literal there); use mode='approx' or refit the head"
        )
    lam = spec.lam if spec.lam is not None else snapshot.head_lambda
    n = spec.n if spec.n is not None else snapshot.head_fit_n
    if lam is None or n is None:
        raise ValueError("lam and n must come from the spec or the snapshot's head fit")

    removal = resolve_removal_set(spec, index)
    snap = snapshot.astype("f64")
    params = {k: v.copy() for k, v in snap.params.items()}
    if removal.size:
        delta = reconstruction_delta(snap, corpus, removal, lam, n)
        if mode == "approx":
            theta_hat = reconstruction_delta(snap, corpus, index.sample_ids, lam, n)
            theta = snap.head_matrix()
            c = float((theta * theta_hat).sum() / max((theta_hat * theta_hat).sum(), 1e-300))
            delta = c * delta
        params["head"] = params["head"] - delta
    out = replace(snap, params=params, head_stationary=False, head_grad_max=None)
    out._hash = None
    return out, removal


def evaluate_counterfactual(
    base: ModelSnapshot,
    modified: ModelSnapshot,
    corpus: Corpus,
    v: int,
    sample_ids: np.ndarray | None = None,
    spec: SubtractionSpec | None = None,
    n_removed: int = 0,
) -> CounterfactualReport:
    """Loss and confidence shifts on the full set and on the {y = v} subset."""
    if sample_ids is None:
        sample_ids = (
            corpus.split_ids("train") if corpus.split_tags is not None else np.arange(corpus.n_samples)
        )
    sample_ids = np.asarray(sample_ids)
    subset = sample_ids[corpus.sample_target[sample_ids] == v]
    if subset.size == 0:
        raise ValueError(f"token {v} never occurs as a target in the evaluation set")
    full_before = evaluate_nll(base, corpus, sample_ids)
    full_after = evaluate_nll(modified, corpus, sample_ids)
    sub_before, p_before = evaluate_nll(base, corpus, subset, return_target_probs=True)
    sub_after, p_after = evaluate_nll(modified, corpus, subset, return_target_probs=True)
    return CounterfactualReport(
        token=int(v),
        selector=spec.selector if spec is not None else "",
        n_removed=int(n_removed),
        loss_full_before=full_before,
        loss_full_after=full_after,
        loss_subset_before=sub_before,
        loss_subset_after=sub_after,
        mean_p_before=float(p_before.mean()),
        mean_p_after=float(p_after.mean()),
        n_subset=int(subset.size),
    )


def kernel_nonnegativity(
    snapshot: ModelSnapshot,
    corpus: Corpus,
    ids_a: np.ndarray,
    ids_b: np.ndarray | None = None,
    mode: str | int = "all",
    seed: int = 0,
) -> float:
    """Fraction of representation inner products phi(x_i)^T phi(x') >= 0.

    mode="all" checks every (a, b) pair, mode="self" pairs each sample with
    itself, an integer draws that many seeded random pairs.
    """
    ids_a = np.asarray(ids_a)
    if ids_a.size == 0:
        raise ValueError("probe set is empty")
    phi_a = phi_matrix(snapshot, corpus, ids_a)
    if mode == "self":
        norms = (phi_a * phi_a).sum(axis=1)
        return float((norms >= 0).mean())
    phi_b = phi_a if ids_b is None else phi_matrix(snapshot, corpus, np.asarray(ids_b))
    if mode == "all":
        total = 0
        nonneg = 0
        for start in range(0, phi_a.shape[0], 2048):
            g = phi_a[start : start + 2048] @ phi_b.T
            total += g.size
            nonneg += int((g >= 0).sum())
        return nonneg / total
    n_pairs = int(mode)
    rng = stream(seed, "kernel-pairs")
    ia = rng.integers(phi_a.shape[0], size=n_pairs)
    ib = rng.integers(phi_b.shape[0], size=n_pairs)
    dots = (phi_a[ia] * phi_b[ib]).sum(axis=1)
    return float((dots >= 0).mean())
