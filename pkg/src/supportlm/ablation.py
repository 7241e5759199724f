"""Removal-retraining experiments and training-knob sweeps.

Three ways to shrink the training set given a support annotation: hard keeps
exactly the support set, random keeps a uniform subset of the same size, and
soft keeps each sample independently with probability equal to its importance
score (so weak non-support samples are sometimes kept and weak support
samples sometimes dropped). Retraining happens either heads-only (convex head
refit on frozen representations) or full-model from scratch, and support is
recounted on both the retained and the original sets afterwards.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .corpus import Corpus, SyntheticSpec, generate_synthetic
from .model import ModelConfig, ModelSnapshot, evaluate_nll
from .representer import SupportIndex, compute_alphas
from .rng import stream
from .training import TrainSchedule, head_only_retrain, train

METHODS = ("hard", "soft", "random")
REGIMES = ("heads-only", "full-model")


@dataclass(frozen=True)
class AblationPlan:
    method: str
    regime: str
    seed: int = 0
    tau: float = 0.9
    gamma: float = 0.5
    lam: float = 1e-3  # heads-only refit regularization
    head_tol: float = 1e-6

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}, got {self.method!r}")
        if self.regime not in REGIMES:
            raise ValueError(f"regime must be one of {REGIMES}, got {self.regime!r}")


@dataclass
class AblationResult:
    method: str
    regime: str
    seed: int
    n_retained: int
    test_loss: float
    support_new_before: int  # support among retained, base annotation
    support_new_after: int  # support on retained set, retrained model
    support_orig_before: int  # support on the original set, base annotation
    support_orig_after: int  # support on the original set, retrained model
    diverged: bool = False


def retained_sample_set(index: SupportIndex, method: str, seed: int) -> np.ndarray:
    """Sample ids kept by a removal method; complement is removed."""
    support = index.is_support()
    if method == "hard":
        return index.sample_ids[support]
    if method == "random":
        k = int(support.sum())
        rng = stream(seed, "ablation-random")
        return np.sort(rng.choice(index.sample_ids, size=k, replace=False))
    if method == "soft":
        rng = stream(seed, "ablation-soft")
        keep = rng.random(index.n_samples) < index.importance
        return index.sample_ids[keep]
    raise ValueError(f"unknown removal method {method!r}")


def run_ablation(
    plan: AblationPlan,
    corpus: Corpus,
    base_snapshot: ModelSnapshot,
    base_index: SupportIndex,
    schedule: TrainSchedule,
) -> AblationResult:
    retained = retained_sample_set(base_index, plan.method, plan.seed)
    test_ids = corpus.split_ids("test")
    base_support = base_index.is_support()
    sup_orig_before = int(base_support.sum())
    sup_new_before = int((base_index.importance_of(retained) >= plan.tau).sum())

    diverged = False
    if plan.regime == "heads-only":
        snap, fit = head_only_retrain(
            base_snapshot,
            corpus,
            plan.lam,
            tol=plan.head_tol,
            sample_ids=retained,
            warm_start=False,
        )
        diverged = not fit.converged
    else:
        cfg = replace(base_snapshot.config, seed=plan.seed + 1_000_003)
        result = train(corpus, cfg, schedule, train_ids=retained)
        snap = result.best
        diverged = result.diverged

    test_loss = evaluate_nll(snap, corpus, test_ids)
    idx_new = compute_alphas(snap, corpus, plan.tau, plan.gamma, sample_ids=retained)
    idx_orig = compute_alphas(snap, corpus, plan.tau, plan.gamma, sample_ids=base_index.sample_ids)
    return AblationResult(
        method=plan.method,
        regime=plan.regime,
        seed=plan.seed,
        n_retained=int(retained.size),
        test_loss=test_loss,
        support_new_before=sup_new_before,
        support_new_after=int(idx_new.is_support().sum()),
        support_orig_before=sup_orig_before,
        support_orig_after=int(idx_orig.is_support().sum()),
        diverged=diverged,
    )


RESULT_COLUMNS = [
    "method",
    "regime",
    "seed",
    "tau",
    "gamma",
    "corpus_hash",
    "n_retained",
    "test_loss",
    "support_new_before",
    "support_new_after",
    "support_orig_before",
    "support_orig_after",
    "diverged",
]


def append_result(path, plan: AblationPlan, result: AblationResult, corpus_hash: str) -> None:
    """Append one fingerprinted row to the results CSV (created on first use)."""
    path = Path(path)
    new = not path.exists()
    with open(path, "a", newline="") as fh:
        writer = csv.writer(fh)
        if new:
            writer.writerow(RESULT_COLUMNS)
        writer.writerow(
            [
                plan.method,
                plan.regime,
                plan.seed,
                repr(plan.tau),
                repr(plan.gamma),
                corpus_hash,
                result.n_retained,
                repr(result.test_loss),
                result.support_new_before,
                result.support_new_after,
                result.support_orig_before,
                result.support_orig_after,
                int(result.diverged),
            ]
        )


# ---------------------------------------------------------------------------
# training-knob sweeps
# ---------------------------------------------------------------------------

SWEEP_KNOBS = ("data-size", "weight-decay", "embedding-dropout")


def sweep(
    spec: SyntheticSpec,
    cfg: ModelConfig,
    schedule: TrainSchedule,
    knob: str,
    grid,
    tau: float = 0.9,
    seed: int = 0,
) -> list[dict]:
    """Train once per grid point and pair test loss with support proportion.

    data-size subsamples documents at the given fractions with a fixed seed;
    the other knobs retrain the full corpus under the adjusted config.
    """
    if knob not in SWEEP_KNOBS:
        raise ValueError(f"knob must be one of {SWEEP_KNOBS}, got {knob!r}")
    grid = list(grid)
    if not grid:
        raise ValueError("sweep grid is empty")
    base_corpus = generate_synthetic(spec)
    rows = []
    for value in grid:
        corpus = base_corpus
        point_cfg = cfg
        if knob == "data-size":
            rng = stream(seed, f"sweep-datasize-{value}")
            n_docs = max(2, int(round(len(base_corpus.documents) * float(value))))
            docs = np.sort(rng.choice(len(base_corpus.documents), size=n_docs, replace=False))
            corpus = base_corpus.subset_documents(docs)
        elif knob == "weight-decay":
            point_cfg = replace(cfg, weight_decay=float(value))
        else:
            point_cfg = replace(cfg, dropout=float(value))
        result = train(corpus, point_cfg, schedule)
        tagged = result.corpus
        train_ids = tagged.split_ids("train")
        test_ids = tagged.split_ids("test")
        row = {"knob": knob, "value": float(value), "diverged": result.diverged}
        if result.diverged:
            row.update({"test_loss": float("nan"), "support_proportion": float("nan")})
        else:
            idx = compute_alphas(result.best, tagged, tau, sample_ids=train_ids)
            row["test_loss"] = evaluate_nll(result.best, tagged, test_ids)
            row["support_proportion"] = float(idx.is_support().mean())
        rows.append(row)
    return rows
