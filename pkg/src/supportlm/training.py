"""From-scratch training of the mini-LM and stationary head-only refits.

Training emits a checkpoint series that always contains the untrained step-0
parameters (early-feature analyses need them) and tracks the best-validation
snapshot for model selection. A non-finite loss aborts the run and reports it
rather than raising, keeping the last good checkpoint usable.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import tensor as T
from .convex import HeadFit, fit_softmax_head
from .corpus import TRAIN, VALID, Corpus, SplitSpec, split
from .model import ModelConfig, ModelSnapshot, init_params, phi_matrix, run_model, evaluate_nll
from .optim import make_optimizer
from .rng import stream


@dataclass(frozen=True)
class TrainSchedule:
    steps: int
    batch_windows: int = 64
    lr: float = 3e-3
    warmup: int = 20
    optimizer: str = "adam"
    eval_every: int = 25
    checkpoint_steps: tuple[int, ...] = ()
    split: SplitSpec = SplitSpec((0.9, 0.05, 0.05), seed=0)


@dataclass
class TrainResult:
    checkpoints: list[tuple[int, ModelSnapshot]]
    best: ModelSnapshot
    curve: list[dict]
    diverged: bool
    corpus: Corpus  # split-tagged corpus actually trained on

    def checkpoint(self, step: int) -> ModelSnapshot:
        for s, snap in self.checkpoints:
            if s == step:
                return snap
        raise KeyError(f"no checkpoint at step {step}")


def _snapshot(cfg, params, step, val_loss=None) -> ModelSnapshot:
    return ModelSnapshot(
        config=cfg, params={k: v.copy() for k, v in params.items()}, step=step, val_loss=val_loss
    )


def train(
    corpus: Corpus,
    cfg: ModelConfig,
    schedule: TrainSchedule,
    train_ids: np.ndarray | None = None,
) -> TrainResult:
    """Train from scratch; `train_ids` further restricts the train-split samples."""
    if corpus.split_tags is None:
        corpus = split(corpus, schedule.split)
    train_tag = corpus.split_tags == TRAIN
    if train_ids is not None:
        member = np.zeros(corpus.n_samples, dtype=bool)
        member[np.asarray(train_ids)] = True
        train_tag = train_tag & member

    plan = corpus.window_plan()
    groups = []
    for g in plan:
        mask = g.sample_ids >= 0
        mask[mask] = train_tag[g.sample_ids[mask]]
        if mask.any():
            groups.append((g, mask))
    if not groups:
        raise ValueError("no training samples after the split")
    counts = np.array([g.inputs.shape[0] for g, _ in groups], dtype=np.float64)
    group_p = counts / counts.sum()

    params = init_params(cfg)
    opt = make_optimizer(cfg_kind(schedule.optimizer), schedule.lr, cfg.weight_decay)
    batch_rng = stream(cfg.seed, "train-batches")
    drop_rng = stream(cfg.seed, "train-dropout")
    val_ids = corpus.split_ids("valid") if (corpus.split_tags == VALID).any() else None

    checkpoints: list[tuple[int, ModelSnapshot]] = [(0, _snapshot(cfg, params, 0))]
    want_steps = set(schedule.checkpoint_steps) | {schedule.steps}
    curve: list[dict] = []
    best: ModelSnapshot | None = None
    best_val = np.inf
    diverged = False

    def eval_val(step) -> float | None:
        if val_ids is None or val_ids.size == 0:
            return None
        snap = _snapshot(cfg, params, step)
        return evaluate_nll(snap, corpus, val_ids)

    v0 = eval_val(0)
    if v0 is not None:
        best, best_val = _snapshot(cfg, params, 0, v0), v0
        curve.append({"step": 0, "train_loss": None, "val_loss": v0})

    for step_i in range(1, schedule.steps + 1):
        gi = int(batch_rng.choice(len(groups), p=group_p))
        g, mask = groups[gi]
        rows = batch_rng.choice(g.inputs.shape[0], size=min(schedule.batch_windows, g.inputs.shape[0]), replace=False)
        rows = np.sort(rows)
        batch_mask = mask[rows]
        if not batch_mask.any():
            continue
        tokens = g.inputs[rows]
        B, L = tokens.shape

        wrapped = {k: T.Var(v, name=k) for k, v in params.items()}
        drop_mask = None
        if cfg.dropout > 0.0:
            keep = 1.0 - cfg.dropout
            drop_mask = (
                drop_rng.random((B, L, cfg.d_model)) < keep
            ).astype(cfg.np_dtype) / keep
        logits, _ = run_model(wrapped, cfg, tokens, train=True, drop_mask=drop_mask)
        flat = T.reshape(logits, (B * L, cfg.vocab_size))
        sel = np.nonzero(batch_mask.reshape(-1))[0]
        loss, _probs = T.softmax_cross_entropy(
            T.gather_rows(flat, sel), g.targets[rows].reshape(-1)[sel]
        )
        loss_v = float(T.value(loss))
        if not np.isfinite(loss_v):
            diverged = True
            break

        names = list(params)
        grads = dict(zip(names, T.backward(loss, [wrapped[k] for k in names])))
        opt.lr = schedule.lr * min(1.0, step_i / max(schedule.warmup, 1))
        opt.step(params, grads)

        record_eval = (step_i % schedule.eval_every == 0) or step_i == schedule.steps
        if record_eval:
            v = eval_val(step_i)
            curve.append({"step": step_i, "train_loss": loss_v, "val_loss": v})
            if v is not None and v < best_val:
                best, best_val = _snapshot(cfg, params, step_i, v), v
        if step_i in want_steps:
            checkpoints.append((step_i, _snapshot(cfg, params, step_i)))

    if best is None:  # no validation split: fall back to the final parameters
        best = checkpoints[-1][1]
    return TrainResult(checkpoints=checkpoints, best=best, curve=curve, diverged=diverged, corpus=corpus)


def cfg_kind(name: str) -> str:
    if name in ("adam", "plain-gd"):
        return name
    raise ValueError(f"unknown optimizer {name!r}")


def head_only_retrain(
    snapshot: ModelSnapshot,
    corpus: Corpus,
    lam: float,
    tol: float = 1e-6,
    sample_ids: np.ndarray | None = None,
    method: str = "lbfgs",
    max_iter: int | None = None,
    warm_start: bool = True,
) -> tuple[ModelSnapshot, HeadFit]:
    """Refit the LM head to stationarity on frozen representations.

    This is the premise of the head-space decomposition: the returned snapshot
    carries the achieved gradient bound so downstream identity checks can
    refuse non-stationary heads. Always float64.
    """
    if snapshot.config.tie_embeddings:
        raise ValueError("head-only retraining needs an untied head (tying couples it to the embedding)")
    snap = snapshot.astype("f64")
    if sample_ids is None:
        sample_ids = (
            corpus.split_ids("train") if corpus.split_tags is not None else np.arange(corpus.n_samples)
        )
    sample_ids = np.asarray(sample_ids)
    phi = phi_matrix(snap, corpus, sample_ids)
    fit = fit_softmax_head(
        phi,
        corpus.sample_target[sample_ids],
        snap.config.vocab_size,
        lam,
        tol=tol,
        method=method,
        max_iter=max_iter,
        theta0=snap.head_matrix() if warm_start else None,
    )
    params = {k: v.copy() for k, v in snap.params.items()}
    params["head"] = fit.theta
    out = replace(
        snap,
        params=params,
        head_stationary=fit.converged,
        head_lambda=lam,
        head_grad_max=fit.grad_max,
        head_fit_n=int(sample_ids.size),
    )
    out._hash = None
    return out, fit
