"""Layer-wise probing: a fresh stationary head per layer's representations.

Each layer j gets its own L2-regularized softmax head fit on phi_j(x) with
the ordinary next-token objective, then support annotations and memorized
flags are recomputed against that probe head. Using the same lam and
tolerance across layers keeps per-layer counts comparable, which is the whole
point of the comparison. Probing the top layer coincides with refitting the
real head, since phi_l is exactly the head input.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .convex import fit_softmax_head
from .corpus import Corpus
from .model import ModelSnapshot, sample_hiddens
from .representer import SupportIndex, index_from_features


@dataclass
class ProbeReport:
    layer: int  # 1-based
    n_samples: int
    nonsupport_count: int
    memorized_count: int
    nonsupport_by_category: dict[str, int]
    memorized_by_category: dict[str, int]
    probe_loss: float
    grad_max: float
    converged: bool


def _category_counts(corpus: Corpus, ids: np.ndarray) -> dict[str, int]:
    if corpus.categories is None or not corpus.category_names:
        return {}
    cats = corpus.categories[ids]
    return {
        name: int((cats == k).sum())
        for k, name in enumerate(corpus.category_names)
    }


def probe_layer(
    snapshot: ModelSnapshot,
    corpus: Corpus,
    layer: int,
    lam: float,
    tol: float = 1e-6,
    tau: float = 0.9,
    gamma: float = 0.5,
    sample_ids: np.ndarray | None = None,
    phi: np.ndarray | None = None,
    method: str = "lbfgs",
) -> tuple[ProbeReport, SupportIndex]:
    """Fit a probe head on layer `layer` (1-based) and annotate against it."""
    cfg = snapshot.config
    if not (1 <= layer <= cfg.n_layers):
        raise ValueError(f"layer must lie in 1..{cfg.n_layers}, got {layer}")
    if sample_ids is None:
        sample_ids = (
            corpus.split_ids("train") if corpus.split_tags is not None else np.arange(corpus.n_samples)
        )
    sample_ids = np.sort(np.asarray(sample_ids))
    if phi is None:
        phi = np.ascontiguousarray(
            sample_hiddens(snapshot, corpus, sample_ids)[:, layer - 1, :]
        )
    targets = corpus.sample_target[sample_ids]
    fit = fit_softmax_head(phi, targets, cfg.vocab_size, lam, tol=tol, method=method)
    index = index_from_features(
        phi,
        fit.theta,
        targets,
        tau,
        gamma,
        sample_ids=sample_ids,
        checkpoint_hash=snapshot.content_hash(),
    )
    nonsupport = index.nonsupport_ids()
    memorized = index.memorized_ids()
    report = ProbeReport(
        layer=layer,
        n_samples=int(sample_ids.size),
        nonsupport_count=int(nonsupport.size),
        memorized_count=int(memorized.size),
        nonsupport_by_category=_category_counts(corpus, nonsupport),
        memorized_by_category=_category_counts(corpus, memorized),
        probe_loss=fit.loss,
        grad_max=fit.grad_max,
        converged=fit.converged,
    )
    return report, index


def probe_all(
    snapshot: ModelSnapshot,
    corpus: Corpus,
    lam: float,
    tol: float = 1e-6,
    tau: float = 0.9,
    gamma: float = 0.5,
    sample_ids: np.ndarray | None = None,
    method: str = "lbfgs",
) -> list[ProbeReport]:
    """Probe every layer; hidden states are extracted in one pass."""
    cfg = snapshot.config
    if sample_ids is None:
        sample_ids = (
            corpus.split_ids("train") if corpus.split_tags is not None else np.arange(corpus.n_samples)
        )
    sample_ids = np.sort(np.asarray(sample_ids))
    hiddens = sample_hiddens(snapshot, corpus, sample_ids)
    reports = []
    for layer in range(1, cfg.n_layers + 1):
        report, _ = probe_layer(
            snapshot,
            corpus,
            layer,
            lam,
            tol=tol,
            tau=tau,
            gamma=gamma,
            sample_ids=sample_ids,
            phi=np.ascontiguousarray(hiddens[:, layer - 1, :]),
            method=method,
        )
        reports.append(report)
    return reports


def save_probe_csv(reports: list[ProbeReport], path) -> None:
    """One row per (layer, variant); variant is non-support or memorized."""
    categories: list[str] = []
    for r in reports:
        for name in r.nonsupport_by_category:
            if name not in categories:
                categories.append(name)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["layer", "variant", "total", *categories, "probe_loss", "converged"])
        for r in reports:
            for variant, total, by_cat in (
                ("non-support", r.nonsupport_count, r.nonsupport_by_category),
                ("memorized", r.memorized_count, r.memorized_by_category),
            ):
                writer.writerow(
                    [
                        r.layer,
                        variant,
                        total,
                        *[by_cat.get(c, 0) for c in categories],
                        repr(r.probe_loss),
                        int(r.converged),
                    ]
                )
