"""Figure-data emission from completed run artifacts.

Each report is one tidy CSV with a documented column schema, regenerated
deterministically from the result stores: identical stores yield identical
bytes. Plot rendering is out of scope; these files feed external plotting.

Reports
-------
support_per_token.csv    token, attributed_count, support_entries
    attributed_count assigns each support sample to its single largest-|alpha|
    token (ties to the sample's own target), so the column sums to |S|;
    support_entries is |S_v| (a sample may appear under two tokens).
category_support.csv     category, n_samples, n_support, proportion (+ overall row)
alpha_histogram.csv      importance-score distribution over fixed bins
threshold_sweep.csv      tau, support_count, proportion
summary.txt              headline statistics
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np

from .corpus import Corpus
from .representer import SupportIndex, threshold_sweep


def _write_csv(path, header, rows) -> Path:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)
    return Path(path)


def _fmt(x) -> str:
    return repr(float(x))


def attributed_support_token(index: SupportIndex) -> dict[int, int]:
    """Each support sample's single strongest token: count per token, sums to |S|."""
    best: dict[int, tuple[float, int, int]] = {}
    for s, t, a, ty in zip(
        index.entry_sample, index.entry_token, index.entry_alpha, index.entry_type
    ):
        score = abs(float(a))
        tie_rank = 0 if ty == 1 else 1  # prefer the sample's own target on ties
        cur = best.get(int(s))
        cand = (-score, tie_rank, int(t))
        if cur is None or cand < cur:
            best[int(s)] = cand
    counts: dict[int, int] = {}
    for _, (_, _, t) in sorted(best.items()):
        counts[t] = counts.get(t, 0) + 1
    return counts


def emit_support_per_token(index: SupportIndex, path) -> Path:
    attributed = attributed_support_token(index)
    entries = index.support_counts_per_token()
    tokens = sorted(set(attributed) | set(entries))
    rows = [[t, attributed.get(t, 0), entries.get(t, 0)] for t in tokens]
    return _write_csv(path, ["token", "attributed_count", "support_entries"], rows)


def emit_category_support(index: SupportIndex, corpus: Corpus, path) -> Path:
    sup = index.is_support()
    rows = []
    if corpus.categories is not None:
        cats = corpus.categories[index.sample_ids]
        for k, name in enumerate(corpus.category_names):
            sel = cats == k
            n = int(sel.sum())
            ns = int(sup[sel].sum())
            rows.append([name, n, ns, _fmt(ns / n if n else 0.0)])
    rows.append(["overall", index.n_samples, int(sup.sum()), _fmt(float(sup.mean()))])
    return _write_csv(path, ["category", "n_samples", "n_support", "proportion"], rows)


def emit_alpha_histogram(index: SupportIndex, path, bins: int = 20) -> Path:
    edges = np.linspace(0.0, 1.0, bins + 1)
    hist, _ = np.histogram(index.importance, bins=edges)
    rows = [
        [_fmt(edges[i]), _fmt(edges[i + 1]), int(hist[i])]
        for i in range(bins)
    ]
    return _write_csv(path, ["bin_lo", "bin_hi", "count"], rows)


def emit_threshold_sweep(index: SupportIndex, taus, path) -> Path:
    rows = [
        [_fmt(r["tau"]), r["support_count"], _fmt(r["proportion"])]
        for r in threshold_sweep(index, taus)
    ]
    return _write_csv(path, ["tau", "support_count", "proportion"], rows)


def emit_summary(index: SupportIndex, corpus: Corpus, path, graph_stats: dict | None = None) -> Path:
    sup = index.is_support()
    entries = index.support_counts_per_token()
    top = sorted(entries.items(), key=lambda kv: (-kv[1], kv[0]))[:5]
    lines = [
        f"samples: {index.n_samples}",
        f"support: {int(sup.sum())} ({float(sup.mean()):.4f})",
        f"memorized (gamma={index.gamma}): {int(index.memorized.sum())}",
        f"tau: {index.tau}",
        f"type-1 entries: {int((index.entry_type == 1).sum())}",
        f"type-2 entries: {int((index.entry_type == 2).sum())}",
        "top tokens by support entries: " + ", ".join(f"{t}:{c}" for t, c in top),
    ]
    if corpus.categories is not None:
        cats = corpus.categories[index.sample_ids]
        for k, name in enumerate(corpus.category_names):
            sel = cats == k
            if sel.any():
                lines.append(f"category {name}: {float(sup[sel].mean()):.4f} support rate")
    if graph_stats:
        lines.append(
            f"type-2 graph: {graph_stats['n_nodes']} nodes, {graph_stats['n_edges']} edges"
        )
        lines.append(f"top out-degree: {graph_stats['top_out']}")
        lines.append(f"top in-degree: {graph_stats['top_in']}")
    Path(path).write_text("\n".join(lines) + "\n")
    return Path(path)


def regenerate_reports(results_dir, out_dir) -> list[Path]:
    """Rebuild every figure CSV found derivable from stores under results_dir.

    Looks for the artifact files the subcommands emit (support index plus
    annotations, ablation results, accuracy grids, probe tables, sweep rows)
    and copies or re-derives their report-form CSVs. Purely functional over
    the stores: running it twice yields identical bytes.
    """
    from .representer import load_index

    results_dir = Path(results_dir)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    emitted: list[Path] = []

    for index_path in sorted(results_dir.rglob("support_index.csv")):
        ann = index_path.with_name("annotations.csv")
        idx = load_index(index_path, ann if ann.exists() else None)
        stem = index_path.parent.name
        if idx.n_samples:
            emitted.append(emit_support_per_token(idx, out_dir / f"{stem}_support_per_token.csv"))
            emitted.append(emit_alpha_histogram(idx, out_dir / f"{stem}_alpha_histogram.csv"))
            taus = [round(0.1 * k, 1) for k in range(1, 11)]
            emitted.append(emit_threshold_sweep(idx, taus, out_dir / f"{stem}_threshold_sweep.csv"))

    for name in ("ablation_results.csv", "accuracy_grid.csv", "probe_report.csv", "sweep.csv", "counterfactual.csv"):
        for src in sorted(results_dir.rglob(name)):
            dst = out_dir / f"{src.parent.name}_{name}"
            dst.write_bytes(src.read_bytes())
            emitted.append(dst)

    notice = out_dir / "report_index.json"
    notice.write_text(
        json.dumps({"reports": sorted(str(p.name) for p in emitted)}, indent=2, sort_keys=True) + "\n"
    )
    emitted.append(notice)
    return emitted
