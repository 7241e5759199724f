"""Directed token network induced by Type-2 support relations.

Edge v -> u with multiplicity m means m samples whose target is v are Type-2
support samples of u. Type-2 requires u != y_i, so the graph has no
self-loops. Degrees count distinct neighbors by default (parallel edges
collapsed); a multiplicity-weighted variant is available.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .corpus import Corpus
from .representer import TYPE2, SupportIndex


@dataclass
class Type2Graph:
    src: np.ndarray  # one row per distinct (v, u) pair, sorted
    dst: np.ndarray
    multiplicity: np.ndarray

    @property
    def n_edges(self) -> int:
        return int(self.src.size)

    def nodes(self) -> np.ndarray:
        return np.unique(np.concatenate([self.src, self.dst])) if self.n_edges else np.empty(0, np.int64)

    @property
    def n_nodes(self) -> int:
        return int(self.nodes().size)


def build_graph(index: SupportIndex, corpus: Corpus) -> Type2Graph:
    sel = index.entry_type == TYPE2
    samples = index.entry_sample[sel]
    dst = index.entry_token[sel]
    src = corpus.sample_target[samples]
    if src.size == 0:
        e = np.empty(0, np.int64)
        return Type2Graph(src=e, dst=e.copy(), multiplicity=e.copy())
    pairs = np.stack([src, dst], axis=1)
    uniq, counts = np.unique(pairs, axis=0, return_counts=True)
    return Type2Graph(
        src=uniq[:, 0].astype(np.int64),
        dst=uniq[:, 1].astype(np.int64),
        multiplicity=counts.astype(np.int64),
    )


def degree_table(graph: Type2Graph, weighted: bool = False) -> dict[str, dict[int, int]]:
    """Out/in degree per node; distinct neighbors unless weighted."""
    w = graph.multiplicity if weighted else np.ones_like(graph.multiplicity)
    out: dict[int, int] = {}
    inn: dict[int, int] = {}
    for s, d, m in zip(graph.src, graph.dst, w):
        out[int(s)] = out.get(int(s), 0) + int(m)
        inn[int(d)] = inn.get(int(d), 0) + int(m)
    for node in graph.nodes():
        out.setdefault(int(node), 0)
        inn.setdefault(int(node), 0)
    return {"out": out, "in": inn}


def degree_stats(graph: Type2Graph, k: int, weighted: bool = False) -> dict:
    """Top-k nodes by in- and out-degree; ties break toward lower token ids."""
    if k < 1:
        raise ValueError("k must be >= 1")
    table = degree_table(graph, weighted=weighted)

    def top(d: dict[int, int]):
        ranked = sorted(d.items(), key=lambda kv: (-kv[1], kv[0]))
        return [(int(t), int(c)) for t, c in ranked[:k]]

    return {
        "top_out": top(table["out"]),
        "top_in": top(table["in"]),
        "n_nodes": graph.n_nodes,
        "n_edges": graph.n_edges,
    }


def save_edge_list(graph: Type2Graph, path) -> None:
    with open(path, "w") as fh:
        for s, d, m in zip(graph.src, graph.dst, graph.multiplicity):
            fh.write(f"{int(s)} {int(d)} {int(m)}\n")


def load_edge_list(path) -> Type2Graph:
    rows = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if line:
                s, d, m = line.split()
                rows.append((int(s), int(d), int(m)))
    if not rows:
        e = np.empty(0, np.int64)
        return Type2Graph(src=e, dst=e.copy(), multiplicity=e.copy())
    arr = np.array(rows, dtype=np.int64)
    return Type2Graph(src=arr[:, 0], dst=arr[:, 1], multiplicity=arr[:, 2])


def save_degree_csv(graph: Type2Graph, path, weighted: bool = False) -> None:
    table = degree_table(graph, weighted=weighted)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["token", "out_degree", "in_degree"])
        for node in graph.nodes():
            writer.writerow([int(node), table["out"][int(node)], table["in"][int(node)]])
