"""Command-line entry point: one subcommand per pipeline stage.

Exit codes: 0 success, 2 usage errors (unknown flags, out-of-range
thresholds), 1 for invariant violations inside a pipeline, reported as a
machine-readable JSON record on stderr. Every run writes a manifest beside
its artifacts; re-running the recorded argv against unchanged inputs
reproduces every CSV byte for byte.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .ablation import AblationPlan, append_result, run_ablation, sweep
from .checkpoint import load_checkpoint, save_checkpoint
from .classify import ClassifierSpec, checkpoint_curve
from .corpus import (
    SyntheticSpec,
    generate_synthetic,
    load_corpus,
    save_categories,
    save_corpus,
)
from .counterfactual import (
    SubtractionSpec,
    evaluate_counterfactual,
    kernel_nonnegativity,
    subtract,
)
from .hashutil import file_sha256
from .layerprobe import probe_all, save_probe_csv
from .manifest import RunRecorder, find_manifests, load_manifest
from .model import ModelConfig
from .parallel import parallel_map
from .representer import (
    compute_alphas,
    load_index,
    save_annotations,
    save_index,
    threshold_sweep,
    verify_representer,
)
from .reporting import (
    emit_alpha_histogram,
    emit_category_support,
    emit_summary,
    emit_support_per_token,
    emit_threshold_sweep,
    regenerate_reports,
)
from .training import TrainSchedule, head_only_retrain, train
from .type2graph import build_graph, degree_stats, save_degree_csv, save_edge_list


def _tau_arg(text: str) -> float:
    v = float(text)
    if not (0.0 < v <= 1.0):
        raise argparse.ArgumentTypeError(f"tau must lie in (0, 1], got {text}")
    return v


def _gamma_arg(text: str) -> float:
    v = float(text)
    if not (0.0 <= v <= 1.0):
        raise argparse.ArgumentTypeError(f"gamma must lie in [0, 1], got {text}")
    return v


def _positive_arg(text: str) -> float:
    v = float(text)
    if v <= 0:
        raise argparse.ArgumentTypeError(f"value must be positive, got {text}")
    return v


def _default_out() -> str:
    return os.environ.get("SUPPORTLM_OUT", "runs")


def _load_json(path) -> dict:
    return json.loads(Path(path).read_text())


def _config_section(args, name: str) -> dict:
    if args.config is None:
        return {}
    return _load_json(args.config).get(name, {})


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="supportlm", description=__doc__)
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, corpus=True, ckpt=False):
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--config", default=None, help="JSON config file")
        p.add_argument("--out", default=None, help="output directory (default $SUPPORTLM_OUT/<command>)")
        p.add_argument("--threads", type=int, default=1)
        p.add_argument("--tau", type=_tau_arg, default=0.9)
        p.add_argument("--gamma", type=_gamma_arg, default=0.5)
        p.add_argument("--lambda", dest="lam", type=_positive_arg, default=1e-3)
        if corpus:
            p.add_argument("--corpus", required=True)
            p.add_argument("--vocab", type=int, required=True)
            p.add_argument("--context", type=int, default=32)
            p.add_argument("--categories", default=None)
        if ckpt:
            p.add_argument("--ckpt", required=True)

    p = sub.add_parser("gen-corpus", help="generate a deterministic synthetic corpus")
    common(p, corpus=False)

    p = sub.add_parser("train", help="train the mini-LM from scratch")
    common(p, ckpt=False)
    p.add_argument("--steps", type=int, default=1200)
    p.add_argument("--batch", type=int, default=64)
    p.add_argument("--lr", type=float, default=3e-3)

    p = sub.add_parser("head-fit", help="refit the LM head to stationarity")
    common(p, ckpt=True)
    p.add_argument("--tol", type=_positive_arg, default=1e-6)

    p = sub.add_parser("alpha", help="compute support annotations")
    common(p, ckpt=True)

    p = sub.add_parser("verify-rep", help="check the head-decomposition identity")
    common(p, ckpt=True)

    p = sub.add_parser("counterfactual", help="subtract a removal set from all head rows")
    common(p, ckpt=True)
    p.add_argument("--index", required=True)
    p.add_argument("--annotations", default=None)
    p.add_argument("--token", type=int, required=True, action="append", dest="tokens")
    p.add_argument("--selector", default="sv", choices=["sv", "type1", "type2", "random"])

    p = sub.add_parser("graph", help="build the Type-2 token network")
    common(p, ckpt=False)
    p.add_argument("--index", required=True)
    p.add_argument("--k", type=int, default=5)

    p = sub.add_parser("ablate", help="removal-retraining experiment")
    common(p, ckpt=True)
    p.add_argument("--index", required=True)
    p.add_argument("--annotations", required=True)
    p.add_argument("--method", required=True, choices=["hard", "soft", "random"])
    p.add_argument("--regime", required=True, choices=["heads-only", "full-model"])
    p.add_argument("--steps", type=int, default=1200)
    p.add_argument("--batch", type=int, default=64)
    p.add_argument("--lr", type=float, default=3e-3)

    p = sub.add_parser("sweep", help="loss/support curves over a training knob")
    common(p, corpus=False)
    p.add_argument("--knob", required=True, choices=["data-size", "weight-decay", "embedding-dropout"])
    p.add_argument("--grid", required=True, help="comma-separated values")
    p.add_argument("--steps", type=int, default=800)

    p = sub.add_parser("predict-support", help="classify supportness from checkpoint features")
    common(p, ckpt=False)
    p.add_argument("--ckpt", action="append", required=True, dest="ckpts",
                   help="step=path, repeatable; features extracted per checkpoint")
    p.add_argument("--annotations", required=True, help="gold annotation CSV")
    p.add_argument("--features", default="last-hidden,projected-gradient")
    p.add_argument("--classifiers", default="linear,mlp64")
    p.add_argument("--proj-dim", type=int, default=512)
    p.add_argument("--limit", type=int, default=0, help="cap on annotated samples used")

    p = sub.add_parser("probe", help="per-layer head probing")
    common(p, ckpt=True)
    p.add_argument("--tol", type=_positive_arg, default=1e-6)

    p = sub.add_parser("report", help="regenerate figure CSVs from result stores")
    p.add_argument("--from", dest="results", required=True)
    p.add_argument("--out", default=None)

    return parser


def _out_dir(args, command: str) -> Path:
    out = Path(args.out) if args.out else Path(_default_out()) / command
    out.mkdir(parents=True, exist_ok=True)
    return out


def _read_corpus(args):
    return load_corpus(args.corpus, args.vocab, args.context, args.categories)


def _spec_from(args) -> SyntheticSpec:
    section = _config_section(args, "synthetic")
    section.setdefault("seed", args.seed)
    return SyntheticSpec(**section)


def _model_config(args, vocab_size: int) -> ModelConfig:
    section = _config_section(args, "model")
    section.setdefault("vocab_size", vocab_size)
    section.setdefault("seed", args.seed)
    return ModelConfig(**section)


def _schedule(args) -> TrainSchedule:
    section = _config_section(args, "schedule")
    section.setdefault("steps", getattr(args, "steps", 800))
    section.setdefault("batch_windows", getattr(args, "batch", 64))
    section.setdefault("lr", getattr(args, "lr", 3e-3))
    if "split" in section:
        from .corpus import SplitSpec

        section["split"] = SplitSpec(tuple(section["split"]["ratios"]), section["split"].get("seed", 0))
    return TrainSchedule(**section)


# ---------------------------------------------------------------------------
# subcommand handlers
# ---------------------------------------------------------------------------


def cmd_gen_corpus(args, argv) -> int:
    out = _out_dir(args, "gen-corpus")
    spec = _spec_from(args)
    rec = RunRecorder("gen-corpus", argv, out, dataclasses.asdict(spec), {"seed": spec.seed})
    corpus = generate_synthetic(spec)
    save_corpus(corpus, rec.add_output(out / "corpus.txt"))
    save_categories(corpus, rec.add_output(out / "categories.txt"))
    (out / "spec.json").write_text(json.dumps(dataclasses.asdict(spec), indent=2, sort_keys=True) + "\n")
    rec.add_output(out / "spec.json")
    rec.finish()
    print(f"wrote {corpus.n_samples} samples over {len(corpus.documents)} documents to {out}")
    return 0


def cmd_train(args, argv) -> int:
    out = _out_dir(args, "train")
    corpus = _read_corpus(args)
    cfg = _model_config(args, args.vocab)
    schedule = _schedule(args)
    rec = RunRecorder(
        "train",
        argv,
        out,
        {"model": dataclasses.asdict(cfg), "schedule": _schedule_dict(schedule)},
        {"seed": cfg.seed, "split_seed": schedule.split.seed},
    )
    rec.add_input("corpus", args.corpus)
    result = train(corpus, cfg, schedule)
    if result.diverged:
        _error("training diverged (non-finite loss); last good checkpoint retained")
    for step, snap in result.checkpoints:
        save_checkpoint(snap, rec.add_output(out / f"step{step:06d}.ckpt"))
    save_checkpoint(result.best, rec.add_output(out / "best.ckpt"))
    with open(rec.add_output(out / "curve.csv"), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "train_loss", "val_loss"])
        for row in result.curve:
            writer.writerow([row["step"], _r(row["train_loss"]), _r(row["val_loss"])])
    rec.finish()
    print(f"best val loss {result.best.val_loss:.6f} at step {result.best.step}")
    return 1 if result.diverged else 0


def _schedule_dict(schedule: TrainSchedule) -> dict:
    d = dataclasses.asdict(schedule)
    d["split"] = {"ratios": list(schedule.split.ratios), "seed": schedule.split.seed}
    return d


def _r(x):
    return "" if x is None else repr(float(x))


def cmd_head_fit(args, argv) -> int:
    out = _out_dir(args, "head-fit")
    corpus = _read_corpus(args)
    snap = load_checkpoint(args.ckpt)
    rec = RunRecorder("head-fit", argv, out, {"lam": args.lam, "tol": args.tol}, {"seed": args.seed})
    rec.add_input("corpus", args.corpus)
    rec.add_input("ckpt", args.ckpt)
    fitted, fit = head_only_retrain(snap, corpus, args.lam, tol=args.tol)
    save_checkpoint(fitted, rec.add_output(out / "head-fit.ckpt"))
    record = {
        "converged": fit.converged,
        "grad_max": fit.grad_max,
        "n_iter": fit.n_iter,
        "loss": fit.loss,
        "lam": fit.lam,
        "n_samples": fit.n_samples,
    }
    (out / "fit.json").write_text(json.dumps(record, indent=2, sort_keys=True) + "\n")
    rec.add_output(out / "fit.json")
    rec.finish()
    print(f"head fit: grad_max={fit.grad_max:.3e} converged={fit.converged} iters={fit.n_iter}")
    if not fit.converged:
        _error(f"head fit did not reach tolerance {args.tol}; best grad_max {fit.grad_max:.3e}")
    return 0


def cmd_alpha(args, argv) -> int:
    out = _out_dir(args, "alpha")
    corpus = _read_corpus(args)
    snap = load_checkpoint(args.ckpt)
    rec = RunRecorder("alpha", argv, out, {"tau": args.tau, "gamma": args.gamma}, {"seed": args.seed})
    rec.add_input("corpus", args.corpus)
    rec.add_input("ckpt", args.ckpt)
    index = compute_alphas(snap, corpus, args.tau, args.gamma)
    save_index(index, rec.add_output(out / "support_index.csv"))
    save_annotations(index, rec.add_output(out / "annotations.csv"))
    emit_support_per_token(index, rec.add_output(out / "support_per_token.csv"))
    if corpus.categories is not None:
        emit_category_support(index, corpus, rec.add_output(out / "category_support.csv"))
    emit_alpha_histogram(index, rec.add_output(out / "alpha_histogram.csv"))
    taus = [round(0.1 * k, 1) for k in range(1, 11)]
    emit_threshold_sweep(index, taus, rec.add_output(out / "threshold_sweep.csv"))
    emit_summary(index, corpus, rec.add_output(out / "summary.txt"))
    rec.finish()
    sup = index.is_support()
    print(
        f"support {int(sup.sum())}/{index.n_samples} ({float(sup.mean()):.4f}), "
        f"memorized {int(index.memorized.sum())}"
    )
    return 0


def cmd_verify_rep(args, argv) -> int:
    out = _out_dir(args, "verify-rep")
    corpus = _read_corpus(args)
    snap = load_checkpoint(args.ckpt)
    rec = RunRecorder("verify-rep", argv, out, {"lam": args.lam}, {"seed": args.seed})
    rec.add_input("corpus", args.corpus)
    rec.add_input("ckpt", args.ckpt)
    report = verify_representer(snap, corpus, lam=args.lam)
    payload = {
        "max_rel_error": report.max_rel_error,
        "worst_token": report.worst_token,
        "n_samples": report.n_samples,
        "lam": report.lam,
        "checkpoint": report.checkpoint_hash,
    }
    (out / "verify.json").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    rec.add_output(out / "verify.json")
    rec.finish()
    print(f"max relative reconstruction error {report.max_rel_error:.6e}")
    return 0


def cmd_counterfactual(args, argv) -> int:
    out = _out_dir(args, "counterfactual")
    corpus = _read_corpus(args)
    snap = load_checkpoint(args.ckpt)
    index = load_index(args.index, args.annotations)
    rec = RunRecorder(
        "counterfactual",
        argv,
        out,
        {"tokens": args.tokens, "selector": args.selector, "lam": args.lam},
        {"seed": args.seed},
    )
    rec.add_input("corpus", args.corpus)
    rec.add_input("ckpt", args.ckpt)
    rec.add_input("index", args.index)

    def one(v):
        spec = SubtractionSpec(token=v, selector=args.selector, seed=args.seed)
        modified, removed = subtract(snap, spec, index, corpus)
        rep = evaluate_counterfactual(snap, modified, corpus, v, spec=spec, n_removed=removed.size)
        frac = kernel_nonnegativity(snap, corpus, removed, _subset_ids(corpus, v)) if removed.size else 1.0
        return rep, frac

    results = parallel_map(one, args.tokens, args.threads)
    path = rec.add_output(out / "counterfactual.csv")
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["token", "selector", "seed", "n_removed", "loss_full_before", "loss_full_after",
             "loss_subset_before", "loss_subset_after", "mean_p_before", "mean_p_after",
             "kernel_nonneg_fraction", "checkpoint"]
        )
        for rep, frac in results:
            writer.writerow(
                [rep.token, rep.selector, args.seed, rep.n_removed,
                 repr(rep.loss_full_before), repr(rep.loss_full_after),
                 repr(rep.loss_subset_before), repr(rep.loss_subset_after),
                 repr(rep.mean_p_before), repr(rep.mean_p_after),
                 repr(float(frac)), snap.content_hash()]
            )
    rec.finish()
    for rep, frac in results:
        print(
            f"token {rep.token}: subset loss {rep.loss_subset_before:.4f} -> {rep.loss_subset_after:.4f}, "
            f"mean p {rep.mean_p_before:.4f} -> {rep.mean_p_after:.4f} (kernel {frac:.3f})"
        )
    return 0


def _subset_ids(corpus, v):
    ids = corpus.split_ids("train") if corpus.split_tags is not None else np.arange(corpus.n_samples)
    return ids[corpus.sample_target[ids] == v]


def cmd_graph(args, argv) -> int:
    out = _out_dir(args, "graph")
    corpus = _read_corpus(args)
    index = load_index(args.index)
    rec = RunRecorder("graph", argv, out, {"k": args.k}, {"seed": args.seed})
    rec.add_input("corpus", args.corpus)
    rec.add_input("index", args.index)
    graph = build_graph(index, corpus)
    save_edge_list(graph, rec.add_output(out / "type2_edges.txt"))
    save_degree_csv(graph, rec.add_output(out / "type2_degrees.csv"))
    stats = degree_stats(graph, args.k) if graph.n_edges else {"top_out": [], "top_in": [], "n_nodes": 0, "n_edges": 0}
    (out / "graph_stats.json").write_text(json.dumps(stats, indent=2, sort_keys=True) + "\n")
    rec.add_output(out / "graph_stats.json")
    rec.finish()
    print(f"type-2 graph: {stats['n_nodes']} nodes, {stats['n_edges']} edges")
    return 0


def cmd_ablate(args, argv) -> int:
    out = _out_dir(args, "ablate")
    corpus = _read_corpus(args)
    snap = load_checkpoint(args.ckpt)
    index = load_index(args.index, args.annotations)
    plan = AblationPlan(
        method=args.method, regime=args.regime, seed=args.seed, tau=args.tau,
        gamma=args.gamma, lam=args.lam,
    )
    rec = RunRecorder("ablate", argv, out, dataclasses.asdict(plan), {"seed": args.seed})
    rec.add_input("corpus", args.corpus)
    rec.add_input("ckpt", args.ckpt)
    rec.add_input("index", args.index)
    result = run_ablation(plan, corpus, snap, index, _schedule(args))
    append_result(rec.add_output(out / "ablation_results.csv"), plan, result, file_sha256(args.corpus))
    rec.finish()
    print(
        f"{plan.method}/{plan.regime}: test loss {result.test_loss:.4f}, "
        f"support new {result.support_new_before}->{result.support_new_after}, "
        f"orig {result.support_orig_before}->{result.support_orig_after}"
    )
    return 1 if result.diverged else 0


def cmd_sweep(args, argv) -> int:
    out = _out_dir(args, "sweep")
    spec = _spec_from(args)
    cfg = _model_config(args, spec.vocab_size)
    schedule = _schedule(args)
    grid = [float(x) for x in args.grid.split(",") if x]
    rec = RunRecorder(
        "sweep", argv, out,
        {"knob": args.knob, "grid": grid, "synthetic": dataclasses.asdict(spec)},
        {"seed": args.seed},
    )
    rows = sweep(spec, cfg, schedule, args.knob, grid, tau=args.tau, seed=args.seed)
    path = rec.add_output(out / "sweep.csv")
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["knob", "value", "test_loss", "support_proportion", "diverged"])
        for row in rows:
            writer.writerow(
                [row["knob"], repr(row["value"]), repr(row["test_loss"]),
                 repr(row["support_proportion"]), int(row["diverged"])]
            )
    rec.finish()
    for row in rows:
        print(f"{row['knob']}={row['value']}: loss {row['test_loss']:.4f}, support {row['support_proportion']:.4f}")
    return 0


def cmd_predict_support(args, argv) -> int:
    out = _out_dir(args, "predict-support")
    corpus = _read_corpus(args)
    from .features import FeatureSpec

    checkpoints = []
    for item in args.ckpts:
        step_s, _, path = item.partition("=")
        checkpoints.append((int(step_s), load_checkpoint(path)))
    with open(args.annotations) as fh:
        reader = csv.reader(fh)
        next(reader)
        rows = list(reader)
    sample_ids = np.array([int(r[0]) for r in rows])
    labels = np.array([int(r[6]) for r in rows], dtype=np.int8)
    if args.limit and sample_ids.size > args.limit:
        sample_ids = sample_ids[: args.limit]
        labels = labels[: args.limit]

    feature_specs = [
        FeatureSpec(kind=k, proj_dim=args.proj_dim, proj_seed=args.seed)
        for k in args.features.split(",")
        if k
    ]
    classifier_specs = []
    for name in args.classifiers.split(","):
        if name == "linear":
            classifier_specs.append(ClassifierSpec(kind="linear", seed=args.seed))
        elif name.startswith("mlp"):
            width = int(name[3:] or 64)
            classifier_specs.append(ClassifierSpec(kind="mlp", hidden=(width,), seed=args.seed))
        elif name:
            raise ValueError(f"unknown classifier {name!r}")

    rec = RunRecorder(
        "predict-support", argv, out,
        {"features": [f.fingerprint() for f in feature_specs],
         "classifiers": [c.label() for c in classifier_specs]},
        {"seed": args.seed},
    )
    rec.add_input("corpus", args.corpus)
    rec.add_input("annotations", args.annotations)
    rows = checkpoint_curve(
        checkpoints, feature_specs, classifier_specs, corpus, labels, sample_ids,
        split_seed=args.seed, cache_dir=out / "feature-cache",
    )
    path = rec.add_output(out / "accuracy_grid.csv")
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["checkpoint_step", "feature", "classifier", "acc_train", "acc_val", "acc_test", "majority_baseline"])
        for row in rows:
            writer.writerow(
                [row["checkpoint_step"], row["feature"], row["classifier"],
                 repr(row["acc_train"]), repr(row["acc_val"]), repr(row["acc_test"]),
                 repr(row["majority_baseline"])]
            )
    rec.finish()
    for row in rows:
        print(
            f"step {row['checkpoint_step']} {row['feature']} {row['classifier']}: "
            f"test acc {row['acc_test']:.4f} (majority {row['majority_baseline']:.4f})"
        )
    return 0


def cmd_probe(args, argv) -> int:
    out = _out_dir(args, "probe")
    corpus = _read_corpus(args)
    snap = load_checkpoint(args.ckpt)
    rec = RunRecorder("probe", argv, out, {"lam": args.lam, "tol": args.tol, "tau": args.tau, "gamma": args.gamma}, {"seed": args.seed})
    rec.add_input("corpus", args.corpus)
    rec.add_input("ckpt", args.ckpt)
    reports = probe_all(snap, corpus, args.lam, tol=args.tol, tau=args.tau, gamma=args.gamma)
    save_probe_csv(reports, rec.add_output(out / "probe_report.csv"))
    rec.finish()
    for r in reports:
        print(f"layer {r.layer}: non-support {r.nonsupport_count}, memorized {r.memorized_count}")
    return 0


def cmd_report(args, argv) -> int:
    results = Path(args.results)
    out = Path(args.out) if args.out else results / "reports"
    if not results.exists():
        raise FileNotFoundError(f"results directory {results} does not exist")
    manifests = find_manifests(results)
    emitted = regenerate_reports(results, out)
    if not manifests and len(emitted) <= 1:
        print(f"no result stores under {results}; nothing to report")
        return 0
    print(f"emitted {len(emitted)} report files to {out}")
    return 0


class PipelineError(RuntimeError):
    pass


def _error(message: str):
    raise PipelineError(message)


HANDLERS = {
    "gen-corpus": cmd_gen_corpus,
    "train": cmd_train,
    "head-fit": cmd_head_fit,
    "alpha": cmd_alpha,
    "verify-rep": cmd_verify_rep,
    "counterfactual": cmd_counterfactual,
    "graph": cmd_graph,
    "ablate": cmd_ablate,
    "sweep": cmd_sweep,
    "predict-support": cmd_predict_support,
    "probe": cmd_probe,
    "report": cmd_report,
}


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    handler = HANDLERS[args.command]
    try:
        return handler(args, argv)
    except (ValueError, KeyError, FileNotFoundError, FloatingPointError, PipelineError) as e:
        record = {"error": str(e), "type": type(e).__name__, "command": args.command}
        print(json.dumps(record, sort_keys=True), file=sys.stderr)
        return 1


def replay(manifest_path, out_dir) -> int:
    """Re-execute a recorded run with its argv, redirected to `out_dir`."""
    manifest = load_manifest(manifest_path)
    argv = list(manifest.argv)
    if "--out" in argv:
        argv[argv.index("--out") + 1] = str(out_dir)
    else:
        argv += ["--out", str(out_dir)]
    return main(argv)


if __name__ == "__main__":
    sys.exit(main())
