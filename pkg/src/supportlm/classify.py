"""Binary supportness classifiers over checkpoint features.

Linear classifiers are fit as convex logistic regressions (deterministic,
init-free); MLPs train with Adam on the recorded-ops engine, selecting the
best-validation epoch. Splits are exact-ratio and derived from sample ids, so
no sample ever lands in two splits.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .convex import fit_binary_logistic
from .corpus import SplitSpec, assign_splits
from .optim import Adam
from .rng import stream

ACTIVATIONS = {"tanh": T.tanh, "relu": T.relu, "gelu": T.gelu}


@dataclass(frozen=True)
class ClassifierSpec:
    kind: str  # "linear" | "mlp"
    hidden: tuple[int, ...] = (64,)
    activation: str = "tanh"
    epochs: int = 40
    batch: int = 256
    lr: float = 1e-3
    seed: int = 0
    l2: float = 1e-4  # linear-fit regularization

    def __post_init__(self):
        if self.kind not in ("linear", "mlp"):
            raise ValueError(f"classifier kind must be 'linear' or 'mlp', got {self.kind!r}")
        if self.kind == "mlp" and (not self.hidden or any(h < 1 for h in self.hidden)):
            raise ValueError("mlp needs at least one positive hidden width")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"activation must be one of {sorted(ACTIVATIONS)}")

    def label(self) -> str:
        if self.kind == "linear":
            return "linear"
        return "mlp" + "x".join(str(h) for h in self.hidden)


@dataclass
class LabeledFeatureSet:
    features: np.ndarray  # [n, dim] float64
    labels: np.ndarray  # [n] in {0, 1}
    split: np.ndarray  # [n] tags 0=train 1=val 2=test
    sample_ids: np.ndarray

    def rows(self, tag: int):
        sel = self.split == tag
        return self.features[sel], self.labels[sel]


def build_feature_set(
    features: np.ndarray,
    labels: np.ndarray,
    sample_ids: np.ndarray,
    ratios=(0.8, 0.1, 0.1),
    seed: int = 0,
) -> LabeledFeatureSet:
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels).astype(np.int8)
    sample_ids = np.asarray(sample_ids)
    tags = assign_splits(sample_ids, SplitSpec(tuple(ratios), seed))
    return LabeledFeatureSet(features=features, labels=labels, split=tags, sample_ids=sample_ids)


@dataclass
class ClassifierResult:
    spec: ClassifierSpec
    accuracy: dict[str, float]
    majority_baseline: float  # majority-class rate on the test split
    predict: object  # callable: raw feature matrix -> {0,1} labels


def _standardizer(x_train: np.ndarray):
    mu = x_train.mean(axis=0)
    sd = x_train.std(axis=0)
    sd[sd < 1e-12] = 1.0
    return lambda x: (x - mu) / sd


def train_classifier(featset: LabeledFeatureSet, spec: ClassifierSpec) -> ClassifierResult:
    x_train, y_train = featset.rows(0)
    x_val, y_val = featset.rows(1)
    x_test, y_test = featset.rows(2)
    classes = np.unique(y_train)
    if classes.size < 2:
        raise ValueError(
            "degenerate task: train split holds a single class; a classifier would "
            "be trivially perfect and meaningless"
        )
    norm = _standardizer(x_train)
    xs = {"train": norm(x_train), "val": norm(x_val), "test": norm(x_test)}
    ys = {"train": y_train, "val": y_val, "test": y_test}

    if spec.kind == "linear":
        fit = fit_binary_logistic(xs["train"], y_train, lam=spec.l2)
        w = fit.theta[1] - fit.theta[0]  # two-class softmax collapses to one margin

        def predict_normed(x):
            return (x @ w > 0).astype(np.int8)

    else:
        params = _mlp_train(xs, ys, spec)

        def predict_normed(x):
            return (_mlp_logits(params, x, spec) > 0).astype(np.int8)

    def raw_predict(x):
        return predict_normed(norm(np.asarray(x, dtype=np.float64)))

    acc = {}
    for name in ("train", "val", "test"):
        if ys[name].size:
            acc[name] = float((predict_normed(xs[name]) == ys[name]).mean())
        else:
            acc[name] = float("nan")
    majority = float(max(y_test.mean(), 1 - y_test.mean())) if y_test.size else float("nan")
    return ClassifierResult(spec=spec, accuracy=acc, majority_baseline=majority, predict=raw_predict)


def _mlp_init(dim: int, spec: ClassifierSpec) -> dict[str, np.ndarray]:
    rng = stream(spec.seed, "mlp-init")
    widths = [dim, *spec.hidden]
    params: dict[str, np.ndarray] = {}
    for i in range(len(widths) - 1):
        scale = 1.0 / np.sqrt(widths[i])
        params[f"w{i}"] = rng.normal(0.0, scale, size=(widths[i], widths[i + 1]))
        params[f"b{i}"] = np.zeros(widths[i + 1])
    params["w_out"] = rng.normal(0.0, 1.0 / np.sqrt(widths[-1]), size=(widths[-1],))
    params["b_out"] = np.zeros(())
    return params


def _mlp_logits(params, x, spec: ClassifierSpec):
    act = ACTIVATIONS[spec.activation]
    h = x
    for i in range(len(spec.hidden)):
        h = act(T.add(T.matmul(h, params[f"w{i}"]), params[f"b{i}"]))
    out = T.add(T.matmul(h, params["w_out"]), params["b_out"])
    return T.value(out)


def _mlp_logits_recorded(params, x, spec: ClassifierSpec):
    act = ACTIVATIONS[spec.activation]
    h = x
    for i in range(len(spec.hidden)):
        h = act(T.add(T.matmul(h, params[f"w{i}"]), params[f"b{i}"]))
    return T.add(T.matmul(h, params["w_out"]), params["b_out"])


def _mlp_train(xs, ys, spec: ClassifierSpec) -> dict[str, np.ndarray]:
    x_train, y_train = xs["train"], ys["train"]
    params = _mlp_init(x_train.shape[1], spec)
    opt = Adam(lr=spec.lr)
    batch_rng = stream(spec.seed, "mlp-batches")
    names = sorted(params)
    best = {k: v.copy() for k, v in params.items()}
    best_val = -1.0
    n = x_train.shape[0]
    for _epoch in range(spec.epochs):
        order = batch_rng.permutation(n)
        for start in range(0, n, spec.batch):
            rows = order[start : start + spec.batch]
            wrapped = {k: T.Var(v, name=k) for k, v in params.items()}
            logits = _mlp_logits_recorded(wrapped, x_train[rows], spec)
            loss, _ = T.sigmoid_bce(logits, y_train[rows])
            grads = dict(zip(names, T.backward(loss, [wrapped[k] for k in names])))
            opt.step(params, grads)
        if ys["val"].size:
            val_acc = float(((_mlp_logits(params, xs["val"], spec) > 0) == ys["val"]).mean())
        else:
            val_acc = float(((_mlp_logits(params, x_train, spec) > 0) == y_train).mean())
        if val_acc > best_val:
            best_val = val_acc
            best = {k: v.copy() for k, v in params.items()}
    return best


def majority_baseline(labels: np.ndarray) -> float:
    labels = np.asarray(labels)
    return float(max(labels.mean(), 1 - labels.mean()))


def checkpoint_curve(
    checkpoints,
    feature_specs,
    classifier_specs,
    corpus,
    gold_labels: np.ndarray,
    sample_ids: np.ndarray,
    ratios=(0.8, 0.1, 0.1),
    split_seed: int = 0,
    cache_dir=None,
) -> list[dict]:
    """Full extract+train+eval cycle per (checkpoint, feature, classifier) cell.

    `checkpoints` is a list of (step, snapshot); gold labels are fixed from the
    designated annotation checkpoint regardless of the feature checkpoint.
    """
    from .features import cached_features, extract_features

    rows = []
    for step, snap in checkpoints:
        for fspec in feature_specs:
            if cache_dir is not None:
                feats = cached_features(cache_dir, snap, corpus, fspec, sample_ids)
            else:
                feats = extract_features(snap, corpus, fspec, sample_ids)
            featset = build_feature_set(feats, gold_labels, sample_ids, ratios, split_seed)
            for cspec in classifier_specs:
                res = train_classifier(featset, cspec)
                rows.append(
                    {
                        "checkpoint_step": step,
                        "feature": fspec.fingerprint(),
                        "classifier": cspec.label(),
                        "acc_train": res.accuracy["train"],
                        "acc_val": res.accuracy["val"],
                        "acc_test": res.accuracy["test"],
                        "majority_baseline": res.majority_baseline,
                    }
                )
    return rows


def data_size_curve(
    featset: LabeledFeatureSet,
    spec: ClassifierSpec,
    fractions,
    seed: int = 0,
) -> list[dict]:
    """Test accuracy as the train split is uniformly subsampled (unstratified)."""
    rng = stream(seed, "data-size-curve")
    train_rows = np.nonzero(featset.split == 0)[0]
    rows = []
    for frac in fractions:
        k = max(2, int(round(train_rows.size * float(frac))))
        keep = np.sort(rng.choice(train_rows, size=min(k, train_rows.size), replace=False))
        split = featset.split.copy()
        dropped = np.setdiff1d(train_rows, keep)
        split[dropped] = -1  # excluded from every split
        sub = LabeledFeatureSet(
            features=featset.features,
            labels=featset.labels,
            split=split,
            sample_ids=featset.sample_ids,
        )
        res = train_classifier(sub, spec)
        rows.append(
            {
                "fraction": float(frac),
                "n_train": int(keep.size),
                "acc_test": res.accuracy["test"],
                "majority_baseline": res.majority_baseline,
            }
        )
    return rows
