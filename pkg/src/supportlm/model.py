"""Decoder-only transformer sized for desk-scale analysis runs.

The forward pass is written once against the dual-dispatch ops in
`tensor`, so the same code serves recorded training steps and plain-numpy
inference. Hidden states are exposed per layer at every position; the last
entry is the post-final-LayerNorm vector, i.e. exactly what the LM head
multiplies, which is the representation all head-refit analyses use.
"""

from __future__ import annotations

import copy
import json
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import tensor as T
from .corpus import Corpus
from .rng import stream

MASK_VALUE = -1e9


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    d_model: int = 32
    n_layers: int = 2
    n_heads: int = 2
    context_len: int = 32
    dropout: float = 0.0  # embedding dropout, active only in training mode
    weight_decay: float = 0.0  # decoupled decay during full-model training
    seed: int = 0
    dtype: str = "f64"
    tie_embeddings: bool = False

    def __post_init__(self):
        if min(self.vocab_size, self.d_model, self.n_layers, self.n_heads, self.context_len) < 1:
            raise ValueError("all model sizes must be >= 1")
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model {self.d_model} not divisible by {self.n_heads} heads")
        if not (0.0 <= self.dropout < 1.0):
            raise ValueError("dropout rate must lie in [0, 1)")
        if self.dtype not in ("f32", "f64"):
            raise ValueError("dtype must be 'f32' or 'f64'")

    @property
    def np_dtype(self):
        return np.float32 if self.dtype == "f32" else np.float64

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @staticmethod
    def from_json(text: str) -> "ModelConfig":
        return ModelConfig(**json.loads(text))


def init_params(cfg: ModelConfig) -> dict[str, np.ndarray]:
    rng = stream(cfg.seed, "model-init")
    dt = cfg.np_dtype
    d = cfg.d_model
    std = 0.02
    resid_std = std / np.sqrt(2.0 * cfg.n_layers)

    def normal(shape, scale=std):
        return (rng.normal(0.0, scale, size=shape)).astype(dt)

    params: dict[str, np.ndarray] = {
        "tok_emb": normal((cfg.vocab_size, d)),
        "pos_emb": normal((cfg.context_len, d)),
        "ln_f.g": np.ones(d, dtype=dt),
        "ln_f.b": np.zeros(d, dtype=dt),
    }
    for i in range(cfg.n_layers):
        p = f"block{i}."
        params[p + "ln1.g"] = np.ones(d, dtype=dt)
        params[p + "ln1.b"] = np.zeros(d, dtype=dt)
        params[p + "attn.w_qkv"] = normal((d, 3 * d))
        params[p + "attn.b_qkv"] = np.zeros(3 * d, dtype=dt)
        params[p + "attn.w_o"] = normal((d, d), resid_std)
        params[p + "attn.b_o"] = np.zeros(d, dtype=dt)
        params[p + "ln2.g"] = np.ones(d, dtype=dt)
        params[p + "ln2.b"] = np.zeros(d, dtype=dt)
        params[p + "mlp.w1"] = normal((d, 4 * d))
        params[p + "mlp.b1"] = np.zeros(4 * d, dtype=dt)
        params[p + "mlp.w2"] = normal((4 * d, d), resid_std)
        params[p + "mlp.b2"] = np.zeros(d, dtype=dt)
    if not cfg.tie_embeddings:
        params["head"] = normal((cfg.vocab_size, d))
    return params


def run_model(params, cfg: ModelConfig, tokens, *, train=False, drop_mask=None, want_hiddens=False):
    """Forward over [B, L] token rows.

    Returns (logits [B, L, V], hiddens) where hiddens is a list of [B, L, d]
    per-layer states (last entry post-final-LN) or None. Accepts parameter
    dicts of plain arrays or recorded Vars.
    """
    tokens = np.asarray(tokens)
    B, L = tokens.shape
    if L > cfg.context_len:
        raise ValueError(f"input length {L} exceeds context {cfg.context_len}")
    d, H = cfg.d_model, cfg.n_heads
    dh = d // H

    h = T.add(T.embedding(params["tok_emb"], tokens), T.embedding(params["pos_emb"], np.arange(L)))
    if train and cfg.dropout > 0.0:
        if drop_mask is None:
            raise ValueError("training with dropout requires a mask")
        h = T.mul(h, drop_mask)

    mask = np.triu(np.full((L, L), MASK_VALUE, dtype=cfg.np_dtype), k=1)
    hiddens = [] if want_hiddens else None
    for i in range(cfg.n_layers):
        p = f"block{i}."
        a = T.layer_norm(h, params[p + "ln1.g"], params[p + "ln1.b"])
        qkv = T.add(T.matmul(a, params[p + "attn.w_qkv"]), params[p + "attn.b_qkv"])
        q, k, v = T.split_last(qkv, 3)

        def heads(x):
            return T.transpose(T.reshape(x, (B, L, H, dh)), (0, 2, 1, 3))

        q, k, v = heads(q), heads(k), heads(v)
        scores = T.mul(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(dh))
        att = T.softmax(T.add(scores, mask), axis=-1)
        o = T.reshape(T.transpose(T.matmul(att, v), (0, 2, 1, 3)), (B, L, d))
        o = T.add(T.matmul(o, params[p + "attn.w_o"]), params[p + "attn.b_o"])
        h = T.add(h, o)

        m = T.layer_norm(h, params[p + "ln2.g"], params[p + "ln2.b"])
        m = T.gelu(T.add(T.matmul(m, params[p + "mlp.w1"]), params[p + "mlp.b1"]))
        m = T.add(T.matmul(m, params[p + "mlp.w2"]), params[p + "mlp.b2"])
        h = T.add(h, m)
        if want_hiddens and i < cfg.n_layers - 1:
            hiddens.append(h)

    hf = T.layer_norm(h, params["ln_f.g"], params["ln_f.b"])
    if want_hiddens:
        hiddens.append(hf)
    head = params["tok_emb"] if cfg.tie_embeddings else params["head"]
    logits = T.matmul(hf, T.transpose(head, (1, 0)))
    return logits, hiddens


@dataclass
class ModelSnapshot:
    """Frozen parameters plus the config and checkpoint metadata."""

    config: ModelConfig
    params: dict[str, np.ndarray]
    step: int = 0
    val_loss: float | None = None
    head_stationary: bool = False
    head_lambda: float | None = None
    head_grad_max: float | None = None
    head_fit_n: int | None = None
    _hash: str | None = field(default=None, repr=False, compare=False)

    def head_matrix(self) -> np.ndarray:
        return self.params["tok_emb"] if self.config.tie_embeddings else self.params["head"]

    def clone(self) -> "ModelSnapshot":
        out = replace(self, params={k: v.copy() for k, v in self.params.items()})
        out._hash = None
        return out

    def astype(self, dtype: str) -> "ModelSnapshot":
        if dtype == self.config.dtype:
            return self
        cfg = replace(self.config, dtype=dtype)
        params = {k: v.astype(cfg.np_dtype) for k, v in self.params.items()}
        out = replace(self, config=cfg, params=params)
        out._hash = None
        return out

    def content_hash(self) -> str:
        if self._hash is None:
            from .checkpoint import snapshot_hash

            self._hash = snapshot_hash(self)
        return self._hash

    def check_finite(self) -> None:
        for name, arr in self.params.items():
            if not np.isfinite(arr).all():
                raise FloatingPointError(f"parameter {name!r} holds non-finite values")


def snapshot_from_init(cfg: ModelConfig) -> ModelSnapshot:
    return ModelSnapshot(config=cfg, params=init_params(cfg), step=0)


def forward_with_hiddens(snapshot: ModelSnapshot, prefix) -> tuple[np.ndarray, list[np.ndarray]]:
    """Next-token distribution and per-layer final-position states for one prefix."""
    prefix = np.asarray(prefix)
    if prefix.ndim != 1 or prefix.size == 0:
        raise ValueError("prefix must be a nonempty 1-d token sequence")
    logits, hiddens = run_model(
        snapshot.params, snapshot.config, prefix[None, :], want_hiddens=True
    )
    row = T.value(logits)[0, -1]
    logp = T.log_softmax_rows(row)
    probs = np.exp(logp)
    if not np.isfinite(probs).all():
        raise FloatingPointError("non-finite probabilities in forward pass")
    return probs, [T.value(h)[0, -1] for h in hiddens]


# ---------------------------------------------------------------------------
# batched corpus-level evaluation helpers
# ---------------------------------------------------------------------------


def _locate(corpus: Corpus, sample_ids: np.ndarray):
    """Map sample ids to (group, row, col) positions in the window plan."""
    plan = corpus.window_plan()
    n = corpus.n_samples
    grp = np.full(n, -1, np.int32)
    row = np.full(n, -1, np.int32)
    col = np.full(n, -1, np.int32)
    for gi, g in enumerate(plan):
        mask = g.sample_ids >= 0
        ids = g.sample_ids[mask]
        grp[ids] = gi
        rr, cc = np.nonzero(mask)
        row[ids] = rr
        col[ids] = cc
    return plan, grp[sample_ids], row[sample_ids], col[sample_ids]


def _group_batches(corpus: Corpus, sample_ids: np.ndarray, batch_rows: int):
    """Yield (group, input-row chunk, sel, local_row, col) covering all samples.

    `sel` indexes into `sample_ids`; (local_row, col) locate each selected
    sample inside the chunk's forward output.
    """
    plan, grp, row, col = _locate(corpus, sample_ids)
    for gi, g in enumerate(plan):
        sel_g = np.nonzero(grp == gi)[0]
        if sel_g.size == 0:
            continue
        need_rows = np.unique(row[sel_g])
        for start in range(0, need_rows.size, batch_rows):
            chunk = need_rows[start : start + batch_rows]
            in_chunk = sel_g[np.isin(row[sel_g], chunk)]
            local_row = np.searchsorted(chunk, row[in_chunk])
            yield g, chunk, in_chunk, local_row, col[in_chunk]


def sample_hiddens(
    snapshot: ModelSnapshot,
    corpus: Corpus,
    sample_ids: np.ndarray | None = None,
    dtype=np.float64,
    batch_rows: int = 256,
) -> np.ndarray:
    """Per-sample hidden states, shape [n, n_layers, d]; float64 by default."""
    snap = snapshot.astype("f64") if dtype == np.float64 else snapshot
    cfg = snap.config
    if sample_ids is None:
        sample_ids = np.arange(corpus.n_samples)
    sample_ids = np.asarray(sample_ids)
    out = np.empty((sample_ids.size, cfg.n_layers, cfg.d_model), dtype=dtype)
    for g, chunk, sel, local_row, cols in _group_batches(corpus, sample_ids, batch_rows):
        _, hiddens = run_model(snap.params, cfg, g.inputs[chunk], want_hiddens=True)
        for layer, h in enumerate(hiddens):
            out[sel, layer] = T.value(h)[local_row, cols]
    return out


def stream_probability_rows(
    snapshot: ModelSnapshot,
    corpus: Corpus,
    sample_ids: np.ndarray,
    consume,
    batch_rows: int = 256,
) -> None:
    """Feed (ids, targets, prob-rows) chunks to `consume`; rows are float64.

    Full probability rows are never accumulated here; callers keep only what
    they need.
    """
    snap = snapshot.astype("f64")
    cfg = snap.config
    sample_ids = np.asarray(sample_ids)
    for g, chunk, sel, local_row, cols in _group_batches(corpus, sample_ids, batch_rows):
        logits, _ = run_model(snap.params, cfg, g.inputs[chunk], want_hiddens=False)
        rows = T.value(logits)[local_row, cols]
        probs = np.exp(T.log_softmax_rows(rows))
        if not np.isfinite(probs).all():
            raise FloatingPointError("non-finite probabilities during evaluation")
        ids = sample_ids[sel]
        consume(ids, corpus.sample_target[ids], probs)


def phi_matrix(
    snapshot: ModelSnapshot,
    corpus: Corpus,
    sample_ids: np.ndarray | None = None,
    layer: int = -1,
    dtype=np.float64,
) -> np.ndarray:
    """Final-position representation of each sample at one layer (default: head input)."""
    h = sample_hiddens(snapshot, corpus, sample_ids, dtype=dtype)
    return np.ascontiguousarray(h[:, layer, :])


def evaluate_nll(
    snapshot: ModelSnapshot,
    corpus: Corpus,
    sample_ids: np.ndarray,
    return_target_probs: bool = False,
):
    """Mean NLL over the given samples; optionally each sample's p(y|x)."""
    sample_ids = np.asarray(sample_ids)
    p_target = np.empty(sample_ids.size, dtype=np.float64)
    slot = {int(s): i for i, s in enumerate(sample_ids)}

    def consume(ids, targets, probs):
        vals = probs[np.arange(ids.size), targets]
        pos = np.array([slot[int(s)] for s in ids], dtype=np.int64)
        p_target[pos] = vals

    stream_probability_rows(snapshot, corpus, sample_ids, consume)
    nll = float(-np.log(np.maximum(p_target, 1e-300)).mean())
    if return_target_probs:
        return nll, p_target
    return nll
