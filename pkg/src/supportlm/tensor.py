"""Reverse-mode autodiff over numpy arrays, sized for a small transformer.

Ops accept plain ndarrays or recorded `Var`s and return a `Var` whenever any
input is one, so a single forward implementation serves both training
(recorded) and inference (plain numpy). `backward` walks the recorded graph
once in reverse topological order and accumulates adjoints additively.

Also hosts the central-finite-difference oracle used to audit every analytic
gradient; the oracle never touches the tape machinery.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np


class Var:
    """One node of the recorded computation: a value plus its provenance.

    `parents` are the input nodes; `vjp(g)` maps the output adjoint to one
    adjoint per parent. Leaf nodes (parameters, constants promoted by an op)
    have no parents and no vjp.
    """

    __slots__ = ("data", "parents", "vjp", "name")

    def __init__(self, data, parents=(), vjp=None, name: str | None = None):
        self.data = np.asarray(data)
        self.parents: tuple[Var, ...] = tuple(parents)
        self.vjp: Callable | None = vjp
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):  # pragma: no cover
        return f"Var(shape={self.data.shape}, name={self.name!r})"


def value(x) -> np.ndarray:
    return x.data if isinstance(x, Var) else np.asarray(x)


def _any_recorded(*xs) -> bool:
    return any(isinstance(x, Var) for x in xs)


def _node(out, parents, vjp):
    recorded = [p for p in parents if isinstance(p, Var)]
    if not recorded:
        return out
    # vjp is built against the full parent list; non-Var parents get their
    # adjoint discarded at accumulation time.
    return Var(out, parents=recorded, vjp=vjp)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum `grad` down to `shape`, undoing numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def backward(root: Var, params: Sequence[Var]) -> list[np.ndarray]:
    """Adjoint of a scalar `root` with respect to each of `params`.

    Parameters not reachable from `root` get an exactly-zero gradient.
    Each reachable node is visited exactly once.
    """
    if not isinstance(root, Var):
        raise ValueError("backward root is not a recorded value (no tape to walk)")
    if value(root).size != 1:
        raise ValueError(f"backward root must be scalar, got shape {value(root).shape}")

    # Iterative post-order topological sort (graphs here are small but can
    # nest deeper than the default recursion limit during long unrolls).
    order: list[Var] = []
    seen: set[int] = set()
    stack: list[tuple[Var, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in seen:
                stack.append((p, False))

    adjoint: dict[int, np.ndarray] = {
        id(root): np.ones_like(root.data, dtype=root.data.dtype)
    }
    for node in reversed(order):
        if node.vjp is None:
            continue  # leaves keep their accumulated adjoint
        g = adjoint.pop(id(node), None)
        if g is None:
            continue
        parent_grads = node.vjp(g)
        for p, pg in zip(node.parents, parent_grads):
            if pg is None:
                continue
            acc = adjoint.get(id(p))
            adjoint[id(p)] = pg if acc is None else acc + pg

    out = []
    for p in params:
        g = adjoint.get(id(p))
        out.append(np.zeros_like(p.data) if g is None else g)
    return out


# ---------------------------------------------------------------------------
# primitive ops
# ---------------------------------------------------------------------------


def add(a, b):
    av, bv = value(a), value(b)
    out = av + bv

    def vjp(g):
        return (_unbroadcast(g, av.shape), _unbroadcast(g, bv.shape))

    return _node(out, (a, b), lambda g: _pick(vjp(g), (a, b)))


def sub(a, b):
    av, bv = value(a), value(b)
    out = av - bv

    def vjp(g):
        return (_unbroadcast(g, av.shape), -_unbroadcast(g, bv.shape))

    return _node(out, (a, b), lambda g: _pick(vjp(g), (a, b)))


def mul(a, b):
    av, bv = value(a), value(b)
    out = av * bv

    def vjp(g):
        return (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape))

    return _node(out, (a, b), lambda g: _pick(vjp(g), (a, b)))


def _pick(grads, parents):
    """Keep only the adjoints of recorded parents, in parent order."""
    return tuple(gr for gr, p in zip(grads, parents) if isinstance(p, Var))


def matmul(a, b):
    av, bv = value(a), value(b)
    out = np.matmul(av, bv)

    def vjp(g):
        ga = np.matmul(g, np.swapaxes(bv, -1, -2))
        gb = np.matmul(np.swapaxes(av, -1, -2), g)
        return (_unbroadcast(ga, av.shape), _unbroadcast(gb, bv.shape))

    return _node(out, (a, b), lambda g: _pick(vjp(g), (a, b)))


def embedding(weight, ids):
    """Row gather `weight[ids]`; adjoint scatter-adds into the table."""
    wv = value(weight)
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= wv.shape[0]):
        bad = int(ids.flat[np.argmax((ids < 0) | (ids >= wv.shape[0]))])
        raise ValueError(f"token id {bad} outside table of {wv.shape[0]} rows")
    out = wv[ids]

    def vjp(g):
        gw = np.zeros_like(wv)
        np.add.at(gw, ids, g)
        return (gw,)

    return _node(out, (weight,), vjp)


def gather_rows(x, idx):
    """`x[idx]` along axis 0 for 2-d `x`."""
    xv = value(x)
    idx = np.asarray(idx)
    out = xv[idx]

    def vjp(g):
        gx = np.zeros_like(xv)
        np.add.at(gx, idx, g)
        return (gx,)

    return _node(out, (x,), vjp)


def reshape(x, shape):
    xv = value(x)
    out = xv.reshape(shape)
    return _node(out, (x,), lambda g: (g.reshape(xv.shape),))


def transpose(x, axes):
    xv = value(x)
    out = np.transpose(xv, axes)
    inv = np.argsort(axes)
    return _node(out, (x,), lambda g: (np.transpose(g, inv),))


def split_last(x, n):
    """Split the last axis into `n` equal parts."""
    xv = value(x)
    if xv.shape[-1] % n:
        raise ValueError(f"last axis {xv.shape[-1]} not divisible by {n}")
    parts = np.split(xv, n, axis=-1)
    if not isinstance(x, Var):
        return parts
    width = xv.shape[-1] // n
    out = []
    for i, part in enumerate(parts):

        def vjp(g, i=i):
            gx = np.zeros_like(xv)
            gx[..., i * width : (i + 1) * width] = g
            return (gx,)

        out.append(Var(part, parents=(x,), vjp=vjp))
    return out


def tanh(x):
    out = np.tanh(value(x))
    return _node(out, (x,), lambda g: (g * (1.0 - out * out),))


def relu(x):
    xv = value(x)
    out = np.maximum(xv, 0.0)
    return _node(out, (x,), lambda g: (g * (xv > 0),))


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(x):
    """tanh-approximate GELU (the GPT-2 variant)."""
    xv = value(x)
    inner = _GELU_C * (xv + 0.044715 * xv**3)
    t = np.tanh(inner)
    out = 0.5 * xv * (1.0 + t)

    def vjp(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * xv**2)
        dx = 0.5 * (1.0 + t) + 0.5 * xv * (1.0 - t * t) * dinner
        return (g * dx,)

    return _node(out, (x,), vjp)


def softmax(x, axis=-1):
    xv = value(x)
    shifted = xv - xv.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - dot),)

    return _node(out, (x,), vjp)


def layer_norm(x, gain, bias, eps=1e-5):
    """Normalize the last axis to zero mean / unit variance, then affine."""
    xv, gv, bv = value(x), value(gain), value(bias)
    mu = xv.mean(axis=-1, keepdims=True)
    var = xv.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xv - mu) * inv
    out = xhat * gv + bv

    def vjp(g):
        d = xv.shape[-1]
        gxhat = g * gv
        gx = inv * (
            gxhat
            - gxhat.mean(axis=-1, keepdims=True)
            - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True)
        )
        axes = tuple(range(g.ndim - 1))
        ggain = (g * xhat).sum(axis=axes)
        gbias = g.sum(axis=axes)
        del d
        return (gx, ggain, gbias)

    return _node(out, (x, gain, bias), lambda g: _pick(vjp(g), (x, gain, bias)))


def mean_all(x):
    xv = value(x)
    out = np.asarray(xv.mean())
    n = xv.size
    return _node(out, (x,), lambda g: (np.full_like(xv, g / n),))


def sum_all(x):
    xv = value(x)
    out = np.asarray(xv.sum())
    return _node(out, (x,), lambda g: (np.full_like(xv, g),))


def log_softmax_rows(logits: np.ndarray) -> np.ndarray:
    m = logits.max(axis=-1, keepdims=True)
    lse = m + np.log(np.exp(logits - m).sum(axis=-1, keepdims=True))
    return logits - lse


def softmax_cross_entropy(logits, targets):
    """Mean NLL of `targets` under row-wise softmax of 2-d `logits`.

    Returns (loss, probs); probs is always a plain array. Stable via
    log-sum-exp; target ids are validated against the vocabulary axis.
    """
    lv = value(logits)
    targets = np.asarray(targets)
    if lv.ndim != 2:
        raise ValueError(f"logits must be 2-d, got shape {lv.shape}")
    n, v = lv.shape
    if targets.shape != (n,):
        raise ValueError(f"targets shape {targets.shape} does not match batch {n}")
    if targets.size and (targets.min() < 0 or targets.max() >= v):
        bad_pos = int(np.argmax((targets < 0) | (targets >= v)))
        raise ValueError(
            f"target id {int(targets[bad_pos])} at row {bad_pos} outside vocab of {v}"
        )
    logp = log_softmax_rows(lv)
    probs = np.exp(logp)
    rows = np.arange(n)
    loss = -logp[rows, targets].mean()

    def vjp(g):
        dl = probs.copy()
        dl[rows, targets] -= 1.0
        dl *= float(g) / n
        return (dl,)

    return _node(np.asarray(loss), (logits,), vjp), probs


def softmax_target_prob(logits, target: int):
    """p(target | row) for a single-row logit vector, as a scalar node.

    d p_y / d logit_u = p_y * (1[u = y] - p_u).
    """
    lv = value(logits)
    if lv.ndim != 1:
        raise ValueError(f"expected 1-d logits, got shape {lv.shape}")
    if not (0 <= target < lv.shape[0]):
        raise ValueError(f"target id {target} outside vocab of {lv.shape[0]}")
    logp = log_softmax_rows(lv)
    probs = np.exp(logp)
    py = probs[target]

    def vjp(g):
        dl = -py * probs
        dl[target] += py
        return (float(g) * dl,)

    return _node(np.asarray(py), (logits,), vjp)


def sigmoid_bce(logits, labels):
    """Mean binary cross entropy with logits; returns (loss, probs)."""
    lv = value(logits)
    labels = np.asarray(labels, dtype=lv.dtype)
    # stable: log(1 + e^-|x|) + max(x, 0) - x*y
    loss_terms = np.maximum(lv, 0) - lv * labels + np.log1p(np.exp(-np.abs(lv)))
    probs = 1.0 / (1.0 + np.exp(-lv))
    n = lv.size

    def vjp(g):
        return ((probs - labels) * (float(g) / n),)

    return _node(np.asarray(loss_terms.mean()), (logits,), vjp), probs


# ---------------------------------------------------------------------------
# finite-difference oracle
# ---------------------------------------------------------------------------


def finite_difference(
    f: Callable[[], float],
    param: np.ndarray,
    flat_index: int,
    h: float = 1e-5,
) -> float:
    """Central difference of scalar-valued `f` in one parameter coordinate.

    `f` must read `param` by reference; the coordinate is restored afterwards.
    Independent of the tape machinery by construction.
    """
    flat = param.reshape(-1)
    old = flat[flat_index]
    flat[flat_index] = old + h
    up = float(f())
    flat[flat_index] = old - h
    down = float(f())
    flat[flat_index] = old
    return (up - down) / (2.0 * h)


def check_gradients(
    f: Callable[[], Var],
    params: dict[str, np.ndarray],
    coords: list[tuple[str, int]],
    h: float = 1e-5,
    rel_tol: float = 1e-4,
    abs_floor: float = 1e-8,
) -> dict:
    """Compare backward() against central differences at chosen coordinates.

    `f` rebuilds the recorded loss from `params`; `coords` are (name, flat
    index) pairs. Returns per-coordinate errors and the worst relative error,
    where relative error uses an absolute floor for near-zero derivatives.
    """
    names = sorted(params)
    wrapped = {k: Var(params[k], name=k) for k in names}
    root = f(wrapped)
    grads = dict(zip(names, backward(root, [wrapped[k] for k in names])))

    rows = []
    worst = 0.0
    for name, idx in coords:
        analytic = float(grads[name].reshape(-1)[idx])
        numeric = finite_difference(
            lambda: value(f({k: params[k] for k in names})), params[name], idx, h=h
        )
        denom = max(abs(numeric), abs(analytic), abs_floor / rel_tol)
        rel = abs(analytic - numeric) / denom
        worst = max(worst, rel)
        rows.append(
            {"param": name, "index": idx, "analytic": analytic, "numeric": numeric, "rel_err": rel}
        )
    return {"coords": rows, "max_rel_err": worst, "passed": worst <= rel_tol}
