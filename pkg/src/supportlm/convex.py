"""L2-regularized softmax regression driven to stationarity.

The objective is mean negative log-likelihood plus lam * ||theta||_F^2 over a
frozen feature matrix. Stationarity (max-abs gradient <= tol) is the contract
every downstream identity check relies on, so all fits run in float64 and
report the achieved gradient norm.

Methods are all gradient-only: plain gradient descent with a Lipschitz step,
Nesterov acceleration with adaptive restart, and a small L-BFGS. L-BFGS is the
default because plain GD needs O(condition-number) iterations to reach tight
tolerances on realistic feature matrices.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import log_softmax_rows


@dataclass
class HeadFit:
    theta: np.ndarray  # [n_classes, dim]
    loss: float
    grad_max: float
    n_iter: int
    converged: bool
    method: str
    lam: float
    n_samples: int


def head_loss_grad(theta, phi, targets, lam):
    """Loss and gradient of the regularized NLL; everything float64."""
    n = phi.shape[0]
    logits = phi @ theta.T
    logp = log_softmax_rows(logits)
    rows = np.arange(n)
    loss = -logp[rows, targets].mean() + lam * float((theta * theta).sum())
    resid = np.exp(logp)
    resid[rows, targets] -= 1.0
    grad = resid.T @ phi / n + 2.0 * lam * theta
    return loss, grad


def _lipschitz_bound(phi, lam):
    # Multinomial-logistic gradient is (1/2)*lambda_max(Phi^T Phi / N)-Lipschitz.
    gram = phi.T @ phi / phi.shape[0]
    top = float(np.linalg.eigvalsh(gram)[-1])
    return 0.5 * top + 2.0 * lam


def fit_softmax_head(
    phi: np.ndarray,
    targets: np.ndarray,
    n_classes: int,
    lam: float,
    tol: float = 1e-6,
    method: str = "lbfgs",
    max_iter: int | None = None,
    theta0: np.ndarray | None = None,
) -> HeadFit:
    """Fit theta to a stationary point of the regularized loss.

    Non-convergence within the iteration budget returns the best iterate seen
    with converged=False rather than raising; callers that need exactness must
    check the flag.
    """
    if lam <= 0:
        raise ValueError("lam must be positive for a stationary head fit")
    phi = np.ascontiguousarray(phi, dtype=np.float64)
    targets = np.asarray(targets)
    if targets.min() < 0 or targets.max() >= n_classes:
        raise ValueError("target id outside class range")
    dim = phi.shape[1]
    theta = (
        np.zeros((n_classes, dim)) if theta0 is None else np.array(theta0, dtype=np.float64)
    )

    if method == "gd":
        budget = max_iter if max_iter is not None else 200_000
        result = _fit_gd(theta, phi, targets, lam, tol, budget, nesterov=False)
    elif method == "nesterov":
        budget = max_iter if max_iter is not None else 50_000
        result = _fit_gd(theta, phi, targets, lam, tol, budget, nesterov=True)
    elif method == "lbfgs":
        budget = max_iter if max_iter is not None else 3000
        result = _fit_lbfgs(theta, phi, targets, lam, tol, budget)
    else:
        raise ValueError(f"unknown fit method {method!r}")

    theta, loss, gmax, it = result
    return HeadFit(
        theta=theta,
        loss=loss,
        grad_max=gmax,
        n_iter=it,
        converged=gmax <= tol,
        method=method,
        lam=lam,
        n_samples=phi.shape[0],
    )


def _fit_gd(theta, phi, targets, lam, tol, max_iter, nesterov):
    lr = 1.0 / _lipschitz_bound(phi, lam)
    x = theta
    y = theta.copy()
    t_mom = 1.0
    best = (np.inf, theta.copy(), np.inf)
    loss = np.inf
    it = 0
    for it in range(1, max_iter + 1):
        loss, grad = head_loss_grad(y if nesterov else x, phi, targets, lam)
        gmax = float(np.abs(grad).max())
        if gmax < best[2]:
            best = (loss, (y if nesterov else x).copy(), gmax)
        if gmax <= tol:
            return (y if nesterov else x), loss, gmax, it
        if nesterov:
            x_new = y - lr * grad
            t_new = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * t_mom * t_mom))
            y_new = x_new + ((t_mom - 1.0) / t_new) * (x_new - x)
            # adaptive restart: momentum is discarded when it fights the gradient
            if float((grad * (x_new - x)).sum()) > 0.0:
                t_new = 1.0
                y_new = x_new
            x, y, t_mom = x_new, y_new, t_new
        else:
            x = x - lr * grad
    loss_f, grad_f = head_loss_grad(best[1], phi, targets, lam)
    return best[1], loss_f, float(np.abs(grad_f).max()), it


def _fit_lbfgs(theta, phi, targets, lam, tol, max_iter, history=12):
    shape = theta.shape

    def f_g(x):
        loss, grad = head_loss_grad(x.reshape(shape), phi, targets, lam)
        return loss, grad.reshape(-1)

    x = theta.reshape(-1).copy()
    loss, grad = f_g(x)
    s_list: list[np.ndarray] = []
    y_list: list[np.ndarray] = []
    rho_list: list[float] = []
    best = (loss, x.copy(), float(np.abs(grad).max()))
    it = 0
    for it in range(1, max_iter + 1):
        gmax = float(np.abs(grad).max())
        if gmax < best[2]:
            best = (loss, x.copy(), gmax)
        if gmax <= tol:
            return x.reshape(shape), loss, gmax, it

        # two-loop recursion
        q = grad.copy()
        alphas = []
        for s, y, rho in zip(reversed(s_list), reversed(y_list), reversed(rho_list)):
            a = rho * float(s @ q)
            q -= a * y
            alphas.append(a)
        if y_list:
            gamma = float(s_list[-1] @ y_list[-1]) / float(y_list[-1] @ y_list[-1])
        else:
            gamma = 1.0 / _lipschitz_bound(phi, lam)
        q *= gamma
        for s, y, rho, a in zip(s_list, y_list, rho_list, reversed(alphas)):
            b = rho * float(y @ q)
            q += (a - b) * s
        direction = -q

        # backtracking Armijo line search
        slope = float(grad @ direction)
        if slope >= 0:  # stale curvature pairs; restart from steepest descent
            s_list, y_list, rho_list = [], [], []
            direction = -grad / _lipschitz_bound(phi, lam)
            slope = float(grad @ direction)
        step = 1.0
        for _ in range(40):
            x_new = x + step * direction
            loss_new, grad_new = f_g(x_new)
            if loss_new <= loss + 1e-4 * step * slope:
                break
            step *= 0.5
        else:
            break  # no descent at tiny steps: numerically converged

        s = x_new - x
        yv = grad_new - grad
        sy = float(s @ yv)
        if sy > 1e-12 * float(yv @ yv) ** 0.5 * float(s @ s) ** 0.5:
            s_list.append(s)
            y_list.append(yv)
            rho_list.append(1.0 / sy)
            if len(s_list) > history:
                s_list.pop(0)
                y_list.pop(0)
                rho_list.pop(0)
        x, loss, grad = x_new, loss_new, grad_new

    gmax = float(np.abs(grad).max())
    if gmax < best[2]:
        best = (loss, x.copy(), gmax)
    return best[1].reshape(shape), best[0], best[2], it


def fit_binary_logistic(features, labels, lam=1e-4, tol=1e-8, max_iter=2000):
    """Two-class convenience wrapper; labels in {0, 1}."""
    return fit_softmax_head(features, labels.astype(np.int64), 2, lam, tol=tol, max_iter=max_iter)
