"""Losses and gradients for the surrogate and squared objectives.

The surrogate objective averages Sigma(w.x) - y (w.x) over the batch, where
Sigma is the activation antiderivative; its gradient is the closed-form sum
(1/N) sum (sigma(w.x_j) - y_j) x_j, so quadrature never touches the
training path. The noise-free variants replace y by sigma(w*.x).
"""

from __future__ import annotations

import numpy as np

from .activations import Activation, antiderivative, array_fn, derivative
from .distributions import DomainError


def _as_batch(xs, ys):
    xs = np.asarray(xs, dtype=float)
    ys = np.asarray(ys, dtype=float)
    if xs.ndim != 2 or xs.shape[0] == 0:
        raise DomainError("batch must be a nonempty (n, d) array")
    if ys.shape != (xs.shape[0],):
        raise DomainError("labels must match the batch length")
    return xs, ys


def l2_loss(act: Activation, w, xs, ys) -> float:
    """(1/N) sum (sigma(w.x_j) - y_j)^2."""
    xs, ys = _as_batch(xs, ys)
    res = array_fn(act)(xs @ np.asarray(w, dtype=float)) - ys
    return float(np.mean(res * res))


def l2_grad(act: Activation, w, xs, ys) -> np.ndarray:
    """Gradient of l2_loss: (2/N) sum (sigma - y) sigma'(w.x) x."""
    xs, ys = _as_batch(xs, ys)
    s = xs @ np.asarray(w, dtype=float)
    res = array_fn(act)(s) - ys
    return (2.0 / xs.shape[0]) * ((res * derivative(act, s)) @ xs)


def surrogate_loss(act: Activation, w, xs, ys) -> float:
    """(1/N) sum [Sigma(w.x_j) - y_j (w.x_j)]."""
    xs, ys = _as_batch(xs, ys)
    s = xs @ np.asarray(w, dtype=float)
    sig = np.array([antiderivative(act, t) for t in s])
    return float(np.mean(sig - ys * s))


def surrogate_grad(act: Activation, w, xs, ys) -> np.ndarray:
    """(1/N) sum (sigma(w.x_j) - y_j) x_j, the exact empirical gradient."""
    xs, ys = _as_batch(xs, ys)
    res = array_fn(act)(xs @ np.asarray(w, dtype=float)) - ys
    return (res @ xs) / xs.shape[0]


def noise_free_grad(act: Activation, w, wstar, xs) -> np.ndarray:
    """(1/N) sum (sigma(w.x_j) - sigma(w*.x_j)) x_j."""
    xs = np.asarray(xs, dtype=float)
    if xs.ndim != 2 or xs.shape[0] == 0:
        raise DomainError("sample matrix must be nonempty")
    f = array_fn(act)
    res = f(xs @ np.asarray(w, dtype=float)) - f(xs @ np.asarray(wstar, dtype=float))
    return (res @ xs) / xs.shape[0]


def finite_difference_grad(fn, w, step: float | None = None) -> np.ndarray:
    """Central-difference gradient of a scalar function of w."""
    w = np.asarray(w, dtype=float)
    if step is None:
        step = 1e-5 * (1.0 + float(np.linalg.norm(w)))
    g = np.empty_like(w)
    for i in range(w.size):
        wp = w.copy()
        wm = w.copy()
        wp[i] += step
        wm[i] -= step
        g[i] = (fn(wp) - fn(wm)) / (2.0 * step)
    return g
