"""Activation functions with Lipschitz/derivative certificates.

Each activation carries a declared (alpha, beta) pair: alpha bounds |sigma'|
everywhere, beta lower-bounds sigma' on (0, inf). ReLU and LeakyReLU are
monotone; GeLU and Swish dip below zero on the negative axis but keep the
sign of their argument, and can be clamped to their positive part to obtain
a monotone activation with the same certificate.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np
from scipy.integrate import quad
from scipy.special import expit, ndtr


class ActivationError(ValueError):
    """Bad input or unsatisfiable precondition for an activation op."""


class NumericsError(RuntimeError):
    """Quadrature failed to reach the requested tolerance."""


_QUAD_ABS_TOL = 1e-10

# Declared certificates. GeLU/Swish constants are the published ones for the
# non-monotone class; the grid certifier below measures the actual curves.
_KNOWN = {
    "relu": dict(alpha=1.0, beta=1.0, monotone=True),
    "gelu": dict(alpha=1.1, beta=0.5, monotone=False),
    "swish": dict(alpha=1.2, beta=0.4, monotone=False),
}


@dataclass(frozen=True)
class Activation:
    """An activation with its declared (alpha, beta) certificate.

    ``kind`` is one of relu / leaky_relu / gelu / swish; ``positive_part``
    marks the monotone clamp t -> max(sigma(t), 0) of a non-monotone base.
    """

    name: str
    kind: str
    alpha: float
    beta: float
    monotone: bool
    leak: float = 0.0
    positive_part: bool = False


def make_activation(ident: str) -> Activation:
    """Build an activation from its config string.

    Accepted forms: "relu", "leaky_relu:<lam>", "gelu", "swish".
    """
    ident = ident.strip().lower()
    if ident.startswith("leaky_relu:"):
        lam = float(ident.split(":", 1)[1])
        if not 0.0 <= lam <= 0.5:
            raise ActivationError(f"leaky_relu parameter must be in [0, 1/2], got {lam}")
        return Activation(
            name=ident, kind="leaky_relu", alpha=1.0 - lam, beta=1.0 - lam,
            monotone=True, leak=lam,
        )
    if ident in _KNOWN:
        k = _KNOWN[ident]
        return Activation(name=ident, kind=ident, alpha=k["alpha"], beta=k["beta"],
                          monotone=k["monotone"])
    raise ActivationError(f"unknown activation {ident!r}")


def _base_eval(a: Activation, t: np.ndarray) -> np.ndarray:
    if a.kind == "relu":
        return np.maximum(t, 0.0)
    if a.kind == "leaky_relu":
        return np.where(t >= 0.0, (1.0 - a.leak) * t, a.leak * t)
    if a.kind == "gelu":
        return t * ndtr(t)
    if a.kind == "swish":
        return t * expit(t)
    raise ActivationError(f"unknown activation kind {a.kind!r}")


def _base_derivative(a: Activation, t: np.ndarray) -> np.ndarray:
    # Kinks resolve to the right-derivative, which preserves sigma' >= beta
    # on (0, inf).
    if a.kind == "relu":
        return np.where(t >= 0.0, 1.0, 0.0)
    if a.kind == "leaky_relu":
        return np.where(t >= 0.0, 1.0 - a.leak, a.leak)
    if a.kind == "gelu":
        phi = np.exp(-0.5 * t * t) / math.sqrt(2.0 * math.pi)
        return ndtr(t) + t * phi
    if a.kind == "swish":
        s = expit(t)
        return s * (1.0 + t * (1.0 - s))
    raise ActivationError(f"unknown activation kind {a.kind!r}")


def _check_finite(t) -> np.ndarray:
    t = np.asarray(t, dtype=float)
    if not np.all(np.isfinite(t)):
        raise ActivationError("non-finite activation input")
    return t


def evaluate(a: Activation, t):
    """sigma(t); vectorized, exact closed forms for all four families."""
    t = _check_finite(t)
    v = _base_eval(a, t)
    if a.positive_part:
        v = np.maximum(v, 0.0)
    return float(v) if np.isscalar(t) or t.ndim == 0 else v


def derivative(a: Activation, t):
    """sigma'(t), right-derivative at kinks."""
    t = _check_finite(t)
    d = _base_derivative(a, t)
    if a.positive_part:
        # sign agreement makes [sigma]_+ equal sigma on t >= 0 and 0 below.
        d = np.where(t >= 0.0, d, 0.0)
    return float(d) if np.isscalar(t) or t.ndim == 0 else d


def antiderivative(a: Activation, t: float) -> float:
    """Sigma(t) = integral of sigma from 0 to t, with Sigma(0) = 0.

    ReLU/LeakyReLU use the piecewise-quadratic closed form; GeLU and Swish
    fall back to adaptive quadrature at 1e-10 absolute tolerance.
    """
    t = float(_check_finite(t))
    if a.positive_part and t <= 0.0:
        return 0.0  # integrand is identically zero on the negative axis
    if a.kind == "relu":
        return max(t, 0.0) ** 2 / 2.0
    if a.kind == "leaky_relu":
        if t >= 0.0:
            return (1.0 - a.leak) * t * t / 2.0
        return a.leak * t * t / 2.0
    val, err = quad(lambda r: evaluate(a, r), 0.0, t,
                    epsabs=_QUAD_ABS_TOL, epsrel=1e-12, limit=200)
    if err > 1e-8:
        raise NumericsError(
            f"antiderivative quadrature for {a.name} at t={t} reported error {err:.2e}")
    return val


def certify_unbounded(a: Activation, grid_size: int, t_max: float) -> tuple[float, float]:
    """Measure (alpha_hat, beta_hat) on a grid.

    alpha_hat is the max of |sigma'| over [-t_max, t_max]; beta_hat the min
    of sigma' over (0, t_max]. Guards declared constants against drift.
    """
    if grid_size < 100:
        raise ActivationError("grid_size must be >= 100")
    if not t_max > 0:
        raise ActivationError("t_max must be positive")
    full = np.linspace(-t_max, t_max, grid_size)
    pos = np.linspace(t_max / grid_size, t_max, grid_size)
    alpha_hat = float(np.max(np.abs(derivative(a, full))))
    beta_hat = float(np.min(derivative(a, pos)))
    return alpha_hat, beta_hat


def truncate_positive(a: Activation) -> Activation:
    """The positive part t -> max(sigma(t), 0) of a non-monotone activation.

    The result is monotone and inherits the declared certificate. Applying
    this to an already-monotone activation is refused rather than silently
    returned, so callers cannot double-clamp.
    """
    if a.monotone:
        raise ActivationError(f"{a.name} is already monotone; positive-part clamp refused")
    return replace(a, name=f"pos_{a.name}", monotone=True, positive_part=True)


# --- raw callables for hot paths (no input validation) ---

_ACT_CODES = {"relu": 0, "leaky_relu": 1, "gelu": 2, "swish": 3}


def kernel_code(a: Activation) -> tuple[int, float, bool]:
    """(code, leak, positive_part) triple consumed by the numba kernels."""
    return _ACT_CODES[a.kind], a.leak, a.positive_part


def array_fn(a: Activation):
    """Vectorized sigma without validation, for batch label generation."""
    if a.positive_part:
        return lambda t: np.maximum(_base_eval(a, np.asarray(t, dtype=float)), 0.0)
    return lambda t: _base_eval(a, np.asarray(t, dtype=float))
