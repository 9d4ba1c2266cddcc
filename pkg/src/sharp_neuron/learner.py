"""Mini-batch SGD on the surrogate gradient, with derived parameters.

The loop draws a fresh batch every iteration, clamps labels to [-M, M]
(after a positive-part clamp when the activation is non-monotone), steps
along the empirical surrogate gradient, and optionally projects back onto
the comparator ball. Parameter derivation follows the published formulas:

    eta = mu rho^2 / (32 alpha^2 B^2)
    T   = ceil((256 alpha^2 B^2 / (mu^2 rho^2)) ln(256 W^2 / eps))
    M   = alpha W H2^{-1}(eps / (4 alpha^2 W^2))
    H4(r_eps) <= c_H eps

The theoretical batch size c_N (d/delta_iter)(r_eps^2 + alpha^2 M^2) with
delta_iter = delta/T is recorded as ``n_theory`` but is far beyond desk
scale, so the operative default is the floor max(d, 64); sweeps locate the
practically sufficient batch size empirically.

The per-iteration arithmetic is compiled with numba so that derived runs
(T in the millions) stay inside interactive budgets; samples are drawn in
fixed-size chunks from a single stream, which leaves the draw order, and
hence every iterate, bit-reproducible for a given seed.
"""

from __future__ import annotations

import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from numba import njit

from .activations import Activation, array_fn, kernel_code, truncate_positive
from .datasets import PlantedInstance, apply_noise, clamp_labels_array
from .distributions import (
    ConfigError,
    DistributionSpec,
    DomainError,
    h2_inverse,
    h4_inverse,
    rng_for,
    sample_scalars,
)
from .surrogate import l2_loss

_CHUNK_CAP = 4096
_FILL_STREAMS = 4


class NumericAbort(RuntimeError):
    """Training hit a non-finite gradient; carries the offending iteration."""

    def __init__(self, iteration: int, seed: int, stream: int):
        super().__init__(
            f"non-finite gradient at iteration {iteration} (seed={seed}, stream={stream})")
        self.iteration = iteration
        self.seed = seed
        self.stream = stream


@dataclass
class LearnerConfig:
    """Resolved run parameters.

    ``derive`` records whether T/N/eta/M/r_eps came from the formulas or
    the caller; ``n_theory`` echoes the formula batch size even when the
    operative N is the floor.
    """

    W: float
    eps: float
    delta: float
    mu: float
    T: int
    N: int
    eta: float
    M: float
    r_eps: float
    derive: bool = True
    project: str = "none"  # none | ball_W
    c_N: float = 1.0
    c_H: float = 1.0
    n_theory: int = 0
    degenerate_m: bool = False
    stop_grad_threshold: float = 0.0

    def resolved(self) -> dict:
        """Every resolved parameter, for self-describing run outputs."""
        return {
            "W": self.W, "eps": self.eps, "delta": self.delta, "mu": self.mu,
            "T": self.T, "N": self.N, "eta": self.eta, "M": self.M,
            "r_eps": self.r_eps, "derive": self.derive, "project": self.project,
            "c_N": self.c_N, "c_H": self.c_H, "n_theory": self.n_theory,
            "degenerate_m": self.degenerate_m,
            "stop_grad_threshold": self.stop_grad_threshold,
        }


def derive_params(spec: DistributionSpec, act: Activation, W: float, eps: float,
                  delta: float, mu: float, c_N: float = 1.0, c_H: float = 1.0,
                  n_policy: str = "floor", project: str = "none") -> LearnerConfig:
    """Fill T, N, eta, M, r_eps from (W, eps, delta, mu) and the envelopes.

    n_policy "floor" uses max(d, 64) as the operative batch size (the
    formula value is echoed in n_theory); "theory" applies the formula.
    """
    if not (0.0 < mu < 1.0):
        raise ConfigError(f"mu must lie in (0, 1), got {mu}")
    if not eps > 0.0:
        raise ConfigError("eps must be positive")
    if not 0.0 < delta < 1.0:
        raise ConfigError("delta must lie in (0, 1)")
    if project not in ("none", "ball_W"):
        raise ConfigError(f"unknown projection {project!r}")
    alpha, rho, B = act.alpha, spec.tail_rho, spec.tail_B
    kappa = eps / (4.0 * alpha ** 2 * W ** 2)
    r_m = h2_inverse(spec, kappa)
    M = alpha * W * r_m
    degenerate = r_m == 0.0
    r_eps = h4_inverse(spec, c_H * eps)
    eta = mu * rho ** 2 / (32.0 * alpha ** 2 * B ** 2)
    T = int(math.ceil((256.0 * alpha ** 2 * B ** 2 / (mu ** 2 * rho ** 2))
                      * math.log(256.0 * W ** 2 / eps)))
    delta_iter = delta / T
    n_theory = int(math.ceil(c_N * (spec.dim / delta_iter)
                             * (r_eps ** 2 + alpha ** 2 * M ** 2)))
    n_floor = max(spec.dim, 64)
    N = max(n_floor, n_theory) if n_policy == "theory" else n_floor
    return LearnerConfig(W=W, eps=eps, delta=delta, mu=mu, T=T, N=N, eta=eta,
                         M=M, r_eps=r_eps, derive=True, project=project,
                         c_N=c_N, c_H=c_H, n_theory=n_theory,
                         degenerate_m=degenerate)


@dataclass
class TrainTrace:
    """Per-iteration training record; row 0 is the initial state.

    ``l2_holdout`` and ``wallclock_ms`` are refreshed at chunk boundaries
    and carried forward in between (derived runs have millions of
    iterations; evaluating the holdout at each would dominate runtime).
    """

    iterations: np.ndarray
    dist_sq: np.ndarray | None
    grad_norm: np.ndarray
    l2_holdout: np.ndarray
    wallclock_ms: np.ndarray
    completed: int
    holdout_n: int = 0
    stopped_early: bool = False

    def __len__(self) -> int:
        return self.completed + 1


@njit(cache=True)
def _act_scalar(code: int, leak: float, pos: bool, s: float) -> float:
    if code == 0:
        v = s if s > 0.0 else 0.0
    elif code == 1:
        v = (1.0 - leak) * s if s >= 0.0 else leak * s
    elif code == 2:
        v = s * 0.5 * (1.0 + math.erf(s / 1.4142135623730951))
    else:
        if s >= 0.0:
            v = s / (1.0 + math.exp(-s))
        else:
            e = math.exp(s)
            v = s * e / (1.0 + e)
    if pos and v < 0.0:
        v = 0.0
    return v


@njit(cache=True)
def _act_deriv_scalar(code: int, leak: float, pos: bool, s: float) -> float:
    if pos and s < 0.0:
        return 0.0
    if code == 0:
        return 1.0 if s >= 0.0 else 0.0
    if code == 1:
        return (1.0 - leak) if s >= 0.0 else leak
    if code == 2:
        phi = math.exp(-0.5 * s * s) / 2.5066282746310002
        return 0.5 * (1.0 + math.erf(s / 1.4142135623730951)) + s * phi
    sig = 1.0 / (1.0 + math.exp(-s)) if s >= 0.0 else math.exp(s) / (1.0 + math.exp(s))
    return sig * (1.0 + s * (1.0 - sig))


@njit(cache=True)
def _sgd_chunk(X, Y, w, wstar, has_wstar, eta, code, leak, pos, project_w,
               use_l2_grad, grad_norm, dist_sq, offset, stop_threshold):
    """Run len(X) iterations in place; returns (#done, abort_flag)."""
    b, N, d = X.shape
    g = np.empty(d)
    for i in range(b):
        for l in range(d):
            g[l] = 0.0
        for j in range(N):
            s = 0.0
            for l in range(d):
                s += X[i, j, l] * w[l]
            r = _act_scalar(code, leak, pos, s) - Y[i, j]
            if use_l2_grad:
                r *= 2.0 * _act_deriv_scalar(code, leak, pos, s)
            for l in range(d):
                g[l] += r * X[i, j, l]
        gg = 0.0
        for l in range(d):
            g[l] /= N
            gg += g[l] * g[l]
        if not math.isfinite(gg):
            return i, 1
        gn = math.sqrt(gg)
        grad_norm[offset + i + 1] = gn
        for l in range(d):
            w[l] -= eta * g[l]
        if project_w > 0.0:
            nw = 0.0
            for l in range(d):
                nw += w[l] * w[l]
            nw = math.sqrt(nw)
            if nw > project_w:
                scale = project_w / nw
                for l in range(d):
                    w[l] *= scale
        if has_wstar:
            dd = 0.0
            for l in range(d):
                e = w[l] - wstar[l]
                dd += e * e
            dist_sq[offset + i + 1] = dd
        if stop_threshold > 0.0 and gn < stop_threshold:
            return i + 1, 2
    return b, 0


def _run_loop(config: LearnerConfig, spec: DistributionSpec, instance: PlantedInstance,
              mode: str, seed: int, holdout_n: int, use_l2_grad: bool):
    if mode not in ("monotone", "nonmonotone"):
        raise ConfigError(f"unknown mode {mode!r}")
    base_act = instance.activation
    if mode == "nonmonotone":
        if base_act.monotone:
            raise ConfigError("nonmonotone mode requires a non-monotone activation")
        grad_act = truncate_positive(base_act)
        positive_labels = True
    else:
        grad_act = base_act
        positive_labels = False

    d, T, N = spec.dim, config.T, config.N
    if T < 0 or N < 1:
        raise ConfigError("T must be >= 0 and N >= 1")
    code, leak, pos = kernel_code(grad_act)
    label_fn = array_fn(base_act)
    wstar = np.asarray(instance.wstar, dtype=float)
    project_w = config.W if config.project == "ball_W" else 0.0
    m_clamp = config.M if config.M > 0.0 else np.inf

    # x draws are split over a fixed number of logical substreams so the
    # fill can run on a small thread pool; the layout (substream k owns
    # elements [m k/4, m (k+1)/4) of each chunk) is a constant of the
    # algorithm, so results never depend on the actual worker count.
    rngs_x = [rng_for(seed, 10, k) for k in range(_FILL_STREAMS)]
    rng_noise = rng_for(instance.noise.seed, 11, seed)
    rng_holdout = rng_for(seed, 12)

    holdout_xs = sample_scalars(spec, rng_holdout, holdout_n * d).reshape(holdout_n, d)
    holdout_clean = label_fn(holdout_xs @ wstar)
    holdout_ys = apply_noise(instance.noise, holdout_clean, rng_holdout)

    w = np.zeros(d)
    grad_norm = np.full(T + 1, np.nan)
    dist = np.full(T + 1, np.nan)
    holdout = np.full(T + 1, np.nan)
    wall = np.zeros(T + 1)
    dist[0] = float(np.dot(w - wstar, w - wstar))
    holdout[0] = l2_loss(base_act, w, holdout_xs, holdout_ys)

    chunk = max(1, min(_CHUNK_CAP, -(-T // 64)))
    x_buf = np.empty(chunk * N * d)
    s_buf = np.empty(chunk * N)
    t0 = time.perf_counter()
    done = 0
    stopped = False
    with ThreadPoolExecutor(max_workers=min(_FILL_STREAMS, os.cpu_count() or 1)) as pool:
        while done < T and not stopped:
            b = min(chunk, T - done)
            m = b * N * d
            bounds = [m * k // _FILL_STREAMS for k in range(_FILL_STREAMS + 1)]

            def fill(k):
                lo, hi = bounds[k], bounds[k + 1]
                if hi > lo:
                    sample_scalars(spec, rngs_x[k], hi - lo, out=x_buf[lo:hi])

            list(pool.map(fill, range(_FILL_STREAMS)))
            flat = x_buf[:m].reshape(b * N, d)
            X = flat.reshape(b, N, d)
            s = np.dot(flat, wstar, out=s_buf[: b * N])
            clean = label_fn(s)
            ys = apply_noise(instance.noise, clean, rng_noise)
            Y = clamp_labels_array(ys, m_clamp, positive_labels).reshape(b, N)
            n_ok, flag = _sgd_chunk(X, Y, w, wstar, True, config.eta, code, leak,
                                    pos, project_w, use_l2_grad, grad_norm, dist,
                                    done, config.stop_grad_threshold)
            if flag == 1:
                raise NumericAbort(done + n_ok, seed, 10)
            done += n_ok
            now_ms = (time.perf_counter() - t0) * 1e3
            lo = done - n_ok + 1
            wall[lo:done + 1] = now_ms
            holdout[done] = l2_loss(base_act, w, holdout_xs, holdout_ys)
            if flag == 2:
                stopped = True
    # carry holdout evaluations forward between chunk boundaries
    idx = np.arange(done + 1)
    have = ~np.isnan(holdout[:done + 1])
    filled = np.maximum.accumulate(np.where(have, idx, 0))
    holdout[:done + 1] = holdout[filled]
    trace = TrainTrace(iterations=idx, dist_sq=dist[:done + 1],
                       grad_norm=grad_norm[:done + 1],
                       l2_holdout=holdout[:done + 1],
                       wallclock_ms=wall[:done + 1], completed=done,
                       holdout_n=holdout_n, stopped_early=stopped)
    return w, trace


def train(config: LearnerConfig, spec: DistributionSpec, instance: PlantedInstance,
          mode: str = "monotone", seed: int = 0, holdout_n: int = 4096):
    """SGD on the surrogate gradient from w = 0; returns (w_T, trace)."""
    return _run_loop(config, spec, instance, mode, seed, holdout_n, use_l2_grad=False)


def baseline_l2_gd(config: LearnerConfig, spec: DistributionSpec,
                   instance: PlantedInstance, seed: int = 0, holdout_n: int = 4096):
    """Identical loop stepping on the nonconvex squared-loss gradient."""
    return _run_loop(config, spec, instance, "monotone", seed, holdout_n,
                     use_l2_grad=True)


def stop_check(trace: TrainTrace, config: LearnerConfig) -> bool:
    """True when the last recorded gradient norm fell below the threshold."""
    if config.stop_grad_threshold <= 0.0 or trace.completed == 0:
        return False
    return bool(trace.grad_norm[trace.completed] < config.stop_grad_threshold)
