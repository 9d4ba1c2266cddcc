"""Numerical probes of the structural claims behind the learner.

Every probe is Monte-Carlo with explicit standard errors, and no PASS is
asserted beyond three standard errors of its own estimates. Closed-form
oracles are used only where the 1D/2D Gaussian integrals reduce to phi/Phi.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .activations import Activation, array_fn
from .datasets import PlantedInstance, apply_noise
from .distributions import (
    DistributionSpec,
    DomainError,
    h2,
    h4,
    rng_for,
    sample_scalars,
    tail_h,
)
from .learner import TrainTrace, derive_params, train
from .surrogate import l2_loss

_EXCLUDE_NEAR_WSTAR = 1e-3


@dataclass
class SharpnessReport:
    """Minimum normalized alignment of the surrogate gradient field."""

    mu_bar_hat: float
    probes: int
    min_ratio_point: np.ndarray
    excluded_ball_radius: float
    n_mc: int
    max_se: float
    passed: bool
    collinear_ratio: float = math.nan
    collinear_se: float = math.nan
    degenerate: bool = False
    ratios: np.ndarray = field(repr=False, default=None)


def make_probes(wstar: np.ndarray, n_probes: int, rng: np.random.Generator) -> np.ndarray:
    """Probe points in B(2||w*||): half uniform in the ball, a quarter on
    its boundary sphere, a quarter on near-optimum shells. The collinear
    boundary point 2w* is always included; points closer than 1e-3 to w*
    are resampled away."""
    d = wstar.size
    radius = 2.0 * np.linalg.norm(wstar)
    n_ball = n_probes // 2
    n_sphere = (n_probes - n_ball) // 2
    n_shell = n_probes - n_ball - n_sphere
    points = []
    g = rng.standard_normal((n_ball, d))
    g /= np.linalg.norm(g, axis=1, keepdims=True)
    u = rng.random(n_ball) ** (1.0 / d)
    points.append(radius * u[:, None] * g)
    g = rng.standard_normal((max(n_sphere - 1, 0), d))
    if n_sphere > 0:
        points.append(2.0 * wstar[None, :])
    if n_sphere > 1:
        g /= np.linalg.norm(g, axis=1, keepdims=True)
        points.append(radius * g)
    shell_radii = np.array([0.01, 0.1, 0.5]) * np.linalg.norm(wstar)
    g = rng.standard_normal((n_shell, d))
    g /= np.linalg.norm(g, axis=1, keepdims=True)
    rr = shell_radii[rng.integers(0, shell_radii.size, n_shell)]
    points.append(wstar[None, :] + rr[:, None] * g)
    pts = np.concatenate(points, axis=0)
    dist = np.linalg.norm(pts - wstar[None, :], axis=1)
    bad = dist < _EXCLUDE_NEAR_WSTAR
    while bad.any():
        g = rng.standard_normal((int(bad.sum()), d))
        g /= np.linalg.norm(g, axis=1, keepdims=True)
        pts[bad] = wstar[None, :] + 0.01 * np.linalg.norm(wstar) * g
        bad = np.linalg.norm(pts - wstar[None, :], axis=1) < _EXCLUDE_NEAR_WSTAR
    return pts


def _probe_ratios(xs: np.ndarray, resid_star: np.ndarray, act: Activation,
                  probes: np.ndarray, wstar: np.ndarray, block: int = 64):
    """Per-probe MC estimate of grad . (w - w*) / ||w - w*||^2 with its SE.

    resid_star is sigma(w*.x) for the noise-free field or the noisy labels y
    for the noisy field; both share the same estimator shape. Probes are
    processed in blocks to bound the projection matrix size.
    """
    f = array_fn(act)
    s_star = xs @ wstar
    diffs = probes - wstar[None, :]
    n_mc = xs.shape[0]
    n_probes = probes.shape[0]
    ratios = np.empty(n_probes)
    ses = np.empty(n_probes)
    for lo in range(0, n_probes, block):
        hi = min(lo + block, n_probes)
        proj = xs @ diffs[lo:hi].T  # (n_mc, block)
        vals = (f(s_star[:, None] + proj) - resid_star[:, None]) * proj
        dd = np.einsum("ij,ij->i", diffs[lo:hi], diffs[lo:hi])
        ratios[lo:hi] = vals.mean(axis=0) / dd
        ses[lo:hi] = vals.std(axis=0, ddof=1) / math.sqrt(n_mc) / dd
    return ratios, ses


def probe_noise_free_sharpness(spec: DistributionSpec, act: Activation, wstar,
                               n_probes: int = 500, n_mc: int = 200_000,
                               seed: int = 0, probes: np.ndarray | None = None) -> SharpnessReport:
    """Minimum of grad Lbar(w).(w-w*)/||w-w*||^2 over probe points.

    PASS requires the minimum to clear three times the largest probe SE.
    """
    wstar = np.asarray(wstar, dtype=float)
    if not np.linalg.norm(wstar) > 0.0:
        raise DomainError("wstar must be nonzero")
    if n_probes < 100 or n_mc < 100_000:
        raise DomainError("sharpness probe needs n_probes >= 100 and n_mc >= 1e5")
    rng = rng_for(seed, 20)
    if probes is None:
        probes = make_probes(wstar, n_probes, rng)
    xs = sample_scalars(spec, rng, n_mc * spec.dim).reshape(n_mc, spec.dim)
    resid = array_fn(act)(xs @ wstar)
    ratios, ses = _probe_ratios(xs, resid, act, probes, wstar)
    i_min = int(np.argmin(ratios))
    mu_hat = float(ratios[i_min])
    max_se = float(ses.max())
    collinear = 2.0 * wstar
    ci = np.where(np.all(np.isclose(probes, collinear[None, :]), axis=1))[0]
    c_ratio, c_se = (float(ratios[ci[0]]), float(ses[ci[0]])) if ci.size else (math.nan, math.nan)
    return SharpnessReport(
        mu_bar_hat=mu_hat, probes=probes.shape[0], min_ratio_point=probes[i_min],
        excluded_ball_radius=_EXCLUDE_NEAR_WSTAR, n_mc=n_mc, max_se=max_se,
        passed=bool(mu_hat > 3.0 * max_se), collinear_ratio=c_ratio,
        collinear_se=c_se, ratios=ratios)


def probe_noisy_sharpness(spec: DistributionSpec, act: Activation,
                          instance: PlantedInstance, n_probes: int = 500,
                          n_mc: int = 200_000, seed: int = 0,
                          noise_free_report: SharpnessReport | None = None) -> SharpnessReport:
    """Same probe against noisy labels, restricted to the region where the
    noisy surrogate stays sharp: the ball B(2||w*||) minus the exclusion
    ball of squared radius (20 B / (rho mu_bar^2)) L2(w*) around w*.

    PASS requires the minimum ratio to reach mu_bar_hat/2 within 3 SEs.
    """
    wstar = np.asarray(instance.wstar, dtype=float)
    if noise_free_report is None:
        noise_free_report = probe_noise_free_sharpness(
            spec, act, wstar, n_probes, n_mc, seed=seed)
    mu_bar = noise_free_report.mu_bar_hat
    excl_sq = (20.0 * spec.tail_B / (spec.tail_rho * max(mu_bar, 1e-12) ** 2)
               * instance.opt_upper_bound)
    excl = math.sqrt(excl_sq)
    if excl >= 3.0 * np.linalg.norm(wstar):
        # the exclusion ball swallows B(2||w*||): no probe region remains
        return SharpnessReport(math.nan, 0, wstar, excl, n_mc, math.nan,
                               passed=False, degenerate=True)
    rng = rng_for(seed, 21)
    probes = make_probes(wstar, n_probes, rng)
    dist = np.linalg.norm(probes - wstar[None, :], axis=1)
    keep = dist > max(excl, _EXCLUDE_NEAR_WSTAR)
    if not keep.any():
        return SharpnessReport(math.nan, 0, wstar, excl, n_mc, math.nan,
                               passed=False, degenerate=True)
    probes = probes[keep]
    xs = sample_scalars(spec, rng, n_mc * spec.dim).reshape(n_mc, spec.dim)
    clean = array_fn(act)(xs @ wstar)
    ys = apply_noise(instance.noise, clean, rng_for(instance.noise.seed, 22, seed))
    ratios, ses = _probe_ratios(xs, ys, act, probes, wstar)
    i_min = int(np.argmin(ratios))
    max_se = float(ses.max())
    passed = bool(ratios[i_min] >= 0.5 * mu_bar - 3.0 * max_se)
    return SharpnessReport(
        mu_bar_hat=float(ratios[i_min]), probes=probes.shape[0],
        min_ratio_point=probes[i_min], excluded_ball_radius=excl, n_mc=n_mc,
        max_se=max_se, passed=passed, ratios=ratios)


@dataclass
class LandscapeReport:
    """Measured constant of the small-surrogate-gap => small-L2 implication."""

    ratio: float
    budget: float
    l2_final: float
    cert: float
    mu_bar_hat: float
    eps: float
    passed: bool


def check_landscape(spec: DistributionSpec, act: Activation,
                    instance: PlantedInstance, eps: float, mu: float = 0.2,
                    seed: int = 0, n_mc: int = 1_000_000,
                    w_hat: np.ndarray | None = None) -> LandscapeReport:
    """Run the learner to convergence and compare L2(w_hat) against the
    budget ((alpha B)/(rho mu_bar_hat))^2 (cert + alpha eps)."""
    if w_hat is None:
        config = derive_params(spec, act, instance.W, eps, 0.1, mu)
        w_hat, _ = train(config, spec, instance, seed=seed)
    report = probe_noise_free_sharpness(spec, act, instance.wstar, seed=seed)
    rng = rng_for(seed, 23)
    xs = sample_scalars(spec, rng, n_mc * spec.dim).reshape(n_mc, spec.dim)
    clean = array_fn(act)(xs @ instance.wstar)
    ys = apply_noise(instance.noise, clean, rng_for(instance.noise.seed, 24, seed))
    l2_final = l2_loss(act, w_hat, xs, ys)
    denom = instance.opt_upper_bound + act.alpha * eps
    ratio = l2_final / denom
    budget = (act.alpha * spec.tail_B / (spec.tail_rho * max(report.mu_bar_hat, 1e-12))) ** 2
    return LandscapeReport(ratio=float(ratio), budget=float(budget),
                           l2_final=float(l2_final), cert=instance.opt_upper_bound,
                           mu_bar_hat=report.mu_bar_hat, eps=eps,
                           passed=bool(ratio <= budget))


def fit_convergence(trace: TrainTrace) -> tuple[float, float, float]:
    """(per-iteration contraction factor, fit R^2, floor value).

    Fits log ||w_t - w*||^2 against t over the pre-floor segment. The trace
    is condensed to at most 200 blocks of log-medians; the segment ends at
    the first block whose value fails to drop by 10% relative to the value
    five blocks earlier.
    """
    if trace.dist_sq is None:
        raise DomainError("convergence fit needs a trace with known w*")
    n = trace.completed
    if n < 10:
        raise DomainError("convergence fit needs at least 10 iterations")
    vals = np.maximum(trace.dist_sq[1:n + 1], 1e-300)
    logs = np.log(vals)
    n_blocks = min(200, n)
    edges = np.linspace(0, n, n_blocks + 1).astype(int)
    centers = np.empty(n_blocks)
    block_logs = np.empty(n_blocks)
    for i in range(n_blocks):
        lo, hi = edges[i], max(edges[i] + 1, edges[i + 1])
        block_logs[i] = np.median(logs[lo:hi])
        centers[i] = 0.5 * (lo + hi - 1) + 1.0  # iteration index of block center
    end = n_blocks
    for i in range(5, n_blocks):
        if block_logs[i] > block_logs[i - 5] + math.log(0.9):
            end = i
            break
    end = max(end, 2)
    t_fit, y_fit = centers[:end], block_logs[:end]
    slope, intercept = np.polyfit(t_fit, y_fit, 1)
    resid = y_fit - (slope * t_fit + intercept)
    ss_res = float(np.sum(resid ** 2))
    ss_tot = float(np.sum((y_fit - y_fit.mean()) ** 2))
    r_sq = 1.0 if ss_tot <= 1e-30 else 1.0 - ss_res / ss_tot
    floor = float(np.exp(np.median(block_logs[end:]))) if end < n_blocks \
        else float(vals[-1])
    # centers are in iteration units, so the slope is already per iteration
    return float(np.exp(slope)), float(r_sq), floor


@dataclass
class TailReport:
    """Envelope checks of H2/H4 against the declared tail function."""

    family: str
    rows: list
    h2_zero: float
    h4_zero: float
    moment_bound: float
    passed: bool


def _tail_directions(spec: DistributionSpec, rng: np.random.Generator) -> np.ndarray:
    d = spec.dim
    dirs = [np.eye(d)[0], np.ones(d) / math.sqrt(d)]
    if d >= 2:
        two = np.zeros(d)
        two[:2] = 1.0 / math.sqrt(2.0)
        dirs.append(two)
    g = rng.standard_normal(d)
    dirs.append(g / np.linalg.norm(g))
    return np.array(dirs)


def check_tail_facts(spec: DistributionSpec, rs=(1.0, 2.0, 4.0, 8.0),
                     n_mc: int = 1_000_000, seed: int = 0) -> TailReport:
    """Verify H2(r) <= (1+2B) r^2 h(r), the matching H4 envelope, and the
    fourth-moment cap 5B/rho, at Monte-Carlo precision (3 SE slack).

    The sub-exponential H4 constant (1 + 64 B^4) applies to every family
    except the polynomial-tail one, which uses (1 + 4B/rho).
    """
    B, rho = spec.tail_B, spec.tail_rho
    heavy = spec.family == "heavy_tail_k"
    c2 = 1.0 + 2.0 * B
    c4 = (1.0 + 4.0 * B / rho) if heavy else (1.0 + 64.0 * B ** 4)
    rng = rng_for(seed, 30)
    dirs = _tail_directions(spec, rng)
    xs = sample_scalars(spec, rng, n_mc * spec.dim).reshape(n_mc, spec.dim)
    proj = xs @ dirs.T
    rows = []
    passed = True
    for r in rs:
        h = tail_h(spec, r)
        h2_max = h2_se = h4_max = h4_se = 0.0
        for j in range(dirs.shape[0]):
            z = proj[:, j]
            m = np.abs(z) >= r
            v2 = z * z * m
            v4 = (z ** 4) * m
            e2, s2 = float(v2.mean()), float(v2.std(ddof=1) / math.sqrt(n_mc))
            e4, s4 = float(v4.mean()), float(v4.std(ddof=1) / math.sqrt(n_mc))
            if e2 > h2_max:
                h2_max, h2_se = e2, s2
            if e4 > h4_max:
                h4_max, h4_se = e4, s4
        ok2 = h2_max <= c2 * r * r * h + 3.0 * h2_se
        ok4 = h4_max <= c4 * r ** 4 * h + 3.0 * h4_se
        passed &= ok2 and ok4
        rows.append(dict(r=r, h=h, h2=h2_max, h2_bound=c2 * r * r * h, h2_ok=ok2,
                         h4=h4_max, h4_bound=c4 * r ** 4 * h, h4_ok=ok4))
    m_bound = 5.0 * B / rho
    h2_zero = max(float((proj[:, j] ** 2).mean()) for j in range(dirs.shape[0]))
    h4_zero = max(float((proj[:, j] ** 4).mean()) for j in range(dirs.shape[0]))
    passed &= h2_zero <= m_bound and h4_zero <= m_bound
    return TailReport(spec.family, rows, h2_zero, h4_zero, m_bound, bool(passed))
