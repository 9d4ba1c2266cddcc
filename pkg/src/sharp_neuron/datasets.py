"""Planted single-neuron instances, label corruption, and label clamps.

A planted instance fixes w* inside the comparator ball B(W), an activation,
and a noise recipe. Because w* is feasible, E[(sigma(w*.x) - y)^2] upper
bounds the population optimum, so every instance carries that value as its
certified ``opt_upper_bound`` and every generated batch records its own
empirical counterpart.

Noise recipes are fixed seedable functions, never adaptive adversaries:
the learner's guarantee holds for arbitrary labels, and reproducibility
requires determinism.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .activations import Activation, array_fn
from .distributions import (
    ConfigError,
    DistributionSpec,
    DomainError,
    rng_for,
    sample_scalars,
)

NOISE_KINDS = ("none", "additive_bounded", "flip_fraction", "oblivious_heavy")


@dataclass(frozen=True)
class NoiseModel:
    """A label-corruption recipe.

    additive_bounded adds magnitude * (Rademacher sign); flip_fraction
    replaces each label independently with probability p by scale * r,
    r ~ N(0,1); oblivious_heavy adds a unit-variance symmetric Pareto
    variable with tail exponent tail_k (> 2), independent of x.
    """

    kind: str
    magnitude: float = 0.0
    flip_p: float = 0.0
    replacement_scale: float = 1.0
    tail_k: float = 3.0
    seed: int = 0

    def __post_init__(self):
        if self.kind not in NOISE_KINDS:
            raise ConfigError(f"unknown noise kind {self.kind!r}")
        if self.kind == "flip_fraction" and not 0.0 <= self.flip_p <= 1.0:
            raise ConfigError("flip fraction must be in [0, 1]")
        if self.kind == "oblivious_heavy" and not self.tail_k > 2.0:
            raise ConfigError("oblivious_heavy needs tail exponent > 2 for a finite certificate")


def make_noise(ident: str, seed: int = 0) -> NoiseModel:
    """Parse "none", "add:<m>", "flip:<p>:<s>", or "heavy:<k>"."""
    ident = ident.strip().lower()
    if ident == "none":
        return NoiseModel("none", seed=seed)
    if ident.startswith("add:"):
        return NoiseModel("additive_bounded", magnitude=float(ident.split(":", 1)[1]), seed=seed)
    if ident.startswith("flip:"):
        _, p, s = ident.split(":")
        return NoiseModel("flip_fraction", flip_p=float(p), replacement_scale=float(s), seed=seed)
    if ident.startswith("heavy:"):
        return NoiseModel("oblivious_heavy", tail_k=float(ident.split(":", 1)[1]), seed=seed)
    raise ConfigError(f"unknown noise model {ident!r}")


def _heavy_noise_scale(k: float) -> float:
    # standardize |Z| = Pareto(k, min 1) with sign to unit variance
    return 1.0 / math.sqrt(k / (k - 2.0))


def apply_noise(noise: NoiseModel, clean: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    if noise.kind == "none":
        return clean
    n = clean.shape[0]
    if noise.kind == "additive_bounded":
        signs = rng.integers(0, 2, size=n) * 2.0 - 1.0
        return clean + noise.magnitude * signs
    if noise.kind == "flip_fraction":
        hit = rng.random(n) < noise.flip_p
        repl = noise.replacement_scale * rng.standard_normal(n)
        return np.where(hit, repl, clean)
    if noise.kind == "oblivious_heavy":
        u = rng.uniform(-1.0, 1.0, n)
        au = np.maximum(np.abs(u), 1e-300)
        z = np.sign(u) * au ** (-1.0 / noise.tail_k)
        return clean + _heavy_noise_scale(noise.tail_k) * z
    raise ConfigError(noise.kind)  # pragma: no cover


@dataclass(frozen=True)
class PlantedInstance:
    """A planted parameter with its noise recipe and certified opt bound."""

    wstar: np.ndarray
    W: float
    activation: Activation
    noise: NoiseModel
    opt_upper_bound: float


def plant_instance(wstar, W: float, activation: Activation, noise: NoiseModel,
                   spec: DistributionSpec | None = None,
                   cert_mc: int = 1_000_000) -> PlantedInstance:
    """Assemble an instance; the certificate is analytic where the recipe
    allows it and a seeded Monte-Carlo average otherwise (flip noise needs
    the x-marginal, hence ``spec``)."""
    wstar = np.asarray(wstar, dtype=float)
    if np.linalg.norm(wstar) > W + 1e-12:
        raise ConfigError("planted parameter must lie in the comparator ball B(W)")
    if noise.kind == "none":
        cert = 0.0
    elif noise.kind == "additive_bounded":
        cert = noise.magnitude ** 2
    elif noise.kind == "oblivious_heavy":
        cert = 1.0  # unit-variance additive noise, independent of x
    elif noise.kind == "flip_fraction":
        if spec is None:
            raise ConfigError("flip noise certificate needs the x-marginal spec")
        rng = rng_for(noise.seed, 900)
        xs = sample_scalars(spec, rng, cert_mc * spec.dim).reshape(cert_mc, spec.dim)
        clean = array_fn(activation)(xs @ wstar)
        repl = noise.replacement_scale * rng.standard_normal(cert_mc)
        cert = float(noise.flip_p * np.mean((clean - repl) ** 2))
    else:  # pragma: no cover
        raise ConfigError(noise.kind)
    return PlantedInstance(wstar, float(W), activation, noise, cert)


@dataclass
class Batch:
    """A labeled sample with its empirical opt certificate at w*."""

    xs: np.ndarray
    ys: np.ndarray
    cert: float


def generate(instance: PlantedInstance, spec: DistributionSpec, n: int,
             stream: int = 0) -> Batch:
    """Draw n labeled examples: x ~ D_x, y = sigma(w*.x) + corruption."""
    if n < 1:
        raise DomainError("n must be >= 1")
    rng_x = rng_for(spec.seed, 0, stream)
    xs = sample_scalars(spec, rng_x, n * spec.dim).reshape(n, spec.dim)
    clean = array_fn(instance.activation)(xs @ instance.wstar)
    ys = apply_noise(instance.noise, clean, rng_for(instance.noise.seed, 1, stream))
    cert = float(np.mean((clean - ys) ** 2))
    return Batch(xs, ys, cert)


def truncate_labels(batch: Batch, M: float) -> Batch:
    """Clamp labels to [-M, M] preserving sign: y -> sgn(y) min(|y|, M)."""
    if not M > 0.0:
        raise DomainError("truncation level M must be positive")
    ys = np.sign(batch.ys) * np.minimum(np.abs(batch.ys), M)
    return Batch(batch.xs, ys, batch.cert)


def truncate_nonmonotone(batch: Batch) -> Batch:
    """Positive-part clamp y -> max(y, 0) used before the M clamp when the
    activation is non-monotone."""
    return Batch(batch.xs, np.maximum(batch.ys, 0.0), batch.cert)


def clamp_labels_array(ys: np.ndarray, M: float, positive_part: bool) -> np.ndarray:
    """Vectorized label clamp used inside the training loop."""
    if positive_part:
        ys = np.maximum(ys, 0.0)
    return np.sign(ys) * np.minimum(np.abs(ys), M)
