import math

import numpy as np
import pytest
from scipy.integrate import quad

from sharp_neuron import (
    ConfigError,
    DistributionSpec,
    DomainError,
    estimate_margin,
    h2,
    h2_inverse,
    h4,
    h4_inverse,
    make_distribution,
    sample,
    tail_h,
)
from sharp_neuron.distributions import (
    dgauss_moment,
    gaussian_h2_exact,
    heavy_coord_variance,
    rng_for,
)

ALL_IDENTS = ["gaussian", "laplace", "heavy:7", "dgauss:1.0", "hypergrid"]


def normal_pdf(z):
    return math.exp(-0.5 * z * z) / math.sqrt(2 * math.pi)


def e1(d):
    u = np.zeros(d)
    u[0] = 1.0
    return u


# --- sampling ---

def test_sample_deterministic_and_shaped():
    spec = make_distribution("gaussian", 4, seed=11)
    a = sample(spec, 100)
    b = sample(spec, 100)
    assert a.shape == (100, 4)
    np.testing.assert_array_equal(a, b)
    c = sample(spec, 100, stream=1)
    assert not np.array_equal(a, c)


def test_sample_rejects_bad_n():
    with pytest.raises(DomainError):
        sample(make_distribution("gaussian", 2), 0)


def test_hypergrid_coordinate_moments():
    spec = make_distribution("hypergrid", 3, seed=1)
    x = sample(spec, 1_000_000)
    assert set(np.unique(x)) <= {-1.0, 0.0, 1.0}
    for i in range(3):
        assert np.mean(x[:, i] ** 2) == pytest.approx(2.0 / 3.0, abs=0.01)
        assert np.mean(x[:, i] ** 4) == pytest.approx(2.0 / 3.0, abs=0.01)


def test_gaussian_second_moment():
    spec = make_distribution("gaussian", 1, seed=2)
    x = sample(spec, 1_000_000)
    assert np.mean(x ** 2) == pytest.approx(1.0, abs=0.01)


def test_discrete_gaussian_moments_and_lattice():
    spec = make_distribution("dgauss:1.0", 1, seed=3)
    x = sample(spec, 1_000_000).ravel()
    # lattice support
    np.testing.assert_array_equal(x, np.rint(x))
    assert np.mean(x ** 4) >= 1.25
    assert np.mean(x ** 2) <= 1.0 + 0.01
    # sampler agrees with the exact pmf series
    assert np.mean(x ** 2) == pytest.approx(dgauss_moment(1.0, 2), abs=0.01)
    assert np.mean(x ** 4) == pytest.approx(dgauss_moment(1.0, 4), abs=0.03)


def test_discrete_gaussian_fine_lattice():
    spec = make_distribution("dgauss:0.25", 1, seed=4)
    x = sample(spec, 200_000).ravel()
    steps = x / 0.25
    np.testing.assert_allclose(steps, np.rint(steps), atol=1e-9)
    assert np.mean(x ** 2) == pytest.approx(dgauss_moment(0.25, 2), abs=0.02)


def test_laplace_unit_variance():
    spec = make_distribution("laplace", 2, seed=5)
    x = sample(spec, 500_000)
    assert np.var(x) == pytest.approx(1.0, abs=0.02)


def test_heavy_tail_variance_matches_closed_form():
    spec = make_distribution("heavy:7", 1, seed=6)
    x = sample(spec, 1_000_000)
    assert np.var(x) == pytest.approx(heavy_coord_variance(7.0), rel=0.05)


def test_heavy_tail_requires_k_above_4_plus_rho():
    with pytest.raises(ConfigError):
        DistributionSpec("heavy_tail_k", 2, k=4.5, tail_rho=1.0)


# --- declared tails ---

def test_tail_h_discrete_gaussian_value():
    spec = make_distribution("dgauss:1.0", 2)
    assert tail_h(spec, 4.0) == pytest.approx(4.0 * math.exp(-2.0), rel=1e-12)


def test_tail_h_heavy_capped_at_one():
    spec = DistributionSpec("heavy_tail_k", 2, tail_B=1.0, k=7.0)
    assert tail_h(spec, 1.0) == 1.0


def test_tail_h_non_increasing_and_domain():
    for ident in ALL_IDENTS:
        spec = make_distribution(ident, 2)
        assert tail_h(spec, 2.0) <= tail_h(spec, 1.0)
        with pytest.raises(DomainError):
            tail_h(spec, 0.5)


@pytest.mark.parametrize("ident", ALL_IDENTS)
def test_empirical_tail_respects_declared_h(ident):
    spec = make_distribution(ident, 6, seed=9)
    n = 400_000
    x = sample(spec, n)
    rng = rng_for(99, 1)
    g = rng.standard_normal(6)
    dirs = [e1(6), np.ones(6) / math.sqrt(6), g / np.linalg.norm(g)]
    for u in dirs:
        z = np.abs(x @ u)
        for r in (1.0, 2.0, 4.0, 8.0):
            emp = float(np.mean(z >= r))
            h = tail_h(spec, r)
            se = math.sqrt(max(h * (1 - h), emp * (1 - emp)) / n + 1e-12)
            assert emp <= h + 3 * se, f"{ident} r={r}: {emp} > {h}"


# --- truncated moments ---

def test_h2_gaussian_values():
    spec = make_distribution("gaussian", 3)
    u = e1(3)
    assert h2(spec, u, 0.0).value == 1.0
    est = h2(spec, u, 1.0)
    assert est.value == pytest.approx(0.8013, abs=1e-3)
    oracle, _ = quad(lambda z: z * z * normal_pdf(z), 1.0, 12.0)
    assert est.value == pytest.approx(2 * oracle, abs=1e-8)


def test_h4_gaussian_values():
    spec = make_distribution("gaussian", 3)
    u = e1(3)
    assert h4(spec, u, 0.0).value == 3.0
    oracle, _ = quad(lambda z: z ** 4 * normal_pdf(z), 1.0, 14.0)
    assert h4(spec, u, 1.0).value == pytest.approx(2 * oracle, abs=1e-8)


def test_h4_dominates_r2_h2_and_monotone():
    for ident in ALL_IDENTS:
        spec = make_distribution(ident, 3, seed=12)
        u = np.ones(3) / math.sqrt(3)
        prev2, prev4 = math.inf, math.inf
        for r in (1.0, 2.0, 4.0):
            v2 = h2(spec, u, r, n_mc=200_000 if ident != "gaussian" else 0 or 200_000).value
            v4 = h4(spec, u, r, n_mc=200_000).value
            assert v4 >= r * r * v2 - 1e-12
            assert v2 <= prev2 + 1e-12 and v4 <= prev4 + 1e-12
            prev2, prev4 = v2, v4


def test_h2_heavy_fact_envelope():
    spec = make_distribution("heavy:7", 4, seed=13)
    u = e1(4)
    B = spec.tail_B
    for r in (4.0, 8.0):
        est = h2(spec, u, r)
        bound = (1 + 2 * B) * r * r * tail_h(spec, r)
        assert est.value <= bound + 3 * est.se


def test_h2_rejects_non_unit_direction():
    spec = make_distribution("gaussian", 3)
    with pytest.raises(DomainError):
        h2(spec, np.ones(3), 1.0)


def test_moment_mc_reports_standard_error():
    spec = make_distribution("laplace", 2, seed=14)
    est = h2(spec, e1(2), 1.0, n_mc=200_000)
    assert est.se > 0
    one_side = quad(lambda t: t * t * math.sqrt(2) / 2 * math.exp(-math.sqrt(2) * abs(t)),
                    1.0, 40.0)[0]
    assert est.value == pytest.approx(2 * one_side, abs=4 * est.se + 1e-3)


# --- envelope inversions ---

def test_h2_inverse_gaussian_edges():
    spec = make_distribution("gaussian", 2)
    assert h2_inverse(spec, 1.0) == 0.0
    r = h2_inverse(spec, 6.25e-6)
    assert gaussian_h2_exact(r) == pytest.approx(6.25e-6, rel=1e-3)


def test_h2_inverse_subexponential_closed_form():
    spec = make_distribution("laplace", 2)
    B = spec.tail_B
    for kappa in (1e-2, 1e-4):
        assert h2_inverse(spec, kappa) <= B * math.log(1.0 / kappa ** 2) + 1e-9


def test_h2_inverse_heavy_closed_form():
    spec = make_distribution("heavy:7", 2)
    B, k = spec.tail_B, spec.k
    for kappa in (1e-2, 1e-4):
        assert h2_inverse(spec, kappa) <= (2 * B / kappa) ** (1.0 / (k - 2.0)) + 1e-9


def test_h2_inverse_monotone_in_kappa():
    for ident in ALL_IDENTS:
        spec = make_distribution(ident, 2)
        rs = [h2_inverse(spec, kappa) for kappa in (1e-1, 1e-2, 1e-3)]
        assert rs == sorted(rs)


def test_h2_inverse_rejects_nonpositive():
    with pytest.raises(DomainError):
        h2_inverse(make_distribution("gaussian", 2), 0.0)


def test_h4_inverse_heavy_closed_form():
    spec = make_distribution("heavy:8", 2)
    assert h4_inverse(spec, 1e-2) == pytest.approx((1.0 / 1e-2) ** 0.25)


def test_h4_inverse_is_valid_radius_gaussian():
    spec = make_distribution("gaussian", 2)
    from sharp_neuron.distributions import gaussian_h4_exact
    r = h4_inverse(spec, 1e-4)
    assert r >= 1.0
    assert gaussian_h4_exact(r) <= 1e-4 * (1 + 1e-6)


# --- margin certificates ---

def test_margin_gaussian_closed_forms():
    spec = make_distribution("gaussian", 4, seed=21)
    wstar = e1(4)
    cert = estimate_margin(spec, wstar, 1.0, 1_000_000)
    off = 1.0 - 0.8413447460685429  # P(z >= 1)
    in_dir = quad(lambda z: z * z * normal_pdf(z), 1.0, 12.0)[0]
    assert cert.lam == pytest.approx(off, abs=0.01)
    assert cert.second_moment[0, 0] == pytest.approx(in_dir, abs=0.01)
    assert not cert.degenerate


def test_margin_full_event_recovers_covariance():
    spec = make_distribution("gaussian", 3, seed=22)
    cert = estimate_margin(spec, e1(3), -50.0, 100_000)
    assert cert.event_fraction == 1.0
    assert cert.lam == pytest.approx(1.0, abs=0.02)


def test_margin_scale_invariance():
    spec = make_distribution("hypergrid", 4, seed=23)
    w = np.array([1.0, 0.5, 0.0, -0.25])
    a = estimate_margin(spec, w, 0.5, 200_000)
    b = estimate_margin(spec, 2 * w, 0.5, 200_000)
    assert a.lam == pytest.approx(b.lam, abs=1e-12)


def test_margin_empty_event_is_degenerate():
    spec = make_distribution("hypergrid", 3, seed=24)
    cert = estimate_margin(spec, e1(3), 50.0, 20_000)
    assert cert.degenerate and cert.lam == 0.0


def test_margin_rejects_zero_direction_and_small_n():
    spec = make_distribution("gaussian", 3)
    with pytest.raises(DomainError):
        estimate_margin(spec, np.zeros(3), 1.0, 20_000)
    with pytest.raises(DomainError):
        estimate_margin(spec, e1(3), 1.0, 100)


def test_unknown_family_string():
    with pytest.raises(ConfigError):
        make_distribution("cauchy", 3)
