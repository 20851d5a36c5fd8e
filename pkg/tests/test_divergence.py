import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy import integrate

from covshift_el import data
from covshift_el import divergence as div
from covshift_el.errors import ConfigurationError, DomainError
from covshift_el.rng import stream

SPECS = [div.KL, div.REVERSE_KL, div.PEARSON, div.HELLINGER]


def test_loss_values():
    assert div.losses(div.KL, 1.0) == (1.0, 1.0)
    assert div.losses(div.PEARSON, 1.0) == (0.0, 0.0)
    l1, l2 = div.losses(div.HELLINGER, 4.0)
    assert math.isclose(l1, 1.0) and math.isclose(l2, 0.5)


def test_kl_domain_error():
    with pytest.raises(DomainError):
        div.losses(div.KL, 0.0)
    with pytest.raises(DomainError):
        div.losses(div.KL, -1.0)


def test_pearson_defined_at_zero():
    assert div.losses(div.PEARSON, 0.0) == (-1.0, -2.0)


@pytest.mark.parametrize("spec", SPECS, ids=lambda s: s.id)
def test_derivatives_match_finite_differences(spec):
    r = np.linspace(0.1, 10, 200)
    h = 1e-6 * r
    fd1 = (spec.ell1(r + h) - spec.ell1(r - h)) / (2 * h)
    fd2 = (spec.ell2(r + h) - spec.ell2(r - h)) / (2 * h)
    assert np.allclose(spec.ell1_deriv(r), fd1, rtol=1e-6)
    assert np.allclose(spec.ell2_deriv(r), fd2, rtol=1e-6)


@pytest.mark.parametrize("spec", SPECS, ids=lambda s: s.id)
@given(r=st.floats(0.05, 20))
def test_first_order_relation(spec, r):
    assert math.isclose(float(spec.ell1_deriv(np.array(r))), r * float(spec.ell2_deriv(np.array(r))),
                        rel_tol=1e-12)


def test_links():
    assert div.KL.link == div.EXP
    assert div.PEARSON.link == div.IDENTITY


def test_registry():
    assert div.names() == ["hellinger", "kl", "pearson", "reverse-kl"]
    assert div.get("KL") is div.KL
    with pytest.raises(ConfigurationError):
        div.get("neyman")


def test_register_custom_pair():
    spec = div.DivergenceSpec("unit-test-pair", lambda r: r, lambda r: np.log(r) + 1.0,
                              lambda r: np.ones_like(r), lambda r: 1.0 / r, link=div.EXP)
    div.register(spec)
    assert div.get("unit-test-pair") is spec


def test_population_objective_constant():
    ones = np.ones(10)
    assert div.population_objective(div.KL, ones, ones) == 0.0
    assert div.population_objective(div.PEARSON, ones, ones) == 0.0


def test_population_objective_empty():
    with pytest.raises(DomainError):
        div.population_objective(div.KL, [], [1.0])


@pytest.mark.parametrize("spec", SPECS, ids=lambda s: s.id)
def test_null_offset_gives_zero_divergence(spec):
    ones = np.ones(5)
    assert div.divergence_estimate(spec, div.population_objective(spec, ones, ones)) == 0.0


def _s1_ratio(x):
    return data.beta_pdf(x)


@pytest.mark.parametrize("spec", SPECS, ids=lambda s: s.id)
def test_true_ratio_minimises_exact_objective(spec):
    # d = 1 quadrature: source U(0,1), target Beta(6/5, 6/5)
    def objective(c):
        r = lambda t: max(c * _s1_ratio(np.array([t]))[0], 1e-6)
        e1, _ = integrate.quad(lambda t: float(spec.ell1(np.array(r(t)))), 0, 1, limit=200)
        e2, _ = integrate.quad(lambda t: float(spec.ell2(np.array(r(t)))) * _s1_ratio(np.array([t]))[0],
                               0, 1, limit=200)
        return e1 - e2

    base = objective(1.0)
    for c in (0.5, 0.8, 0.95, 1.05, 1.25, 2.0):
        assert objective(c) > base


def test_true_ratio_beats_perturbation_by_monte_carlo():
    xs = data.generate_covariates("S1", "source", 10**5, 2, stream(1))
    xt = data.generate_covariates("S1", "target", 10**5, 2, stream(2))
    r0 = lambda x: data.true_density_ratio_s1(x)
    pert = lambda x: r0(x) * (1 + 0.2 * np.sin(2 * np.pi * x[:, 0]))
    assert div.population_objective(div.KL, r0(xs), r0(xt)) < div.population_objective(div.KL, pert(xs), pert(xt))


def test_kl_divergence_matches_quadrature():
    q = lambda t: _s1_ratio(np.array([t]))[0]
    truth, _ = integrate.quad(lambda t: q(t) * math.log(q(t)) if q(t) > 0 else 0.0, 0, 1, limit=200)
    xs = data.generate_covariates("S1", "source", 4 * 10**5, 1, stream(3))
    xt = data.generate_covariates("S1", "target", 4 * 10**5, 1, stream(4))
    est = div.divergence_estimate(div.KL, div.population_objective(div.KL, _s1_ratio(xs[:, 0]), _s1_ratio(xt[:, 0])))
    assert truth > 0
    assert abs(est - truth) < 0.005


def test_kl_and_reverse_kl_share_minimiser():
    # both criteria are minimised by r0; check the minimising scale on a 1-D family
    xs = data.generate_covariates("S1", "source", 10**5, 1, stream(5))[:, 0]
    xt = data.generate_covariates("S1", "target", 10**5, 1, stream(6))[:, 0]
    grid = np.linspace(0.7, 1.3, 61)

    def argmin(spec):
        vals = [div.population_objective(spec, np.maximum(_s1_ratio(xs) ** c, 1e-3), np.maximum(_s1_ratio(xt) ** c, 1e-3))
                for c in grid]
        return grid[int(np.argmin(vals))]

    assert abs(argmin(div.KL) - argmin(div.REVERSE_KL)) <= 0.1
