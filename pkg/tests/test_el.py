import math

import numpy as np
import pytest
from hypothesis import assume, given, strategies as st
from hypothesis.extra.numpy import arrays
from scipy import optimize

from covshift_el import cond_density as cd
from covshift_el import data
from covshift_el import density_ratio as dr
from covshift_el import el
from covshift_el import funclass as fc
from covshift_el import moments as mom
from covshift_el.errors import ConfigurationError, ContractError, ConvexHullViolation, InferenceError, NumericError
from covshift_el.rng import stream

MEAN = mom.Mean()


def _classical_el_ratio(y, theta):
    """2 sum log(1 + lam (y - theta)) with lam from a bracketing root search."""
    z = y - theta
    f = lambda lam: np.sum(z / (1 + lam * z))
    lo, hi = -1 / z.max() + 1e-12, -1 / z.min() - 1e-12
    lam = optimize.brentq(f, lo, hi, xtol=1e-14)
    return 2 * np.sum(np.log1p(lam * z))


def test_symmetric_rows_give_zero_multiplier():
    psi = np.array([-2.0, -1.0, 1.0, 2.0])
    sol = el.solve_lambda(psi)
    assert sol.lam[0] == 0.0 and sol.log_el == 0.0
    assert np.allclose(sol.weights, 0.25)
    assert sol.converged


def test_positive_rows_violate_hull():
    with pytest.raises(ConvexHullViolation):
        el.solve_lambda(np.array([0.1, 0.5, 2.0]))


def test_too_few_rows():
    with pytest.raises(ConfigurationError):
        el.solve_lambda(np.array([[1.0, -1.0]]))


def test_four_point_example_against_grid():
    psi = np.array([-1.0, 0.5, 0.5, 0.5])
    grid = np.arange(-1.9999, 0.9999, 1e-4)
    vals = np.log1p(np.outer(grid, psi)).sum(1)
    sol = el.solve_lambda(psi)
    assert abs(sol.lam[0] - grid[np.argmax(vals)]) <= 1e-4
    assert sol.lam[0] == pytest.approx(0.25, abs=1e-9)


def test_hull_lp_for_vectors():
    square = np.array([[1.0, 0], [-1, 0], [0, 1], [0, -1]])
    assert el.zero_in_hull(square)
    assert not el.zero_in_hull(square + np.array([1.0, 0.0]))
    # origin on an edge of the hull: not interior
    assert not el.zero_in_hull(np.array([[1.0, 0.0], [-1.0, 0.0], [0.0, 1.0]]))


rows = arrays(np.float64, st.integers(5, 40).map(lambda k: (k, 1)),
              elements=st.floats(-5, 5, allow_nan=False).filter(lambda v: abs(v) > 1e-3))


@given(rows)
def test_weight_identities(psi):
    assume(psi.min() < 0 < psi.max())
    sol = el.solve_lambda(psi)
    assert np.all(sol.weights > 0)
    assert sol.weights.sum() == pytest.approx(1.0, abs=1e-8)
    assert abs(sol.weights @ psi[:, 0]) <= 1e-7 * max(1.0, np.abs(psi).max())
    z = 1 + psi @ sol.lam
    assert np.allclose(sol.weights, 1 / (len(psi) * z), rtol=1e-12)


@given(rows)
def test_dual_trace_never_decreases(psi):
    assume(psi.min() < 0 < psi.max())
    trace = np.array(el.solve_lambda(psi).trace)
    assert np.all(np.diff(trace) >= -1e-12)


def test_pseudo_log_continuity():
    eps = 0.1
    z = np.array([eps - 1e-9, eps + 1e-9])
    f, d1, d2 = el._pseudo_log(z, eps)
    assert abs(f[0] - f[1]) < 1e-7 and abs(d1[0] - d1[1]) < 1e-6 and abs(d2[0] - d2[1]) < 1e-5


def test_linear_map_invariance():
    g = stream(1)
    psi = g.standard_normal((60, 2)) + np.array([0.2, -0.1])
    a = g.standard_normal((2, 2)) + 2 * np.eye(2)
    assert abs(np.linalg.det(a)) > 0.1
    base = el.solve_lambda(psi).ell
    mapped = el.solve_lambda(psi @ a.T).ell
    assert mapped == pytest.approx(base, abs=1e-6)


def test_profile_infeasible_is_inf(small_dataset):
    nu = mom.Nuisances(np.ones(small_dataset.n), lambda x, t: (np.full(len(x), 0.5) - t[0])[:, None])
    assert el.profile_el(small_dataset, nu, MEAN, [100.0], kind=mom.DRW) == math.inf
    assert el.profile_el(small_dataset, nu, MEAN, [small_dataset.source_y.mean()], kind=mom.DRW) < 1e-8


def test_profile_deterministic(small_dataset):
    model = cd.fit_conditional_density(small_dataset, "kl", fc.FunctionClassConfig(
        degree_or_width_candidates=(8,), depth_candidates=(1,), optimizer=fc.OptimizerConfig(max_epochs=50)), rng=1)
    imp = cd.impute(model, small_dataset.x_all, 20, seed=2)
    nu = mom.Nuisances(np.ones(small_dataset.n), imp)
    a = el.profile_el(small_dataset, nu, MEAN, [0.4])
    b = el.profile_el(small_dataset, nu, MEAN, [0.4])
    assert a == b


def test_maximize_matches_closed_form_solution(small_dataset):
    h = lambda x: np.sin(3 * x[:, 0])
    nu = mom.Nuisances(np.ones(small_dataset.n), lambda x, t: (h(x) - t[0])[:, None])
    res = el.maximize_el(small_dataset, nu, MEAN)
    # the just-identified EL estimate solves mean Psi = 0 exactly
    expected = h(small_dataset.target_x).mean() + (small_dataset.source_y - h(small_dataset.source_x)).mean()
    assert res.theta_hat[0] == pytest.approx(expected, abs=1e-6)
    assert res.ell_hat < 1e-9
    assert res.r_n_at(res.theta_hat) == 0.0
    assert res.r_n_at(expected + 0.3) > 0


def test_drw_unit_ratio_is_classical_el_mean(small_dataset):
    y = small_dataset.source_y
    res = el.drw_estimate(small_dataset, lambda x: np.ones(len(x)), MEAN)
    assert res.theta_hat[0] == pytest.approx(y.mean(), abs=1e-6)
    for t in (y.mean() - 0.1, y.mean() + 0.05):
        assert res.r_n_at(t) == pytest.approx(_classical_el_ratio(y, t), rel=1e-6)


def test_quantile_on_symmetric_imputations():
    g = stream(3)
    n, m = 400, 200
    z = g.standard_normal((n + m) // 2)
    y = np.concatenate([z[: n // 2], -z[: n // 2]])
    draws = np.abs(g.standard_normal((n + m, 50))) + 0.01
    draws = np.hstack([draws, -draws])
    ds = data.Dataset(g.random((n, 1)), y, g.random((m, 1)))
    nu = mom.Nuisances(np.ones(n), cd.ImputationSet(draws, 0))
    cfg = el.ELConfig()
    res = el.maximize_el(ds, nu, mom.Quantile(0.5), cfg)
    lo, hi = mom.Quantile(0.5).bracket(y)
    step = (hi - lo) * (1 + 2 * cfg.bracket_pad) / (cfg.grid_points - 1)
    assert abs(res.theta_hat[0] - np.median(np.concatenate([y, draws.ravel()]))) <= step


def test_vector_parameter_nelder_mead(small_dataset):
    g = mom.Custom(lambda x, y, t: np.column_stack([y - t[0], y ** 2 - t[1]]), r=2, p=2)
    y = small_dataset.source_y
    cfg = el.ELConfig(start=(0.0, 1.0))
    res = el.drw_estimate(small_dataset, lambda x: np.ones(len(x)), g, cfg)
    assert np.allclose(res.theta_hat, [y.mean(), (y ** 2).mean()], atol=1e-4)
    with pytest.raises(ConfigurationError):
        el.drw_estimate(small_dataset, lambda x: np.ones(len(x)), g)


def test_wilks_threshold():
    assert el.wilks_threshold(0.95, 1) == pytest.approx(3.841, abs=1e-3)


def _quadratic_result(theta_hat, n, s):
    prof = lambda t: n * (t[0] - theta_hat) ** 2 / (2 * s ** 2)
    return el.InferenceResult(np.array([theta_hat]), 0.0, mom.ORTHOGONAL, prof)


def test_quadratic_inversion():
    res = _quadratic_result(1.5, 400, 2.0)
    lo, hi = el.wilks_ci(res, 0.95)
    half = math.sqrt(el.wilks_threshold(0.95)) * 2.0 / 20
    assert lo == pytest.approx(1.5 - half, rel=1e-4) and hi == pytest.approx(1.5 + half, rel=1e-4)
    assert abs(res.r_n_at(lo) - 3.841458820694124) <= 1e-3


def test_wilks_contracts(small_dataset):
    res = el.drw_estimate(small_dataset, lambda x: np.ones(len(x)), MEAN)
    with pytest.raises(ContractError):
        el.wilks_ci(res)
    vec = el.InferenceResult(np.zeros(2), 0.0, mom.ORTHOGONAL, lambda t: 0.0)
    with pytest.raises(ContractError):
        el.wilks_ci(vec)


def test_wilks_no_crossing():
    flat = el.InferenceResult(np.array([0.0]), 0.0, mom.ORTHOGONAL, lambda t: 0.0)
    with pytest.raises(InferenceError):
        el.wilks_ci(flat, config=el.ELConfig(ci_max_doublings=5))


def test_wilks_endpoints_on_data(small_dataset):
    h = lambda x: np.cos(2 * x[:, 1])
    nu = mom.Nuisances(np.ones(small_dataset.n), lambda x, t: (h(x) - t[0])[:, None])
    res = el.maximize_el(small_dataset, nu, MEAN)
    lo, hi = el.wilks_ci(res, 0.95)
    q = el.wilks_threshold(0.95)
    assert lo < res.theta_hat[0] < hi
    assert abs(res.r_n_at(lo) - q) <= 1e-3 and abs(res.r_n_at(hi) - q) <= 1e-3


def test_bootstrap_degenerate_data():
    g = stream(4)
    ds = data.Dataset(g.random((30, 1)), np.full(30, 2.5), g.random((20, 1)))
    est = lambda b, i: float(np.mean(b.source_y))
    (lo, hi), values, failures = el.bootstrap_ci(est, ds, B=50)
    assert lo == hi == 2.5 and not failures
    assert len(values) == 50


def test_bootstrap_requires_enough_resamples(small_dataset):
    with pytest.raises(ConfigurationError):
        el.bootstrap_ci(lambda b, i: 0.0, small_dataset, B=49)


def test_bootstrap_failure_rate(small_dataset):
    def flaky(b, i):
        if i % 3 == 0:
            raise NumericError("boom")
        return 0.0

    with pytest.raises(InferenceError) as info:
        el.bootstrap_ci(flaky, small_dataset, B=60)
    assert len(info.value.failures) == 20


def test_bootstrap_percentile_and_determinism(small_dataset):
    est = lambda b, i: float(b.source_y.mean())
    a = el.bootstrap_ci(est, small_dataset, B=100, seed=5)
    b = el.bootstrap_ci(est, small_dataset, B=100, seed=5)
    assert a[0] == b[0]
    assert a[0][0] < small_dataset.source_y.mean() < a[0][1]


def test_config_strict_keys():
    with pytest.raises(ConfigurationError):
        el.ELConfig.from_dict({"max_iters": 3})
    assert el.ELConfig.from_dict({"bracket": [0, 1]}).bracket == (0, 1)


@pytest.mark.slow
def test_plugin_negligibility():
    from covshift_el.harness import SIM_CDE, SIM_RATIO
    ratio_cfg = SIM_RATIO.with_(degree_or_width_candidates=(16,))
    cde_cfg = SIM_CDE.with_(degree_or_width_candidates=(16,))
    r0 = lambda x: data.true_density_ratio("S1", x)
    m0 = mom.oracle_conditional(MEAN, "M2")
    meds = []
    for n in (1000, 2000, 5000):
        diffs = []
        for rep in range(30):
            ds = data.generate_dataset(data.ScenarioConfig("S1", "M2", n=n, d=2, seed=6000 + rep))
            r_hat = dr.fit_ddr(ds, "kl", ratio_cfg, rng=rep)
            model = cd.fit_conditional_density(ds, "kl", cde_cfg, rng=rep)
            imp = cd.impute(model, ds.x_all, 200, seed=rep)
            fitted = el.maximize_el(ds, mom.Nuisances(r_hat, imp), MEAN).theta_hat[0]
            oracle = el.maximize_el(ds, mom.Nuisances(r0, m0), MEAN).theta_hat[0]
            diffs.append(abs(fitted - oracle))
        meds.append(np.median(diffs))
    assert meds[0] > meds[1] > meds[2], meds
