import numpy as np
import pytest

from covshift_el import data
from covshift_el import density_ratio as dr
from covshift_el import funclass as fc
from covshift_el.errors import NumericError
from covshift_el.rng import stream

from conftest import FAST_MLP

SIM_RATIO = fc.FunctionClassConfig(degree_or_width_candidates=(8, 16, 32), depth_candidates=(1,),
                                   optimizer=fc.OptimizerConfig(max_epochs=300))


def _same_law(n, d, seed):
    g = stream(seed)
    return data.Dataset(g.random((n, d)), g.standard_normal(n), g.random((n, d)))


def _oracle(setting):
    return lambda x: data.true_density_ratio(setting, x)


def test_ddr_unit_ratio_when_laws_match():
    ds = _same_law(2000, 2, 1)
    r = dr.fit_ddr(ds, "kl", FAST_MLP, rng=2)
    assert dr.source_mse(r, lambda x: np.ones(len(x)), ds.source_x) < 0.05
    assert abs(r.divergence_estimate) < 0.05


def test_ddr_records_objective_and_divergence(small_dataset):
    r = dr.fit_ddr(small_dataset, "kl", FAST_MLP, rng=3)
    assert np.isfinite(r.divergence_estimate)
    assert r.divergence_estimate == pytest.approx(-r.objective_value)
    assert np.all(r(small_dataset.x_all) >= FAST_MLP.clamp[0])


@pytest.mark.parametrize("spec", ["kl", "reverse-kl", "pearson", "hellinger"])
def test_every_divergence_fits(spec, small_dataset):
    r = dr.fit_ddr(small_dataset, spec, FAST_MLP, rng=4)
    v = r(small_dataset.x_all)
    assert np.all(np.isfinite(v)) and 0.5 < v[:small_dataset.n].mean() < 2.0


def test_divergence_estimate_identical_samples_large():
    g = stream(5)
    x = g.random((5000, 1))
    ds = data.Dataset(x, np.zeros(5000), x.copy())
    r = dr.fit_ddr(ds, "kl", FAST_MLP, rng=6)
    assert abs(r.divergence_estimate) < 0.05


def test_divergence_estimate_positive_under_shift():
    ds = data.generate_dataset(data.ScenarioConfig("S1", "M1", n=5000, d=1, seed=7))
    r = dr.fit_ddr(ds, "kl", FAST_MLP, rng=8)
    assert r.divergence_estimate > 0


def test_kernel_smoothing_unit_ratio():
    ds = _same_law(2000, 1, 9)
    r = dr.fit_kernel_smoothing(ds, rng=10)
    assert dr.source_mse(r, lambda x: np.ones(len(x)), ds.source_x) < 0.1


def test_kernel_smoothing_far_point_hits_ceiling(small_dataset):
    r = dr.fit_kernel_smoothing(small_dataset, rng=11)
    assert r(np.full((1, small_dataset.d), 50.0))[0] == r.clamp[1]


def test_kernel_smoothing_degenerate_column():
    g = stream(12)
    x = np.column_stack([g.random(50), np.zeros(50)])
    ds = data.Dataset(x, g.random(50), x + np.array([0, 0.0]))
    with pytest.raises(NumericError):
        dr.fit_kernel_smoothing(ds)


def test_kernel_smoothing_uses_five_fold_above_limit():
    ds = _same_law(2100, 1, 13)
    r = dr.fit_kernel_smoothing(ds, rng=14)
    assert dr.source_mse(r, lambda x: np.ones(len(x)), ds.source_x) < 0.1


def test_prob_classification_unit_ratio():
    ds = _same_law(2000, 2, 15)
    r = dr.fit_prob_classification(ds)
    pi = 1 / (1 + np.exp(-r.fitted.logit(ds.x_all)))
    assert np.max(np.abs(pi - ds.tau_hat)) < 0.1
    assert dr.source_mse(r, lambda x: np.ones(len(x)), ds.source_x) < 0.05


def test_bayes_identity():
    assert dr.ratio_from_posterior(0.5, 1 / 3) == pytest.approx(2.0)


def test_prob_classification_perfect_separation():
    g = stream(16)
    ds = data.Dataset(g.random((40, 1)), g.random(40), 5 + g.random((20, 1)))
    with pytest.raises(NumericError, match="separated"):
        dr.fit_prob_classification(ds)


def test_l2_error_basic(small_dataset):
    oracle = _oracle("S1")
    exact = dr.RatioModel.from_function(oracle, small_dataset.d)
    shifted = lambda x: oracle(x) + 1.0
    assert dr.empirical_l2_error(exact, oracle, small_dataset.x_all) == 0.0
    assert dr.empirical_l2_error(shifted, oracle, small_dataset.x_all) == pytest.approx(1.0)


@pytest.mark.parametrize("method", ["ddr", "ks", "pc"])
def test_fitters_respect_clamp(method, small_dataset):
    r = dr.fit(method, small_dataset, funclass_config=FAST_MLP, rng=17)
    probe = np.vstack([small_dataset.x_all, 10 * stream(18).standard_normal((200, small_dataset.d))])
    v = r(probe)
    assert np.all(v >= r.clamp[0]) and np.all(v <= r.clamp[1])


@pytest.mark.parametrize("method", ["ddr", "ks", "pc"])
def test_model_json_roundtrip(method, small_dataset):
    r = dr.fit(method, small_dataset, funclass_config=FAST_MLP, rng=19)
    back = dr.RatioModel.from_dict(r.to_dict())
    assert np.array_equal(back(small_dataset.x_all), r(small_dataset.x_all))


@pytest.mark.parametrize("setting", ["S1", "S2"])
def test_self_normalisation(setting):
    ds = data.generate_dataset(data.ScenarioConfig(setting, "M1", n=1000, d=5, seed=20))
    for method in ("ddr", "ks", "pc"):
        r = dr.fit(method, ds, funclass_config=SIM_RATIO, rng=21)
        assert 0.5 <= r(ds.source_x).mean() <= 2.0, method


@pytest.mark.slow
def test_kernel_smoothing_is_worst():
    # KS is the weakest baseline at d = 5 (median over 30 replications)
    mse = {"ddr": [], "ks": [], "pc": []}
    for rep in range(30):
        ds = data.generate_dataset(data.ScenarioConfig("S1", "M1", n=1000, d=5, seed=1000 + rep))
        for method in mse:
            r = dr.fit(method, ds, funclass_config=SIM_RATIO, rng=rep)
            mse[method].append(dr.source_mse(r, _oracle("S1"), ds.source_x))
    med = {k: np.median(v) for k, v in mse.items()}
    assert med["ks"] > med["ddr"]
    assert med["ks"] > med["pc"]


@pytest.mark.slow
def test_ddr_error_decreases_with_n_d1():
    meds = []
    for n in (1000, 2000, 5000):
        errs = []
        for rep in range(30):
            ds = data.generate_dataset(data.ScenarioConfig("S1", "M1", n=n, d=1, seed=2000 + rep))
            r = dr.fit_ddr(ds, "kl", SIM_RATIO.with_(degree_or_width_candidates=(8,)), rng=rep)
            errs.append(dr.empirical_l2_error(r, _oracle("S1"), ds.x_all))
        meds.append(np.median(errs))
    assert meds[0] > meds[1] > meds[2]


@pytest.mark.slow
@pytest.mark.parametrize("setting,d", [("S1", 5), ("S2", 5), ("S1", 20), ("S2", 20)])
def test_rate_proxy(setting, d):
    # the Gaussian design has an unbounded ratio; score against the oracle clamped
    # to the estimator's range, the best any clamped fit can reach
    lo, hi = SIM_RATIO.clamp
    oracle = lambda x: np.clip(data.true_density_ratio(setting, x), lo, hi)
    meds = []
    for n in (1000, 2000, 5000):
        errs = []
        for rep in range(10):
            ds = data.generate_dataset(data.ScenarioConfig(setting, "M1", n=n, d=d, seed=3000 + rep))
            r = dr.fit_ddr(ds, "kl", SIM_RATIO.with_(degree_or_width_candidates=(8,)), rng=rep)
            errs.append(dr.empirical_l2_error(r, oracle, ds.x_all))
        meds.append(np.median(errs))
    assert meds[0] > meds[1] > meds[2], meds
