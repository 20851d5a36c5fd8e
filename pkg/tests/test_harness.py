import math

import numpy as np
import pytest

from covshift_el import data
from covshift_el import funclass as fc
from covshift_el import harness as hs
from covshift_el.errors import ConfigurationError

TINY = fc.FunctionClassConfig(degree_or_width_candidates=(8,), depth_candidates=(1,),
                              optimizer=fc.OptimizerConfig(max_epochs=60))


def _plan(**kw):
    base = dict(covariate_setting="S1", response_model="M2", d=2, n_values=(200,), estimand="mean",
                methods=("drw-mi-e", "drw-mi-t"), replications=2, master_seed=3, ratio=TINY, cde=TINY,
                kappa_fraction=0.1, pilot_cv=False, truth_draws=10**5)
    base.update(kw)
    return hs.ExperimentPlan(**base)


@pytest.fixture(scope="module")
def tiny_report():
    return hs.run_plan(_plan())


def test_plan_validation():
    with pytest.raises(ConfigurationError):
        _plan(replications=0)
    with pytest.raises(ConfigurationError):
        _plan(methods=("drw", "ldml"))
    with pytest.raises(ConfigurationError):
        _plan(estimand="mode")


def test_plan_strict_keys_and_roundtrip():
    plan = _plan()
    assert hs.ExperimentPlan.from_dict(plan.to_dict()) == plan
    with pytest.raises(ConfigurationError):
        hs.ExperimentPlan.from_dict({"replicates": 3})


def test_scenarios_follow_n_values():
    scens = _plan(n_values=(100, 300), m_ratio=0.5).scenarios()
    assert [(s.n, s.m) for s in scens] == [(100, 50), (300, 150)]


def test_m1_mean_truth_is_zero():
    scen = data.ScenarioConfig("S1", "M1", n=10, d=4)
    assert abs(hs.true_parameter(scen, "mean", 10**6)) < 5e-3


def test_m3_median_in_unit_interval():
    scen = data.ScenarioConfig("S1", "M3", n=10, d=5)
    assert 0.0 <= hs.true_parameter(scen, "median", 10**6) <= 1.0


def test_truth_is_cached_and_shared():
    scen = data.ScenarioConfig("S1", "M2", n=10, d=5)
    a = hs.true_parameter(scen, "quantile:0.5", 10**5)
    b = hs.true_parameter(scen.__class__("S1", "M2", n=999, d=5), "median", 10**5)
    assert a == b


def test_summaries_and_identity(tiny_report):
    for s in tiny_report.summaries:
        assert s.mse == pytest.approx(s.bias ** 2 + s.std_dev ** 2, rel=1e-12)
        assert 0.0 <= s.coverage <= 1.0
        assert s.replications + s.failures == 2
        assert s.mean_r_n_truth >= 0


def test_single_replication_has_zero_sd():
    report = hs.run_plan(_plan(replications=1, methods=("drw-mi-t",)))
    s = report.summary("drw-mi-t")
    rec = report.records_for("drw-mi-t")[0]
    assert s.std_dev == 0.0
    assert s.bias == pytest.approx(rec.theta_hat - report.truths[200])


def test_determinism(tiny_report):
    again = hs.run_plan(_plan())
    assert again.to_json() == tiny_report.to_json()
    assert hs.records_csv(again) == hs.records_csv(tiny_report)


def test_parallel_matches_serial(tiny_report):
    par = hs.run_plan(_plan(workers=2))
    assert par.records == tiny_report.records and par.summaries == tiny_report.summaries


def test_oracle_method_records_wilks_interval(tiny_report):
    for r in tiny_report.records_for("drw-mi-t"):
        assert r.ok and r.ci_lo < r.theta_hat < r.ci_hi


def test_table_layout(tiny_report):
    text = hs.report_table(tiny_report, "text").splitlines()
    assert text[0].split() == list(hs.TABLE_COLUMNS)
    assert len(text) == 1 + 2
    csv_rows = hs.report_table(tiny_report, "csv").splitlines()
    bias = csv_rows[1].split(",")[2]
    assert len(bias.split(".")[1]) == 4
    with pytest.raises(ConfigurationError):
        hs.report_table(tiny_report, "html")


def test_two_methods_two_rows_per_n():
    report = hs.run_plan(_plan(n_values=(150, 200), replications=1))
    rows = hs.report_table(report, "csv").splitlines()[1:]
    assert [r.split(",")[0] for r in rows] == ["150", "150", "200", "200"]


def test_empty_methods_header_only():
    report = hs.SimReport({}, {}, (), ())
    assert hs.report_table(report).strip() == "  ".join(hs.TABLE_COLUMNS).strip()
    assert hs.report_table(report, "csv").splitlines() == [",".join(hs.TABLE_COLUMNS)]


def test_fmt_four_decimals():
    assert hs._fmt(0.94216) == "0.9422"
    assert hs._fmt(math.nan) == "nan"
    assert hs._fmt(3) == "3"


def test_summarize_all_failed():
    recs = [hs.Record(10, i, "drw", error="boom") for i in range(3)]
    s = hs.summarize(recs, 0.0, 10, "drw", 0.95)
    assert s.failures == 3 and s.replications == 0 and math.isnan(s.mse)


def test_summarize_coverage():
    recs = [hs.Record(10, 0, "drw", 0.1, -1.0, 1.0), hs.Record(10, 1, "drw", 0.3, 0.2, 0.4)]
    s = hs.summarize(recs, 0.0, 10, "drw", 0.95)
    assert s.coverage == 0.5 and s.ci_length == pytest.approx(1.1)
    assert s.bias == pytest.approx(0.2) and s.std_dev == pytest.approx(0.1)


def test_bootstrap_methods_run():
    report = hs.run_plan(_plan(methods=("drw", "mi"), replications=1, bootstrap_b=50, bootstrap_epochs=20))
    for m in ("drw", "mi"):
        rec = report.records_for(m)[0]
        assert rec.ok and rec.ci_lo <= rec.ci_hi
        assert math.isnan(rec.r_n_truth)


def test_pilot_cv_picks_capacity():
    cfg = TINY.with_(degree_or_width_candidates=(4, 8))
    report = hs.run_plan(_plan(ratio=cfg, cde=cfg, pilot_cv=True, replications=1, methods=("drw-mi-e",)))
    cap = report.capacities[200]
    assert all(c in (0, 1) for c in cap)
    assert np.isfinite(report.records[0].theta_hat)
