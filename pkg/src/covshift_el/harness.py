"""Monte-Carlo replication engine for the simulation designs.

Each replication draws a dataset, fits the nuisances once, and runs every
requested method on it:

* ``drw``       density-ratio weighted moments, bootstrap interval;
* ``mi``        imputation-only moments, bootstrap interval;
* ``drw-mi-e``  orthogonal moments with fitted nuisances, Wilks interval;
* ``drw-mi-t``  orthogonal moments with the true ratio and the exact conditional moment.
"""
from __future__ import annotations

import csv
import io
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from functools import lru_cache

import numpy as np

from . import cond_density as cd
from . import data
from . import density_ratio as dr
from . import el
from . import funclass as fc
from . import moments as mom
from . import rng as rngmod
from .errors import ConfigurationError, InferenceError, NumericError

log = logging.getLogger(__name__)

METHODS = ("drw", "mi", "drw-mi-e", "drw-mi-t")
TRUTH_SEED = 20240611
TRUTH_DRAWS = 10_000_000

SIM_OPTIMIZER = fc.OptimizerConfig(max_epochs=300)
SIM_RATIO = fc.FunctionClassConfig(degree_or_width_candidates=(8, 16, 32), depth_candidates=(1,),
                                   optimizer=SIM_OPTIMIZER)
SIM_CDE = fc.FunctionClassConfig(degree_or_width_candidates=(8, 16, 32), depth_candidates=(1,),
                                 optimizer=SIM_OPTIMIZER)


@dataclass(frozen=True)
class ExperimentPlan:
    """A grid of scenarios (one per sample size) and the methods to compare."""

    covariate_setting: str = "S1"
    response_model: str = "M2"
    d: int = 5
    n_values: tuple = (1000,)
    m_ratio: float = 0.5
    estimand: str = "quantile:0.5"
    methods: tuple = ("drw", "drw-mi-e")
    replications: int = 300
    ci_level: float = 0.95
    master_seed: int = 0
    divergence: str = "kl"
    ratio: fc.FunctionClassConfig = SIM_RATIO
    cde: fc.FunctionClassConfig = SIM_CDE
    kappa_fraction: float = 0.5
    bootstrap_b: int = 100
    bootstrap_epochs: int = 150
    pilot_cv: bool = True
    truth_draws: int = TRUTH_DRAWS
    workers: int = 1
    max_failure_rate: float = 0.1

    def __post_init__(self):
        if self.replications < 1:
            raise ConfigurationError("replications must be at least 1")
        bad = set(self.methods) - set(METHODS)
        if bad:
            raise ConfigurationError(f"unknown method(s) {sorted(bad)}; choose from {METHODS}")
        if not 0 < self.ci_level < 1:
            raise ConfigurationError("ci_level must lie in (0, 1)")
        if self.kappa_fraction <= 0:
            raise ConfigurationError("kappa_fraction must be positive")
        if not self.n_values:
            raise ConfigurationError("n_values must not be empty")
        mom.parse_estimand(self.estimand)
        object.__setattr__(self, "n_values", tuple(int(n) for n in self.n_values))
        object.__setattr__(self, "methods", tuple(self.methods))

    def scenarios(self) -> list[data.ScenarioConfig]:
        return [data.ScenarioConfig(self.covariate_setting, self.response_model, n=n,
                                    m=max(1, int(round(self.m_ratio * n))), d=self.d, seed=self.master_seed)
                for n in self.n_values]

    def with_(self, **kw) -> "ExperimentPlan":
        return replace(self, **kw)

    def to_dict(self) -> dict:
        out = {f.name: getattr(self, f.name) for f in fields(self)}
        out["ratio"] = self.ratio.to_dict()
        out["cde"] = self.cde.to_dict()
        out["n_values"] = list(self.n_values)
        out["methods"] = list(self.methods)
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentPlan":
        known = {f.name for f in fields(cls)}
        extra = set(d) - known
        if extra:
            raise ConfigurationError(f"unknown plan key(s): {sorted(extra)}")
        d = dict(d)
        for k in ("ratio", "cde"):
            if k in d:
                d[k] = fc.FunctionClassConfig.from_dict(d[k])
        for k in ("n_values", "methods"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)


# --- truth -----------------------------------------------------------------------

@lru_cache(maxsize=64)
def _truth(setting: str, model: str, d: int, estimand: str, draws: int) -> float:
    g = mom.parse_estimand(estimand)
    gen = rngmod.stream(TRUTH_SEED, rngmod.PURPOSE_TRUTH)
    chunk = 1_000_000
    ys = []
    done = 0
    while done < draws:
        k = min(chunk, draws - done)
        x = data.generate_covariates(setting, "target", k, d, gen)
        ys.append(data.generate_responses(x, model, gen))
        done += k
    y = np.concatenate(ys)
    if isinstance(g, mom.Mean):
        return float(y.mean())
    return float(np.quantile(y, g.alpha))


def true_parameter(scenario: data.ScenarioConfig, estimand: str, draws: int = TRUTH_DRAWS) -> float:
    """Target-population parameter by a fixed-seed Monte-Carlo of ``draws`` target responses."""
    return _truth(scenario.covariate_setting, scenario.response_model, scenario.d,
                  mom.parse_estimand(estimand).id, int(draws))


# --- one replication -------------------------------------------------------------

@dataclass(frozen=True)
class Record:
    n: int
    rep: int
    method: str
    theta_hat: float = math.nan
    ci_lo: float = math.nan
    ci_hi: float = math.nan
    r_n_truth: float = math.nan
    error: str = ""

    @property
    def ok(self) -> bool:
        return not self.error


def _pilot_capacity(plan: ExperimentPlan, scen_index: int, scen: data.ScenarioConfig):
    if not plan.pilot_cv:
        return 0, 0
    pilot = data.generate_dataset(scen, rngmod.stream(plan.master_seed, rngmod.PURPOSE_PILOT, scen_index))
    spec = plan.divergence
    cap_r = fc.cv_select(plan.ratio, spec, pilot.source_x, pilot.target_x,
                         rngmod.stream(plan.master_seed, rngmod.PURPOSE_PILOT, scen_index, 1))
    aux = cd.AuxiliaryDistribution.matched(pilot.source_y)
    gen = rngmod.stream(plan.master_seed, rngmod.PURPOSE_PILOT, scen_index, 2)
    denom = np.column_stack([aux.sample(gen, pilot.n), pilot.source_x])
    numer = np.column_stack([pilot.source_y, pilot.source_x])
    cap_c = fc.cv_select(plan.cde, spec, denom, numer, gen)
    return cap_r, cap_c


def _single_capacity(config: fc.FunctionClassConfig, cap: int) -> fc.FunctionClassConfig:
    kind, desc = config.capacities()[cap]
    if kind == "mlp":
        return config.with_(degree_or_width_candidates=(desc[0],), depth_candidates=(len(desc),))
    return config.with_(degree_or_width_candidates=(desc,))


def run_replication(plan: ExperimentPlan, scen_index: int, rep: int, capacities=(0, 0),
                    theta0: float | None = None) -> list[Record]:
    scen = plan.scenarios()[scen_index]
    seed = plan.master_seed
    g = mom.parse_estimand(plan.estimand)
    if theta0 is None:
        theta0 = true_parameter(scen, plan.estimand, plan.truth_draws)
    ds = data.generate_dataset(scen, rngmod.stream(seed, rngmod.PURPOSE_DATA, scen_index, rep))
    ratio_cfg = _single_capacity(plan.ratio, capacities[0])
    cde_cfg = _single_capacity(plan.cde, capacities[1])
    n = scen.n
    out = []
    need_ratio = {"drw", "drw-mi-e"} & set(plan.methods)
    need_cde = {"mi", "drw-mi-e"} & set(plan.methods)
    r_hat = imp = None
    nuisance_error = ""
    try:
        if need_ratio:
            r_hat = dr.fit_ddr(ds, plan.divergence, ratio_cfg, rng=rngmod.stream(seed, rngmod.PURPOSE_RATIO, scen_index, rep))
        if need_cde:
            cm = cd.fit_conditional_density(ds, plan.divergence, cde_cfg,
                                            rng=rngmod.stream(seed, rngmod.PURPOSE_CDE, scen_index, rep))
            kappa = max(1, int(round(plan.kappa_fraction * ds.N)))
            imp = cd.impute(cm, ds.x_all, kappa, seed=rngmod.child_seed(
                rngmod.stream(seed, rngmod.PURPOSE_IMPUTE, scen_index, rep)))
    except NumericError as exc:
        nuisance_error = f"nuisance fit failed: {exc}"

    boot_seed = rngmod.child_seed(rngmod.stream(seed, rngmod.PURPOSE_BOOTSTRAP, scen_index, rep))
    boot_opt = replace(ratio_cfg.optimizer, max_epochs=plan.bootstrap_epochs)

    for method in plan.methods:
        if nuisance_error and method != "drw-mi-t":
            out.append(Record(n, rep, method, error=nuisance_error))
            continue
        try:
            out.append(_run_method(method, plan, ds, g, theta0, r_hat, imp, scen, ratio_cfg, cde_cfg,
                                   boot_seed, boot_opt, n, rep))
        except (NumericError, InferenceError) as exc:
            out.append(Record(n, rep, method, error=f"{type(exc).__name__}: {exc}"))
    return out


def _run_method(method, plan, ds, g, theta0, r_hat, imp, scen, ratio_cfg, cde_cfg, boot_seed, boot_opt, n, rep):
    level = plan.ci_level
    if method in ("drw-mi-e", "drw-mi-t"):
        if method == "drw-mi-e":
            nu = mom.Nuisances(r_hat, imp)
        else:
            setting = scen.covariate_setting
            nu = mom.Nuisances(lambda x: data.true_density_ratio(setting, x),
                               mom.oracle_conditional(g, scen.response_model))
        res = el.maximize_el(ds, nu, g)
        lo, hi = el.wilks_ci(res, level)
        return Record(n, rep, method, float(res.theta_hat[0]), lo, hi, res.r_n_at(theta0))
    if method == "drw":
        res = el.drw_estimate(ds, r_hat, g)

        def est(bds, b):
            rb = dr.fit_ddr(bds, plan.divergence, ratio_cfg, rng=rngmod.stream(boot_seed, b), init=r_hat,
                            optimizer=boot_opt)
            return el.drw_estimate(bds, rb, g).theta_hat[0]
    else:
        res = el.mi_estimate(ds, imp, g)

        def est(bds, b):
            cm = cd.fit_conditional_density(bds, plan.divergence, cde_cfg.with_(optimizer=boot_opt),
                                            rng=rngmod.stream(boot_seed, b))
            ib = cd.impute(cm, bds.x_all, imp.kappa, seed=rngmod.child_seed(rngmod.stream(boot_seed, b, 1)))
            return el.mi_estimate(bds, ib, g).theta_hat[0]
    (lo, hi), _, _ = el.bootstrap_ci(est, ds, plan.bootstrap_b, level, seed=boot_seed)
    return Record(n, rep, method, float(res.theta_hat[0]), lo, hi)


# --- aggregation ----------------------------------------------------------------

@dataclass(frozen=True)
class MethodSummary:
    n: int
    method: str
    bias: float
    std_dev: float
    mse: float
    coverage: float
    ci_length: float
    replications: int
    failures: int
    mean_r_n_truth: float = math.nan
    rejection_rate: float = math.nan


@dataclass(frozen=True)
class SimReport:
    plan: dict
    truths: dict
    summaries: tuple
    records: tuple
    capacities: dict = field(default_factory=dict)

    def summary(self, method: str, n: int | None = None) -> MethodSummary:
        for s in self.summaries:
            if s.method == method and (n is None or s.n == n):
                return s
        raise KeyError((method, n))

    def records_for(self, method: str, n: int | None = None) -> list[Record]:
        return [r for r in self.records if r.method == method and (n is None or r.n == n)]

    def to_dict(self) -> dict:
        return {"plan": self.plan, "truths": {str(k): v for k, v in self.truths.items()},
                "capacities": {str(k): list(v) for k, v in self.capacities.items()},
                "summaries": [asdict(s) for s in self.summaries],
                "records": [asdict(r) for r in self.records]}

    def to_json(self) -> str:
        return json.dumps(_jsonable(self.to_dict()), indent=2, sort_keys=True)


def _jsonable(obj):
    if isinstance(obj, float):
        return obj if math.isfinite(obj) else None
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    return obj


def summarize(records, theta0: float, n: int, method: str, level: float) -> MethodSummary:
    ok = [r for r in records if r.ok]
    failures = len(records) - len(ok)
    if not ok:
        nan = math.nan
        return MethodSummary(n, method, nan, nan, nan, nan, nan, 0, failures)
    est = np.array([r.theta_hat for r in ok])
    err = est - theta0
    bias = float(err.mean())
    sd = float(est.std(ddof=0))
    lo = np.array([r.ci_lo for r in ok])
    hi = np.array([r.ci_hi for r in ok])
    cover = float(np.mean((lo <= theta0) & (theta0 <= hi)))
    rn = np.array([r.r_n_truth for r in ok])
    mean_rn = rej = math.nan
    if np.any(np.isfinite(rn)):
        rn = rn[np.isfinite(rn)]
        mean_rn = float(rn.mean())
        rej = float(np.mean(rn > el.wilks_threshold(level)))
    return MethodSummary(n, method, bias, sd, bias ** 2 + sd ** 2, cover, float(np.mean(hi - lo)),
                         len(ok), failures, mean_rn, rej)


def _task(args):
    plan, i, rep, caps, theta0 = args
    return run_replication(plan, i, rep, caps, theta0)


def run_plan(plan: ExperimentPlan, progress=None) -> SimReport:
    """Run every replication of every scenario; results are ordered by (scenario, replication)."""
    scens = plan.scenarios()
    truths, caps = {}, {}
    tasks = []
    for i, scen in enumerate(scens):
        truths[scen.n] = true_parameter(scen, plan.estimand, plan.truth_draws)
        caps[scen.n] = _pilot_capacity(plan, i, scen)
        log.info("n=%d truth=%.6f capacities=%s", scen.n, truths[scen.n], caps[scen.n])
        tasks += [(plan, i, rep, caps[scen.n], truths[scen.n]) for rep in range(plan.replications)]
    if plan.workers > 1:
        with ProcessPoolExecutor(plan.workers) as pool:
            results = list(pool.map(_task, tasks, chunksize=1))
    else:
        results = []
        for t in tasks:
            results.append(_task(t))
            if progress:
                progress(len(results), len(tasks))
    records = tuple(r for batch in results for r in batch)
    summaries = []
    for scen in scens:
        for method in plan.methods:
            recs = [r for r in records if r.n == scen.n and r.method == method]
            s = summarize(recs, truths[scen.n], scen.n, method, plan.ci_level)
            if s.failures > plan.max_failure_rate * len(recs):
                raise InferenceError(f"{method} at n={scen.n}: {s.failures} of {len(recs)} replications failed",
                                     [r.error for r in recs if not r.ok])
            summaries.append(s)
    return SimReport(plan.to_dict(), truths, tuple(summaries), records, caps)


# --- tables -----------------------------------------------------------------------

TABLE_COLUMNS = ("n", "method", "bias", "std_dev", "mse", "coverage", "ci_length", "replications", "failures")


def _fmt(v):
    if isinstance(v, float):
        return "nan" if not math.isfinite(v) else f"{v:.4f}"
    return str(v)


def report_table(report: SimReport, fmt: str = "text") -> str:
    """Aligned text or CSV table with one row per (n, method), 4-decimal numbers."""
    rows = [[_fmt(getattr(s, c)) for c in TABLE_COLUMNS] for s in report.summaries]
    if fmt == "csv":
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(TABLE_COLUMNS)
        w.writerows(rows)
        return buf.getvalue()
    if fmt != "text":
        raise ConfigurationError(f"unknown table format {fmt!r}")
    widths = [max(len(c), *(len(r[k]) for r in rows)) if rows else len(c) for k, c in enumerate(TABLE_COLUMNS)]
    lines = ["  ".join(c.rjust(w) for c, w in zip(TABLE_COLUMNS, widths))]
    lines += ["  ".join(v.rjust(w) for v, w in zip(r, widths)) for r in rows]
    return "\n".join(lines) + "\n"


def records_csv(report: SimReport) -> str:
    buf = io.StringIO()
    names = [f.name for f in fields(Record)]
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(names)
    for r in report.records:
        w.writerow([repr(getattr(r, k)) if isinstance(getattr(r, k), float) else getattr(r, k) for k in names])
    return buf.getvalue()
