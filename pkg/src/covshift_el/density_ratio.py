"""Density-ratio estimators r(x) = q(x) / p(x) and their error metrics.

``fit_ddr`` is the divergence-based direct estimator. ``fit_kernel_smoothing``
and ``fit_prob_classification`` are the two plug-in baselines (ratio of kernel
density estimates; odds of a logistic source/target classifier).
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import optimize, special

from . import divergence as div
from . import funclass as fc
from . import rng as rngmod
from .data import Dataset
from .errors import ConfigurationError, NumericError

log = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class RatioModel:
    """A fitted ratio. Evaluation always lands in ``[clamp[0], clamp[1]]``."""

    fitted: object
    spec: div.DivergenceSpec
    objective_value: float
    divergence_estimate: float
    method: str = "ddr"
    clamp: tuple = fc.DEFAULT_CLAMP
    extra: dict = field(default_factory=dict)

    def __call__(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.ndim == 1:
            x = x[:, None] if self.input_dim == 1 else x[None, :]
        return np.clip(self.fitted(x), *self.clamp)

    @property
    def input_dim(self) -> int:
        return getattr(self.fitted, "input_dim", 0)

    def to_dict(self) -> dict:
        out = {
            "method": self.method,
            "divergence": self.spec.id,
            "objective_value": self.objective_value,
            "divergence_estimate": self.divergence_estimate,
            "clamp": list(self.clamp),
        }
        if hasattr(self.fitted, "to_dict"):
            out["fitted"] = self.fitted.to_dict()
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "RatioModel":
        kinds = {"ddr": fc.FittedFunction, "ks": KernelRatio, "pc": LogisticRatio}
        fitted = kinds[d["method"]].from_dict(d["fitted"])
        return cls(fitted=fitted, spec=div.get(d["divergence"]), objective_value=d["objective_value"],
                   divergence_estimate=d["divergence_estimate"], method=d["method"],
                   clamp=tuple(d["clamp"]))

    @classmethod
    def from_function(cls, fn, input_dim: int, name: str = "oracle", clamp=(1e-12, 1e12)) -> "RatioModel":
        """Wrap a known ratio function (e.g. the simulation truth) without fitting."""
        return cls(fitted=_Wrapped(fn, input_dim), spec=div.KL, objective_value=math.nan,
                   divergence_estimate=math.nan, method=name, clamp=clamp)


@dataclass(frozen=True)
class _Wrapped:
    fn: object
    input_dim: int

    def __call__(self, x):
        return np.asarray(self.fn(x), dtype=float)


def constant_ratio(d: int, value: float = 1.0) -> RatioModel:
    return RatioModel.from_function(lambda x: np.full(np.atleast_2d(x).shape[0], value), d, "constant")


def _kl_objective(r_source, r_target):
    return div.population_objective(div.KL, r_source, r_target)


# --- divergence-based direct estimator ------------------------------------

def fit_ddr(dataset: Dataset, spec="kl", funclass_config: fc.FunctionClassConfig | None = None,
            rng=None, capacity_index=None, init: "RatioModel | None" = None,
            optimizer: fc.OptimizerConfig | None = None) -> RatioModel:
    spec = div.get(spec)
    config = funclass_config or fc.FunctionClassConfig()
    fitted = fc.fit_erm(config, spec, dataset.source_x, dataset.target_x, rng=rng,
                        capacity_index=capacity_index,
                        init=None if init is None else init.fitted, optimizer=optimizer)
    obj = fitted.objective_value
    return RatioModel(fitted=fitted, spec=spec, objective_value=obj,
                      divergence_estimate=div.divergence_estimate(spec, obj), method="ddr",
                      clamp=config.clamp)


# --- kernel smoothing -----------------------------------------------------

def silverman_bandwidths(x: np.ndarray) -> np.ndarray:
    n, d = x.shape
    sd = x.std(axis=0, ddof=1) if n > 1 else np.zeros(d)
    if np.any(sd <= 0):
        raise NumericError("degenerate bandwidth: a covariate column has zero variance")
    return (4.0 / (d + 2)) ** (1.0 / (d + 4)) * sd * n ** (-1.0 / (d + 4))


def _sq_dist(a, b, scale):
    a, b = a / scale, b / scale
    d2 = (a * a).sum(1)[:, None] + (b * b).sum(1)[None, :] - 2.0 * a @ b.T
    return np.maximum(d2, 0.0)


def _select_bandwidth(x, grid, exact_loo_max=2000, folds=5, rng=None):
    """Return the grid multiplier maximising held-out log-likelihood."""
    n, d = x.shape
    base = silverman_bandwidths(x)
    scores = np.zeros(len(grid))
    log_norm = -0.5 * d * math.log(2 * math.pi) - np.log(base).sum()
    if n <= exact_loo_max:
        d2 = _sq_dist(x, x, base)
        for g, c in enumerate(grid):
            k = np.exp(-0.5 * d2 / c ** 2)
            np.fill_diagonal(k, 0.0)
            dens = k.sum(1) / (n - 1)
            scores[g] = np.mean(np.log(np.maximum(dens, 1e-300))) + log_norm - d * math.log(c)
    else:
        rng = rngmod.as_generator(0 if rng is None else rng)
        ids = np.arange(n) % folds
        rng.shuffle(ids)
        for k_ in range(folds):
            tr, te = x[ids != k_], x[ids == k_]
            d2 = _sq_dist(te, tr, base)
            for g, c in enumerate(grid):
                dens = np.exp(-0.5 * d2 / c ** 2).sum(1) / tr.shape[0]
                scores[g] += (np.sum(np.log(np.maximum(dens, 1e-300)))
                              + te.shape[0] * (log_norm - d * math.log(c))) / n
    return float(grid[int(np.argmax(scores))]) * base


@dataclass(frozen=True, eq=False)
class KernelRatio:
    source: np.ndarray
    target: np.ndarray
    h_source: np.ndarray
    h_target: np.ndarray
    r_max: float

    @property
    def input_dim(self):
        return self.source.shape[1]

    @staticmethod
    def _density(x, pts, h):
        out = np.empty(x.shape[0])
        norm = pts.shape[0] * np.prod(h) * (2 * math.pi) ** (pts.shape[1] / 2)
        for s in range(0, x.shape[0], 1024):
            out[s:s + 1024] = np.exp(-0.5 * _sq_dist(x[s:s + 1024], pts, h)).sum(1) / norm
        return out

    def __call__(self, x):
        p = self._density(x, self.source, self.h_source)
        q = self._density(x, self.target, self.h_target)
        with np.errstate(divide="ignore", invalid="ignore"):
            r = np.where(p > 0, q / np.where(p > 0, p, 1.0), self.r_max)
        return r

    def to_dict(self):
        return {k: np.asarray(getattr(self, k)).tolist() for k in ("source", "target", "h_source", "h_target")} | {
            "r_max": self.r_max}

    @classmethod
    def from_dict(cls, d):
        return cls(np.array(d["source"]), np.array(d["target"]), np.array(d["h_source"]),
                   np.array(d["h_target"]), float(d["r_max"]))


def fit_kernel_smoothing(dataset: Dataset, bandwidth_grid=None, clamp=fc.DEFAULT_CLAMP, rng=None) -> RatioModel:
    if dataset.d > 10:
        log.warning("kernel smoothing with d=%d is unlikely to be informative", dataset.d)
    grid = np.geomspace(0.25, 4.0, 20) if bandwidth_grid is None else np.asarray(bandwidth_grid, float)
    rng = rngmod.as_generator(0 if rng is None else rng)
    hp = _select_bandwidth(dataset.source_x, grid, rng=rng)
    hq = _select_bandwidth(dataset.target_x, grid, rng=rng)
    fitted = KernelRatio(np.array(dataset.source_x), np.array(dataset.target_x), hp, hq, clamp[1])
    model = RatioModel(fitted=fitted, spec=div.KL, objective_value=math.nan,
                       divergence_estimate=math.nan, method="ks", clamp=clamp)
    return _with_kl_summary(model, dataset)


def _with_kl_summary(model: RatioModel, dataset: Dataset) -> RatioModel:
    obj = _kl_objective(model(dataset.source_x), model(dataset.target_x))
    return RatioModel(fitted=model.fitted, spec=div.KL, objective_value=obj,
                      divergence_estimate=div.divergence_estimate(div.KL, obj), method=model.method,
                      clamp=model.clamp)


# --- probabilistic classification -----------------------------------------

@dataclass(frozen=True, eq=False)
class LogisticRatio:
    sieve: fc.PolySieve
    coef: np.ndarray
    odds_scale: float

    @property
    def input_dim(self):
        return self.sieve.input_dim

    def logit(self, x):
        return self.sieve.prepare(np.asarray(x, dtype=float)) @ self.coef

    def __call__(self, x):
        return self.odds_scale * np.exp(np.clip(self.logit(x), -700, 700))

    def to_dict(self):
        return {"sieve": self.sieve.descriptor(), "coef": self.coef.tolist(), "odds_scale": self.odds_scale}

    @classmethod
    def from_dict(cls, d):
        s = d["sieve"]
        return cls(fc.PolySieve(s["exponents"], s["lo"], s["hi"]), np.array(d["coef"]), float(d["odds_scale"]))


def ratio_from_posterior(pi, tau_hat):
    """Bayes identity: r = {(1 - tau)/tau} * pi / (1 - pi), pi = P(target | x)."""
    pi = np.asarray(pi, dtype=float)
    return (1.0 - tau_hat) / tau_hat * pi / (1.0 - pi)


def fit_prob_classification(dataset: Dataset, degree: int = 2, clamp=fc.DEFAULT_CLAMP,
                            ridge: float = 1e-6) -> RatioModel:
    x = dataset.x_all
    delta = dataset.delta
    sieve = fc.PolySieve.build(degree, x)
    phi = sieve.prepare(x)

    def loss(beta):
        eta = phi @ beta
        val = np.mean(np.logaddexp(0.0, eta) - delta * eta) + ridge * beta[1:] @ beta[1:]
        grad = phi.T @ (special.expit(eta) - delta) / len(delta)
        grad[1:] += 2 * ridge * beta[1:]
        return val, grad

    beta0 = np.zeros(phi.shape[1])
    beta0[0] = special.logit(dataset.tau_hat)
    res = optimize.minimize(loss, beta0, jac=True, method="L-BFGS-B", options={"maxiter": 2000})
    eta = phi @ res.x
    if np.all(eta[delta == 1] > 0) and np.all(eta[delta == 0] < 0):
        raise NumericError("source and target are perfectly separated by the classifier; "
                           "use a lower feature degree or tighter clamping")
    tau = dataset.tau_hat
    fitted = LogisticRatio(sieve, res.x, (1.0 - tau) / tau)
    model = RatioModel(fitted=fitted, spec=div.KL, objective_value=math.nan,
                       divergence_estimate=math.nan, method="pc", clamp=clamp)
    return _with_kl_summary(model, dataset)


# --- metrics ------------------------------------------------------------------

def empirical_l2_error(r_hat, oracle, x_all) -> float:
    """Root mean squared deviation of ``r_hat`` from ``oracle`` over the pooled rows."""
    x_all = np.atleast_2d(np.asarray(x_all, dtype=float))
    diff = np.asarray(r_hat(x_all), dtype=float) - np.asarray(oracle(x_all), dtype=float)
    return float(np.sqrt(np.mean(diff ** 2)))


def source_mse(r_hat, oracle, x_source) -> float:
    """Mean squared deviation over the source rows (the simulation-table metric)."""
    x_source = np.atleast_2d(np.asarray(x_source, dtype=float))
    diff = np.asarray(r_hat(x_source), dtype=float) - np.asarray(oracle(x_source), dtype=float)
    return float(np.mean(diff ** 2))


def fit(method: str, dataset: Dataset, spec="kl", funclass_config=None, rng=None) -> RatioModel:
    if method == "ddr":
        return fit_ddr(dataset, spec, funclass_config, rng=rng)
    if method == "ks":
        return fit_kernel_smoothing(dataset, rng=rng)
    if method == "pc":
        return fit_prob_classification(dataset)
    raise ConfigurationError(f"unknown density-ratio method {method!r}; use ddr, ks or pc")
