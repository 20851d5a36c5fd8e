"""Profile empirical likelihood for moment conditions.

Inner problem (per theta): maximise sum_i log(1 + lambda^T Psi_i) over lambda, with
log replaced by its quadratic Taylor continuation below 1/rows so the dual is
finite everywhere. The profile statistic is ell(theta) = sum_i log(1 + lambda^T Psi_i),
theta_hat minimises it, and R(theta) = 2 ell(theta) - 2 ell(theta_hat) is
approximately chi-square with r degrees of freedom.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, fields, replace
from typing import Callable

import numpy as np
from scipy import optimize, stats

from . import moments as mom
from . import rng as rngmod
from .data import Dataset
from .errors import (ConfigurationError, ContractError, ConvexHullViolation, EstimationError,
                     InferenceError, NumericError)

log = logging.getLogger(__name__)

WILKS = "wilks"
BOOTSTRAP = "bootstrap"


@dataclass(frozen=True)
class ELConfig:
    max_iter: int = 100
    tolerance: float = 1e-9
    max_halvings: int = 60
    grid_points: int = 41
    outer_tolerance: float = 1e-7
    bracket: tuple | None = None
    bracket_pad: float = 0.1
    start: tuple | None = None
    ci_max_doublings: int = 40
    ci_tolerance: float = 1e-3

    def __post_init__(self):
        if not self.tolerance > 0 or not self.outer_tolerance > 0:
            raise ConfigurationError("tolerances must be positive")
        if self.grid_points < 3:
            raise ConfigurationError("grid_points must be at least 3")

    def with_(self, **kw) -> "ELConfig":
        return replace(self, **kw)

    @classmethod
    def from_dict(cls, d: dict) -> "ELConfig":
        known = {f.name for f in fields(cls)}
        extra = set(d) - known
        if extra:
            raise ConfigurationError(f"unknown el config key(s): {sorted(extra)}")
        d = dict(d)
        for k in ("bracket", "start"):
            if d.get(k) is not None:
                d[k] = tuple(d[k])
        return cls(**d)


@dataclass(frozen=True, eq=False)
class ELSolution:
    lam: np.ndarray
    weights: np.ndarray
    log_el: float
    converged: bool
    iterations: int
    grad_norm: float
    trace: tuple = ()

    @property
    def ell(self) -> float:
        """sum_i log(1 + lambda^T Psi_i) = -log_el."""
        return -self.log_el


# --- inner solver ----------------------------------------------------------------------

def _pseudo_log(z, eps):
    """log z above eps, its second-order expansion at eps below; with first two derivatives."""
    if z.min() >= eps:
        inv = 1.0 / z
        return np.log(z), inv, -inv * inv
    lo = z < eps
    zs = np.where(lo, eps, z)
    f = np.log(zs)
    d1 = 1.0 / zs
    d2 = -1.0 / zs ** 2
    if np.any(lo):
        u = z[lo] - eps
        f[lo] = math.log(eps) + u / eps - 0.5 * u * u / eps ** 2
        d1[lo] = 1.0 / eps - u / eps ** 2
        d2[lo] = -1.0 / eps ** 2
    return f, d1, d2


def zero_in_hull(psi: np.ndarray) -> bool:
    """True iff the origin lies in the relative interior of the convex hull of the rows."""
    psi = np.asarray(psi, dtype=float)
    if psi.shape[1] == 1:
        v = psi[:, 0]
        if np.all(v == 0):
            return True
        return bool(v.min() < 0 < v.max())
    k = psi.shape[0]
    # maximise t subject to w_i >= t, sum w = 1, Psi^T w = 0
    c = np.zeros(k + 1)
    c[-1] = -1.0
    a_eq = np.zeros((psi.shape[1] + 1, k + 1))
    a_eq[:-1, :k] = psi.T
    a_eq[-1, :k] = 1.0
    b_eq = np.zeros(psi.shape[1] + 1)
    b_eq[-1] = 1.0
    a_ub = np.hstack([-np.eye(k), np.ones((k, 1))])
    res = optimize.linprog(c, A_ub=a_ub, b_ub=np.zeros(k), A_eq=a_eq, b_eq=b_eq,
                           bounds=[(0, None)] * k + [(None, None)], method="highs")
    return bool(res.status == 0 and -res.fun > 1e-10 / k)


def solve_lambda(moments, config: ELConfig | None = None) -> ELSolution:
    """Damped Newton ascent on the concave dual; raises ConvexHullViolation if infeasible."""
    config = config or ELConfig()
    psi = moments.values if isinstance(moments, mom.MomentMatrix) else np.asarray(moments, dtype=float)
    if psi.ndim == 1:
        psi = psi[:, None]
    rows, r = psi.shape
    if rows < r + 1:
        raise ConfigurationError("EL needs more rows than moment conditions")
    if not zero_in_hull(psi):
        raise ConvexHullViolation("zero is not inside the convex hull of the moment rows")
    eps = 1.0 / rows
    lam = np.zeros(r)
    f, d1, d2 = _pseudo_log(1.0 + psi @ lam, eps)
    obj = f.sum()
    trace = [obj]
    scale = max(1.0, float(np.abs(psi).max()))
    converged = False
    it = 0
    grad = psi.T @ d1
    for it in range(1, config.max_iter + 1):
        hess = psi.T @ (psi * d2[:, None])
        try:
            step = np.linalg.solve(-hess, grad)
        except np.linalg.LinAlgError:
            step = np.linalg.lstsq(-hess, grad, rcond=None)[0]
        t = 1.0
        for _ in range(config.max_halvings):
            cand = lam + t * step
            fc, d1c, d2c = _pseudo_log(1.0 + psi @ cand, eps)
            if fc.sum() >= obj:
                break
            t *= 0.5
        else:
            break
        lam, f, d1, d2, obj = cand, fc, d1c, d2c, fc.sum()
        trace.append(obj)
        grad = psi.T @ d1
        if np.max(np.abs(grad)) <= config.tolerance * rows * scale:
            converged = True
            break
    z = 1.0 + psi @ lam
    if np.any(z <= 0):
        raise NumericError("EL multiplier left the feasible region")
    weights = 1.0 / (rows * z)
    return ELSolution(lam=lam, weights=weights, log_el=-float(np.log(z).sum()), converged=converged,
                      iterations=it, grad_norm=float(np.max(np.abs(psi.T @ (1.0 / z)))), trace=tuple(trace))


# --- profile and outer search -----------------------------------------------------

def profile_el(dataset: Dataset, nuisances: mom.Nuisances, g: mom.EstimatingFunction, theta,
               kind: str = mom.ORTHOGONAL, config: ELConfig | None = None) -> float:
    """ell(theta) = sum log(1 + lambda^T Psi_i); +inf where theta is infeasible."""
    psi = mom.build_moments(kind, dataset, nuisances, g, theta)
    try:
        return solve_lambda(psi, config).ell
    except ConvexHullViolation:
        return math.inf


@dataclass(frozen=True, eq=False)
class InferenceResult:
    theta_hat: np.ndarray
    ell_hat: float
    kind: str
    profile: Callable = field(repr=False)
    solution: ELSolution | None = None
    ci: tuple | None = None
    ci_method: str | None = None
    level: float | None = None
    r: int = 1
    evaluations: int = 0

    def r_n_at(self, theta) -> float:
        """2 ell(theta) - 2 ell(theta_hat), floored at zero."""
        v = self.profile(np.atleast_1d(np.asarray(theta, dtype=float)))
        return max(0.0, 2.0 * (v - self.ell_hat))

    def with_ci(self, ci, method, level) -> "InferenceResult":
        return replace(self, ci=(float(ci[0]), float(ci[1])), ci_method=method, level=level)

    def to_dict(self) -> dict:
        out = {"theta_hat": self.theta_hat.tolist(), "ell_hat": self.ell_hat, "moment_kind": self.kind,
               "ci": None if self.ci is None else list(self.ci), "ci_method": self.ci_method,
               "level": self.level, "evaluations": self.evaluations}
        if self.solution is not None:
            out["lambda"] = self.solution.lam.tolist()
            out["converged"] = self.solution.converged
            out["iterations"] = self.solution.iterations
            out["grad_norm"] = self.solution.grad_norm
        return out


def _golden(f, a, b, tol):
    inv = (math.sqrt(5) - 1) / 2
    c, d = b - inv * (b - a), a + inv * (b - a)
    fc, fd = f(c), f(d)
    while b - a > tol:
        if fc <= fd:
            b, d, fd = d, c, fc
            c = b - inv * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + inv * (b - a)
            fd = f(d)
    return (c, fc) if fc <= fd else (d, fd)


def maximize_el(dataset: Dataset, nuisances: mom.Nuisances, g: mom.EstimatingFunction,
                config: ELConfig | None = None, kind: str = mom.ORTHOGONAL) -> InferenceResult:
    config = config or ELConfig()
    cache: dict = {}

    def ell(theta):
        key = tuple(np.round(np.atleast_1d(theta), 15))
        if key not in cache:
            cache[key] = profile_el(dataset, nuisances, g, np.atleast_1d(theta), kind, config)
        return cache[key]

    if g.p == 1:
        lo, hi = config.bracket if config.bracket is not None else g.bracket(dataset.source_y)
        pad = config.bracket_pad * (hi - lo)
        lo, hi = lo - pad, hi + pad
        if hi <= lo:
            best, val = float(lo), ell(lo)
        else:
            grid = np.linspace(lo, hi, config.grid_points)
            vals = np.array([ell(t) for t in grid])
            if not np.any(np.isfinite(vals)):
                raise EstimationError("no feasible parameter on the search grid; widen the bracket")
            i = int(np.argmin(vals))
            a, b = grid[max(i - 1, 0)], grid[min(i + 1, len(grid) - 1)]
            best, val = _golden(ell, a, b, config.outer_tolerance * max(1.0, hi - lo))
            if vals[i] < val:
                best, val = grid[i], vals[i]
        theta_hat = np.array([best])
    else:
        if config.start is None:
            raise ConfigurationError("vector parameters need a starting point (ELConfig.start)")
        x0 = np.asarray(config.start, dtype=float)
        if not math.isfinite(ell(x0)):
            raise EstimationError("starting point is infeasible; choose another start")
        res = optimize.minimize(lambda t: ell(t), x0, method="Nelder-Mead",
                                options={"xatol": config.outer_tolerance, "fatol": 1e-10, "maxiter": 4000})
        theta_hat, val = np.asarray(res.x), float(res.fun)
    sol = solve_lambda(mom.build_moments(kind, dataset, nuisances, g, theta_hat), config)
    return InferenceResult(theta_hat=theta_hat, ell_hat=float(val), kind=kind, profile=ell, solution=sol,
                           r=g.r, evaluations=len(cache))


def drw_estimate(dataset: Dataset, r_hat, g: mom.EstimatingFunction, config: ELConfig | None = None) -> InferenceResult:
    nu = r_hat if isinstance(r_hat, mom.Nuisances) else mom.Nuisances(ratio=r_hat)
    return maximize_el(dataset, nu, g, config, kind=mom.DRW)


def mi_estimate(dataset: Dataset, imputations, g: mom.EstimatingFunction, config: ELConfig | None = None) -> InferenceResult:
    nu = imputations if isinstance(imputations, mom.Nuisances) else mom.Nuisances(conditional=imputations)
    return maximize_el(dataset, nu, g, config, kind=mom.MI)


# --- confidence intervals --------------------------------------------------------

def wilks_threshold(level: float, df: int = 1) -> float:
    return float(stats.chi2.ppf(level, df))


def wilks_ci(result: InferenceResult, level: float = 0.95, config: ELConfig | None = None,
             initial_step: float | None = None) -> tuple[float, float]:
    """Invert {theta : R(theta) <= chi2_r quantile} by bisection on each side of theta_hat."""
    if result.kind != mom.ORTHOGONAL:
        raise ContractError(f"Wilks calibration is not valid for {result.kind} moments; use a bootstrap interval")
    if result.theta_hat.size != 1:
        raise ContractError("interval inversion is only supported for scalar parameters")
    if not 0.0 < level < 1.0:
        raise ConfigurationError("level must lie in (0, 1)")
    config = config or ELConfig()
    q = wilks_threshold(level, result.r)
    th = float(result.theta_hat[0])
    step = initial_step or 0.05 * max(1e-3, abs(th), 1.0)

    def side(sign):
        inner, s = th, step
        for _ in range(config.ci_max_doublings):
            outer = th + sign * s
            if result.r_n_at(outer) > q:
                break
            inner, s = outer, 2 * s
        else:
            raise InferenceError("R_N never crossed the chi-square threshold within the search cap", [])
        a, b = inner, outer
        for _ in range(200):
            mid = 0.5 * (a + b)
            v = result.r_n_at(mid)
            if math.isfinite(v) and abs(v - q) <= config.ci_tolerance:
                return mid
            if v > q:
                b = mid
            else:
                a = mid
            if abs(b - a) <= 1e-12 * max(1.0, abs(th)):
                break
        return 0.5 * (a + b)

    return side(-1.0), side(1.0)


def bootstrap_ci(estimator: Callable[[Dataset, int], float], dataset: Dataset, B: int = 200,
                 level: float = 0.95, seed: int = 0, max_failure_rate: float = 0.2):
    """Percentile interval; source and target rows resampled independently.

    ``estimator(resampled_dataset, b)`` returns a scalar estimate. Returns
    (interval, estimates, failures).
    """
    if B < 50:
        raise ConfigurationError("bootstrap needs at least 50 resamples")
    estimates, failures = [], []
    for b in range(B):
        ds = dataset.resample(rngmod.stream(seed, rngmod.PURPOSE_BOOTSTRAP, b))
        try:
            estimates.append(float(estimator(ds, b)))
        except NumericError as exc:
            failures.append(f"resample {b}: {exc}")
    if len(failures) > max_failure_rate * B:
        raise InferenceError(f"{len(failures)} of {B} bootstrap resamples failed", failures)
    est = np.array(estimates)
    alpha = 1.0 - level
    lo, hi = np.quantile(est, [alpha / 2, 1 - alpha / 2])
    return (float(lo), float(hi)), est, failures
