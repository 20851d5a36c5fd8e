"""Estimating functions and the per-observation moment matrices fed to EL.

Two constructions are provided:

* DRW rows (source only): r(X_i) g(Z_i, theta).
* Orthogonal rows over the pooled sample:
  source  r(X_i) {g(Z_i, theta) - m(X_i, theta)} / (1 - tau),
  target  m(X_j, theta) / tau,
  where m(x, theta) = E{g(Z, theta) | X = x} and tau = m / N.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .cond_density import ImputationSet
from .data import Dataset, noise_sd, regression_function
from .errors import ConfigurationError, NumericError, ShapeError

DRW = "drw"
ORTHOGONAL = "orthogonal"
MI = "mi"


def _theta(theta) -> np.ndarray:
    return np.atleast_1d(np.asarray(theta, dtype=float))


class EstimatingFunction:
    """g(x, y, theta) -> (k, r) moment values for k paired rows.

    Subclasses override ``g`` and optionally ``jacobian`` (k, r, p) and the
    vectorised ``imputed`` average over imputation draws.
    """

    id = "custom"
    r = 1
    p = 1
    smooth = True

    def g(self, x, y, theta) -> np.ndarray:
        raise NotImplementedError

    def jacobian(self, x, y, theta):
        return None

    def imputed(self, x, imputations: ImputationSet, theta) -> np.ndarray:
        draws = imputations.draws
        acc = np.zeros((x.shape[0], self.r))
        for nu in range(draws.shape[1]):
            acc += self.g(x, draws[:, nu], theta)
        return acc / draws.shape[1]

    def imputed_jacobian(self, x, imputations: ImputationSet, theta):
        if self.jacobian(x[:1], imputations.draws[:1, 0], theta) is None:
            return None
        draws = imputations.draws
        acc = np.zeros((x.shape[0], self.r, self.p))
        for nu in range(draws.shape[1]):
            acc += self.jacobian(x, draws[:, nu], theta)
        return acc / draws.shape[1]

    def oracle_moment(self, x, theta, model: str) -> np.ndarray:
        """Exact m0(x, theta) under a simulation response model, if known."""
        raise NotImplementedError(f"no closed-form conditional moment for {self.id}")

    def bracket(self, y) -> tuple[float, float]:
        """Search interval for a scalar parameter, derived from source responses."""
        lo, hi = np.quantile(np.asarray(y, dtype=float), [0.005, 0.995])
        return float(lo), float(hi)

    def describe(self) -> str:
        return self.id


class Mean(EstimatingFunction):
    id = "mean"

    def g(self, x, y, theta):
        return (np.asarray(y, dtype=float) - _theta(theta)[0])[:, None]

    def jacobian(self, x, y, theta):
        return -np.ones((np.asarray(y).shape[0], 1, 1))

    def imputed(self, x, imputations, theta):
        return (imputations.row_means() - _theta(theta)[0])[:, None]

    def imputed_jacobian(self, x, imputations, theta):
        return -np.ones((imputations.rows, 1, 1))

    def oracle_moment(self, x, theta, model):
        return (regression_function(x, model) - _theta(theta)[0])[:, None]


class Quantile(EstimatingFunction):
    smooth = False

    def __init__(self, alpha: float = 0.5):
        if not 0.0 < alpha < 1.0:
            raise ConfigurationError("quantile level must lie in (0, 1)")
        self.alpha = float(alpha)
        self.id = f"quantile:{self.alpha:g}"

    def g(self, x, y, theta):
        return ((np.asarray(y, dtype=float) <= _theta(theta)[0]) - self.alpha)[:, None]

    def imputed(self, x, imputations, theta):
        return ((imputations.draws <= _theta(theta)[0]).mean(axis=1) - self.alpha)[:, None]

    def imputed_jacobian(self, x, imputations, theta):
        return None

    def oracle_moment(self, x, theta, model):
        from scipy.stats import norm
        z = (_theta(theta)[0] - regression_function(x, model)) / noise_sd(x)
        return (norm.cdf(z) - self.alpha)[:, None]


class Custom(EstimatingFunction):
    """User-supplied estimating function.

    ``fn(x, y, theta)`` must return a (k, r) array (a length-k vector is accepted
    for r = 1). ``jacobian`` likewise returns (k, r, p). ``oracle(x, theta, model)``
    optionally gives the exact conditional moment for simulation diagnostics.
    """

    def __init__(self, fn: Callable, r: int = 1, p: int = 1, jacobian: Callable | None = None,
                 smooth: bool = True, name: str = "custom", oracle: Callable | None = None,
                 bracket: Callable | None = None):
        if r < p:
            raise ConfigurationError("an estimating function needs at least as many moments as parameters")
        self._fn, self._jac, self._oracle, self._bracket = fn, jacobian, oracle, bracket
        self.r, self.p, self.smooth, self.id = int(r), int(p), bool(smooth), name

    def g(self, x, y, theta):
        out = np.asarray(self._fn(x, y, _theta(theta)), dtype=float)
        return out.reshape(out.shape[0], self.r)

    def jacobian(self, x, y, theta):
        if self._jac is None:
            return None
        out = np.asarray(self._jac(x, y, _theta(theta)), dtype=float)
        return out.reshape(out.shape[0], self.r, self.p)

    def oracle_moment(self, x, theta, model):
        if self._oracle is None:
            return super().oracle_moment(x, theta, model)
        return np.asarray(self._oracle(x, _theta(theta), model), dtype=float).reshape(len(x), self.r)

    def bracket(self, y):
        return self._bracket(y) if self._bracket else super().bracket(y)


def parse_estimand(text: str) -> EstimatingFunction:
    """'mean' or 'quantile:<alpha>' (plain 'median' is quantile:0.5)."""
    t = text.strip().lower()
    if t == "mean":
        return Mean()
    if t == "median":
        return Quantile(0.5)
    if t.startswith("quantile"):
        _, _, a = t.partition(":")
        try:
            return Quantile(float(a) if a else 0.5)
        except ValueError:
            raise ConfigurationError(f"bad quantile level in estimand {text!r}") from None
    raise ConfigurationError(f"unknown estimand {text!r}; use mean or quantile:<alpha>")


@dataclass(frozen=True, eq=False)
class MomentMatrix:
    values: np.ndarray
    kind: str
    theta: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.ndim != 2:
            raise ShapeError("moment values must be a (rows, r) matrix")
        if not np.all(np.isfinite(v)):
            raise NumericError("non-finite moment values")
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "theta", _theta(self.theta))

    @property
    def rows(self) -> int:
        return self.values.shape[0]

    @property
    def r(self) -> int:
        return self.values.shape[1]


# --- nuisances -------------------------------------------------------------------

def ratio_on(r_hat, x) -> np.ndarray:
    """Evaluate a ratio given as a model/callable, or pass through precomputed values."""
    if isinstance(r_hat, np.ndarray):
        if r_hat.shape[0] != len(x):
            raise ShapeError("precomputed ratio values do not match the rows")
        return r_hat.astype(float)
    return np.asarray(r_hat(x), dtype=float).reshape(-1)


@dataclass(eq=False)
class Nuisances:
    """Fitted (or oracle) nuisance pair with per-dataset caches.

    ``conditional`` is either an ImputationSet aligned with ``dataset.x_all`` or a
    callable ``(x, theta) -> (k, r)`` giving m(x, theta) directly (oracle use).
    """

    ratio: object = None
    conditional: object = None
    _r_source: np.ndarray | None = field(default=None, repr=False)

    def r_source(self, dataset: Dataset) -> np.ndarray:
        if self._r_source is None:
            if self.ratio is None:
                raise ConfigurationError("this moment needs a density-ratio nuisance")
            self._r_source = ratio_on(self.ratio, dataset.source_x)
        return self._r_source

    def m_all(self, dataset: Dataset, g: EstimatingFunction, theta) -> np.ndarray:
        c = self.conditional
        if c is None:
            raise ConfigurationError("this moment needs a conditional-moment nuisance")
        if isinstance(c, ImputationSet):
            if c.rows != dataset.N:
                raise ShapeError("imputations do not cover all pooled rows")
            return g.imputed(dataset.x_all, c, theta)
        return np.asarray(c(dataset.x_all, _theta(theta)), dtype=float).reshape(dataset.N, g.r)


def _check_tau(dataset: Dataset) -> float:
    tau = dataset.tau_hat
    if not 0.0 < tau < 1.0:
        raise ConfigurationError("the mixing proportion must lie strictly between 0 and 1")
    return tau


def drw_moments(dataset: Dataset, r_hat, g: EstimatingFunction, theta) -> MomentMatrix:
    r = r_hat.r_source(dataset) if isinstance(r_hat, Nuisances) else ratio_on(r_hat, dataset.source_x)
    vals = r[:, None] * g.g(dataset.source_x, dataset.source_y, theta)
    return MomentMatrix(vals, DRW, theta)


def orthogonal_rows(r_source, g_source, m_source, m_target, tau) -> np.ndarray:
    src = np.asarray(r_source, dtype=float)[:, None] * (g_source - m_source) / (1.0 - tau)
    return np.vstack([src, m_target / tau])


def orthogonal_moments(dataset: Dataset, r_hat, imputations, g: EstimatingFunction, theta) -> MomentMatrix:
    """Pooled N-row orthogonal moment; ``imputations`` as accepted by ``Nuisances``."""
    tau = _check_tau(dataset)
    nu = r_hat if isinstance(r_hat, Nuisances) else Nuisances(r_hat, imputations)
    m = nu.m_all(dataset, g, theta)
    vals = orthogonal_rows(nu.r_source(dataset), g.g(dataset.source_x, dataset.source_y, theta),
                           m[:dataset.n], m[dataset.n:], tau)
    return MomentMatrix(vals, ORTHOGONAL, theta)


def mi_moments(dataset: Dataset, imputations, g: EstimatingFunction, theta) -> MomentMatrix:
    """Imputation-only moment: the target rows m(X_j, theta) / tau."""
    tau = _check_tau(dataset)
    nu = imputations if isinstance(imputations, Nuisances) else Nuisances(None, imputations)
    m = nu.m_all(dataset, g, theta)
    return MomentMatrix(m[dataset.n:] / tau, MI, theta)


def build_moments(kind: str, dataset: Dataset, nuisances: Nuisances, g: EstimatingFunction, theta) -> MomentMatrix:
    if kind == ORTHOGONAL:
        return orthogonal_moments(dataset, nuisances, None, g, theta)
    if kind == DRW:
        return drw_moments(dataset, nuisances, g, theta)
    if kind == MI:
        return mi_moments(dataset, nuisances, g, theta)
    raise ConfigurationError(f"unknown moment kind {kind!r}")


# --- orthogonality diagnostic ---------------------------------------------------

def _mean_orthogonal(dataset, g, theta, r_src, m_all):
    tau = dataset.tau_hat
    rows = orthogonal_rows(r_src, g.g(dataset.source_x, dataset.source_y, theta),
                           m_all[:dataset.n], m_all[dataset.n:], tau)
    return rows.mean(axis=0)


def orthogonality_gap(dataset: Dataset, g: EstimatingFunction, theta0, eta0, direction, t: float = 1e-3):
    """Central-difference derivative of the mean moment along eta0 + t h.

    ``eta0 = (r0, m0)`` with r0(x) -> (k,) and m0(x, theta) -> (k, r);
    ``direction = (dr, dm)`` with the same signatures (either may be None).
    Returns (gap_orthogonal, gap_drw) as Euclidean norms of the derivative vectors.
    """
    if not t > 0:
        raise ConfigurationError("finite-difference step must be positive")
    r0, m0 = eta0
    dr, dm = direction
    xs, xa = dataset.source_x, dataset.x_all
    r_src = ratio_on(r0, xs)
    dr_src = np.zeros_like(r_src) if dr is None else ratio_on(dr, xs)
    m_base = np.asarray(m0(xa, theta0), dtype=float).reshape(dataset.N, g.r)
    m_dir = np.zeros_like(m_base) if dm is None else np.asarray(dm(xa, theta0), dtype=float).reshape(m_base.shape)
    g_src = g.g(xs, dataset.source_y, theta0)

    def ortho(s):
        return _mean_orthogonal(dataset, g, theta0, r_src + s * dr_src, m_base + s * m_dir)

    def drw(s):
        return ((r_src + s * dr_src)[:, None] * g_src).mean(axis=0)

    gap_o = (ortho(t) - ortho(-t)) / (2 * t)
    gap_d = (drw(t) - drw(-t)) / (2 * t)
    return float(np.linalg.norm(gap_o)), float(np.linalg.norm(gap_d))


# --- variance ------------------------------------------------------------------------

@dataclass(frozen=True)
class VarianceEstimates:
    Gamma_hat: np.ndarray
    Omega_hat: np.ndarray
    Sigma_hat: np.ndarray | None

    def standard_errors(self, rows: int) -> np.ndarray:
        if self.Sigma_hat is None:
            raise NumericError("Sigma is not available (singular information)")
        return np.sqrt(np.diag(self.Sigma_hat) / rows)


def nonsmooth_step(dataset: Dataset) -> float:
    y = np.asarray(dataset.source_y, dtype=float)
    sd = float(y.std(ddof=1)) if y.size > 1 else 1.0
    return 1.06 * (sd if sd > 0 else 1.0) * dataset.N ** (-0.2)


def _analytic_gamma(kind, dataset, nuisances, g, theta):
    if not g.smooth:
        return None
    xs, ys = dataset.source_x, dataset.source_y
    jg = g.jacobian(xs, ys, theta)
    if jg is None:
        return None
    if kind == DRW:
        return (nuisances.r_source(dataset)[:, None, None] * jg).mean(axis=0)
    c = nuisances.conditional
    if isinstance(c, ImputationSet):
        jm = g.imputed_jacobian(dataset.x_all, c, theta)
        if jm is None:
            return None
    else:
        return None
    tau = dataset.tau_hat
    if kind == MI:
        return (jm[dataset.n:] / tau).mean(axis=0)
    r = nuisances.r_source(dataset)[:, None, None]
    src = r * (jg - jm[:dataset.n]) / (1 - tau)
    return np.concatenate([src, jm[dataset.n:] / tau]).mean(axis=0)


def variance_estimates(moments: MomentMatrix, g: EstimatingFunction, dataset: Dataset,
                       nuisances: Nuisances, theta_hat) -> VarianceEstimates:
    """Omega = mean Psi Psi^T, Gamma = mean dPsi/dtheta, Sigma = (Gamma^T Omega^-1 Gamma)^-1."""
    theta_hat = _theta(theta_hat)
    psi = moments.values
    omega = psi.T @ psi / psi.shape[0]
    if np.linalg.matrix_rank(omega, tol=1e-12 * max(1.0, np.abs(omega).max())) < omega.shape[0]:
        raise NumericError("moment covariance is singular; use more data or add a small ridge")
    gamma = _analytic_gamma(moments.kind, dataset, nuisances, g, theta_hat)
    if gamma is None:
        h = nonsmooth_step(dataset) if not g.smooth else 1e-5 * max(1.0, float(np.abs(theta_hat).max()))
        gamma = np.empty((g.r, g.p))
        for k in range(g.p):
            e = np.zeros(g.p)
            e[k] = h
            up = build_moments(moments.kind, dataset, nuisances, g, theta_hat + e).values.mean(axis=0)
            dn = build_moments(moments.kind, dataset, nuisances, g, theta_hat - e).values.mean(axis=0)
            gamma[:, k] = (up - dn) / (2 * h)
    info = gamma.T @ np.linalg.solve(omega, gamma)
    try:
        sigma = np.linalg.inv(info) if np.linalg.cond(info) < 1e12 else None
    except np.linalg.LinAlgError:
        sigma = None
    return VarianceEstimates(gamma, omega, sigma)


def oracle_conditional(g: EstimatingFunction, model: str):
    """m0(x, theta) callable for a simulation response model."""
    return lambda x, theta: g.oracle_moment(x, theta, model)

