"""Conditional density p(y|x) through an auxiliary-distribution density ratio.

With a known density p0 for an auxiliary response, r(y, x) = p(y|x) / p0(y) is the
ratio between the joint law of (Y, X) and that of (Y_aux, X). Fitting it with the
two-sample machinery of ``funclass`` gives p_hat(y|x) = r_hat(y, x) p0(y). Draws
from p_hat (on a fixed y grid) then yield the imputed conditional moment
m_hat(x, theta) = mean_nu g(x, Y_nu, theta).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import divergence as div
from . import funclass as fc
from . import rng as rngmod
from .data import Dataset
from .errors import ConfigurationError, NumericError, ShapeError

GRID_SIZE = 512
GRID_WIDEN = 3.0
AUX_INFLATION = 2.0


@dataclass(frozen=True)
class AuxiliaryDistribution:
    """Normal auxiliary law for the response."""

    location: float = 0.0
    scale: float = 1.0
    family: str = "normal"

    def __post_init__(self):
        if not (self.scale > 0 and math.isfinite(self.scale) and math.isfinite(self.location)):
            raise ConfigurationError("auxiliary scale must be positive and finite")
        if self.family != "normal":
            raise ConfigurationError(f"unsupported auxiliary family {self.family!r}")

    @classmethod
    def matched(cls, y, inflation: float = AUX_INFLATION) -> "AuxiliaryDistribution":
        """Location-scale match to ``y`` with an inflated spread for support coverage."""
        y = np.asarray(y, dtype=float)
        sd = float(y.std(ddof=1)) if y.size > 1 else 0.0
        return cls(float(y.mean()), inflation * (sd if sd > 0 else 1.0))

    def pdf(self, y) -> np.ndarray:
        z = (np.asarray(y, dtype=float) - self.location) / self.scale
        return np.exp(-0.5 * z * z) / (self.scale * math.sqrt(2 * math.pi))

    def sample(self, rng, size) -> np.ndarray:
        return self.location + self.scale * rngmod.as_generator(rng).standard_normal(size)

    def to_dict(self) -> dict:
        return {"family": self.family, "location": self.location, "scale": self.scale}


@dataclass(frozen=True, eq=False)
class CondDensityModel:
    aux: AuxiliaryDistribution
    ratio_fit: fc.FittedFunction
    y_grid: np.ndarray
    spec: div.DivergenceSpec = div.KL

    @property
    def input_dim(self) -> int:
        return self.ratio_fit.input_dim - 1

    @property
    def dy(self) -> float:
        return float(self.y_grid[1] - self.y_grid[0])

    def _x(self, x):
        x = np.asarray(x, dtype=float)
        if x.ndim == 1:
            x = x[:, None] if self.input_dim == 1 else x[None, :]
        if x.shape[1] != self.input_dim:
            raise ShapeError(f"expected {self.input_dim} covariate columns, got {x.shape[1]}")
        return x

    def unnormalized(self, y, x) -> np.ndarray:
        """r_hat(y, x) * p0(y) for paired rows."""
        x = self._x(x)
        y = np.asarray(y, dtype=float).reshape(-1)
        return self.ratio_fit(np.column_stack([y, x])) * self.aux.pdf(y)

    def grid_density(self, x, chunk_rows: int = 256) -> np.ndarray:
        """Per-row densities on ``y_grid`` renormalised to integrate to one."""
        x = self._x(x)
        k, g = x.shape[0], self.y_grid.size
        aux = self.aux.pdf(self.y_grid)
        out = np.empty((k, g))
        for s in range(0, k, chunk_rows):
            xc = x[s:s + chunk_rows]
            z = np.empty((xc.shape[0] * g, self.input_dim + 1))
            z[:, 0] = np.tile(self.y_grid, xc.shape[0])
            z[:, 1:] = np.repeat(xc, g, axis=0)
            out[s:s + chunk_rows] = self.ratio_fit(z).reshape(xc.shape[0], g) * aux
        mass = out.sum(1) * self.dy
        bad = np.flatnonzero(~(mass > 0) | ~np.isfinite(mass))
        if bad.size:
            raise NumericError(f"estimated conditional density vanishes on the grid at row {int(bad[0])}")
        return out / mass[:, None]

    def density(self, y, x) -> np.ndarray:
        """Renormalised p_hat(y_i | x_i) for paired rows (linear interpolation on the grid)."""
        x = self._x(x)
        y = np.asarray(y, dtype=float).reshape(-1)
        dens = self.grid_density(x)
        pos = (y - self.y_grid[0]) / self.dy
        i0 = np.clip(np.floor(pos).astype(int), 0, self.y_grid.size - 2)
        w = np.clip(pos - i0, 0.0, 1.0)
        rows = np.arange(len(y))
        val = (1 - w) * dens[rows, i0] + w * dens[rows, i0 + 1]
        return np.where((pos < 0) | (pos > self.y_grid.size - 1), 0.0, val)

    def to_dict(self) -> dict:
        return {"aux": self.aux.to_dict(), "ratio_fit": self.ratio_fit.to_dict(),
                "y_grid": [float(self.y_grid[0]), float(self.y_grid[-1]), int(self.y_grid.size)],
                "divergence": self.spec.id}

    @classmethod
    def from_dict(cls, d: dict) -> "CondDensityModel":
        lo, hi, size = d["y_grid"]
        a = d["aux"]
        return cls(AuxiliaryDistribution(a["location"], a["scale"], a.get("family", "normal")),
                   fc.FittedFunction.from_dict(d["ratio_fit"]), np.linspace(lo, hi, int(size)),
                   div.get(d.get("divergence", "kl")))


def make_grid(y, aux: AuxiliaryDistribution, size: int = GRID_SIZE, widen: float = GRID_WIDEN) -> np.ndarray:
    y = np.asarray(y, dtype=float)
    return np.linspace(y.min() - widen * aux.scale, y.max() + widen * aux.scale, size)


def fit_conditional_density(dataset: Dataset, spec="kl", funclass_config: fc.FunctionClassConfig | None = None,
                            aux: AuxiliaryDistribution | None = None, rng=None,
                            grid_size: int = GRID_SIZE) -> CondDensityModel:
    """Fit r(y, x) with auxiliary pairs as the denominator sample and observed pairs as the numerator."""
    spec = div.get(spec)
    config = funclass_config or fc.FunctionClassConfig()
    gen = rngmod.as_generator(0 if rng is None else rng)
    aux = aux or AuxiliaryDistribution.matched(dataset.source_y)
    x = np.asarray(dataset.source_x)
    y_aux = aux.sample(gen, dataset.n)
    denom = np.column_stack([y_aux, x])
    numer = np.column_stack([dataset.source_y, x])
    fitted = fc.fit_erm(config, spec, denom, numer, rng=gen)
    return CondDensityModel(aux, fitted, make_grid(dataset.source_y, aux, grid_size), spec)


@dataclass(frozen=True, eq=False)
class ImputationSet:
    """kappa draws per row from p_hat(. | X_i), fixed once and reused for every theta."""

    draws: np.ndarray
    seed: int
    kappa: int = field(init=False)

    def __post_init__(self):
        d = np.array(self.draws, dtype=float)
        if d.ndim != 2 or d.shape[1] < 1:
            raise ShapeError("draws must be an (N, kappa) matrix with kappa >= 1")
        d.setflags(write=False)
        object.__setattr__(self, "draws", d)
        object.__setattr__(self, "kappa", d.shape[1])

    @property
    def rows(self) -> int:
        return self.draws.shape[0]

    def row_means(self) -> np.ndarray:
        return self.draws.mean(axis=1)


def sample_from_grid(density_row: np.ndarray, y_grid: np.ndarray, kappa: int, rng) -> np.ndarray:
    """Inverse-CDF draws from a density tabulated at the cell centres ``y_grid``."""
    dy = y_grid[1] - y_grid[0]
    cdf = np.cumsum(density_row)
    cdf /= cdf[-1]
    cell = np.minimum(np.searchsorted(cdf, rng.random(kappa), side="right"), y_grid.size - 1)
    return y_grid[cell] + (rng.random(kappa) - 0.5) * dy


def impute(model: CondDensityModel, x_all, kappa: int, seed: int = 0, chunk_rows: int = 256) -> ImputationSet:
    """Draw ``kappa`` responses per row; row i uses its own stream keyed by (seed, i)."""
    if int(kappa) < 1:
        raise ConfigurationError("kappa must be at least 1")
    kappa = int(kappa)
    x_all = model._x(x_all)
    draws = np.empty((x_all.shape[0], kappa))
    for s in range(0, x_all.shape[0], chunk_rows):
        dens = model.grid_density(x_all[s:s + chunk_rows])
        for j, row in enumerate(dens):
            i = s + j
            draws[i] = sample_from_grid(row, model.y_grid, kappa, rngmod.stream(seed, rngmod.PURPOSE_IMPUTE, i))
    return ImputationSet(draws, int(seed))


def conditional_moment(imputations: ImputationSet, g, x_all, theta) -> np.ndarray:
    """Row i is the average of g(X_i, Y_nu, theta) over the kappa draws of row i."""
    x_all = np.atleast_2d(np.asarray(x_all, dtype=float))
    if x_all.shape[0] != imputations.rows:
        raise ShapeError("imputations and covariate rows are misaligned")
    return g.imputed(x_all, imputations, theta)


def empirical_moment_error(m_hat, m0) -> float:
    """Sum over moment coordinates of the root-mean-square deviation."""
    m_hat = np.asarray(m_hat, dtype=float)
    m0 = np.asarray(m0, dtype=float)
    if m_hat.ndim == 1:
        m_hat = m_hat[:, None]
    if m0.size != m_hat.size:
        raise ShapeError("estimated and oracle moments differ in size")
    m0 = m0.reshape(m_hat.shape)
    return float(np.sqrt(np.mean((m_hat - m0) ** 2, axis=0)).sum())


def grid_ise(model: CondDensityModel, x_probe, true_density) -> np.ndarray:
    """Integrated squared error over the grid at each probe x; ``true_density(y_grid, x)``."""
    x_probe = model._x(x_probe)
    dens = model.grid_density(x_probe)
    truth = np.array([true_density(model.y_grid, x) for x in x_probe])
    return ((dens - truth) ** 2).sum(1) * model.dy


def density_mse(model: CondDensityModel, x, y, true_density) -> float:
    """Mean over rows of {p_hat(Y_i|X_i) - p(Y_i|X_i)}^2."""
    return float(np.mean((model.density(y, x) - np.asarray(true_density(y, x), dtype=float)) ** 2))
