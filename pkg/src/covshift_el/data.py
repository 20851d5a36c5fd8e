"""Datasets, simulation designs and CSV ingestion.

A ``Dataset`` holds a labelled source sample ``(x, y)`` and an unlabelled
target sample ``x``. The simulation designs follow the covariate-shift study:

* S1: source covariates Uniform(0,1)^d, target Beta(6/5, 6/5)^d.
* S2: source N(0, I_d), target N(0, Sigma_d) with Sigma_ij = 0.5^|i-j|.

and three response models M1 (linear), M2 (trigonometric), M3 (indicator),
each with heteroscedastic Gaussian noise of variance max(0.5, |x_1|).
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, DomainError, ParseError
from . import rng as rngmod

BETA_SHAPE = 6.0 / 5.0
SETTINGS = ("S1", "S2")
MODELS = ("M1", "M2", "M3")
MISSING_MARKERS = ("", "NA")


def _frozen(a) -> np.ndarray:
    a = np.array(a, dtype=float, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Dataset:
    source_x: np.ndarray
    source_y: np.ndarray
    target_x: np.ndarray

    def __post_init__(self):
        sx = np.atleast_2d(np.asarray(self.source_x, dtype=float))
        tx = np.atleast_2d(np.asarray(self.target_x, dtype=float))
        sy = np.asarray(self.source_y, dtype=float).ravel()
        if sx.shape[0] < 1 or tx.shape[0] < 1:
            raise ConfigurationError("dataset needs at least one source and one target row")
        if sx.shape[1] != tx.shape[1]:
            raise ConfigurationError(
                f"source has {sx.shape[1]} covariates, target has {tx.shape[1]}")
        if sy.shape[0] != sx.shape[0]:
            raise ConfigurationError("source_y length differs from number of source rows")
        for name, arr in (("source_x", sx), ("source_y", sy), ("target_x", tx)):
            if not np.all(np.isfinite(arr)):
                raise ConfigurationError(f"{name} contains non-finite values")
        object.__setattr__(self, "source_x", _frozen(sx))
        object.__setattr__(self, "source_y", _frozen(sy))
        object.__setattr__(self, "target_x", _frozen(tx))

    @property
    def n(self) -> int:
        return self.source_x.shape[0]

    @property
    def m(self) -> int:
        return self.target_x.shape[0]

    @property
    def N(self) -> int:
        return self.n + self.m

    @property
    def d(self) -> int:
        return self.source_x.shape[1]

    @property
    def tau_hat(self) -> float:
        return self.m / (self.n + self.m)

    @property
    def x_all(self) -> np.ndarray:
        """Source rows followed by target rows."""
        return np.vstack([self.source_x, self.target_x])

    @property
    def delta(self) -> np.ndarray:
        return np.concatenate([np.zeros(self.n), np.ones(self.m)])

    def resample(self, rng: np.random.Generator) -> "Dataset":
        """Bootstrap copy: source and target rows resampled independently."""
        i = rng.integers(0, self.n, self.n)
        j = rng.integers(0, self.m, self.m)
        return Dataset(self.source_x[i], self.source_y[i], self.target_x[j])

    def summary(self) -> dict:
        return {"n": self.n, "m": self.m, "d": self.d, "tau_hat": self.tau_hat}


@dataclass(frozen=True)
class ScenarioConfig:
    covariate_setting: str = "S1"
    response_model: str = "M2"
    n: int = 1000
    m: int | None = None  # defaults to n // 2
    d: int = 5
    seed: int = 0

    def __post_init__(self):
        if self.covariate_setting not in SETTINGS:
            raise ConfigurationError(f"covariate_setting must be one of {SETTINGS}")
        if self.response_model not in MODELS:
            raise ConfigurationError(f"response_model must be one of {MODELS}")
        if self.d < 1 or self.n < 1:
            raise ConfigurationError("n and d must be >= 1")
        if self.m is None:
            object.__setattr__(self, "m", max(1, self.n // 2))
        if self.m < 1:
            raise ConfigurationError("m must be >= 1")

    def with_(self, **kw) -> "ScenarioConfig":
        return ScenarioConfig(**{**asdict(self), **kw})

    @classmethod
    def from_dict(cls, d: dict) -> "ScenarioConfig":
        allowed = {"covariate_setting", "response_model", "n", "m", "d", "seed"}
        unknown = set(d) - allowed
        if unknown:
            raise ConfigurationError(f"unknown scenario keys: {sorted(unknown)}")
        return cls(**d)


def load_scenario(path) -> ScenarioConfig:
    path = Path(path)
    text = path.read_text()
    if path.suffix == ".json":
        raw = json.loads(text)
    else:
        import tomli
        raw = tomli.loads(text)
    raw = raw.get("scenario", raw)
    return ScenarioConfig.from_dict(raw)


# --- covariates -----------------------------------------------------------

def s2_covariance(d: int) -> np.ndarray:
    idx = np.arange(d)
    return 0.5 ** np.abs(idx[:, None] - idx[None, :])


def generate_covariates(setting: str, role: str, n: int, d: int, rng) -> np.ndarray:
    if n < 1 or d < 1:
        raise ConfigurationError(f"invalid dimensions n={n}, d={d}")
    if role not in ("source", "target"):
        raise ConfigurationError(f"role must be 'source' or 'target', got {role!r}")
    rng = rngmod.as_generator(rng)
    if setting == "S1":
        if role == "source":
            return rng.random((n, d))
        g1 = rng.gamma(BETA_SHAPE, size=(n, d))
        g2 = rng.gamma(BETA_SHAPE, size=(n, d))
        return g1 / (g1 + g2)
    if setting == "S2":
        z = rng.standard_normal((n, d))
        if role == "source":
            return z
        return z @ np.linalg.cholesky(s2_covariance(d)).T
    raise ConfigurationError(f"unknown covariate setting {setting!r}")


# --- responses --------------------------------------------------------------

def _index_sums(x: np.ndarray):
    """Sums over the even (2k) and odd (2k-1) 1-based coordinates, k <= d//2."""
    x = np.atleast_2d(x)
    half = x.shape[1] // 2
    even = x[:, 1:2 * half:2].sum(axis=1)
    odd = x[:, 0:2 * half:2].sum(axis=1)
    return even, odd


def regression_function(x, model: str) -> np.ndarray:
    even, odd = _index_sums(np.asarray(x, dtype=float))
    if model == "M1":
        return 0.5 * even - 0.5 * odd
    if model == "M2":
        return np.sin(np.pi * even)
    if model == "M3":
        return (even < odd).astype(float)
    raise ConfigurationError(f"unknown response model {model!r}")


def noise_sd(x) -> np.ndarray:
    x = np.atleast_2d(np.asarray(x, dtype=float))
    return np.sqrt(np.maximum(0.5, np.abs(x[:, 0])))


def generate_responses(x: np.ndarray, model: str, rng) -> np.ndarray:
    rng = rngmod.as_generator(rng)
    mu = regression_function(x, model)
    return mu + noise_sd(x) * rng.standard_normal(mu.shape[0])


def generate_response(x_row, model: str, rng) -> float:
    return float(generate_responses(np.asarray(x_row, dtype=float)[None, :], model, rng)[0])


def conditional_density(y, x, model: str) -> np.ndarray:
    """True p(y | x) under a response model; broadcasts y against rows of x."""
    mu = regression_function(x, model)
    sd = noise_sd(x)
    y = np.asarray(y, dtype=float)
    if y.ndim == 2:
        mu, sd = mu[:, None], sd[:, None]
    z = (y - mu) / sd
    return np.exp(-0.5 * z * z) / (sd * math.sqrt(2 * math.pi))


def generate_dataset(config: ScenarioConfig, rng=None) -> Dataset:
    """Draw one dataset; with ``rng=None`` the stream is keyed by ``config.seed``."""
    if rng is None:
        rng = rngmod.stream(config.seed, rngmod.PURPOSE_DATA)
    rng = rngmod.as_generator(rng)
    xs = generate_covariates(config.covariate_setting, "source", config.n, config.d, rng)
    xt = generate_covariates(config.covariate_setting, "target", config.m, config.d, rng)
    ys = generate_responses(xs, config.response_model, rng)
    return Dataset(xs, ys, xt)


# --- true density ratios ----------------------------------------------------

_LOG_BETA_NORM = math.lgamma(2 * BETA_SHAPE) - 2 * math.lgamma(BETA_SHAPE)


def beta_pdf(x, a: float = BETA_SHAPE, b: float = BETA_SHAPE) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    lognorm = math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b)
    with np.errstate(divide="ignore"):
        out = np.exp(lognorm + (a - 1) * np.log(x) + (b - 1) * np.log1p(-x))
    return np.where((x > 0) & (x < 1), out, 0.0)


def true_density_ratio_s1(x) -> np.ndarray:
    """Target/source covariate density ratio for S1 (a product of Beta pdfs).

    Accepts a single row or a matrix of rows; returns a scalar or a vector.
    """
    arr = np.asarray(x, dtype=float)
    single = arr.ndim == 1
    arr = np.atleast_2d(arr)
    if np.any(arr < 0) or np.any(arr > 1) or not np.all(np.isfinite(arr)):
        raise DomainError("S1 density ratio is defined on the unit cube only")
    out = np.prod(beta_pdf(arr), axis=1)
    return float(out[0]) if single else out


def true_density_ratio_s2(x) -> np.ndarray:
    arr = np.atleast_2d(np.asarray(x, dtype=float))
    d = arr.shape[1]
    cov = s2_covariance(d)
    prec = np.linalg.inv(cov)
    _, logdet = np.linalg.slogdet(cov)
    quad_t = np.einsum("ij,jk,ik->i", arr, prec, arr)
    quad_s = np.einsum("ij,ij->i", arr, arr)
    return np.exp(-0.5 * (quad_t - quad_s) - 0.5 * logdet)


def true_density_ratio(setting: str, x) -> np.ndarray:
    if setting == "S1":
        return true_density_ratio_s1(np.atleast_2d(x))
    if setting == "S2":
        return true_density_ratio_s2(x)
    raise ConfigurationError(f"unknown covariate setting {setting!r}")


# --- CSV ------------------------------------------------------------------

def load_csv(path, x_columns=None, y_column: str = "y", role_column: str = "role") -> Dataset:
    """Read a CSV with columns ``x1..xd``, ``y`` and ``role`` (source/target).

    The y value of a target row may be empty or ``NA``; a source row must carry
    a finite y. Row numbers in error messages count data rows from 1.
    """
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        if x_columns is None:
            x_columns = sorted((c for c in header if c.startswith("x") and c[1:].isdigit()),
                               key=lambda c: int(c[1:]))
        missing = [c for c in [*x_columns, role_column] if c not in header]
        if missing or not x_columns:
            raise ParseError(f"{path}: missing columns {missing or ['x1']}")
        sx, sy, tx = [], [], []
        for i, row in enumerate(reader, start=1):
            try:
                xs = [float(row[c]) for c in x_columns]
            except (TypeError, ValueError):
                raise ParseError(f"row {i}: unreadable covariate value") from None
            if not all(math.isfinite(v) for v in xs):
                raise ParseError(f"row {i}: missing or non-finite covariate")
            role = (row[role_column] or "").strip().lower()
            if role == "source":
                raw = (row.get(y_column) or "").strip()
                if raw in MISSING_MARKERS:
                    raise ParseError(f"row {i}: source row without a response")
                try:
                    yv = float(raw)
                except ValueError:
                    raise ParseError(f"row {i}: unreadable response {raw!r}") from None
                if not math.isfinite(yv):
                    raise ParseError(f"row {i}: non-finite response")
                sx.append(xs)
                sy.append(yv)
            elif role == "target":
                tx.append(xs)
            else:
                raise ParseError(f"row {i}: role must be 'source' or 'target', got {role!r}")
    if not sx or not tx:
        raise ConfigurationError(
            f"{path}: need at least one source and one target row (got {len(sx)}, {len(tx)})")
    return Dataset(np.array(sx), np.array(sy), np.array(tx))


def save_csv(dataset: Dataset, path) -> None:
    d = dataset.d
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([*(f"x{j + 1}" for j in range(d)), "y", "role"])
        for x, y in zip(dataset.source_x, dataset.source_y):
            w.writerow([*(repr(float(v)) for v in x), repr(float(y)), "source"])
        for x in dataset.target_x:
            w.writerow([*(repr(float(v)) for v in x), "NA", "target"])
