"""phi-divergences as loss pairs for two-sample density-ratio fitting.

For a divergence generator phi the true ratio r0 = q/p minimises

    L(r) = E_P[ell1(r)] - E_Q[ell2(r)],   ell1 = phi*(phi'(r)),  ell2 = phi'(r).

Each ``DivergenceSpec`` carries the pair, its derivatives, and the link used to
keep the fitted ratio positive.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import ConfigurationError, DomainError

IDENTITY = "identity"
EXP = "exp"

Fn = Callable[[np.ndarray], np.ndarray]


@dataclass(frozen=True)
class DivergenceSpec:
    id: str
    ell1: Fn
    ell2: Fn
    ell1_deriv: Fn
    ell2_deriv: Fn
    link: str = IDENTITY
    domain_min: float = 0.0
    open_at_min: bool = True

    def check_domain(self, r) -> np.ndarray:
        r = np.asarray(r, dtype=float)
        bad = (r <= self.domain_min) if self.open_at_min else (r < self.domain_min)
        if np.any(bad) or not np.all(np.isfinite(r)):
            raise DomainError(f"{self.id}: ratio values must lie above {self.domain_min}")
        return r

    @property
    def null_offset(self) -> float:
        """Objective value at r == 1 when P == Q; divergence is offset - objective."""
        one = np.ones(1)
        return float(self.ell1(one)[0] - self.ell2(one)[0])


def _kl():
    return DivergenceSpec(
        id="kl",
        ell1=lambda r: np.asarray(r, dtype=float) * 1.0,
        ell2=lambda r: np.log(r) + 1.0,
        ell1_deriv=lambda r: np.ones_like(np.asarray(r, dtype=float)),
        ell2_deriv=lambda r: 1.0 / np.asarray(r, dtype=float),
        link=EXP,
    )


def _reverse_kl():
    return DivergenceSpec(
        id="reverse-kl",
        ell1=lambda r: np.log(r) + 1.0,
        ell2=lambda r: -1.0 / np.asarray(r, dtype=float),
        ell1_deriv=lambda r: 1.0 / np.asarray(r, dtype=float),
        ell2_deriv=lambda r: 1.0 / np.asarray(r, dtype=float) ** 2,
        link=EXP,
    )


def _pearson():
    return DivergenceSpec(
        id="pearson",
        ell1=lambda r: np.asarray(r, dtype=float) ** 2 - 1.0,
        ell2=lambda r: 2.0 * (np.asarray(r, dtype=float) - 1.0),
        ell1_deriv=lambda r: 2.0 * np.asarray(r, dtype=float),
        ell2_deriv=lambda r: np.full_like(np.asarray(r, dtype=float), 2.0),
        link=IDENTITY,
        domain_min=0.0,
        open_at_min=False,
    )


def _hellinger():
    return DivergenceSpec(
        id="hellinger",
        ell1=lambda r: np.sqrt(r) - 1.0,
        ell2=lambda r: 1.0 - 1.0 / np.sqrt(r),
        ell1_deriv=lambda r: 0.5 / np.sqrt(r),
        ell2_deriv=lambda r: 0.5 * np.asarray(r, dtype=float) ** -1.5,
        link=EXP,
        domain_min=1e-6,
        open_at_min=False,
    )


_REGISTRY: dict[str, DivergenceSpec] = {}


def register(spec: DivergenceSpec) -> DivergenceSpec:
    _REGISTRY[spec.id] = spec
    return spec


for _factory in (_kl, _reverse_kl, _pearson, _hellinger):
    register(_factory())

KL = _REGISTRY["kl"]
REVERSE_KL = _REGISTRY["reverse-kl"]
PEARSON = _REGISTRY["pearson"]
HELLINGER = _REGISTRY["hellinger"]


def get(name: str | DivergenceSpec) -> DivergenceSpec:
    if isinstance(name, DivergenceSpec):
        return name
    try:
        return _REGISTRY[name.lower()]
    except KeyError:
        raise ConfigurationError(
            f"unknown divergence {name!r}; choose from {sorted(_REGISTRY)}") from None


def names() -> list[str]:
    return sorted(_REGISTRY)


def losses(spec: DivergenceSpec, r):
    r = spec.check_domain(r)
    l1, l2 = spec.ell1(r), spec.ell2(r)
    if r.ndim == 0:
        return float(l1), float(l2)
    return l1, l2


def population_objective(spec: DivergenceSpec, r_values_source, r_values_target) -> float:
    rs = np.asarray(r_values_source, dtype=float).ravel()
    rt = np.asarray(r_values_target, dtype=float).ravel()
    if rs.size == 0 or rt.size == 0:
        raise DomainError("objective needs non-empty source and target values")
    rs, rt = spec.check_domain(rs), spec.check_domain(rt)
    return float(np.mean(spec.ell1(rs)) - np.mean(spec.ell2(rt)))


def divergence_estimate(spec: DivergenceSpec, fitted_objective_value: float) -> float:
    return spec.null_offset - float(fitted_objective_value)
