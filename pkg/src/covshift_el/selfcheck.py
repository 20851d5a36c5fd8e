"""Fast invariant checks behind ``covshift-el selfcheck``."""
from __future__ import annotations

import math
import tempfile
from pathlib import Path

import numpy as np

from . import data, el
from . import divergence as div
from . import funclass as fc
from . import moments as mom
from .density_ratio import ratio_from_posterior
from .errors import ConvexHullViolation, DomainError


def _kl_at_one():
    assert div.losses(div.KL, 1.0) == (1.0, 1.0)


def _pearson_at_one():
    assert div.losses(div.PEARSON, 1.0) == (0.0, 0.0)


def _hellinger_at_four():
    l1, l2 = div.losses(div.HELLINGER, 4.0)
    assert math.isclose(l1, 1.0) and math.isclose(l2, 0.5)


def _kl_domain():
    try:
        div.losses(div.KL, 0.0)
    except DomainError:
        return
    raise AssertionError("KL accepted r = 0")


def _derivative_relation():
    r = np.linspace(0.1, 10, 50)
    for spec in (div.KL, div.REVERSE_KL, div.PEARSON, div.HELLINGER):
        assert np.allclose(spec.ell1_deriv(r), r * spec.ell2_deriv(r))


def _clamp_and_link():
    r, _ = fc.apply_link(np.array([120.0, -3.0]), div.IDENTITY, (0.001, 50.0))
    assert r.tolist() == [50.0, 0.001]
    r, _ = fc.apply_link(np.array([0.0]), div.EXP, (0.001, 50.0))
    assert r[0] == 1.0


def _tau_counting():
    with tempfile.TemporaryDirectory() as tmp:
        p = Path(tmp) / "d.csv"
        p.write_text("x1,x2,y,role\n0,0,1,source\n1,0,2,source\n0,1,3,source\n1,1,,target\n2,2,NA,target\n")
        ds = data.load_csv(p)
    assert (ds.n, ds.m, ds.d) == (3, 2, 2) and ds.tau_hat == 0.4


def _beta_ratio_boundary():
    assert data.true_density_ratio_s1(np.array([1e-12])) < 1e-2


def _bayes_identity():
    assert math.isclose(float(ratio_from_posterior(0.5, 1 / 3)), 2.0)


def _orthogonal_rows():
    rows = mom.orthogonal_rows(np.array([2.0]), np.array([[1.5]]), np.array([[1.5]]), np.array([[0.3]]), 0.5)
    assert rows[0, 0] == 0.0 and math.isclose(rows[1, 0], 0.6)


def _el_symmetric():
    sol = el.solve_lambda(np.array([-2.0, -1.0, 1.0, 2.0]))
    assert abs(sol.lam[0]) < 1e-12 and np.allclose(sol.weights, 0.25) and abs(sol.log_el) < 1e-12


def _el_hull():
    try:
        el.solve_lambda(np.array([0.5, 1.0, 2.0]))
    except ConvexHullViolation:
        return
    raise AssertionError("hull violation not detected")


def _chi2_threshold():
    assert round(el.wilks_threshold(0.95), 3) == 3.841


def _response_models():
    x = np.zeros((1, 4))
    assert data.regression_function(x, "M1")[0] == 0.0
    x = np.array([[0.0, 0.25, 0.0, 0.25]])
    assert math.isclose(data.regression_function(x, "M2")[0], 1.0)
    x = np.array([[0.9, 0.1, 0.9, 0.1]])
    assert data.regression_function(x, "M3")[0] == 1.0


CHECKS = [
    ("KL losses at r=1 are (1, 1)", _kl_at_one),
    ("Pearson losses at r=1 are (0, 0)", _pearson_at_one),
    ("Hellinger losses at r=4 are (1, 0.5)", _hellinger_at_four),
    ("KL rejects r <= 0", _kl_domain),
    ("loss derivatives satisfy l1' = r l2'", _derivative_relation),
    ("clamp and exp link", _clamp_and_link),
    ("CSV counting gives tau = 0.4", _tau_counting),
    ("Beta ratio vanishes at the boundary", _beta_ratio_boundary),
    ("Bayes identity r = 2 at pi = 1/2, tau = 1/3", _bayes_identity),
    ("orthogonal rows plug-in", _orthogonal_rows),
    ("EL at symmetric rows gives lambda = 0", _el_symmetric),
    ("EL detects a convex hull violation", _el_hull),
    ("chi-square(1) 95% threshold is 3.841", _chi2_threshold),
    ("response models at reference points", _response_models),
]


def run_checks():
    out = []
    for name, fn in CHECKS:
        try:
            fn()
            out.append((name, True, ""))
        except Exception as exc:  # report every failure, never abort the sweep
            out.append((name, False, f"{type(exc).__name__}: {exc}"))
    return out
