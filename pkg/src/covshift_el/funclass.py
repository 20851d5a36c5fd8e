"""Trainable function classes fitted by two-sample empirical risk minimisation.

Two families are available:

* ``poly``: tensor-product Legendre polynomials up to a total degree, inputs
  rescaled to [-1, 1] with the training ranges.
* ``mlp``: fully connected ReLU network with standardised inputs.

Both are trained with full-batch Adam on

    J(f) = mean_source ell1(r(x)) - mean_target ell2(r(x)),  r = clamp(link(f)).

Capacity (degree, or width x depth) is chosen by K-fold cross-validation of the
held-out objective.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field, asdict, replace

import numpy as np

from .divergence import DivergenceSpec, EXP, IDENTITY, get as get_divergence
from .errors import ConfigurationError, NumericError, ShapeError
from . import rng as rngmod

DEFAULT_CLAMP = (0.01, 100.0)


@dataclass(frozen=True)
class OptimizerConfig:
    learning_rate: float = 1e-2
    max_epochs: int = 2000
    patience: int = 50
    tolerance: float = 1e-6
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass(frozen=True)
class FunctionClassConfig:
    kind: str = "mlp"
    degree_or_width_candidates: tuple = (16, 32, 64)
    depth_candidates: tuple = (1, 2)
    clamp: tuple = DEFAULT_CLAMP
    cv_folds: int = 3
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    max_basis: int = 200
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("mlp", "poly"):
            raise ConfigurationError(f"function class kind must be 'mlp' or 'poly', got {self.kind!r}")
        lo, hi = self.clamp
        if not (0 < lo < hi < math.inf):
            raise ConfigurationError(f"clamp must satisfy 0 < r_min < r_max < inf, got {self.clamp}")
        if self.cv_folds < 2:
            raise ConfigurationError("cv_folds must be >= 2")
        object.__setattr__(self, "degree_or_width_candidates", tuple(self.degree_or_width_candidates))
        object.__setattr__(self, "depth_candidates", tuple(self.depth_candidates))
        object.__setattr__(self, "clamp", (float(lo), float(hi)))
        if isinstance(self.optimizer, dict):
            object.__setattr__(self, "optimizer", OptimizerConfig(**self.optimizer))

    def capacities(self) -> list:
        """Capacity grid, ordered from smallest to largest."""
        if self.kind == "poly":
            return [("poly", int(g)) for g in sorted(self.degree_or_width_candidates)]
        grid = [("mlp", (int(w),) * int(L))
                for w, L in itertools.product(self.degree_or_width_candidates, self.depth_candidates)]
        return sorted(grid, key=lambda c: (_mlp_param_count(c[1], 1), c[1]))

    def with_(self, **kw) -> "FunctionClassConfig":
        return replace(self, **kw)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["degree_or_width_candidates"] = list(self.degree_or_width_candidates)
        out["depth_candidates"] = list(self.depth_candidates)
        out["clamp"] = list(self.clamp)
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "FunctionClassConfig":
        allowed = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - allowed
        if unknown:
            raise ConfigurationError(f"unknown function-class keys: {sorted(unknown)}")
        d = dict(d)
        if "optimizer" in d:
            opt = d["optimizer"]
            bad = set(opt) - set(OptimizerConfig.__dataclass_fields__)
            if bad:
                raise ConfigurationError(f"unknown optimizer keys: {sorted(bad)}")
            d["optimizer"] = OptimizerConfig(**opt)
        if "clamp" in d:
            d["clamp"] = tuple(d["clamp"])
        return cls(**d)


# --- bases ------------------------------------------------------------------

def _total_degree_exponents(d: int, degree: int, cap: int) -> np.ndarray:
    out = []
    for total in range(degree + 1):
        for combo in itertools.combinations_with_replacement(range(d), total):
            e = [0] * d
            for j in combo:
                e[j] += 1
            out.append(e)
            if len(out) >= cap:
                return np.array(out, dtype=int)
    return np.array(out, dtype=int)


def _legendre_table(z: np.ndarray, max_degree: int) -> np.ndarray:
    """P_k(z) for k = 0..max_degree, shape (max_degree+1,) + z.shape."""
    table = np.empty((max_degree + 1,) + z.shape)
    table[0] = 1.0
    if max_degree >= 1:
        table[1] = z
    for k in range(1, max_degree):
        table[k + 1] = ((2 * k + 1) * z * table[k] - k * table[k - 1]) / (k + 1)
    return table


class PolySieve:
    kind = "poly"

    def __init__(self, exponents, lo, hi):
        self.exponents = np.asarray(exponents, dtype=int)
        self.lo = np.asarray(lo, dtype=float)
        self.hi = np.asarray(hi, dtype=float)
        self.input_dim = self.exponents.shape[1]

    @classmethod
    def build(cls, degree: int, x_train: np.ndarray, max_basis: int = 200):
        lo, hi = x_train.min(axis=0), x_train.max(axis=0)
        span = hi - lo
        hi = np.where(span > 0, hi, lo + 1.0)
        return cls(_total_degree_exponents(x_train.shape[1], degree, max_basis), lo, hi)

    @property
    def n_params(self) -> int:
        return self.exponents.shape[0]

    def descriptor(self) -> dict:
        return {"exponents": self.exponents.tolist(), "lo": self.lo.tolist(), "hi": self.hi.tolist()}

    def prepare(self, x):
        z = 2.0 * (x - self.lo) / (self.hi - self.lo) - 1.0
        table = _legendre_table(z, int(self.exponents.max(initial=0)))
        phi = np.ones((x.shape[0], self.n_params))
        for j in range(self.input_dim):
            e = self.exponents[:, j]
            if np.any(e):
                phi *= table[e, :, j].T
        return phi

    def init_params(self, rng, link: str) -> np.ndarray:
        p = np.zeros(self.n_params)
        p[0] = 1.0 if link == IDENTITY else 0.0
        return p

    def forward(self, params, prepared):
        return prepared @ params, None

    def backward(self, params, prepared, cache, dh):
        return prepared.T @ dh


def _mlp_param_count(widths, d):
    sizes = (d, *widths, 1)
    return sum(a * b + b for a, b in zip(sizes[:-1], sizes[1:]))


class Mlp:
    """ReLU network evaluated feature-major: activations are (width, rows)."""

    kind = "mlp"

    def __init__(self, widths, input_dim, mean, scale):
        self.widths = tuple(int(w) for w in widths)
        self.input_dim = int(input_dim)
        self.mean = np.asarray(mean, dtype=float)
        self.scale = np.asarray(scale, dtype=float)
        sizes = (self.input_dim, *self.widths, 1)
        self.shapes = list(zip(sizes[1:], sizes[:-1]))  # (out, in)
        self.slices = []
        pos = 0
        for o, i in self.shapes:
            self.slices.append((slice(pos, pos + o * i), slice(pos + o * i, pos + o * i + o)))
            pos += o * i + o
        self._n = pos

    @classmethod
    def build(cls, widths, x_train: np.ndarray):
        mean = x_train.mean(axis=0)
        sd = x_train.std(axis=0)
        return cls(widths, x_train.shape[1], mean, np.where(sd > 0, sd, 1.0))

    @property
    def n_params(self) -> int:
        return self._n

    def descriptor(self) -> dict:
        return {"widths": list(self.widths), "mean": self.mean.tolist(), "scale": self.scale.tolist()}

    def prepare(self, x):
        xt = np.ascontiguousarray(((x - self.mean) / self.scale).T)
        k = xt.shape[1]
        return {"x": xt, "acts": [np.empty((w, k)) for w in self.widths],
                "grads": [np.empty((w, k)) for w in self.widths]}

    def _unpack(self, params):
        return [(params[sw].reshape(o, i), params[sb]) for (o, i), (sw, sb) in zip(self.shapes, self.slices)]

    def init_params(self, rng, link: str) -> np.ndarray:
        p = np.empty(self._n)
        last = len(self.shapes) - 1
        for k, ((o, i), (sw, sb)) in enumerate(zip(self.shapes, self.slices)):
            bound = math.sqrt(6.0 / i)
            if k == last:
                bound *= 0.1
            p[sw] = rng.uniform(-bound, bound, o * i)
            p[sb] = 0.0
        p[self.slices[last][1]] = 1.0 if link == IDENTITY else 0.0
        return p

    def forward(self, params, prepared):
        layers = self._unpack(params)
        a = prepared["x"]
        for (W, b), buf in zip(layers[:-1], prepared["acts"]):
            np.matmul(W, a, out=buf)
            buf += b[:, None]
            np.maximum(buf, 0.0, out=buf)
            a = buf
        W, b = layers[-1]
        return (W @ a)[0] + b[0], None

    def backward(self, params, prepared, cache, dh):
        layers = self._unpack(params)
        acts = [prepared["x"], *prepared["acts"]]
        grad = np.empty(self._n)
        g = dh[None, :]
        for k in range(len(layers) - 1, -1, -1):
            W, _ = layers[k]
            sw, sb = self.slices[k]
            grad[sw] = (g @ acts[k].T).ravel()
            grad[sb] = g.sum(axis=1)
            if k > 0:
                buf = prepared["grads"][k - 1]
                np.matmul(W.T, g, out=buf)
                buf *= acts[k] > 0
                g = buf
        return grad


def build_model(capacity, x_train, max_basis=200):
    kind, size = capacity
    if kind == "poly":
        return PolySieve.build(size, x_train, max_basis)
    return Mlp.build(size, x_train)


def model_from_descriptor(kind: str, desc: dict, input_dim: int):
    if kind == "poly":
        return PolySieve(desc["exponents"], desc["lo"], desc["hi"])
    return Mlp(desc["widths"], input_dim, desc["mean"], desc["scale"])


# --- link + clamp -----------------------------------------------------------

def apply_link(h, link: str, clamp):
    """Return (r, dr/dh) with r clamped to [r_min, r_max]."""
    lo, hi = clamp
    if link == EXP:
        hc = np.clip(h, math.log(lo), math.log(hi))
        r = np.clip(np.exp(hc), lo, hi)
        return r, np.where(hc == h, r, 0.0)
    if link == IDENTITY:
        r = np.clip(h, lo, hi)
        return r, (r == h).astype(float)
    raise ConfigurationError(f"unknown link {link!r}")


# --- objective ----------------------------------------------------------------

class TwoSampleObjective:
    """Empirical objective and its parameter gradient for one model + data split."""

    def __init__(self, model, spec: DivergenceSpec, clamp, x_source, x_target):
        self.model = model
        self.spec = spec
        self.clamp = clamp
        self.n = x_source.shape[0]
        self.m = x_target.shape[0]
        self.prepared = model.prepare(np.vstack([x_source, x_target]))

    def value_and_grad(self, params, need_grad=True):
        h, cache = self.model.forward(params, self.prepared)
        r, drdh = apply_link(h, self.spec.link, self.clamp)
        rs, rt = r[: self.n], r[self.n:]
        value = float(np.mean(self.spec.ell1(rs)) - np.mean(self.spec.ell2(rt)))
        if not need_grad:
            return value, None
        dr = np.empty_like(r)
        dr[: self.n] = self.spec.ell1_deriv(rs) / self.n
        dr[self.n:] = -self.spec.ell2_deriv(rt) / self.m
        grad = self.model.backward(params, self.prepared, cache, dr * drdh)
        return value, grad


def held_out_objective(model, params, spec, clamp, x_source, x_target) -> float:
    return TwoSampleObjective(model, spec, clamp, x_source, x_target).value_and_grad(params, False)[0]


def adam_minimize(objective: TwoSampleObjective, params, opt: OptimizerConfig):
    """Full-batch Adam; returns best parameters, best value and the best-so-far loss per epoch."""
    params = params.copy()
    m1 = np.zeros_like(params)
    m2 = np.zeros_like(params)
    best_val, best_params = math.inf, params.copy()
    last_improve_val, last_improve_epoch = math.inf, 0
    trace = []
    b1, b2 = opt.beta1, opt.beta2
    for epoch in range(1, opt.max_epochs + 1):
        val, grad = objective.value_and_grad(params)
        if not math.isfinite(val) or not np.all(np.isfinite(grad)):
            raise NumericError(f"non-finite training loss at epoch {epoch}")
        if val < best_val:
            best_val, best_params = val, params.copy()
        trace.append(best_val)
        if val < last_improve_val - opt.tolerance:
            last_improve_val, last_improve_epoch = val, epoch
        elif epoch - last_improve_epoch >= opt.patience:
            break
        m1 *= b1
        m1 += (1 - b1) * grad
        m2 *= b2
        m2 += (1 - b2) * grad * grad
        mhat = m1 / (1 - b1 ** epoch)
        vhat = m2 / (1 - b2 ** epoch)
        params -= opt.learning_rate * mhat / (np.sqrt(vhat) + opt.eps)
    final_val, _ = objective.value_and_grad(params, need_grad=False)
    if math.isfinite(final_val) and final_val < best_val:
        best_val, best_params = final_val, params.copy()
        trace.append(best_val)
    return best_params, best_val, trace


# --- fitted function ----------------------------------------------------------

@dataclass(frozen=True, eq=False)
class FittedFunction:
    kind: str
    descriptor: dict
    parameters: np.ndarray
    input_dim: int
    link: str
    clamp: tuple
    objective_value: float = math.nan
    capacity_index: int = 0
    cv_scores: tuple = ()
    trace: tuple = ()

    def __post_init__(self):
        p = np.array(self.parameters, dtype=float)
        p.setflags(write=False)
        object.__setattr__(self, "parameters", p)

    @property
    def model(self):
        m = self.__dict__.get("_model")
        if m is None:
            m = model_from_descriptor(self.kind, self.descriptor, self.input_dim)
            object.__setattr__(self, "_model", m)
        return m

    def raw(self, x) -> np.ndarray:
        x = _as_matrix(x, self.input_dim)
        out = np.empty(x.shape[0])
        step = 65536
        for s in range(0, x.shape[0], step):
            out[s:s + step] = self.model.forward(self.parameters, self.model.prepare(x[s:s + step]))[0]
        return out

    def __call__(self, x) -> np.ndarray:
        return evaluate(self, x)

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "descriptor": self.descriptor,
            "parameters": self.parameters.tolist(),
            "input_dim": self.input_dim,
            "link": self.link,
            "clamp": list(self.clamp),
            "objective_value": self.objective_value,
            "capacity_index": self.capacity_index,
            "cv_scores": list(self.cv_scores),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FittedFunction":
        return cls(kind=d["kind"], descriptor=d["descriptor"], parameters=np.array(d["parameters"]),
                   input_dim=int(d["input_dim"]), link=d["link"], clamp=tuple(d["clamp"]),
                   objective_value=float(d.get("objective_value", math.nan)),
                   capacity_index=int(d.get("capacity_index", 0)),
                   cv_scores=tuple(d.get("cv_scores", ())))


def _as_matrix(x, input_dim):
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[:, None] if input_dim == 1 else x[None, :]
    if x.ndim != 2 or x.shape[1] != input_dim:
        raise ShapeError(f"expected inputs with {input_dim} columns, got shape {x.shape}")
    return x


def evaluate(f: FittedFunction, x) -> np.ndarray:
    return apply_link(f.raw(x), f.link, f.clamp)[0]


# --- fitting ------------------------------------------------------------------

def _check_inputs(x_source, x_target):
    xs = np.atleast_2d(np.asarray(x_source, dtype=float))
    xt = np.atleast_2d(np.asarray(x_target, dtype=float))
    if xs.shape[1] != xt.shape[1]:
        raise ShapeError(f"source has {xs.shape[1]} columns, target has {xt.shape[1]}")
    return xs, xt


def _fit_capacity(config, spec, capacity, xs, xt, rng, init=None, opt=None):
    model = build_model(capacity, np.vstack([xs, xt]), config.max_basis)
    params = model.init_params(rng, spec.link) if init is None else np.array(init, dtype=float)
    obj = TwoSampleObjective(model, spec, config.clamp, xs, xt)
    params, value, trace = adam_minimize(obj, params, opt or config.optimizer)
    return model, params, value, trace


def _fold_ids(k, folds, rng):
    ids = np.arange(k) % folds
    rng.shuffle(ids)
    return ids


def cv_scores(config: FunctionClassConfig, loss_pair, x_source, x_target, rng=None) -> np.ndarray:
    spec = get_divergence(loss_pair)
    xs, xt = _check_inputs(x_source, x_target)
    caps = config.capacities()
    if not caps:
        raise ConfigurationError("empty capacity grid")
    K = config.cv_folds
    if K > min(xs.shape[0], xt.shape[0]):
        raise ConfigurationError(f"cv_folds={K} exceeds a sample size (n={xs.shape[0]}, m={xt.shape[0]})")
    rng = rngmod.as_generator(config.seed if rng is None else rng)
    fs, ft = _fold_ids(xs.shape[0], K, rng), _fold_ids(xt.shape[0], K, rng)
    init_seed = rngmod.child_seed(rng)
    scores = np.zeros(len(caps))
    for c, cap in enumerate(caps):
        for k in range(K):
            tr_s, tr_t = xs[fs != k], xt[ft != k]
            te_s, te_t = xs[fs == k], xt[ft == k]
            if min(len(tr_s), len(tr_t), len(te_s), len(te_t)) == 0:
                raise ConfigurationError(f"cross-validation fold {k} has no points")
            model, params, _, _ = _fit_capacity(config, spec, cap, tr_s, tr_t,
                                                rngmod.stream(init_seed, c, k))
            scores[c] += held_out_objective(model, params, spec, config.clamp, te_s, te_t) / K
    return scores


def cv_select(config: FunctionClassConfig, loss_pair, x_source, x_target, rng=None) -> int:
    if len(config.capacities()) == 1:
        return 0
    scores = cv_scores(config, loss_pair, x_source, x_target, rng)
    return int(np.argmin(scores))  # first minimum == smallest capacity on ties


def fit_erm(config: FunctionClassConfig, loss_pair, x_source, x_target, rng=None,
            capacity_index: int | None = None, init: FittedFunction | None = None,
            optimizer: OptimizerConfig | None = None) -> FittedFunction:
    """Fit the ratio model minimising mean ell1(source) - mean ell2(target).

    ``capacity_index`` skips cross-validation; ``init`` warm-starts from a
    previous fit of the same architecture (its input standardisation is kept).
    """
    spec = get_divergence(loss_pair)
    xs, xt = _check_inputs(x_source, x_target)
    caps = config.capacities()
    if not caps:
        raise ConfigurationError("empty capacity grid")
    rng = rngmod.as_generator(config.seed if rng is None else rng)
    scores = ()
    if init is not None:
        model = init.model
        obj = TwoSampleObjective(model, spec, config.clamp, xs, xt)
        params, value, trace = adam_minimize(obj, np.array(init.parameters), optimizer or config.optimizer)
        idx = init.capacity_index
    else:
        if capacity_index is None:
            if len(caps) == 1:
                idx = 0
            else:
                s = cv_scores(config, spec, xs, xt, rngmod.stream(rngmod.child_seed(rng)))
                idx, scores = int(np.argmin(s)), tuple(float(v) for v in s)
        else:
            idx = int(capacity_index)
            if not 0 <= idx < len(caps):
                raise ConfigurationError(f"capacity index {idx} outside grid of size {len(caps)}")
        model, params, value, trace = _fit_capacity(config, spec, caps[idx], xs, xt,
                                                     rngmod.stream(rngmod.child_seed(rng)),
                                                     opt=optimizer)
    return FittedFunction(kind=model.kind, descriptor=model.descriptor(), parameters=params,
                          input_dim=xs.shape[1], link=spec.link, clamp=config.clamp,
                          objective_value=value, capacity_index=idx, cv_scores=scores,
                          trace=tuple(trace))
