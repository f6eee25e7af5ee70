"""Loss families applied to (prediction, target) pairs.

Every loss is called as ``loss(q, u, params)`` and returns per-point values.
``params`` is the list of raw (unconstrained) parameter tensors; when omitted
the loss uses its own stored values as constants.  Learned losses expose
``init_params()`` so that meta-training can hold them as graph leaves.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from scipy import integrate

from . import autodiff as ad
from .network import MlpSpec, mlp_forward, xavier_init

STANDARD_KINDS = ("squared", "absolute", "huber", "pseudo_huber", "cauchy", "geman_mcclure", "welsch")
LAL_BOUNDS = (-6.0, 4.0)
OAL_ALPHA_MAX = 3.01
C_MIN = 1e-8
MSE_INIT_ALPHA = 2.01
MSE_INIT_C = 1.0 / math.sqrt(2.0)
LIMIT_EPS = 1e-6


def _val(x) -> float:
    return float(x.value) if isinstance(x, ad.Var) else float(x)


def _sp_inv(y: float) -> float:
    return float(np.log(np.expm1(y)))


def _logit(p: float) -> float:
    return float(np.log(p) - np.log1p(-p))


class Loss:
    tag = "loss"

    def init_params(self) -> list[np.ndarray]:
        return []

    def __call__(self, q, u, params=None):
        raise NotImplementedError

    def bind(self, params=None):
        return lambda q, u: self(q, u, params)


# ---------------------------------------------------------------------------
# standard zoo
# ---------------------------------------------------------------------------


class StandardLoss(Loss):
    tag = "standard"

    def __init__(self, kind: str, c: float = 1.0):
        if kind not in STANDARD_KINDS:
            raise ValueError(f"unknown standard loss {kind!r}")
        if not c > 0:
            raise ValueError("scale c must be positive")
        self.kind = kind
        self.c = float(c)

    def __repr__(self):
        return f"StandardLoss({self.kind!r}, c={self.c})"

    def __call__(self, q, u, params=None):
        return standard_eval(self, q - u)


def standard_eval(loss: StandardLoss, d):
    c = loss.c
    if loss.kind == "absolute":
        return ad.abs(d)
    if loss.kind == "huber":
        a = ad.abs(d)
        inside = np.abs(_values(d)) < c
        return ad.where(inside, 0.5 * d * d / c, a - 0.5 * c)
    x = (d / c) * (d / c)
    if loss.kind == "squared":
        return 0.5 * x
    if loss.kind == "pseudo_huber":
        return ad.sqrt(x + 1.0) - 1.0
    if loss.kind == "cauchy":
        return ad.log1p(0.5 * x)
    if loss.kind == "geman_mcclure":
        return 2.0 * x / (x + 4.0)
    return 1.0 - ad.exp(-0.5 * x)


def _values(x):
    return x.value if isinstance(x, ad.Var) else np.asarray(x)


def mse() -> StandardLoss:
    """The squared error d**2 (squared form with c = 1/sqrt(2))."""
    return StandardLoss("squared", MSE_INIT_C)


# ---------------------------------------------------------------------------
# Barron-form family
# ---------------------------------------------------------------------------


def barron_rho(d, alpha, c):
    """General robust loss with shape ``alpha`` and scale ``c``.

    The removable singularities are replaced by their limits: ``alpha == 0``
    gives the Cauchy form and ``alpha == 2`` the squared form.
    """
    x = (d / c) * (d / c)
    a = _val(alpha)
    if abs(a) < LIMIT_EPS:
        return ad.log1p(0.5 * x)
    if abs(a - 2.0) < LIMIT_EPS:
        return 0.5 * x
    b = ad.abs(alpha - 2.0)
    return (b / alpha) * (ad.exp((0.5 * alpha) * ad.log1p(x / b)) - 1.0)


def lal_constrain(alpha_hat, c_hat, bounds=LAL_BOUNDS, c_min: float = C_MIN):
    lo, hi = bounds
    if not lo < hi:
        raise ValueError("alpha_min must be below alpha_max")
    alpha = (hi - lo) * ad.sigmoid(alpha_hat) + lo
    c = ad.softplus(c_hat) + c_min
    return alpha, c


class LalLoss(Loss):
    """Barron-form loss with learnable shape and scale."""

    tag = "lal"

    def __init__(self, alpha_hat: float, c_hat: float, bounds=LAL_BOUNDS, c_min: float = C_MIN):
        self.eta = np.array([alpha_hat, c_hat], dtype=np.float64)
        self.bounds = (float(bounds[0]), float(bounds[1]))
        self.c_min = float(c_min)
        if not self.bounds[0] < self.bounds[1]:
            raise ValueError("alpha_min must be below alpha_max")

    @classmethod
    def from_alpha_c(cls, alpha: float, c: float, bounds=LAL_BOUNDS, c_min: float = C_MIN) -> "LalLoss":
        if alpha in (0.0, 2.0):
            raise ValueError("alpha must differ from 0 and 2")
        lo, hi = bounds
        if not lo < alpha < hi:
            raise ValueError(f"alpha {alpha} outside open bounds {bounds}")
        if not c > c_min:
            raise ValueError("c must exceed c_min")
        return cls(_logit((alpha - lo) / (hi - lo)), _sp_inv(c - c_min), bounds, c_min)

    @classmethod
    def mse_init(cls, bounds=LAL_BOUNDS) -> "LalLoss":
        return cls.from_alpha_c(MSE_INIT_ALPHA, MSE_INIT_C, bounds)

    def init_params(self):
        return [self.eta.copy()]

    def with_params(self, params) -> "LalLoss":
        eta = np.asarray(params[0], dtype=np.float64)
        return LalLoss(eta[0], eta[1], self.bounds, self.c_min)

    def alpha_c(self, params=None):
        eta = self.eta if params is None else params[0]
        return lal_constrain(eta[0], eta[1], self.bounds, self.c_min)

    def __call__(self, q, u, params=None):
        alpha, c = self.alpha_c(params)
        return barron_rho(q - u, alpha, c)

    def bounds_dict(self):
        return {"alpha_min": self.bounds[0], "alpha_max": self.bounds[1], "c_min": self.c_min}


def lal_eval(loss: LalLoss, d):
    alpha, c = loss.alpha_c()
    return barron_rho(d, alpha, c)


# ---------------------------------------------------------------------------
# network-parametrized loss
# ---------------------------------------------------------------------------

FFN_SPEC = MlpSpec(2, 1, 2, 40, activation="relu", output_activation="softplus", use_biases=False)


class FfnLoss(Loss):
    """Bias-free ReLU network on the raw (prediction, target) pair."""

    tag = "ffn"

    def __init__(self, weights: list[np.ndarray], spec: MlpSpec = FFN_SPEC):
        self.spec = spec
        self.weights = [np.asarray(w, dtype=np.float64) for w in weights]
        if [w.shape for w in self.weights] != spec.shapes():
            raise ValueError("weight shapes do not match the loss network")

    @classmethod
    def random(cls, seed, dims: int = 1) -> "FfnLoss":
        spec = FFN_SPEC if dims == 1 else MlpSpec(
            2 * dims, 1, 2, 40, activation="relu", output_activation="softplus", use_biases=False
        )
        return cls(xavier_init(spec, seed).unflatten(), spec)

    def init_params(self):
        return [w.copy() for w in self.weights]

    def with_params(self, params) -> "FfnLoss":
        return FfnLoss([np.asarray(p, dtype=np.float64) for p in params], self.spec)

    def __call__(self, q, u, params=None):
        w = self.weights if params is None else params
        q_arr = _values(q)
        n = q_arr.shape[0]
        if isinstance(u, ad.Var):
            u_in = u
        else:
            u_in = np.broadcast_to(np.asarray(u, dtype=np.float64), q_arr.shape).copy()
        if q_arr.ndim == 1:
            q, u_in = ad.reshape(q, (n, 1)), ad.reshape(u_in, (n, 1))
        x = ad.concat([q, u_in], axis=1)
        return ad.reshape(mlp_forward(self.spec, w, x), (n,))


def ffn_loss_eval(loss: FfnLoss, prediction, target):
    return loss(prediction, target)


@dataclass
class PretrainResult:
    loss: Loss
    fit_error: float
    steps: int


class PretrainWarning(UserWarning):
    pass


def fit_error(loss: Loss, domain=(-2.0, 2.0), n: int = 4001, params=None) -> float:
    """Relative L1 gap between the loss and d**2 over a grid of (q, u) pairs.

    Targets sweep ``domain`` and discrepancies sweep ``domain``; the score is
    ``mean|l - d^2| / mean(d^2)``.
    """
    lo, hi = domain
    side = int(np.sqrt(n))
    u, d = np.meshgrid(np.linspace(lo, hi, side), np.linspace(lo, hi, side), indexing="ij")
    u, d = u.ravel(), d.ravel()
    with ad.no_grad():
        val = np.asarray(_values(loss(ad.const(u + d), u, params)))
    return float(np.mean(np.abs(val - d * d)) / np.mean(d * d))


def mse_pretrain(
    loss: Loss,
    domain=(-2.0, 2.0),
    steps: int = 2000,
    seed=0,
    lr: float = 1e-2,
    batch: int = 512,
    threshold: float = 0.1,
) -> PretrainResult:
    """Fit a learned loss to d**2 with Adam on synthetic pairs.

    Targets ``u`` and discrepancies ``d`` are drawn uniformly from ``domain``
    with ``q = u + d``.  A :class:`PretrainWarning` reports a fit error above
    ``threshold``; the bias-free loss network cannot get below roughly 0.29 on
    the default domain, since it equals softplus(k r) along every ray from the
    origin of the (q, u) plane.
    """
    lo, hi = domain
    if not hi > lo:
        raise ValueError("pretraining domain must have positive width")
    params = loss.init_params()
    if params and steps > 0:
        rng = np.random.default_rng(seed)
        m = [np.zeros_like(p) for p in params]
        v = [np.zeros_like(p) for p in params]
        b1, b2, eps = 0.9, 0.999, 1e-8
        for t in range(1, steps + 1):
            u = rng.uniform(lo, hi, batch)
            d = rng.uniform(lo, hi, batch)
            leaves = [ad.var(p) for p in params]
            out = loss(ad.const(u + d), u, leaves)
            r = out - d * d
            obj = ad.mean(r * r)
            grads = ad.grad(obj, leaves)
            for i, g in enumerate(grads):
                g = g.value
                m[i] = b1 * m[i] + (1 - b1) * g
                v[i] = b2 * v[i] + (1 - b2) * g * g
                mh = m[i] / (1 - b1**t)
                vh = v[i] / (1 - b2**t)
                params[i] = params[i] - lr * mh / (np.sqrt(vh) + eps)
        loss = loss.with_params(params)
        done = steps
    else:
        done = 0
    err = fit_error(loss, domain)
    if err > threshold:
        warnings.warn(f"fit error {err:.3f} above {threshold} after {done} steps", PretrainWarning, stacklevel=2)
    return PretrainResult(loss, err, done)


# ---------------------------------------------------------------------------
# objective weights and multi-dimensional combiners
# ---------------------------------------------------------------------------

WEIGHT_TERMS = ("f", "b", "u0")


@dataclass
class ObjectiveWeights:
    raw: np.ndarray = field(default_factory=lambda: np.full(3, _sp_inv(1.0)))

    def mapped(self, raw=None):
        r = self.raw if raw is None else raw
        return ad.softplus(r)

    def as_dict(self, raw=None) -> dict:
        w = self.mapped(raw)
        return {t: w[i] for i, t in enumerate(WEIGHT_TERMS)}


def combine_multidim(q, u, mode: str, losses, weights=None):
    """Combine per-dimension losses for (N, D) predictions and targets.

    ``shared`` applies one loss to every column, ``per_dim`` applies
    ``losses[j]`` to column ``j`` (both with weights ``a_j``); ``full`` hands
    the whole vectors to a single loss.
    """
    q_arr = _values(q)
    dims = q_arr.shape[1]
    a = np.ones(dims) if weights is None else np.asarray(weights, dtype=np.float64)
    if a.shape != (dims,):
        raise ValueError("one weight per dimension required")
    if np.any(a < 0):
        raise ValueError("weights must be nonnegative")
    if mode == "full":
        return losses(q, u) if callable(losses) else losses[0](q, u)
    if mode == "shared":
        fns = [losses if callable(losses) else losses[0]] * dims
    elif mode == "per_dim":
        fns = list(losses)
        if len(fns) != dims:
            raise ValueError("per_dim needs one loss per dimension")
    else:
        raise ValueError(f"unknown mode {mode!r}")
    total = None
    for j, fn in enumerate(fns):
        term = a[j] * fn(q[:, j], u[:, j])
        total = term if total is None else total + term
    return total


# ---------------------------------------------------------------------------
# online adaptive loss
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LogZTable:
    alphas: np.ndarray
    values: np.ndarray
    slopes: np.ndarray

    def __call__(self, alpha):
        """Cubic Hermite interpolation of log Z, differentiable in ``alpha``."""
        a = _val(alpha)
        lo, hi = self.alphas[0], self.alphas[-1]
        if not lo - 1e-12 <= a <= hi + 1e-12:
            raise ValueError(f"alpha {a} outside table range [{lo}, {hi}]")
        h = self.alphas[1] - self.alphas[0]
        k = int(min(max(np.floor((a - lo) / h), 0), len(self.alphas) - 2))
        t = (alpha - self.alphas[k]) / h
        t2 = t * t
        t3 = t2 * t
        h00 = 2.0 * t3 - 3.0 * t2 + 1.0
        h10 = t3 - 2.0 * t2 + t
        h01 = -2.0 * t3 + 3.0 * t2
        h11 = t3 - t2
        y0, y1 = self.values[k], self.values[k + 1]
        m0, m1 = self.slopes[k] * h, self.slopes[k + 1] * h
        return h00 * y0 + h10 * m0 + h01 * y1 + h11 * m1


def partition(alpha: float, tol: float = 1e-11) -> float:
    """Z(alpha) = integral of exp(-rho_{alpha,1}(d)) over the real line."""

    def integrand(d):
        return float(np.exp(-barron_rho(np.float64(d), alpha, 1.0)))

    val, err = integrate.quad(integrand, 0.0, np.inf, epsabs=tol, epsrel=tol, limit=500)
    if not np.isfinite(val) or err > 1e-6 * max(val, 1.0):
        raise ArithmeticError(f"quadrature did not converge for alpha={alpha}")
    return 2.0 * val


def build_logz_table(alphas=None, tol: float = 1e-11, alpha_max: float = OAL_ALPHA_MAX,
                     knots: int = 301) -> LogZTable:
    """Knot table of log Z on a uniform grid (default: 301 knots on [0, alpha_max]).

    Slopes come from second-order differences of the knot values.  Z has a
    ``s log|s|`` singularity at alpha = 2, so interpolation is least accurate
    there (about 5e-4 in log Z on the default grid).
    """
    grid = np.linspace(0.0, alpha_max, knots) if alphas is None else np.asarray(alphas, dtype=np.float64)
    return _logz_table(tuple(float(a) for a in grid), tol)


@lru_cache(maxsize=8)
def _logz_table(grid: tuple, tol: float) -> LogZTable:
    alphas = np.asarray(grid)
    if alphas.size < 3 or np.any(alphas < 0):
        raise ValueError("need at least three nonnegative knots")
    if not np.allclose(np.diff(alphas), alphas[1] - alphas[0]):
        raise ValueError("knots must be uniformly spaced")
    values = np.array([np.log(partition(a, tol)) for a in alphas])
    slopes = np.gradient(values, alphas, edge_order=2)
    return LogZTable(alphas, values, slopes)


class OalLoss(Loss):
    """Negative log-likelihood of the Barron density with a trainable shape.

    Only ``alpha`` is trained; the scale ``c`` stays fixed.
    """

    tag = "oal"

    def __init__(self, learning_rate: float, alpha: float = MSE_INIT_ALPHA, c: float = MSE_INIT_C,
                 alpha_max: float = OAL_ALPHA_MAX):
        if not 0.0 < alpha < alpha_max:
            raise ValueError("initial alpha must lie inside (0, alpha_max)")
        self.learning_rate = float(learning_rate)
        self.alpha_max = float(alpha_max)
        self.c = float(c)
        self.alpha_hat = np.array([_logit(alpha / alpha_max)])
        self.table = build_logz_table(alpha_max=self.alpha_max)

    def init_params(self):
        return [self.alpha_hat.copy()]

    def alpha(self, params=None):
        ah = self.alpha_hat if params is None else params[0]
        return self.alpha_max * ad.sigmoid(ah[0])

    def __call__(self, q, u, params=None):
        alpha = self.alpha(params)
        return (math.log(self.c) + self.table(alpha)) + barron_rho(q - u, alpha, self.c)


@dataclass
class OalState:
    loss: OalLoss
    m: np.ndarray = field(default_factory=lambda: np.zeros(1))
    v: np.ndarray = field(default_factory=lambda: np.zeros(1))
    t: int = 0

    @property
    def alpha_hat(self) -> np.ndarray:
        return self.loss.alpha_hat


def adam_update(p, g, m, v, t, lr, b1=0.9, b2=0.999, eps=1e-8):
    m = b1 * m + (1 - b1) * g
    v = b2 * v + (1 - b2) * g * g
    mh = m / (1 - b1**t)
    vh = v / (1 - b2**t)
    return p - lr * mh / (np.sqrt(vh) + eps), m, v


def oal_step(state: OalState, discrepancies, grad_alpha_hat=None) -> tuple[np.ndarray, float]:
    """One Adam step on the shape parameter and the mean NLL before the step.

    If ``grad_alpha_hat`` is given (for example from a joint backward pass
    with the network parameters) it is used instead of recomputing it.
    """
    d = np.asarray(discrepancies, dtype=np.float64)
    ah = ad.var(state.loss.alpha_hat)
    nll = ad.mean(state.loss(ad.const(d), 0.0, [ah]))
    g = ad.grad(nll, [ah])[0].value if grad_alpha_hat is None else np.asarray(grad_alpha_hat)
    state.t += 1
    new, state.m, state.v = adam_update(state.loss.alpha_hat, g, state.m, state.v, state.t, state.loss.learning_rate)
    state.loss.alpha_hat = new
    return new, float(nll.value)


# ---------------------------------------------------------------------------
# penalty and condition checks
# ---------------------------------------------------------------------------


def _loss_grad_q(loss_fn, q: np.ndarray, u: np.ndarray, create_graph: bool):
    qv = ad.var(q)
    vals = loss_fn(qv, u)
    if not (isinstance(vals, ad.Var) and vals.requires_grad):
        return ad.const(np.zeros_like(q)), vals
    (g,) = ad.grad(ad.sum(vals), [qv], create_graph=create_graph)
    return g, vals


def penalty_eval(loss_fn, samples: int = 64, c_margin: float = 1e-2, seed=0, domain=(-2.0, 2.0),
                 rng=None):
    """Monte-Carlo estimate of the condition penalty, differentiable in the loss parameters.

    ``loss_fn(q, u)`` must close over the parameter Vars.  The first term
    pushes the slope at zero discrepancy to zero; the second hinges the
    squared slope at distinct pairs up to ``c_margin``.
    """
    if not c_margin > 0:
        raise ValueError("c_margin must be positive")
    rng = np.random.default_rng(seed) if rng is None else rng
    lo, hi = domain
    q = rng.uniform(lo, hi, samples)
    g0, _ = _loss_grad_q(loss_fn, q, q.copy(), True)
    first = ad.mean(g0 * g0)
    a = rng.uniform(lo, hi, samples)
    b = rng.uniform(lo, hi, samples)
    bad = np.abs(a - b) < 1e-3
    while np.any(bad):
        b[bad] = rng.uniform(lo, hi, int(bad.sum()))
        bad = np.abs(a - b) < 1e-3
    g1, _ = _loss_grad_q(loss_fn, a, b, True)
    second = ad.mean(ad.relu(c_margin - g1 * g1))
    return first + second


@dataclass
class ConditionReport:
    mse_relation: bool
    optimal_stationarity: bool
    witnesses: dict

    def to_json(self) -> dict:
        return {
            "mse_relation": "pass" if self.mse_relation else "fail",
            "optimal_stationarity": "pass" if self.optimal_stationarity else "fail",
            "witnesses": self.witnesses,
        }


def check_conditions(
    loss_fn,
    q_range: float = 3.0,
    resolution: int = 601,
    u_values=(-1.0, 0.0, 1.0),
    tol_zero: float = 1e-8,
    tol_min: float = 1e-9,
) -> ConditionReport:
    """Grid check of the MSE-relation and optimal-stationarity conditions.

    For each target ``u`` the grid is ``u + linspace(-q_range, q_range)`` with
    ``q = u`` included exactly.  A grid can only falsify the conditions; a
    pass means no counterexample on the grid.
    """
    if resolution % 2 == 0:
        resolution += 1
    offsets = np.linspace(-q_range, q_range, resolution)
    mid = resolution // 2
    offsets[mid] = 0.0
    w_mse, w_opt = [], []
    for u0 in u_values:
        q = u0 + offsets
        u = np.full_like(q, u0)
        g, vals = _loss_grad_q(loss_fn, q, u, False)
        g = np.asarray(_values(g))
        vals = np.asarray(_values(vals))
        if abs(g[mid]) > tol_zero:
            w_mse.append({"u": u0, "q": float(q[mid]), "grad": float(g[mid]), "reason": "nonzero slope at q=u"})
        flat = np.abs(g) <= tol_zero
        flat[mid] = False
        for i in np.flatnonzero(flat)[:5]:
            w_mse.append({"u": u0, "q": float(q[i]), "grad": float(g[i]), "reason": "zero slope at q!=u"})
        stationary = np.abs(g) <= tol_zero
        floor = vals.min()
        for i in np.flatnonzero(stationary & (vals > floor + tol_min))[:5]:
            w_opt.append({"u": u0, "q": float(q[i]), "value": float(vals[i]), "grid_min": float(floor)})
    return ConditionReport(not w_mse, not w_opt, {"mse_relation": w_mse, "optimal_stationarity": w_opt})


# ---------------------------------------------------------------------------
# snapshots
# ---------------------------------------------------------------------------


def snapshot_dict(loss: Loss, index: int, iteration: int, weights_raw=None) -> dict:
    params = loss.init_params()
    out = {
        "parametrization": loss.tag,
        "params": [float(x) for p in params for x in np.ravel(p)],
        "shapes": [list(p.shape) for p in params],
        "bounds": loss.bounds_dict() if isinstance(loss, LalLoss) else {},
        "snapshot_index": int(index),
        "iteration": int(iteration),
        "objective_weights": None if weights_raw is None else [float(x) for x in weights_raw],
    }
    return out


def load_snapshot(data: dict) -> tuple[Loss, np.ndarray | None]:
    tag = data["parametrization"]
    flat = np.asarray(data["params"], dtype=np.float64)
    arrays, pos = [], 0
    for shape in data["shapes"]:
        size = int(np.prod(shape)) if shape else 1
        arrays.append(flat[pos:pos + size].reshape(shape))
        pos += size
    if tag == "lal":
        b = data["bounds"]
        loss: Loss = LalLoss(arrays[0][0], arrays[0][1], (b["alpha_min"], b["alpha_max"]), b["c_min"])
    elif tag == "ffn":
        in_dim = arrays[0].shape[0]
        spec = FFN_SPEC if in_dim == 2 else MlpSpec(
            in_dim, 1, 2, 40, activation="relu", output_activation="softplus", use_biases=False
        )
        loss = FfnLoss(arrays, spec)
    else:
        raise ValueError(f"unknown parametrization {tag!r}")
    w = data.get("objective_weights")
    return loss, None if w is None else np.asarray(w, dtype=np.float64)
