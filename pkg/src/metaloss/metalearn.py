"""Bi-level meta-learning of loss functions by unrolled inner optimization."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import autodiff as ad
from .losses import (
    FfnLoss,
    LalLoss,
    Loss,
    ObjectiveWeights,
    OalLoss,
    PretrainWarning,
    adam_update,
    mse_pretrain,
    penalty_eval,
    snapshot_dict,
)
from .network import MlpSpec, ParamVector, xavier_init
from .tasks import (
    DEFAULT_NETWORKS,
    Task,
    TaskFamily,
    eval_points,
    inner_objective,
    outer_objective,
    predict,
    sample_task,
)

CLIP_MODES = ("none", "clip_norm", "divide_by_J", "normalize")
METRIC_COLUMNS = ("iter", "L_O", "grad_norm", "grad_max", "eta_norm", "w_f", "w_b", "w_u0", "rl2_val")
N_SNAPSHOTS = 6

# seed purposes
TASK, THETA, PENALTY, VALIDATION, LOSS_INIT, TEST = range(6)


def derive_seed(root: int, *keys: int) -> int:
    """Independent 63-bit seed for a (purpose, index, ...) key under ``root``."""
    seq = np.random.SeedSequence(entropy=int(root), spawn_key=tuple(int(k) for k in keys))
    return int(seq.generate_state(1, dtype=np.uint64)[0] >> np.uint64(1))


class MetaTrainError(RuntimeError):
    pass


class InnerDivergence(MetaTrainError):
    def __init__(self, step: int):
        super().__init__(f"non-finite network parameters after inner step {step}")
        self.step = step


@dataclass(frozen=True)
class InnerOptSpec:
    kind: str = "sgd"
    learning_rate: float | None = None
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    steps: int = 20

    def __post_init__(self):
        if self.kind not in ("sgd", "adam"):
            raise ValueError(f"unknown inner optimizer {self.kind!r}")
        if self.learning_rate is None:
            object.__setattr__(self, "learning_rate", 1e-2 if self.kind == "sgd" else 1e-3)
        if not self.learning_rate > 0:
            raise ValueError("inner learning rate must be positive")
        if not all(0.0 <= b < 1.0 for b in self.betas):
            raise ValueError("betas must lie in [0, 1)")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")


@dataclass(frozen=True)
class ClipSpec:
    mode: str = "clip_norm"
    cap: float = 1.0

    def __post_init__(self):
        if self.mode not in CLIP_MODES:
            raise ValueError(f"unknown clip mode {self.mode!r}")
        if self.mode == "clip_norm" and not self.cap > 0:
            raise ValueError("cap must be positive for clip_norm")


@dataclass(frozen=True)
class PenaltySpec:
    enabled: bool = False
    c_margin: float = 1e-2
    samples: int = 64
    weight: float = 1.0
    domain: tuple[float, float] = (-2.0, 2.0)


@dataclass(frozen=True)
class OuterOptSpec:
    kind: str = "adam"
    learning_rate: float = 1e-4
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    clip: ClipSpec = field(default_factory=ClipSpec)
    iterations: int = 10000
    tasks_per_step: int = 1
    resample_every: int | None = 1
    reinit_every: int | None = 1
    penalty: PenaltySpec = field(default_factory=PenaltySpec)
    validate_every: int | None = 500
    validate_budget: int = 100
    validate_tasks: int = 1

    def __post_init__(self):
        if self.kind not in ("sgd", "adam"):
            raise ValueError(f"unknown outer optimizer {self.kind!r}")
        if not self.learning_rate > 0:
            raise ValueError("outer learning rate must be positive")
        if self.iterations < 0 or self.tasks_per_step < 1:
            raise ValueError("iterations must be >= 0 and tasks_per_step >= 1")
        for name in ("resample_every", "reinit_every", "validate_every"):
            v = getattr(self, name)
            if v is not None and v < 1:
                raise ValueError(f"{name} must be >= 1 or None")


# ---------------------------------------------------------------------------
# optimizer steps shared by the differentiable and plain paths
# ---------------------------------------------------------------------------


@dataclass
class _AdamMoments:
    m: list
    v: list
    t: int = 0


def _opt_step(params, grads, spec: InnerOptSpec, state: _AdamMoments | None):
    """One optimizer update. Works on Vars (graph recorded) or arrays."""
    if spec.kind == "sgd":
        return [p - spec.learning_rate * g for p, g in zip(params, grads)]
    b1, b2 = spec.betas
    state.t += 1
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    out = []
    for i, (p, g) in enumerate(zip(params, grads)):
        state.m[i] = b1 * state.m[i] + (1.0 - b1) * g
        state.v[i] = b2 * state.v[i] + (1.0 - b2) * (g * g)
        mh = state.m[i] * (1.0 / c1)
        vh = state.v[i] * (1.0 / c2)
        if isinstance(vh, ad.Var):
            denom = ad.sqrt(vh) + spec.eps
        else:
            denom = np.sqrt(vh) + spec.eps
        out.append(p - spec.learning_rate * (mh / denom))
    return out


def _zeros_like(arrays):
    return [np.zeros_like(np.asarray(a.value if isinstance(a, ad.Var) else a)) for a in arrays]


def _scalar(x) -> float:
    return float(np.asarray(x.value if isinstance(x, ad.Var) else x))


def mapped_weights(raw) -> np.ndarray:
    return np.asarray(ObjectiveWeights(np.asarray(raw, dtype=np.float64)).mapped())


def _finite(params) -> bool:
    return all(np.all(np.isfinite(p.value if isinstance(p, ad.Var) else p)) for p in params)


# ---------------------------------------------------------------------------
# inner unroll
# ---------------------------------------------------------------------------


def inner_unroll(
    task: Task,
    net: MlpSpec,
    theta0,
    loss_fn: Callable,
    spec: InnerOptSpec,
    weights=None,
    objective: Callable | None = None,
) -> list[ad.Var]:
    """Run ``spec.steps`` optimizer steps keeping every update in the graph.

    ``loss_fn(q, u)`` must close over the loss-parameter Vars so the returned
    parameters stay differentiable with respect to them.  ``objective``
    overrides the task objective (``objective(theta) -> Var``).
    """
    if isinstance(theta0, ParamVector):
        theta0 = theta0.unflatten()
    theta = [ad.const(np.asarray(t, dtype=np.float64)) for t in theta0]
    moments = _AdamMoments(_zeros_like(theta), _zeros_like(theta)) if spec.kind == "adam" else None
    for j in range(spec.steps):
        leaves = [ad.var(t.value) if not t.requires_grad else t for t in theta]
        if objective is None:
            value = inner_objective(task, net, leaves, loss_fn, weights)
        else:
            value = objective(leaves)
        grads = ad.grad(value, leaves, create_graph=True)
        theta = _opt_step(leaves, grads, spec, moments)
        if not _finite(theta):
            raise InnerDivergence(j + 1)
    return theta


# ---------------------------------------------------------------------------
# outer step
# ---------------------------------------------------------------------------


def clip_gradient(flat: np.ndarray, clip: ClipSpec, steps: int) -> np.ndarray:
    norm = float(np.linalg.norm(flat))
    if clip.mode == "none":
        return flat
    if clip.mode == "clip_norm":
        return flat * min(1.0, clip.cap / norm) if norm > 0 else flat
    if clip.mode == "divide_by_J":
        return flat / steps
    return flat / norm if norm > 0 else flat


@dataclass
class MetaState:
    loss: Loss
    eta: list[np.ndarray]
    weights_raw: np.ndarray | None = None
    m: np.ndarray | None = None
    v: np.ndarray | None = None
    t: int = 0
    iteration: int = 0
    snapshots: list[dict] = field(default_factory=list)
    metrics: list[dict] = field(default_factory=list)
    records: list = field(default_factory=list)

    def flat(self) -> np.ndarray:
        parts = [np.ravel(e) for e in self.eta]
        if self.weights_raw is not None:
            parts.append(self.weights_raw)
        return np.concatenate(parts)

    def set_flat(self, flat: np.ndarray) -> None:
        pos = 0
        new = []
        for e in self.eta:
            new.append(flat[pos:pos + e.size].reshape(e.shape).copy())
            pos += e.size
        self.eta = new
        if self.weights_raw is not None:
            self.weights_raw = flat[pos:pos + 3].copy()
        self.loss = self.loss.with_params(self.eta)

    def current_loss(self) -> Loss:
        return self.loss.with_params(self.eta)

    def mapped_weights(self) -> np.ndarray:
        if self.weights_raw is None:
            return np.ones(3)
        return mapped_weights(self.weights_raw)


@dataclass
class StepRecord:
    outer_loss: float
    grad_norm: float
    grad_max: float
    applied_norm: float
    eta_norm: float
    weights: np.ndarray


def meta_gradient(
    state: MetaState,
    tasks,
    net: MlpSpec,
    thetas0,
    inner: InnerOptSpec,
    penalty: PenaltySpec | None = None,
    penalty_seed: int = 0,
) -> tuple[float, np.ndarray]:
    """Outer objective and its total derivative with respect to the flat meta-parameters."""
    eta_vars = [ad.var(e) for e in state.eta]
    w_var = ad.var(state.weights_raw) if state.weights_raw is not None else None
    weights = ObjectiveWeights(w_var).as_dict() if w_var is not None else None
    loss_fn = state.loss.bind(eta_vars)
    stars = [inner_unroll(task, net, th0, loss_fn, inner, weights) for task, th0 in zip(tasks, thetas0)]
    value = outer_objective(tasks, net, stars)
    if penalty is not None and penalty.enabled:
        pen = penalty_eval(loss_fn, penalty.samples, penalty.c_margin, penalty_seed, penalty.domain)
        value = value + penalty.weight * pen
    wrt = eta_vars + ([w_var] if w_var is not None else [])
    grads = ad.grad(value, wrt)
    flat = np.concatenate([np.ravel(g.value) for g in grads])
    return float(value.value), flat


def outer_step(
    state: MetaState,
    tasks,
    net: MlpSpec,
    thetas0,
    inner: InnerOptSpec,
    outer: OuterOptSpec,
    penalty_seed: int = 0,
) -> StepRecord:
    """Differentiate the outer objective through the unroll and update the meta-parameters in place."""
    value, raw = meta_gradient(state, tasks, net, thetas0, inner, outer.penalty, penalty_seed)
    norm = float(np.linalg.norm(raw))
    gmax = float(np.max(np.abs(raw))) if raw.size else 0.0
    g = clip_gradient(raw, outer.clip, inner.steps)
    if not np.all(np.isfinite(g)):
        raise MetaTrainError(
            f"non-finite meta-gradient at outer iteration {state.iteration}: L_O={value!r}, raw norm={norm!r}"
        )
    flat = state.flat()
    if outer.kind == "sgd":
        flat = flat - outer.learning_rate * g
    else:
        if state.m is None:
            state.m = np.zeros_like(flat)
            state.v = np.zeros_like(flat)
        state.t += 1
        flat, state.m, state.v = adam_update(
            flat, g, state.m, state.v, state.t, outer.learning_rate, outer.betas[0], outer.betas[1], outer.eps
        )
    state.set_flat(flat)
    state.iteration += 1
    eta_norm = float(np.linalg.norm(np.concatenate([np.ravel(e) for e in state.eta])))
    return StepRecord(value, norm, gmax, float(np.linalg.norm(g)), eta_norm, state.mapped_weights())


# ---------------------------------------------------------------------------
# plain training with a frozen loss (meta-validation and meta-testing)
# ---------------------------------------------------------------------------


def rl2(predictions, references) -> float:
    predictions = np.asarray(predictions, dtype=np.float64).ravel()
    references = np.asarray(references, dtype=np.float64).ravel()
    if predictions.shape != references.shape:
        raise ValueError("predictions and references differ in length")
    denom = np.linalg.norm(references)
    if denom == 0:
        raise ValueError("reference has zero norm")
    return float(np.linalg.norm(predictions - references) / denom)


@dataclass
class FitResult:
    theta: list[np.ndarray]
    iterations: list[int]
    rl2: list[float]
    diverged: bool = False
    alphas: list[float] = field(default_factory=list)


def fit(
    task: Task,
    net: MlpSpec,
    theta0,
    loss: Loss,
    opt: InnerOptSpec,
    iterations: int,
    weights: np.ndarray | None = None,
    eval_every: int = 100,
    points: np.ndarray | None = None,
    diverge_at: float = 1e3,
) -> FitResult:
    """Train a fresh network with a frozen loss, recording rl2 on a schedule.

    An :class:`OalLoss` trains its shape parameter jointly with Adam at its
    own learning rate.  Divergence (non-finite values or rl2 above
    ``diverge_at``) truncates the trajectory and sets ``diverged``.
    """
    if isinstance(theta0, ParamVector):
        theta0 = theta0.unflatten()
    theta = [np.array(t, dtype=np.float64) for t in theta0]
    points = eval_points(task.kind) if points is None else points
    reference = task.reference(points)
    w = None
    if weights is not None:
        mapped = mapped_weights(weights)
        w = {t: float(mapped[i]) for i, t in enumerate(("f", "b", "u0"))}
    is_oal = isinstance(loss, OalLoss)
    if is_oal:
        loss = OalLoss(loss.learning_rate, _scalar(loss.alpha()), loss.c, loss.alpha_max)
        oal_m, oal_v, oal_t = np.zeros(1), np.zeros(1), 0
    loss_params = [] if is_oal else loss.init_params()
    moments = _AdamMoments(_zeros_like(theta), _zeros_like(theta)) if opt.kind == "adam" else None
    result = FitResult(theta, [], [])

    def record(it):
        err = rl2(predict(net, theta, points), reference)
        result.iterations.append(it)
        result.rl2.append(err)
        if is_oal:
            result.alphas.append(_scalar(loss.alpha()))
        return np.isfinite(err) and err <= diverge_at

    if not record(0):
        result.diverged = True
        return result
    for it in range(1, iterations + 1):
        leaves = [ad.var(t) for t in theta]
        if is_oal:
            ah = ad.var(loss.alpha_hat)
            value = inner_objective(task, net, leaves, lambda q, u: loss(q, u, [ah]), w)
            grads = ad.grad(value, leaves + [ah])
            g_alpha = grads.pop().value
        else:
            value = inner_objective(task, net, leaves, loss.bind(loss_params), w)
            grads = ad.grad(value, leaves)
        new = _opt_step(theta, [g.value for g in grads], opt, moments)
        if not (np.isfinite(value.value) and _finite(new)):
            result.diverged = True
            break
        theta[:] = new
        if is_oal:
            oal_t += 1
            loss.alpha_hat, oal_m, oal_v = adam_update(loss.alpha_hat, g_alpha, oal_m, oal_v, oal_t, loss.learning_rate)
        if it % eval_every == 0 or it == iterations:
            if not record(it):
                result.diverged = True
                break
    result.theta = theta
    return result


def meta_validate(
    loss: Loss,
    family: TaskFamily,
    budget_iters: int,
    n_tasks: int,
    seed: int,
    opt: InnerOptSpec | None = None,
    net: MlpSpec | None = None,
    weights: np.ndarray | None = None,
    data_mode: str = "single",
) -> float:
    """Mean rl2 after ``budget_iters`` training iterations on held-out tasks."""
    opt = opt or InnerOptSpec()
    net = net or DEFAULT_NETWORKS[family.kind]
    errors = []
    for k in range(n_tasks):
        task = sample_task(family, derive_seed(seed, VALIDATION, k), "train", data_mode)
        theta0 = xavier_init(net, derive_seed(seed, VALIDATION, k, 1))
        res = fit(task, net, theta0, loss, opt, budget_iters, weights, eval_every=max(budget_iters, 1))
        errors.append(res.rl2[-1] if not res.diverged else float("inf"))
    return float(np.mean(errors))


# ---------------------------------------------------------------------------
# meta-training driver
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MetaTrainConfig:
    parametrization: str = "lal"
    loss_init: str = "mse"
    learn_weights: bool = False
    data_mode: str = "single"
    inner: InnerOptSpec = field(default_factory=InnerOptSpec)
    outer: OuterOptSpec = field(default_factory=OuterOptSpec)
    seed: int = 0
    network: MlpSpec | None = None
    pretrain_steps: int = 2000

    def __post_init__(self):
        if self.parametrization not in ("lal", "ffn"):
            raise ValueError(f"unknown parametrization {self.parametrization!r}")
        if self.loss_init not in ("mse", "random"):
            raise ValueError(f"unknown loss_init {self.loss_init!r}")
        if self.data_mode not in ("single", "double"):
            raise ValueError(f"unknown data mode {self.data_mode!r}")


def snapshot_schedule(iterations: int, count: int = N_SNAPSHOTS) -> list[int]:
    """Outer iterations at which snapshots are taken: ceil(k * I / (count - 1))."""
    return [math.ceil(k * iterations / (count - 1)) for k in range(count)]


def initial_loss(config: MetaTrainConfig) -> Loss:
    if config.parametrization == "lal":
        return LalLoss.mse_init()
    loss = FfnLoss.random(derive_seed(config.seed, LOSS_INIT))
    if config.loss_init == "mse":
        # the bias-free network cannot fit d**2 below ~0.29; expected, not news
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", PretrainWarning)
            loss = mse_pretrain(loss, steps=config.pretrain_steps, seed=derive_seed(config.seed, LOSS_INIT, 1)).loss
    return loss


def init_state(config: MetaTrainConfig, loss: Loss | None = None) -> MetaState:
    loss = initial_loss(config) if loss is None else loss
    raw = ObjectiveWeights().raw.copy() if config.learn_weights else None
    return MetaState(loss, loss.init_params(), raw)


def _block(i: int, every: int | None) -> int:
    return 0 if every is None else i // every


def meta_train(
    family: TaskFamily,
    config: MetaTrainConfig,
    state: MetaState | None = None,
    on_row: Callable[[dict], None] | None = None,
    on_snapshot: Callable[[dict], None] | None = None,
    hook: Callable[[MetaState, dict], None] | None = None,
) -> MetaState:
    """Run the outer loop for ``config.outer.iterations`` iterations.

    Tasks are redrawn every ``resample_every`` iterations and network
    initializations every ``reinit_every`` iterations (``None`` keeps the
    first draw).  Six snapshots are taken at :func:`snapshot_schedule`.
    ``hook(state, row)`` runs after every outer step.
    """
    outer, inner = config.outer, config.inner
    net = config.network or DEFAULT_NETWORKS[family.kind]
    state = init_state(config) if state is None else state
    schedule = snapshot_schedule(outer.iterations)
    taken: set[int] = set()

    def snap(it):
        for idx, when in enumerate(schedule):
            if when == it and idx not in taken:
                taken.add(idx)
                data = snapshot_dict(state.current_loss(), idx, it, state.weights_raw)
                state.snapshots.append(data)
                if on_snapshot is not None:
                    on_snapshot(data)

    tasks_cache: dict[int, list[Task]] = {}
    theta_cache: dict[int, list[list[np.ndarray]]] = {}
    for i in range(outer.iterations):
        snap(i)
        tb = _block(i, outer.resample_every)
        if tb not in tasks_cache:
            tasks_cache.clear()
            tasks_cache[tb] = [
                sample_task(family, derive_seed(config.seed, TASK, tb, k), "train", config.data_mode)
                for k in range(outer.tasks_per_step)
            ]
        ib = _block(i, outer.reinit_every)
        if ib not in theta_cache:
            theta_cache.clear()
            theta_cache[ib] = [
                xavier_init(net, derive_seed(config.seed, THETA, ib, k)).unflatten()
                for k in range(outer.tasks_per_step)
            ]
        rec = outer_step(
            state, tasks_cache[tb], net, theta_cache[ib], inner, outer, derive_seed(config.seed, PENALTY, i)
        )
        state.records.append(rec)
        val = ""
        if outer.validate_every is not None and (i + 1) % outer.validate_every == 0:
            val = meta_validate(
                state.current_loss(), family, outer.validate_budget, outer.validate_tasks,
                derive_seed(config.seed, VALIDATION), inner, net, state.weights_raw, config.data_mode,
            )
        row = {
            "iter": i + 1,
            "L_O": rec.outer_loss,
            "grad_norm": rec.grad_norm,
            "grad_max": rec.grad_max,
            "eta_norm": rec.eta_norm,
            "w_f": float(rec.weights[0]),
            "w_b": float(rec.weights[1]),
            "w_u0": float(rec.weights[2]),
            "rl2_val": val,
        }
        if hook is not None:
            hook(state, row)
        state.metrics.append(row)
        if on_row is not None:
            on_row(row)
    snap(outer.iterations)
    return state
