"""Task distributions, datasets, PINN residuals and reference solutions.

Four families are supported: discontinuous regression, 1-D advection of a box,
2-D steady reaction-diffusion with a fabricated solution, and viscous Burgers.
Time-dependent problems use coordinates ordered ``(t, x)``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from . import autodiff as ad
from .burgers import burgers_reference
from .network import MlpSpec, mlp_forward

KINDS = ("regression", "advection", "reaction_diffusion", "burgers")
TERMS = ("f", "b", "u0", "u")

ADVECTION_SPEED = 1.0
RD_DIFFUSION = 1.0
REGRESSION_NOISE = 0.2
REGRESSION_K = 1.0

_RANGES = {
    ("regression", "train"): {"omega1": (1.0, 3.0), "omega2": (5.0, 6.0)},
    ("regression", "ood"): {"omega1": (0.5, 4.0), "omega2": (6.0, 7.0)},
    ("advection", "train"): {"lam": (0.5, 1.0)},
    ("reaction_diffusion", "train"): {"alpha": (0.1, 1.0), "omega": (1.0, 5.0)},
    ("reaction_diffusion", "ood"): {"alpha": (0.1, 2.0), "omega": (0.5, 7.0)},
    ("burgers:r1", "train"): {"lam": (1e-3, 2e-3)},
    ("burgers:r1", "ood"): {"lam": (1e-3, 1e-2)},
    ("burgers:r2", "train"): {"lam": (1e-1, 1.0)},
    ("burgers:r2", "ood"): {"lam": (1e-2, 2.0)},
}

# dataset sizes: (training sets, single-data validation, double-data validation, meta-test)
_COUNTS = {
    "regression": ({"u": 100}, {"u": 1000}, {"u": 1000}, {"u": 100}),
    "advection": (
        {"f": 1000, "b": 100, "u0": 200},
        None,
        None,
        {"f": 1000, "b": 100, "u0": 200},
    ),
    "reaction_diffusion": ({"f": 1600, "b": 160}, None, {"u": 1600}, {"f": 2500, "b": 200}),
    "burgers": ({"f": 1000, "b": 200, "u0": 100}, None, {"u": 10000}, {"f": 2000, "b": 200, "u0": 100}),
}

EVAL_POINTS = {"regression": 1000, "advection": 10000, "reaction_diffusion": 2500, "burgers": 10000}

DEFAULT_NETWORKS = {
    "regression": MlpSpec(1, 1, 3, 40),
    "advection": MlpSpec(2, 1, 4, 20),
    "reaction_diffusion": MlpSpec(2, 1, 3, 20),
    "burgers": MlpSpec(2, 1, 3, 20),
}


@dataclass(frozen=True)
class TaskFamily:
    kind: str
    ranges: Mapping[str, tuple[float, float]]
    regime: str | None = None
    distribution: str = "train"

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown task family {self.kind!r}")
        for name, (lo, hi) in self.ranges.items():
            if not lo <= hi:
                raise ValueError(f"empty range for {name}")


def task_family(kind: str, distribution: str = "train", regime: str | None = None) -> TaskFamily:
    """Parameter ranges for meta-training (``train``) or out-of-distribution testing (``ood``)."""
    if kind not in KINDS:
        raise ValueError(f"unknown task family {kind!r}")
    if distribution not in ("train", "ood"):
        raise ValueError(f"unknown distribution {distribution!r}")
    key = kind
    if kind == "burgers":
        if regime not in ("r1", "r2"):
            raise ValueError("burgers needs regime 'r1' or 'r2'")
        key = f"burgers:{regime}"
    elif regime is not None:
        raise ValueError(f"{kind} has no regimes")
    if (key, distribution) not in _RANGES:
        raise ValueError(f"{kind} has no {distribution} parameter ranges")
    return TaskFamily(kind, dict(_RANGES[(key, distribution)]), regime, distribution)


@dataclass
class Dataset:
    points: np.ndarray
    targets: np.ndarray

    def __len__(self) -> int:
        return len(self.targets)


@dataclass
class Task:
    family: TaskFamily
    params: dict[str, float]
    train: dict[str, Dataset]
    val: dict[str, Dataset] = field(default_factory=dict)
    seed: int | None = None

    @property
    def kind(self) -> str:
        return self.family.kind

    def reference(self, points: np.ndarray) -> np.ndarray:
        return reference_solution(self.kind, self.params, points)

    def to_json(self) -> dict:
        def dump(sets):
            return {
                k: {"count": len(d), "points": d.points.tolist(), "targets": d.targets.tolist()}
                for k, d in sets.items()
            }

        return {
            "family": self.kind,
            "regime": self.family.regime,
            "distribution": self.family.distribution,
            "params": self.params,
            "seed": self.seed,
            "train": dump(self.train),
            "val": dump(self.val),
        }

    def dumps(self) -> str:
        return json.dumps(self.to_json(), sort_keys=True)


# ---------------------------------------------------------------------------
# exact solutions
# ---------------------------------------------------------------------------


def regression_target(params, x, noise: float = 0.0, rng=None) -> np.ndarray:
    """Sine on [0, 2pi] (optionally noisy), shifted sine of amplitude k on (2pi, 4pi]."""
    x = np.asarray(x, dtype=np.float64)
    if np.any(x < 0) or np.any(x > 4 * np.pi):
        raise ValueError("x outside [0, 4pi]")
    k = params.get("k", REGRESSION_K)
    left = x <= 2 * np.pi
    u = np.where(left, np.sin(params["omega1"] * x), k * (1.0 + np.sin(params["omega2"] * (x - 2 * np.pi))))
    if noise > 0:
        rng = rng if rng is not None else np.random.default_rng()
        eps = rng.normal(0.0, noise, size=x.shape)
        u = u + np.where(left, eps, 0.0)
    return u


def advection_initial(lam: float, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return np.where((x >= -1.0) & (x <= -1.0 + lam), 1.0 / lam, 0.0)


def advection_reference(lam: float, points: np.ndarray, speed: float = ADVECTION_SPEED) -> np.ndarray:
    points = np.asarray(points, dtype=np.float64)
    return advection_initial(lam, points[:, 1] - speed * points[:, 0])


def _rd_parts(p, x1, x2):
    t1, t2 = np.tanh(p["omega1"] * x1), np.tanh(p["omega2"] * x2)
    s3, s4 = np.sin(p["omega3"] * x1), np.sin(p["omega4"] * x2)
    return t1, t2, s3, s4


def rd_solution(params, points) -> np.ndarray:
    points = np.asarray(points, dtype=np.float64)
    t1, t2, s3, s4 = _rd_parts(params, points[:, 0], points[:, 1])
    return params["alpha1"] * t1 * t2 + params["alpha2"] * s3 * s4


def rd_source(params, points, k: float = RD_DIFFUSION) -> np.ndarray:
    """Source term z obtained by substituting the fabricated solution."""
    points = np.asarray(points, dtype=np.float64)
    p = params
    t1, t2, s3, s4 = _rd_parts(p, points[:, 0], points[:, 1])
    d2t1 = -2.0 * p["omega1"] ** 2 * t1 * (1.0 - t1**2)
    d2t2 = -2.0 * p["omega2"] ** 2 * t2 * (1.0 - t2**2)
    lap = p["alpha1"] * (d2t1 * t2 + t1 * d2t2) - p["alpha2"] * (p["omega3"] ** 2 + p["omega4"] ** 2) * s3 * s4
    u = rd_solution(p, points)
    return k * lap + u * (1.0 - u**2)


def reference_solution(kind: str, params, points: np.ndarray) -> np.ndarray:
    if kind == "regression":
        return regression_target(params, np.asarray(points)[:, 0])
    if kind == "advection":
        return advection_reference(params["lam"], points)
    if kind == "reaction_diffusion":
        return rd_solution(params, points)
    if kind == "burgers":
        return burgers_reference(params["lam"], points)
    raise ValueError(f"unknown task family {kind!r}")


# ---------------------------------------------------------------------------
# sampling
# ---------------------------------------------------------------------------


def _draw_params(family: TaskFamily, rng) -> dict[str, float]:
    r = family.ranges
    if family.kind == "regression":
        return {
            "k": REGRESSION_K,
            "omega1": float(rng.uniform(*r["omega1"])),
            "omega2": float(rng.uniform(*r["omega2"])),
        }
    if family.kind == "reaction_diffusion":
        out = {f"alpha{i}": float(rng.uniform(*r["alpha"])) for i in (1, 2)}
        out.update({f"omega{i}": float(rng.uniform(*r["omega"])) for i in (1, 2, 3, 4)})
        return out
    return {"lam": float(rng.uniform(*r["lam"]))}


def _space_time_points(term: str, n: int, rng) -> np.ndarray:
    if term == "f" or term == "u":
        return np.column_stack([rng.uniform(0.0, 1.0, n), rng.uniform(-1.0, 1.0, n)])
    if term == "b":
        side = np.where(rng.random(n) < 0.5, -1.0, 1.0)
        return np.column_stack([rng.uniform(0.0, 1.0, n), side])
    if term == "u0":
        return np.column_stack([np.zeros(n), rng.uniform(-1.0, 1.0, n)])
    raise ValueError(term)


def _square_points(term: str, n: int, rng) -> np.ndarray:
    if term in ("f", "u"):
        return rng.uniform(-1.0, 1.0, size=(n, 2))
    s = rng.uniform(0.0, 8.0, n)
    edge, pos = np.floor(s / 2.0).astype(int), s % 2.0 - 1.0
    x1 = np.select([edge == 0, edge == 1, edge == 2], [pos, np.ones(n), -pos], -np.ones(n))
    x2 = np.select([edge == 0, edge == 1, edge == 2], [-np.ones(n), pos, np.ones(n)], -pos)
    return np.column_stack([x1, x2])


def make_dataset(kind: str, params, term: str, n: int, rng, noisy: bool = False) -> Dataset:
    if kind == "regression":
        x = rng.uniform(0.0, 4 * np.pi, n)
        u = regression_target(params, x, REGRESSION_NOISE if noisy else 0.0, rng)
        return Dataset(x[:, None], u)
    if kind == "reaction_diffusion":
        pts = _square_points(term, n, rng)
        if term == "f":
            return Dataset(pts, np.zeros(n))
        return Dataset(pts, rd_solution(params, pts))
    pts = _space_time_points(term, n, rng)
    if term in ("f", "b"):
        return Dataset(pts, np.zeros(n))
    if kind == "advection":
        return Dataset(pts, advection_reference(params["lam"], pts))
    if term == "u0":
        return Dataset(pts, -np.sin(np.pi * pts[:, 1]))
    return Dataset(pts, burgers_reference(params["lam"], pts))


def sample_task(
    family: TaskFamily,
    seed,
    purpose: str = "train",
    data_mode: str = "single",
) -> Task:
    """Draw task parameters and datasets.

    ``purpose='train'`` builds inner-objective data plus validation sets for
    the outer objective; ``purpose='test'`` builds meta-test training data.
    In single-data mode the validation sets are the training sets.
    """
    if data_mode not in ("single", "double"):
        raise ValueError(f"unknown data mode {data_mode!r}")
    rng = np.random.default_rng(seed)
    params = _draw_params(family, rng)
    train_counts, sd_val, dd_val, test_counts = _COUNTS[family.kind]
    kind = family.kind
    noisy = kind == "regression"
    counts = test_counts if purpose == "test" else train_counts
    train = {term: make_dataset(kind, params, term, n, rng, noisy) for term, n in counts.items()}
    val: dict[str, Dataset] = {}
    if purpose == "train":
        val_counts = dd_val if data_mode == "double" else sd_val
        if val_counts is None:
            val = dict(train)
        else:
            val = {term: make_dataset(kind, params, term, n, rng) for term, n in val_counts.items()}
    seed_tag = int(seed) if isinstance(seed, (int, np.integer)) else None
    return Task(family, params, train, val, seed_tag)


def eval_points(kind: str, n: int | None = None) -> np.ndarray:
    """Deterministic grid of reference points for rl2 evaluation."""
    n = EVAL_POINTS[kind] if n is None else n
    if kind == "regression":
        return np.linspace(0.0, 4 * np.pi, n)[:, None]
    side = int(round(np.sqrt(n)))
    if kind == "reaction_diffusion":
        g = np.linspace(-1.0, 1.0, side)
        a, b = np.meshgrid(g, g, indexing="ij")
    else:
        a, b = np.meshgrid(np.linspace(0.0, 1.0, side), np.linspace(-1.0, 1.0, side), indexing="ij")
    return np.column_stack([a.ravel(), b.ravel()])


# ---------------------------------------------------------------------------
# residuals
# ---------------------------------------------------------------------------

Prediction = tuple[ad.Var, np.ndarray]


def _net(spec: MlpSpec, theta, points) -> ad.Var:
    return ad.reshape(mlp_forward(spec, theta, points), (points.shape[0],))


def _with_derivatives(spec, theta, points, second: tuple[int, ...] = ()):
    x = ad.var(points)
    u = _net(spec, theta, x)
    (du,) = ad.grad(ad.sum(u), [x], create_graph=True)
    d2 = {}
    for k in second:
        (dd,) = ad.grad(ad.sum(du[:, k]), [x], create_graph=True)
        d2[k] = dd[:, k]
    return u, du, d2


def _value_terms(spec, theta, data: Mapping[str, Dataset], params, kind) -> dict[str, Prediction]:
    out = {}
    for term in ("b", "u0", "u"):
        if term in data and len(data[term]):
            d = data[term]
            out[term] = (_net(spec, theta, d.points), d.targets)
    return out


def advection_residuals(spec, theta, data, params, speed: float = ADVECTION_SPEED) -> dict[str, Prediction]:
    out = _value_terms(spec, theta, data, params, "advection")
    if "f" in data and len(data["f"]):
        _, du, _ = _with_derivatives(spec, theta, data["f"].points)
        out["f"] = (du[:, 0] + speed * du[:, 1], data["f"].targets)
    return out


def burgers_residuals(spec, theta, data, params) -> dict[str, Prediction]:
    out = _value_terms(spec, theta, data, params, "burgers")
    if "f" in data and len(data["f"]):
        u, du, d2 = _with_derivatives(spec, theta, data["f"].points, second=(1,))
        f = du[:, 0] + u * du[:, 1] - params["lam"] * d2[1]
        out["f"] = (f, data["f"].targets)
    return out


def rd_residuals(spec, theta, data, params, k: float = RD_DIFFUSION) -> dict[str, Prediction]:
    out = _value_terms(spec, theta, data, params, "reaction_diffusion")
    if "f" in data and len(data["f"]):
        pts = data["f"].points
        u, _, d2 = _with_derivatives(spec, theta, pts, second=(0, 1))
        f = k * (d2[0] + d2[1]) + u * (1.0 - u * u) - rd_source(params, pts, k)
        out["f"] = (f, data["f"].targets)
    return out


def regression_residuals(spec, theta, data, params) -> dict[str, Prediction]:
    return _value_terms(spec, theta, data, params, "regression")


_RESIDUALS: dict[str, Callable] = {
    "regression": regression_residuals,
    "advection": advection_residuals,
    "reaction_diffusion": rd_residuals,
    "burgers": burgers_residuals,
}


def residuals(task: Task, spec: MlpSpec, theta, data: Mapping[str, Dataset] | None = None) -> dict[str, Prediction]:
    """Predictions paired with targets for every dataset term.

    ``f`` pairs the PDE residual with target 0, ``b`` the boundary value with
    the boundary data, ``u0`` the initial value with the initial condition and
    ``u`` the network output with solution data.
    """
    return _RESIDUALS[task.kind](spec, theta, task.train if data is None else data, task.params)


# ---------------------------------------------------------------------------
# objectives
# ---------------------------------------------------------------------------

WEIGHTED_TERMS = ("f", "b", "u0")


def inner_objective(task: Task, spec: MlpSpec, theta, loss_fn, weights=None) -> ad.Var:
    """Weighted sum of mean per-point losses over the training terms.

    ``loss_fn(prediction, target)`` returns per-point values; ``weights`` maps
    ``f``/``b``/``u0`` to scalars (unit when omitted).
    """
    terms = residuals(task, spec, theta)
    total = None
    for term, (pred, target) in terms.items():
        if len(target) == 0:
            raise ValueError(f"empty dataset for term {term}")
        value = ad.mean(loss_fn(pred, target))
        if weights is not None and term in weights:
            value = weights[term] * value
        total = value if total is None else total + value
    return total


def mse_objective(terms: Mapping[str, Prediction]) -> ad.Var:
    total = None
    for pred, target in terms.values():
        r = pred - target
        value = ad.mean(r * r)
        total = value if total is None else total + value
    return total


def outer_objective(tasks, spec: MlpSpec, theta_stars) -> ad.Var:
    """Mean over tasks of the unit-weight MSE composite on validation data."""
    total = None
    for task, theta in zip(tasks, theta_stars):
        value = mse_objective(residuals(task, spec, theta, task.val))
        total = value if total is None else total + value
    return total * (1.0 / len(tasks))


def predict(spec: MlpSpec, theta, points: np.ndarray) -> np.ndarray:
    arrays = [t.value if isinstance(t, ad.Var) else t for t in theta]
    return np.asarray(mlp_forward(spec, arrays, np.asarray(points, dtype=np.float64))).reshape(-1)
