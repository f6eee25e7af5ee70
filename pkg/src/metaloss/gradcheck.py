"""Finite-difference check suites used by the tests and the ``grad-check`` command."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .losses import LalLoss
from .metalearn import InnerOptSpec, inner_unroll
from .network import MlpSpec, xavier_init
from .tasks import Dataset, Task, outer_objective, task_family

TOLERANCES = {1: 1e-5, 2: 1e-4, 3: 1e-3}
META_TOL = 1e-4
CLOSED_FORM_TOL = 1e-10


@dataclass(frozen=True)
class CheckResult:
    name: str
    error: float
    tol: float

    @property
    def ok(self) -> bool:
        return bool(self.error < self.tol)


_M = np.array([[0.3, -0.8], [1.1, 0.4], [-0.5, 0.9]])

# Every case is a scalar function of a 3-vector; the point is chosen inside
# each op's domain and away from its kinks.
OP_CASES = {
    "add": (lambda x: (x[0] + x[1]) ** 3 + ad.sum(x + 0.5), [0.7, -0.4, 1.3]),
    "sub": (lambda x: (x[0] - x[2]) ** 3, [0.7, -0.4, 1.3]),
    "mul": (lambda x: x[0] * x[1] * x[2] * x[0], [0.7, -0.4, 1.3]),
    "div": (lambda x: x[0] / (x[1] + 2.0) + 1.0 / x[2], [0.7, -0.4, 1.3]),
    "neg": (lambda x: -(x[0] ** 3) - x[1] * x[2], [0.7, -0.4, 1.3]),
    "pow_const": (lambda x: ad.sum(x**3.5), [0.7, 0.4, 1.3]),
    "pow_var": (lambda x: x[0] ** x[1], [0.7, 1.4, 1.3]),
    "exp": (lambda x: ad.sum(ad.exp(x * x[::-1])), [0.7, -0.4, 1.3]),
    "log": (lambda x: ad.sum(ad.log(x * x + 0.1)), [0.7, -0.4, 1.3]),
    "log1p": (lambda x: ad.sum(ad.log1p(x * x)), [0.7, -0.4, 1.3]),
    "tanh": (lambda x: ad.sum(ad.tanh(x * x[0])), [0.7, -0.4, 1.3]),
    "sin": (lambda x: ad.sum(ad.sin(x * x[1])), [0.7, -0.4, 1.3]),
    "cos": (lambda x: ad.sum(ad.cos(x * x[2])), [0.7, -0.4, 1.3]),
    "abs": (lambda x: ad.sum(ad.abs(x) ** 3), [0.7, -0.4, 1.3]),
    "relu": (lambda x: ad.sum(ad.relu(x) * x * x), [0.7, -0.4, 1.3]),
    "sigmoid": (lambda x: ad.sum(ad.sigmoid(x * x[0])), [0.7, -0.4, 1.3]),
    "softplus": (lambda x: ad.sum(ad.softplus(x * x[1])), [0.7, -0.4, 1.3]),
    "sqrt": (lambda x: ad.sum(ad.sqrt(x * x + 0.2)), [0.7, -0.4, 1.3]),
    "sum": (lambda x: ad.sum(x * x * x) * ad.sum(x), [0.7, -0.4, 1.3]),
    "dot": (lambda x: ad.sum(ad.tanh(ad.dot(ad.reshape(x, (1, 3)), _M))), [0.7, -0.4, 1.3]),
    "transpose": (lambda x: ad.sum(ad.sin(ad.transpose(ad.reshape(x * x, (3, 1))) * x)), [0.7, -0.4, 1.3]),
    "broadcast": (lambda x: ad.sum(ad.exp(ad.reshape(x, (3, 1)) * np.ones((3, 2)) * x[0])), [0.7, -0.4, 1.3]),
    "getitem": (lambda x: ad.sum(x[1:] ** 3) * x[0], [0.7, -0.4, 1.3]),
    "concat": (lambda x: ad.sum(ad.sin(ad.concat([x, x * x], axis=0))), [0.7, -0.4, 1.3]),
    "where": (lambda x: ad.sum(ad.where(np.array([1.0, 0.0, 1.0]), x**3, ad.exp(x))), [0.7, -0.4, 1.3]),
}


def autodiff_suite(orders=(1, 2, 3)) -> list[CheckResult]:
    out = []
    for name, (f, point) in OP_CASES.items():
        for order in orders:
            err = ad.finite_difference_check(f, np.array(point), order)
            out.append(CheckResult(f"{name}/order{order}", err, TOLERANCES[order]))
    return out


def quadratic_unroll_gradient(eta: float, eps: float, steps: int, theta0: float = 0.0) -> float:
    """d theta* / d eta for inner objective (theta - eta)^2 after ``steps`` SGD steps."""
    e = ad.var(np.array([eta]))
    (star,) = inner_unroll(
        None, None, [np.array([theta0])], None, InnerOptSpec("sgd", eps, steps=steps),
        objective=lambda t: ad.sum((t[0] - e) * (t[0] - e)),
    )
    (g,) = ad.grad(ad.sum(star), [e])
    return float(g.value[0])


def closed_form_suite(eps: float = 0.1, steps=(1, 2, 3, 20)) -> list[CheckResult]:
    out = []
    for j in steps:
        exact = 1.0 - (1.0 - 2.0 * eps) ** j
        err = abs(quadratic_unroll_gradient(0.7, eps, j) - exact)
        out.append(CheckResult(f"quadratic/J{j}", err, CLOSED_FORM_TOL))
    return out


TOY_NET = MlpSpec(1, 1, 1, 2)


def toy_task(seed: int = 0, n: int = 4) -> Task:
    """Four-point regression problem for the tiny network."""
    rng = np.random.default_rng(seed)
    x_tr = rng.uniform(0.0, 2.0, (n, 1))
    x_va = rng.uniform(0.0, 2.0, (n, 1))
    fam = task_family("regression")
    return Task(
        fam, {"w1": 1.0, "w2": 5.0},
        {"u": Dataset(x_tr, np.sin(x_tr[:, 0]) + 0.3 * rng.standard_normal(n))},
        {"u": Dataset(x_va, np.sin(x_va[:, 0]))},
    )


def _toy_outer(task, theta0, eta, inner: InnerOptSpec):
    loss = LalLoss.mse_init()
    star = inner_unroll(task, TOY_NET, theta0, loss.bind([eta]), inner)
    return outer_objective([task], TOY_NET, [star])


def meta_gradient_error(seed: int = 0, inner: InnerOptSpec | None = None, h: float = 1e-4,
                        eta0=(0.9, -0.2)) -> float:
    """Relative gap between the unrolled meta-gradient and central differences over eta."""
    inner = inner or InnerOptSpec("sgd", 0.1, steps=3)
    task = toy_task(seed)
    theta0 = xavier_init(TOY_NET, seed).unflatten()
    eta0 = np.asarray(eta0, dtype=np.float64)
    e = ad.var(eta0)
    (g,) = ad.grad(_toy_outer(task, theta0, e, inner), [e])
    fd = np.zeros_like(eta0)
    for i in range(eta0.size):
        step = np.zeros_like(eta0)
        step[i] = h
        hi = float(_toy_outer(task, theta0, eta0 + step, inner).value)
        lo = float(_toy_outer(task, theta0, eta0 - step, inner).value)
        fd[i] = (hi - lo) / (2.0 * h)
    return float(np.max(np.abs(g.value - fd)) / max(np.max(np.abs(fd)), 1e-12))


def inner_suite(seed: int = 0) -> list[CheckResult]:
    out = closed_form_suite()
    for kind in ("sgd", "adam"):
        inner = InnerOptSpec(kind, 0.1 if kind == "sgd" else 0.05, steps=2)
        err = _theta_star_error(seed, inner)
        out.append(CheckResult(f"theta_star/{kind}", err, META_TOL))
    return out


def _theta_star_error(seed, inner, h=1e-5, eta0=(0.9, -0.2)) -> float:
    task = toy_task(seed)
    theta0 = xavier_init(TOY_NET, seed).unflatten()
    loss = LalLoss.mse_init()
    probe = np.random.default_rng(seed + 1).standard_normal(sum(t.size for t in theta0))

    def proj(star):
        flat = ad.concat([ad.reshape(s, (-1,)) if isinstance(s, ad.Var) else np.ravel(s) for s in star], axis=0)
        return ad.sum(flat * probe)

    eta0 = np.asarray(eta0, dtype=np.float64)
    e = ad.var(eta0)
    (g,) = ad.grad(proj(inner_unroll(task, TOY_NET, theta0, loss.bind([e]), inner)), [e])
    fd = np.zeros_like(eta0)
    for i in range(eta0.size):
        step = np.zeros_like(eta0)
        step[i] = h
        vals = [float(proj(inner_unroll(task, TOY_NET, theta0, loss.bind([eta0 + s]), inner)).value)
                for s in (step, -step)]
        fd[i] = (vals[0] - vals[1]) / (2.0 * h)
    return float(np.max(np.abs(g.value - fd)) / max(np.max(np.abs(fd)), 1e-12))


_QA = np.array([1.0, 0.5, 2.0])
_QB = np.array([0.3, -1.2, 0.8])


def _quadratic_outer(eta, steps: int, eps: float):
    def inner_obj(t):
        r = t[0] - eta
        return ad.sum(_QA * r * r) + 0.1 * ad.sum(t[0]) * ad.sum(r)

    (star,) = inner_unroll(None, None, [np.zeros(3)], None, InnerOptSpec("sgd", eps, steps=steps), objective=inner_obj)
    d = star - _QB
    return ad.sum(d * d)


def quadratic_meta_error(steps: int, eps: float = 0.1, h: float = 1e-5, eta0=(0.4, -0.7, 1.1)) -> float:
    """Meta-gradient of a quadratic bi-level problem against central differences."""
    eta0 = np.asarray(eta0, dtype=np.float64)
    e = ad.var(eta0)
    (g,) = ad.grad(_quadratic_outer(e, steps, eps), [e])
    fd = np.zeros_like(eta0)
    for i in range(eta0.size):
        step = np.zeros_like(eta0)
        step[i] = h
        fd[i] = (float(_quadratic_outer(eta0 + step, steps, eps).value)
                 - float(_quadratic_outer(eta0 - step, steps, eps).value)) / (2.0 * h)
    return float(np.max(np.abs(g.value - fd)) / max(np.max(np.abs(fd)), 1e-12))


def meta_suite(seed: int = 0) -> list[CheckResult]:
    out = [CheckResult(f"quadratic_meta/J{j}", quadratic_meta_error(j), META_TOL) for j in (1, 2, 3)]
    for j in (1, 2, 3):
        # A first Adam step is sign(g) up to eps, so its eta-dependence is
        # below what central differences resolve; J=1 is checked for SGD only.
        for kind in (("sgd",) if j == 1 else ("sgd", "adam")):
            inner = InnerOptSpec(kind, 0.1 if kind == "sgd" else 0.05, steps=j)
            out.append(CheckResult(f"meta/{kind}/J{j}", meta_gradient_error(seed, inner), META_TOL))
    return out


SUITES = {"autodiff": lambda seed: autodiff_suite(), "inner": inner_suite, "meta": meta_suite}
