"""Meta-testing harness and the experiment sweeps built on meta-training."""

from __future__ import annotations

import csv
import glob
import hashlib
import io
import json
import os
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .losses import Loss, OalLoss, StandardLoss, load_snapshot, mse
from .metalearn import (
    TEST,
    VALIDATION,
    InnerOptSpec,
    MetaTrainConfig,
    derive_seed,
    fit,
    meta_train,
    meta_validate,
    rl2,
)
from .network import MlpSpec, xavier_init
from .tasks import DEFAULT_NETWORKS, EVAL_POINTS, eval_points, sample_task, task_family

__all__ = [
    "Candidate",
    "TestProtocol",
    "TestResult",
    "rl2",
    "standard_candidates",
    "snapshot_candidates",
    "default_candidates",
    "run_meta_test",
    "write_results",
    "adam_beta_sweep",
    "design_option_sweep",
    "smoothness",
    "BETA_PAIRS",
]

BETA_PAIRS = ((0.5, 0.5), (0.8, 0.8), (0.9, 0.999), (0.99, 0.9999))
OAL_RATES = (0.01, 0.1)


class MissingSnapshotWarning(UserWarning):
    pass


@dataclass(frozen=True)
class Candidate:
    name: str
    loss: Loss
    weights_raw: np.ndarray | None = None


@dataclass(frozen=True)
class TestProtocol:
    __test__ = False  # not a pytest class

    kind: str
    distribution: str = "train"
    regime: str | None = None
    n_tasks: int = 5
    optimizer: InnerOptSpec = field(default_factory=InnerOptSpec)
    iterations: int = 10000
    eval_every: int = 100
    eval_points: int | None = None
    architecture: str = "fixed"
    diverge_at: float = 1e3

    def __post_init__(self):
        if self.architecture not in ("fixed", "random"):
            raise ValueError(f"unknown architecture mode {self.architecture!r}")
        if self.n_tasks < 1 or self.iterations < 0 or self.eval_every < 1:
            raise ValueError("n_tasks and eval_every must be >= 1, iterations >= 0")

    def family(self):
        return task_family(self.kind, self.distribution, self.regime)


@dataclass
class TestResult:
    __test__ = False

    names: list[str]
    iterations: dict[tuple[str, int], list[int]]
    trajectories: dict[tuple[str, int], list[float]]
    diverged: dict[tuple[str, int], bool]
    alphas: dict[tuple[str, int], list[float]]
    n_tasks: int

    def min_rl2(self, name: str) -> list[float]:
        return [float(min(self.trajectories[(name, k)])) for k in range(self.n_tasks)]

    def mean_min_rl2(self, name: str) -> float:
        return float(np.mean(self.min_rl2(name)))


def standard_candidates() -> list[Candidate]:
    return [
        Candidate("MSE", mse()),
        Candidate("L1", StandardLoss("absolute")),
        Candidate("Cauchy", StandardLoss("cauchy")),
        Candidate("GMC", StandardLoss("geman_mcclure")),
    ]


def oal_candidates() -> list[Candidate]:
    return [Candidate(f"OAL {i + 1}", OalLoss(lr)) for i, lr in enumerate(OAL_RATES)]


def snapshot_candidates(snapshot_dir) -> list[Candidate]:
    """Learned-loss candidates from ``snapshot_*.json`` files, ordered by parametrization and index."""
    out = []
    paths = sorted(glob.glob(os.path.join(str(snapshot_dir), "**", "snapshot_*.json"), recursive=True))
    for path in paths:
        try:
            with open(path) as fh:
                data = json.load(fh)
            loss, weights = load_snapshot(data)
        except (OSError, ValueError, KeyError) as exc:
            warnings.warn(f"skipping snapshot {path}: {exc}", MissingSnapshotWarning, stacklevel=2)
            continue
        out.append(Candidate(f"{data['parametrization'].upper()} {data['snapshot_index']}", loss, weights))
    out.sort(key=lambda c: (c.name.split()[0], int(c.name.split()[1])))
    names = [c.name for c in out]
    if len(set(names)) != len(names):
        raise ValueError("duplicate snapshot names in snapshot directory")
    return out


def default_candidates(snapshot_dir=None) -> list[Candidate]:
    learned = snapshot_candidates(snapshot_dir) if snapshot_dir is not None else []
    return learned + standard_candidates() + oal_candidates()


def _task_setup(protocol: TestProtocol, seed: int, k: int):
    family = protocol.family()
    task = sample_task(family, derive_seed(seed, TEST, k), "test")
    if protocol.architecture == "random":
        rng = np.random.default_rng(derive_seed(seed, TEST, k, 2))
        base = DEFAULT_NETWORKS[protocol.kind]
        net = MlpSpec(base.input_dim, base.output_dim, int(rng.integers(2, 6)), int(rng.integers(15, 56)))
    else:
        net = DEFAULT_NETWORKS[protocol.kind]
    theta0 = xavier_init(net, derive_seed(seed, TEST, k, 1))
    return task, net, theta0


def _run_one(args):
    protocol, candidate, seed, k = args
    task, net, theta0 = _task_setup(protocol, seed, k)
    n = protocol.eval_points or EVAL_POINTS[protocol.kind]
    res = fit(
        task, net, theta0, candidate.loss, protocol.optimizer, protocol.iterations, candidate.weights_raw,
        protocol.eval_every, eval_points(protocol.kind, n), protocol.diverge_at,
    )
    return res.iterations, res.rl2, res.diverged, res.alphas


def run_meta_test(protocol: TestProtocol, candidates, seed: int, jobs: int = 1) -> TestResult:
    """Train every (candidate, task) pair from the same task draw and initialization.

    Pairs are independent; with ``jobs > 1`` they run in worker processes and
    are gathered in (candidate, task) order.
    """
    names = [c.name for c in candidates]
    if len(set(names)) != len(names):
        raise ValueError("candidate names must be unique")
    jobs_list = [(protocol, c, seed, k) for c in candidates for k in range(protocol.n_tasks)]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            outputs = list(pool.map(_run_one, jobs_list))
    else:
        outputs = [_run_one(a) for a in jobs_list]
    result = TestResult(names, {}, {}, {}, {}, protocol.n_tasks)
    for (_, c, _, k), (its, errs, div, alphas) in zip(jobs_list, outputs):
        key = (c.name, k)
        result.iterations[key] = its
        result.trajectories[key] = errs
        result.diverged[key] = div
        if isinstance(c.loss, OalLoss):
            result.alphas[key] = alphas
    return result


# ---------------------------------------------------------------------------
# artifacts
# ---------------------------------------------------------------------------


def _fmt(x: float) -> str:
    return repr(float(x))


def _csv_text(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def config_hash(config: dict) -> str:
    return hashlib.sha256(json.dumps(config, sort_keys=True).encode()).hexdigest()


def write_results(result: TestResult, out_dir, config: dict, seeds: dict) -> dict:
    """Write the CSV tables and a manifest binding them to the config hash and seeds."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    traj_rows, min_rows, alpha_rows = [], [], []
    for name in result.names:
        for k in range(result.n_tasks):
            for it, e in zip(result.iterations[(name, k)], result.trajectories[(name, k)]):
                traj_rows.append([name, k, it, _fmt(e)])
            if (name, k) in result.alphas:
                for it, a in zip(result.iterations[(name, k)], result.alphas[(name, k)]):
                    alpha_rows.append([name, k, it, _fmt(a)])
        mins = result.min_rl2(name)
        flagged = [str(k) for k in range(result.n_tasks) if result.diverged[(name, k)]]
        min_rows.append([name, _fmt(np.mean(mins))] + [_fmt(m) for m in mins] + [";".join(flagged)])
    files = {
        "trajectories.csv": _csv_text(["loss", "task", "iter", "rl2"], traj_rows),
        "min_rl2.csv": _csv_text(
            ["loss", "mean"] + [f"task_{k}" for k in range(result.n_tasks)] + ["diverged_tasks"], min_rows
        ),
        "oal_alpha.csv": _csv_text(["loss", "task", "iter", "alpha"], alpha_rows),
    }
    for fname, text in files.items():
        (out / fname).write_text(text)
    manifest = {
        "config_hash": config_hash(config),
        "seeds": seeds,
        "files": {f: hashlib.sha256(t.encode()).hexdigest() for f, t in files.items()},
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


# ---------------------------------------------------------------------------
# sweeps
# ---------------------------------------------------------------------------


def adam_beta_sweep(family, beta_pairs, config: MetaTrainConfig) -> dict:
    """Meta-train once per Adam (beta1, beta2) pair; returns validation trajectories per pair."""
    if config.inner.kind != "adam":
        raise ValueError("the beta sweep needs an adam inner optimizer")
    out = {}
    for pair in beta_pairs:
        cfg = replace(config, inner=replace(config.inner, betas=tuple(pair)))
        state = meta_train(family, cfg)
        traj = [(r["iter"], r["rl2_val"]) for r in state.metrics if r["rl2_val"] != ""]
        out[tuple(pair)] = {"validation": traj, "state": state}
    return out


def smoothness(values) -> float:
    """Median absolute successive difference."""
    v = np.asarray(values, dtype=np.float64)
    return float(np.median(np.abs(np.diff(v)))) if v.size > 1 else 0.0


def design_option_sweep(
    config: MetaTrainConfig,
    j_set=(1, 20),
    resample_set=(1, 10, 100, None),
    reinit_set=(True, False),
    iterations: int = 1000,
    budgets=(100, 500),
    validate_every: int = 10,
    n_val_tasks: int = 1,
) -> list[dict]:
    """One regression meta-training per (J, resampling, re-initialization) combination.

    ``None`` in ``resample_set`` means the first task is kept for the whole
    run; ``reinit=False`` keeps the first network initialization.
    """
    family = task_family("regression")
    runs = []
    for j in j_set:
        for every in resample_set:
            for reinit in reinit_set:
                outer = replace(
                    config.outer, iterations=iterations, resample_every=every,
                    reinit_every=1 if reinit else None, validate_every=None,
                )
                cfg = replace(config, inner=replace(config.inner, steps=j), outer=outer)
                vals: dict[int, list] = {b: [] for b in budgets}

                def hook(state, row, cfg=cfg, vals=vals):
                    if row["iter"] % validate_every == 0:
                        for b in budgets:
                            e = meta_validate(
                                state.current_loss(), family, b, n_val_tasks,
                                derive_seed(cfg.seed, VALIDATION), cfg.inner, cfg.network, state.weights_raw,
                            )
                            vals[b].append((row["iter"], e))

                state = meta_train(family, cfg, hook=hook)
                runs.append({
                    "J": j,
                    "resample_every": every,
                    "reinit": reinit,
                    "L_O": [r["L_O"] for r in state.metrics],
                    "validation": vals,
                    "smoothness": smoothness([r["L_O"] for r in state.metrics]),
                })
    return runs
