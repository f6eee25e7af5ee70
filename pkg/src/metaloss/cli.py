"""Command-line entry points."""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import sys
import warnings
from pathlib import Path

from .config import ConfigError, RunConfig, load_config
from .gradcheck import SUITES
from .losses import check_conditions, load_snapshot
from .metalearn import METRIC_COLUMNS, MetaTrainError, meta_train
from .metatest import (
    adam_beta_sweep,
    config_hash,
    default_candidates,
    design_option_sweep,
    run_meta_test,
    write_results,
)

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG = 0, 1, 2


class Refusal(Exception):
    pass


def _dumps(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def _sha(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _cell(x) -> str:
    return repr(float(x)) if isinstance(x, float) else str(x)


def _prepare_out(out: Path, cfg: RunConfig) -> None:
    """Create ``out`` or refuse when it holds results of a different config."""
    manifest = out / "manifest.json"
    if manifest.exists():
        old = json.loads(manifest.read_text()).get("config_hash")
        if old != config_hash(cfg.to_json()):
            raise Refusal(f"{out} holds results for config hash {old}; use a fresh output directory")
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(_dumps(cfg.to_json()))


def _manifest(out: Path, cfg: RunConfig, command: str, files: list[Path]) -> None:
    data = {
        "command": command,
        "config_hash": config_hash(cfg.to_json()),
        "seeds": cfg.seeds.model_dump(),
        "files": {str(f.relative_to(out)): _sha(f) for f in sorted(files)},
    }
    (out / "manifest.json").write_text(_dumps(data))


def _load(args) -> RunConfig:
    cfg = load_config(args.config)
    if getattr(args, "seed", None) is not None:
        cfg = cfg.with_seed(args.seed)
    return cfg


def cmd_meta_train(args) -> int:
    cfg = _load(args)
    out = Path(args.out)
    _prepare_out(out, cfg)
    snap_dir = out / "snapshots"
    snap_dir.mkdir(exist_ok=True)
    metrics = out / "metrics.csv"
    written = [out / "config.json", metrics]
    with open(metrics, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(METRIC_COLUMNS)

        def on_row(row):
            writer.writerow([_cell(row[c]) for c in METRIC_COLUMNS])
            fh.flush()

        def on_snapshot(data):
            path = snap_dir / f"snapshot_{data['snapshot_index']}.json"
            path.write_text(_dumps(data))
            written.append(path)

        meta_train(cfg.family_obj("train"), cfg.meta_train_config(), on_row=on_row, on_snapshot=on_snapshot)
    _manifest(out, cfg, "meta-train", written)
    print(f"wrote {len(written) - 2} snapshots and {metrics}")
    return EXIT_OK


def cmd_meta_test(args) -> int:
    cfg = _load(args)
    out = Path(args.out)
    snapshots = args.snapshots
    if snapshots is not None and not Path(snapshots).is_dir():
        warnings.warn(f"snapshot directory {snapshots} not found; testing standard losses only", stacklevel=1)
        snapshots = None
    candidates = default_candidates(snapshots)
    _prepare_out(out, cfg)
    result = run_meta_test(cfg.test_protocol(), candidates, cfg.seeds.meta_test, jobs=args.jobs)
    write_results(result, out, cfg.to_json(), cfg.seeds.model_dump())
    text = (out / "min_rl2.csv").read_text()
    print(text, end="")
    return EXIT_OK


def cmd_check_loss(args) -> int:
    try:
        data = json.loads(Path(args.snapshot).read_text())
        loss, _ = load_snapshot(data)
    except (OSError, ValueError, KeyError) as exc:
        raise ConfigError(f"snapshot: {exc}") from None
    report = check_conditions(loss, q_range=args.q_range, resolution=args.resolution)
    payload = report.to_json()
    print(f"mse_relation: {payload['mse_relation']}")
    print(f"optimal_stationarity: {payload['optimal_stationarity']}")
    print(json.dumps(payload, sort_keys=True))
    if args.out:
        Path(args.out).write_text(_dumps(payload))
    return EXIT_OK


def cmd_grad_check(args) -> int:
    results = SUITES[args.scope](args.seed)
    for r in results:
        print(f"{'PASS' if r.ok else 'FAIL'} {r.name} err={r.error:.3e} tol={r.tol:.0e}")
    failed = [r for r in results if not r.ok]
    if failed:
        worst = max(failed, key=lambda r: r.error / r.tol)
        print(f"worst offender: {worst.name} err={worst.error:.3e} tol={worst.tol:.0e}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def cmd_sweep_design(args) -> int:
    cfg = _load(args)
    if cfg.family.kind != "regression":
        raise ConfigError("family.kind: the design-option sweep runs on the regression family")
    out = Path(args.out)
    _prepare_out(out, cfg)
    s = cfg.sweep
    runs = design_option_sweep(
        cfg.meta_train_config(), s.j_set, s.resample_set, s.reinit_set, s.iterations, s.budgets, s.validate_every
    )
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["J", "resample_every", "reinit", "iter", "L_O"] + [f"rl2_budget_{b}" for b in s.budgets])
    for run in runs:
        vals = {b: dict(run["validation"][b]) for b in s.budgets}
        for i, lo in enumerate(run["L_O"], start=1):
            every = "none" if run["resample_every"] is None else run["resample_every"]
            row = [run["J"], every, run["reinit"], i, _cell(lo)]
            row += [_cell(vals[b][i]) if i in vals[b] else "" for b in s.budgets]
            w.writerow(row)
    path = out / "design_sweep.csv"
    path.write_text(buf.getvalue())
    _manifest(out, cfg, "sweep-design", [out / "config.json", path])
    return EXIT_OK


def cmd_sweep_beta(args) -> int:
    cfg = _load(args)
    out = Path(args.out)
    _prepare_out(out, cfg)
    res = adam_beta_sweep(cfg.family_obj("train"), cfg.sweep.beta_pairs, cfg.meta_train_config())
    files = [out / "config.json"]
    for (b1, b2), run in res.items():
        path = out / f"beta_{b1:g}_{b2:g}.csv"
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["iter", "rl2_val"])
        for it, e in run["validation"]:
            w.writerow([it, _cell(e)])
        path.write_text(buf.getvalue())
        files.append(path)
    _manifest(out, cfg, "sweep-beta", files)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="metaloss", description="Meta-learned loss functions for PINNs.")
    sub = p.add_subparsers(dest="command", required=True)

    def run_args(sp, out=True):
        sp.add_argument("--config", required=True)
        if out:
            sp.add_argument("--out", required=True)
        sp.add_argument("--seed", type=int, default=None, help="overrides every seed in the config")

    sp = sub.add_parser("meta-train", help="meta-train a loss and write snapshots")
    run_args(sp)
    sp.set_defaults(func=cmd_meta_train)

    sp = sub.add_parser("meta-test", help="train unseen tasks with every candidate loss")
    run_args(sp)
    sp.add_argument("--snapshots", default=None)
    sp.add_argument("--jobs", type=int, default=1)
    sp.set_defaults(func=cmd_meta_test)

    sp = sub.add_parser("check-loss", help="grid check of the loss conditions for a snapshot")
    sp.add_argument("snapshot")
    sp.add_argument("--q-range", type=float, default=3.0)
    sp.add_argument("--resolution", type=int, default=601)
    sp.add_argument("--out", default=None)
    sp.set_defaults(func=cmd_check_loss)

    sp = sub.add_parser("grad-check", help="finite-difference derivative checks")
    sp.add_argument("--scope", choices=sorted(SUITES), default="autodiff")
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(func=cmd_grad_check)

    sp = sub.add_parser("sweep-design", help="J / resampling / re-initialization grid on regression")
    run_args(sp)
    sp.set_defaults(func=cmd_sweep_design)

    sp = sub.add_parser("sweep-beta", help="meta-train once per Adam beta pair")
    run_args(sp)
    sp.set_defaults(func=cmd_sweep_beta)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if getattr(args, "jobs", 1) is not None and getattr(args, "jobs", 1) < 1:
        print("error: --jobs must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error:\n{exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Refusal as exc:
        print(f"refused: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (MetaTrainError, ArithmeticError, RuntimeError) as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
