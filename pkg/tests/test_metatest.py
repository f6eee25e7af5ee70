import csv
import json
import warnings

import numpy as np
import pytest

from metaloss import metalearn as ml
from metaloss.losses import FfnLoss, LalLoss, Loss, OalLoss, mse, snapshot_dict
from metaloss.metalearn import InnerOptSpec, MetaTrainConfig, OuterOptSpec
from metaloss.metatest import (
    BETA_PAIRS,
    Candidate,
    MissingSnapshotWarning,
    TestProtocol,
    _task_setup,
    adam_beta_sweep,
    config_hash,
    default_candidates,
    design_option_sweep,
    rl2,
    run_meta_test,
    smoothness,
    snapshot_candidates,
    write_results,
)
from metaloss.network import MlpSpec
from metaloss.tasks import task_family

SMALL = MlpSpec(1, 1, 1, 8)


class Shifted(Loss):
    def __call__(self, q, u, params=None):
        r = q - u - 0.3
        return r * r


def quick(kind="regression", **kw):
    base = dict(n_tasks=2, optimizer=InnerOptSpec("adam", 1e-2), iterations=30, eval_every=10)
    base.update(kw)
    return TestProtocol(kind, **base)


def test_rl2_examples():
    u = np.array([1.0, -2.0, 0.5])
    assert rl2(u, u) == 0.0
    assert rl2(np.zeros(3), u) == 1.0
    assert rl2(1.1 * u, u) == pytest.approx(0.1, abs=1e-12)


def test_duplicate_loss_gives_identical_trajectories():
    res = run_meta_test(quick(), [Candidate("MSE a", mse()), Candidate("MSE b", mse())], 0)
    for k in range(2):
        assert res.trajectories[("MSE a", k)] == res.trajectories[("MSE b", k)]


def test_candidate_names_must_be_unique():
    with pytest.raises(ValueError):
        run_meta_test(quick(), [Candidate("MSE", mse()), Candidate("MSE", mse())], 0)


def test_min_aggregation_uses_stored_trajectory():
    res = run_meta_test(quick(), [Candidate("MSE", mse())], 1)
    for k, m in enumerate(res.min_rl2("MSE")):
        traj = res.trajectories[("MSE", k)]
        assert m == min(traj) and all(m <= e for e in traj) and m >= 0
    assert res.mean_min_rl2("MSE") == pytest.approx(np.mean(res.min_rl2("MSE")))
    assert res.iterations[("MSE", 0)] == [0, 10, 20, 30]


def test_paired_tasks_and_inits_are_shared():
    prot = quick("reaction_diffusion", architecture="random", distribution="ood")
    a = _task_setup(prot, 5, 1)
    b = _task_setup(prot, 5, 1)
    assert a[0].dumps() == b[0].dumps()
    assert a[1] == b[1]
    np.testing.assert_array_equal(a[2].values, b[2].values)


def test_random_architecture_ranges():
    prot = quick("advection", architecture="random", n_tasks=40)
    nets = [_task_setup(prot, 0, k)[1] for k in range(40)]
    assert all(2 <= n.hidden_layers <= 5 and 15 <= n.hidden_width <= 55 for n in nets)
    assert len({(n.hidden_layers, n.hidden_width) for n in nets}) > 1


def test_protocol_validation():
    with pytest.raises(ValueError):
        TestProtocol("regression", architecture="wide")
    with pytest.raises(ValueError):
        TestProtocol("regression", n_tasks=0)


def test_oal_alpha_stays_in_range():
    prot = quick(iterations=40, n_tasks=1)
    cands = [Candidate("OAL 2", OalLoss(0.1))]
    res = run_meta_test(prot, cands, 0)
    alphas = res.alphas[("OAL 2", 0)]
    assert len(alphas) == len(res.trajectories[("OAL 2", 0)])
    assert all(0.0 <= a <= 3.01 for a in alphas)
    assert alphas[-1] != alphas[0]


def test_divergence_is_flagged_and_truncates():
    prot = quick(optimizer=InnerOptSpec("sgd", 50.0), iterations=100, eval_every=1, n_tasks=1)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        res = run_meta_test(prot, [Candidate("MSE", mse())], 0)
    assert res.diverged[("MSE", 0)]
    assert len(res.trajectories[("MSE", 0)]) < 101


def test_parallel_jobs_match_serial():
    cands = [Candidate("MSE", mse()), Candidate("LAL 0", LalLoss.mse_init())]
    a = run_meta_test(quick(), cands, 3, jobs=1)
    b = run_meta_test(quick(), cands, 3, jobs=2)
    assert a.trajectories == b.trajectories


def _write_snapshots(root, loss, tag):
    d = root / tag
    d.mkdir()
    for i in range(6):
        (d / f"snapshot_{i}.json").write_text(json.dumps(snapshot_dict(loss, i, 2 * i)))


def test_snapshot_candidates_cover_both_parametrizations(tmp_path):
    _write_snapshots(tmp_path, LalLoss.mse_init(), "lal")
    _write_snapshots(tmp_path, FfnLoss.random(0), "ffn")
    cands = default_candidates(tmp_path)
    names = [c.name for c in cands]
    assert len(cands) == 18
    assert names[:6] == [f"FFN {i}" for i in range(6)]
    assert names[6:12] == [f"LAL {i}" for i in range(6)]
    assert names[12:] == ["MSE", "L1", "Cauchy", "GMC", "OAL 1", "OAL 2"]


def test_empty_snapshot_dir_leaves_standard_losses(tmp_path):
    assert [c.name for c in default_candidates(tmp_path)] == ["MSE", "L1", "Cauchy", "GMC", "OAL 1", "OAL 2"]
    assert len(default_candidates(None)) == 6


def test_unreadable_snapshot_is_skipped(tmp_path):
    (tmp_path / "snapshot_0.json").write_text("{not json")
    with pytest.warns(MissingSnapshotWarning):
        assert snapshot_candidates(tmp_path) == []


def test_write_results_tables(tmp_path):
    prot = quick(n_tasks=2)
    res = run_meta_test(prot, [Candidate("MSE", mse()), Candidate("OAL 1", OalLoss(0.01))], 0)
    manifest = write_results(res, tmp_path, {"a": 1}, {"meta_test": 0})
    with open(tmp_path / "min_rl2.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["loss", "mean", "task_0", "task_1", "diverged_tasks"]
    assert [r[0] for r in rows[1:]] == ["MSE", "OAL 1"]
    assert float(rows[1][1]) == res.mean_min_rl2("MSE")
    with open(tmp_path / "oal_alpha.csv") as fh:
        alpha_rows = list(csv.reader(fh))[1:]
    assert {r[0] for r in alpha_rows} == {"OAL 1"}
    assert manifest["config_hash"] == config_hash({"a": 1})
    assert set(manifest["files"]) == {"trajectories.csv", "min_rl2.csv", "oal_alpha.csv"}


def test_config_hash_ignores_key_order():
    assert config_hash({"a": 1, "b": [1, 2]}) == config_hash({"b": [1, 2], "a": 1})
    assert config_hash({"a": 1}) != config_hash({"a": 2})


def test_adam_memory_decay_factors():
    # impulse gradient at step 1, zeros after: the first moment then holds (1 - b1) * b1**(t-1)
    for b, expected in ((0.5, 0.5**20), (0.8, 0.8**20)):
        spec = InnerOptSpec("adam", 1e-3, betas=(b, b))
        mom = ml._AdamMoments([np.zeros(1)], [np.zeros(1)])
        p = [np.zeros(1)]
        p = ml._opt_step(p, [np.ones(1)], spec, mom)
        for _ in range(20):
            p = ml._opt_step(p, [np.zeros(1)], spec, mom)
        assert mom.m[0][0] / (1 - b) == pytest.approx(expected, rel=1e-12)
    assert 0.5**20 == pytest.approx(1e-6, rel=0.05)
    assert 0.8**20 == pytest.approx(0.0115, rel=0.01)


def test_beta_sweep_needs_adam():
    with pytest.raises(ValueError):
        adam_beta_sweep(task_family("regression"), BETA_PAIRS, MetaTrainConfig())


def test_beta_sweep_one_trajectory_per_pair():
    cfg = MetaTrainConfig(
        inner=InnerOptSpec("adam", 1e-2, steps=2),
        outer=OuterOptSpec(iterations=2, validate_every=1, validate_budget=3),
        network=SMALL,
    )
    res = adam_beta_sweep(task_family("regression"), [(0.5, 0.5), (0.9, 0.999)], cfg)
    assert list(res) == [(0.5, 0.5), (0.9, 0.999)]
    for run in res.values():
        assert [it for it, _ in run["validation"]] == [1, 2]


def test_design_grid_has_sixteen_runs():
    cfg = MetaTrainConfig(inner=InnerOptSpec("sgd", 0.01), outer=OuterOptSpec(validate_every=None), network=SMALL)
    runs = design_option_sweep(cfg, iterations=2, budgets=(3,), validate_every=1)
    assert len(runs) == 16
    assert {(r["J"], r["resample_every"], r["reinit"]) for r in runs} == {
        (j, e, r) for j in (1, 20) for e in (1, 10, 100, None) for r in (True, False)
    }
    assert all(len(r["L_O"]) == 2 and [i for i, _ in r["validation"][3]] == [1, 2] for r in runs)


def test_smoothness_statistic():
    assert smoothness([1.0, 2.0, 4.0, 4.5]) == 1.0
    assert smoothness([3.0]) == 0.0


def test_lal_initial_snapshot_tracks_mse():
    prot = TestProtocol("regression", n_tasks=3, optimizer=InnerOptSpec("sgd", 0.01), iterations=300, eval_every=50)
    res = run_meta_test(prot, [Candidate("LAL 0", LalLoss.mse_init()), Candidate("MSE", mse())], 0)
    assert abs(res.mean_min_rl2("LAL 0") - res.mean_min_rl2("MSE")) < 0.02


@pytest.mark.slow
def test_shifted_minimum_loss_degrades_advection():
    prot = TestProtocol("advection", n_tasks=1, optimizer=InnerOptSpec("adam", 1e-3), iterations=2000,
                        eval_every=250, eval_points=2500)
    res = run_meta_test(prot, [Candidate("MSE", mse()), Candidate("shifted", Shifted())], 0)
    assert res.diverged[("shifted", 0)] or res.mean_min_rl2("shifted") >= 2 * res.mean_min_rl2("MSE")


@pytest.mark.slow
def test_design_sweep_directional_claims():
    cfg = MetaTrainConfig(
        seed=0, inner=InnerOptSpec("sgd", 0.01, steps=20), outer=OuterOptSpec(learning_rate=1e-3, validate_every=None)
    )
    runs = design_option_sweep(cfg, iterations=120, validate_every=30)
    smoothest = min(runs, key=lambda r: r["smoothness"])
    assert smoothest["resample_every"] is None and not smoothest["reinit"]
    by_key = {(r["J"], r["resample_every"], r["reinit"]): r for r in runs}
    wins = total = 0
    for (j, every, reinit), r in by_key.items():
        if j != 20:
            continue
        other = by_key[(1, every, reinit)]
        for b in r["validation"]:
            for (_, e20), (_, e1) in zip(r["validation"][b], other["validation"][b]):
                wins += e20 <= e1
                total += 1
    assert wins > total / 2
