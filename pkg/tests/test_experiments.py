import csv
import json
from collections import deque

import numpy as np
import pytest

from cgq import cli
from cgq.config import ConfigError, config_from_dict, default_document, load_config
from cgq.experiments import (
    comparison_flag,
    make_setup,
    noise_seed,
    run_arm_seeds,
    run_dataset,
    run_gridworld,
    run_sweep,
    run_theory,
)
from cgq.config import ArmConfig

SMALL = {"noise_seeds": 3, "iterations": 10, "checkpoints": [1, 3, 10]}


def small_doc(**extra):
    doc = default_document("gridworld")
    doc.update(SMALL)
    doc["comparisons"] = []
    doc.update(extra)
    return doc


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------


def test_defaults_reproduce_reference_setup():
    cfg = config_from_dict({})
    assert cfg.experiment == "gridworld"
    assert (cfg.grid.width, cfg.grid.height, cfg.grid.goal, cfg.grid.gamma) == (18, 18, (6, 8), 0.9)
    assert (cfg.dataset.n_traj, cfg.dataset.max_len, cfg.dataset.eps) == (60, 15, 0.9)
    assert cfg.noise_sigma == 0.05 and cfg.checkpoints == [1, 3, 10, 100] and cfg.noise_seeds >= 20
    arms = {a.label: a for a in cfg.arms}
    assert arms["chunked"].params == {"h": 4}
    assert arms["cgq"].params == {"h": 4, "w": 0.7}


@pytest.mark.parametrize(
    "doc, message",
    [
        ({"bogus": 1}, "unknown keys in config"),
        ({"dataset": {"n_trajectories": 3}}, "unknown keys in dataset"),
        ({"theory": {"sigmaa": 0.1}}, "unknown keys in theory"),
        ({"grid": {"goal": [20, 0]}}, "outside"),
        ({"arms": [{"label": "x", "variant": "chunked_v", "h": 4, "w": 0.5}]}, "unknown keys"),
        ({"arms": [{"label": "x", "variant": "warp_v"}]}, "unknown arm variant"),
        ({"arms": [{"label": "x", "variant": "cgq_blend_v", "h": 4, "w": 2.0}]}, "blend weight"),
        ({"checkpoints": [1, 200]}, "beyond iterations"),
        ({"checkpoints": [3, 1]}, "strictly increasing"),
        ({"noise_seeds": 1}, ">= 2"),
        ({"comparisons": [{"better": "cgq", "worse": "nobody", "k": 3}]}, "unknown arm label"),
        ({"experiment": "sweep"}, "sweep grid"),
        (
            {"experiment": "sweep", "sweep": {"base_arm": {"label": "c", "variant": "chunked_v", "h": 4}, "grid": {"w": [0.5]}}},
            "not parameters",
        ),
    ],
)
def test_strict_config_errors(doc, message):
    with pytest.raises(ConfigError, match=message):
        config_from_dict(doc)


def test_arm_round_trip():
    arm = ArmConfig.from_dict({"label": "r", "variant": "cgq_reg_q", "h": 4, "beta": 2.0, "tau": 0.9, "step_size": 0.25})
    assert ArmConfig.from_dict(arm.to_dict()) == arm
    assert arm.is_q_level and arm.build().beta == 2.0


def test_load_config_file(tmp_path):
    path = tmp_path / "c.json"
    path.write_text(json.dumps(small_doc()))
    assert load_config(path).iterations == 10
    path.write_text("{oops")
    with pytest.raises(ConfigError, match="invalid JSON"):
        load_config(path)


def test_comparison_flag_rule():
    assert comparison_flag(1.0, 0.1, 2.0, 0.1, 2.0)
    assert not comparison_flag(1.0, 0.5, 2.0, 0.5, 2.0)
    assert not comparison_flag(2.0, 0.0, 1.0, 0.0, 0.0)


# ---------------------------------------------------------------------------
# gridworld runner
# ---------------------------------------------------------------------------


def _dataset_hops(dataset):
    rev, dist, queue = {}, {}, deque()
    for s in dataset.transitions():
        if s.done:
            if s.state not in dist:
                dist[s.state] = 1
                queue.append(s.state)
        else:
            rev.setdefault(s.next_state, set()).add(s.state)
    while queue:
        u = queue.popleft()
        for p in rev.get(u, ()):
            if p not in dist:
                dist[p] = dist[u] + 1
                queue.append(p)
    return dist


def test_noiseless_single_step_matches_shortest_dataset_path():
    cfg = config_from_dict(
        small_doc(noise_sigma=0.0, iterations=500, checkpoints=[500], arms=[{"label": "s", "variant": "single_step_v"}])
    )
    setup = make_setup(cfg)
    res = run_arm_seeds(setup, cfg.arms[0], 0.0, 2, 500, snapshots=[500])
    assert res.mean[-1] <= 1e-10
    # independent oracle: with a single goal reward the best dataset value is gamma^(hops - 1)
    hops = _dataset_hops(setup.dataset)
    V = res.snapshots[500][0]
    for s in range(324):
        expected = 0.9 ** (hops[s] - 1) if s in hops else 0.0
        assert V[s] == pytest.approx(expected, abs=1e-10)
    # states whose dataset path is as short as the grid path reach the true optimum
    spec_ = cfg.grid
    for s, h in hops.items():
        x, y = spec_.cell(s)
        if h == abs(x - spec_.goal[0]) + abs(y - spec_.goal[1]):
            assert V[s] == pytest.approx(setup.v_star[s], abs=1e-10)


def test_gridworld_outputs(tmp_path):
    cfg = config_from_dict(small_doc(comparisons=[{"better": "cgq", "worse": "single-step", "k": 10, "n_se": 0.0}]))
    summary = run_gridworld(cfg, tmp_path)
    for name in summary.files:
        assert (tmp_path / name).exists()
    rows = read_csv(tmp_path / "curves.csv")
    assert list(rows[0]) == ["k", "arm", "mean_mse", "stderr"]
    assert len(rows) == 3 * 11
    for label in ("single-step", "chunked", "cgq"):
        for k in (1, 3, 10):
            grid_rows = (tmp_path / f"heatmap_{label}_k{k}.csv").read_text().splitlines()
            assert len(grid_rows) == 18
            vals = np.array([[float(x) for x in r.split(",")] for r in grid_rows])
            assert vals.shape == (18, 18) and np.all(vals >= 0)
    # flags are recomputable from the recorded numbers alone
    rec = {(r["arm"], int(r["k"])): (float(r["mean_mse"]), float(r["stderr"])) for r in rows}
    (mb, sb), (mw, sw) = rec[("cgq", 10)], rec[("single-step", 10)]
    assert summary.flags["cgq<single-step@k10"] == comparison_flag(mb, sb, mw, sw, 0.0)
    doc = json.loads((tmp_path / "summary.json").read_text())
    assert doc["flags"] == summary.flags and doc["all_pass"] == summary.passed
    assert doc["metrics"]["arms"]["cgq"]["10"]["mean_mse"] == pytest.approx(mb, rel=1e-15)


def test_gridworld_heatmap_mean_matches_curve(tmp_path):
    cfg = config_from_dict(small_doc())
    run_gridworld(cfg, tmp_path)
    setup = make_setup(cfg)
    heat = np.loadtxt(tmp_path / "heatmap_chunked_k3.csv", delimiter=",").reshape(-1)
    curve = {(r["arm"], r["k"]): float(r["mean_mse"]) for r in read_csv(tmp_path / "curves.csv")}
    assert heat[setup.eval_states].mean() == pytest.approx(curve[("chunked", "3")], rel=1e-12)


def test_gridworld_is_byte_deterministic(tmp_path):
    cfg = config_from_dict(small_doc())
    run_gridworld(cfg, tmp_path / "a")
    run_gridworld(cfg, tmp_path / "b")
    names = sorted(p.name for p in (tmp_path / "a").iterdir())
    assert names == sorted(p.name for p in (tmp_path / "b").iterdir())
    for name in names:
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_q_level_arms_run():
    doc = small_doc(arms=default_document("qsuite")["arms"])
    summary = run_gridworld(config_from_dict(doc))
    assert set(summary.metrics["arms"]) == {a["label"] for a in doc["arms"]}
    for arm in summary.metrics["arms"].values():
        assert all(np.isfinite(v["mean_mse"]) for v in arm.values())


def test_noise_seed_layout():
    cfg = config_from_dict({"seed": 2})
    assert noise_seed(cfg, 0) != noise_seed(config_from_dict({"seed": 3}), 0)
    assert len({noise_seed(cfg, j) for j in range(100)}) == 100


# ---------------------------------------------------------------------------
# sweep, dataset, theory
# ---------------------------------------------------------------------------


def _sweep(grid, base):
    doc = {"experiment": "sweep", "noise_seeds": 20, "sweep": {"base_arm": base, "grid": grid, "metric_k": [3]}}
    return run_sweep(config_from_dict(doc)).metrics["points"]


def test_sweep_horizon_trend():
    pts = {p["h"]: p["mean_mse"] for p in _sweep({"h": [1, 2, 4, 8]}, {"label": "c", "variant": "chunked_v", "h": 4})}
    # near-monotone: every chunk length beats h=1 and the first doublings keep helping
    assert all(pts[h] < pts[1] for h in (2, 4, 8))
    assert pts[4] < pts[2] < pts[1]


def test_sweep_blend_endpoints_equal_pure_arms():
    pts = {p["w"]: p for p in _sweep({"w": [0.0, 1.0]}, {"label": "b", "variant": "cgq_blend_v", "h": 4, "w": 0.7})}
    cfg = config_from_dict({"noise_seeds": 20})
    setup = make_setup(cfg)
    single = run_arm_seeds(setup, ArmConfig("s", "single_step_v"), 0.05, 20, 3)
    chunked = run_arm_seeds(setup, ArmConfig("c", "chunked_v", {"h": 4}), 0.05, 20, 3)
    assert pts[1.0]["mean_mse"] == single.mean[3] and pts[1.0]["stderr"] == single.stderr[3]
    assert pts[0.0]["mean_mse"] == chunked.mean[3]


def test_sweep_writes_csv(tmp_path):
    doc = {"experiment": "sweep", **SMALL, "sweep": {"base_arm": {"label": "n", "variant": "n_step_v", "n": 2}, "grid": {"n": [1, 3], "step_size": [0.5, 1.0]}, "metric_k": [1, 3]}}
    run_sweep(config_from_dict(doc), tmp_path)
    rows = read_csv(tmp_path / "sweep.csv")
    assert list(rows[0]) == ["n", "step_size", "k", "mean_mse", "stderr"]
    assert len(rows) == 2 * 2 * 2


def test_dataset_file(tmp_path):
    path = run_dataset(config_from_dict({"experiment": "dataset"}), tmp_path / "sub" / "d.jsonl")
    lines = path.read_text().splitlines()
    assert len(lines) == 60
    assert all("steps" in json.loads(line) for line in lines)


SMALL_THEORY = {
    "n": 10,
    "n_instances": 3,
    "n_seeds": 10,
    "k_max": 100,
    "bias_triples": 10,
    "contraction_pairs": 50,
    "contraction_operators": 3,
}


def test_theory_noiseless_run_passes(tmp_path):
    cfg = config_from_dict({"experiment": "theory", "theory": {**SMALL_THEORY, "sigma": 0.0}})
    summary = run_theory(cfg, tmp_path)
    assert summary.passed, summary.flags
    assert summary.metrics["theorem1_max_empirical"] <= 1e-12
    bounds = read_csv(tmp_path / "bounds.csv")
    assert [float(r["beta"]) for r in bounds] == cfg.theory.beta_grid


def test_theory_default_run(tmp_path):
    summary = run_theory(config_from_dict({"experiment": "theory"}), tmp_path)
    assert summary.passed, summary.flags
    assert 0.0 < summary.metrics["sweep"]["argmin_beta"] < 1e6
    assert summary.metrics["theorem1_bound"] == pytest.approx(0.0131579, abs=5e-8)
    assert len(read_csv(tmp_path / "theorem1.csv")) == 50
    assert len(read_csv(tmp_path / "bias_check.csv")) == 100


# ---------------------------------------------------------------------------
# command line
# ---------------------------------------------------------------------------


def test_cli_exit_codes(tmp_path, capsys):
    good = tmp_path / "good.json"
    good.write_text(json.dumps(small_doc(comparisons=[{"better": "cgq", "worse": "single-step", "k": 10, "n_se": 0.0}])))
    assert cli.main(["gridworld", "--config", str(good), "--out-dir", str(tmp_path / "o")]) == 0
    assert "PASS  cgq<single-step@k10" in capsys.readouterr().out

    failing = tmp_path / "fail.json"
    failing.write_text(json.dumps(small_doc(comparisons=[{"better": "single-step", "worse": "cgq", "k": 10}])))
    assert cli.main(["gridworld", "--config", str(failing), "--out-dir", str(tmp_path / "f")]) == 2
    assert "FAIL" in capsys.readouterr().out

    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"bogus": True}))
    assert cli.main(["gridworld", "--config", str(bad)]) == 1
    assert "unknown keys" in capsys.readouterr().err
    assert cli.main(["gridworld", "--config", str(tmp_path / "missing.json")]) == 1
    assert cli.main(["teleport"]) == 1
    assert cli.main(["dataset"]) == 1  # --out is required


def test_cli_dataset_and_seed_override(tmp_path):
    assert cli.main(["dataset", "--out", str(tmp_path / "d.jsonl")]) == 0
    assert len((tmp_path / "d.jsonl").read_text().splitlines()) == 60
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps(small_doc()))
    cli.main(["gridworld", "--config", str(cfg), "--out-dir", str(tmp_path / "a")])
    cli.main(["gridworld", "--config", str(cfg), "--out-dir", str(tmp_path / "b"), "--seed-override", "5"])
    a = (tmp_path / "a" / "curves.csv").read_bytes()
    b = (tmp_path / "b" / "curves.csv").read_bytes()
    assert a != b
    # the dataset is not reseeded, so the reference values are unchanged
    assert (tmp_path / "a" / "reference_values.csv").read_bytes() == (tmp_path / "b" / "reference_values.csv").read_bytes()


def test_shipped_configs_load():
    from pathlib import Path

    paths = sorted((Path(__file__).parent.parent / "configs").glob("*.json"))
    assert paths
    for path in paths:
        load_config(path)
