"""Experiment runners behind the ``cgq`` command line.

Each runner computes everything in memory first and only then writes its files, so an
interrupted run never leaves partial output behind.
"""

from __future__ import annotations

import csv
import io
import itertools
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import backups as B
from . import theory as T
from .config import ArmConfig, Comparison, ExperimentConfig, TheoryConfig
from .dataset import ChunkIndex, OfflineDataset, chunk_index, collect_dataset, save_dataset, successor_index
from .mdp import TabularMDP, build_gridworld, epsilon_greedy, optimal_policy, value_iteration

ABS_TOL = 1e-12


def fmt(x: float) -> str:
    return format(float(x), ".17g")


def _csv(rows: Sequence[Sequence], header: Sequence[str]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def _write_all(out_dir: Path, files: Dict[str, str]) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    for name, text in files.items():
        (out_dir / name).write_text(text)


def stderr(samples: np.ndarray, axis: int = 0) -> np.ndarray:
    n = samples.shape[axis]
    return samples.std(axis=axis, ddof=1) / math.sqrt(n)


# ---------------------------------------------------------------------------
# gridworld
# ---------------------------------------------------------------------------


def dataset_optimal_values(idx, gamma: float, n_states: int, tol: float = 1e-13, max_iter: int = 100_000) -> np.ndarray:
    """Fixed point of the noiseless single-step backup: the best values the dataset supports."""
    spec = B.BackupSpec(B.SingleStepV(), gamma)
    V = np.zeros(n_states)
    for _ in range(max_iter):
        V_new = B.single_step_v_backup(V, idx, spec)
        if np.max(np.abs(V_new - V)) <= tol:
            return V_new
        V = V_new
    raise RuntimeError("dataset value iteration did not converge")


@dataclass
class GridworldSetup:
    config: ExperimentConfig
    mdp: TabularMDP
    v_star: np.ndarray
    dataset: OfflineDataset
    idx: object
    reference: np.ndarray
    eval_states: np.ndarray
    _chunks: Dict[int, ChunkIndex] = field(default_factory=dict)

    def chunks(self, h: int) -> ChunkIndex:
        if h not in self._chunks:
            self._chunks[h] = chunk_index(self.dataset, h, self.mdp.gamma, self.mdp.n_states)
        return self._chunks[h]


def make_setup(config: ExperimentConfig) -> GridworldSetup:
    mdp = build_gridworld(config.grid)
    v_star = value_iteration(mdp)
    behavior = epsilon_greedy(optimal_policy(mdp, v_star), config.dataset.eps)
    ds = collect_dataset(mdp, behavior, config.dataset.n_traj, config.dataset.max_len, config.dataset.dataset_seed)
    idx = successor_index(ds, mdp.n_states)
    ref = v_star if config.reference == "mdp" else dataset_optimal_values(idx, mdp.gamma, mdp.n_states)
    return GridworldSetup(config, mdp, v_star, ds, idx, ref, ds.visited_states())


def noise_seed(config: ExperimentConfig, job: int) -> int:
    return config.seed * 1_000_003 + job


def run_arm(
    setup: GridworldSetup, arm: ArmConfig, sigma: float, seed: int, iterations: int, snapshots: Sequence[int] = ()
) -> Tuple[np.ndarray, Dict[int, np.ndarray]]:
    """Run one arm under one noise stream; returns (MSE for k = 0..iterations, {k: state values})."""
    variant = arm.build()
    gamma = setup.mdp.gamma
    n_states, n_actions = setup.mdp.n_states, setup.mdp.n_actions
    h = getattr(variant, "h", None)
    chunks = setup.chunks(h) if h is not None else None
    base = B.BackupSpec(variant, gamma, B.NoiseModel(sigma, seed), arm.step_size)
    errors = np.empty(iterations + 1)
    snaps: Dict[int, np.ndarray] = {}
    want = set(snapshots)

    if not arm.is_q_level:
        V = np.zeros(n_states)
        errors[0] = B.value_error(V, setup.reference, setup.eval_states)
        for k in range(1, iterations + 1):
            V = B.v_backup(V, setup.idx, chunks, base.with_noise(base.noise.advance(k - 1)))
            errors[k] = B.value_error(V, setup.reference, setup.eval_states)
            if k in want:
                snaps[k] = V.copy()
        return errors, snaps

    Q = np.zeros((n_states, n_actions))
    Qc = B.init_chunk_q(chunks, n_actions) if chunks is not None else None
    guided_chunk = isinstance(variant, (B.ChunkedQ, B.CGQOppositeQ))

    def values():
        if guided_chunk:
            return B.chunk_state_values(Qc, chunks, n_actions)
        return B.q_state_values(Q, setup.idx, gamma)

    errors[0] = B.value_error(values(), setup.reference, setup.eval_states)
    for k in range(1, iterations + 1):
        Q, Qc = B.q_training_step(Q, Qc, setup.idx, chunks, base.with_noise(base.noise.advance(k - 1)))
        V = values()
        errors[k] = B.value_error(V, setup.reference, setup.eval_states)
        if k in want:
            snaps[k] = V
    return errors, snaps


@dataclass
class ArmResult:
    label: str
    errors: np.ndarray  # [seeds, iterations + 1]
    snapshots: Dict[int, np.ndarray]  # k -> [seeds, n_states]

    @property
    def mean(self) -> np.ndarray:
        return self.errors.mean(axis=0)

    @property
    def stderr(self) -> np.ndarray:
        return stderr(self.errors)


def run_arm_seeds(setup: GridworldSetup, arm: ArmConfig, sigma: float, n_seeds: int, iterations: int, snapshots=()) -> ArmResult:
    errs, snaps = [], []
    for job in range(n_seeds):
        e, s = run_arm(setup, arm, sigma, noise_seed(setup.config, job), iterations, snapshots)
        errs.append(e)
        snaps.append(s)
    return ArmResult(arm.label, np.array(errs), {k: np.array([s[k] for s in snaps]) for k in snapshots})


def comparison_flag(mean_better: float, se_better: float, mean_worse: float, se_worse: float, n_se: float) -> bool:
    return bool(mean_worse - mean_better >= n_se * math.hypot(se_better, se_worse) and mean_better < mean_worse)


def comparison_name(c: Comparison) -> str:
    return f"{c.better}<{c.worse}@k{c.k}"


def evaluate_comparisons(curves: Dict[Tuple[str, int], Tuple[float, float]], comparisons: Sequence[Comparison]) -> Dict[str, bool]:
    """Flags from (arm, k) -> (mean, stderr); exactly what curves.csv holds."""
    flags = {}
    for c in comparisons:
        mb, sb = curves[(c.better, c.k)]
        mw, sw = curves[(c.worse, c.k)]
        flags[comparison_name(c)] = comparison_flag(mb, sb, mw, sw, c.n_se)
    return flags


def _grid_csv(values: np.ndarray, width: int, height: int) -> str:
    rows = values.reshape(height, width)
    return "".join(",".join(fmt(x) for x in row) + "\n" for row in rows)


def _safe(label: str) -> str:
    return "".join(ch if ch.isalnum() or ch in "-_." else "_" for ch in label)


@dataclass
class RunSummary:
    experiment: str
    metrics: Dict
    files: List[str]
    flags: Dict[str, bool]

    @property
    def passed(self) -> bool:
        return all(self.flags.values())

    def to_json(self) -> str:
        return json.dumps(
            {"experiment": self.experiment, "metrics": self.metrics, "files": self.files, "flags": self.flags, "all_pass": self.passed},
            indent=2,
            sort_keys=True,
        )


def run_gridworld(config: ExperimentConfig, out_dir: Optional[Path] = None) -> RunSummary:
    setup = make_setup(config)
    spec = config.grid
    results = [
        run_arm_seeds(setup, arm, config.noise_sigma, config.noise_seeds, config.iterations, config.checkpoints)
        for arm in config.arms
    ]
    files: Dict[str, str] = {}
    curve_rows, curves = [], {}
    for res in results:
        for k in range(config.iterations + 1):
            m, s = float(res.mean[k]), float(res.stderr[k])
            curves[(res.label, k)] = (m, s)
            curve_rows.append([k, res.label, fmt(m), fmt(s)])
    files["curves.csv"] = _csv(curve_rows, ["k", "arm", "mean_mse", "stderr"])
    files["optimal_values.csv"] = _grid_csv(setup.v_star, spec.width, spec.height)
    files["reference_values.csv"] = _grid_csv(setup.reference, spec.width, spec.height)
    for res in results:
        for k in config.checkpoints:
            vals = res.snapshots[k]
            err = ((vals - setup.reference) ** 2).mean(axis=0)
            files[f"heatmap_{_safe(res.label)}_k{k}.csv"] = _grid_csv(err, spec.width, spec.height)
            files[f"values_{_safe(res.label)}_k{k}.csv"] = _grid_csv(vals.mean(axis=0), spec.width, spec.height)

    flags = evaluate_comparisons(curves, config.comparisons)
    metrics = {
        "n_eval_states": int(setup.eval_states.size),
        "n_transitions": int(sum(len(t) for t in setup.dataset.trajectories)),
        "reference": config.reference,
        "arms": {
            res.label: {str(k): {"mean_mse": curves[(res.label, k)][0], "stderr": curves[(res.label, k)][1]} for k in config.checkpoints}
            for res in results
        },
    }
    summary = RunSummary("gridworld", metrics, sorted(files) + ["summary.json"], flags)
    files["summary.json"] = summary.to_json()
    if out_dir is not None:
        _write_all(Path(out_dir), files)
    return summary


# ---------------------------------------------------------------------------
# sweep
# ---------------------------------------------------------------------------


def run_sweep(config: ExperimentConfig, out_dir: Optional[Path] = None) -> RunSummary:
    sweep = config.sweep
    if sweep is None or not sweep.grid:
        raise ValueError("empty sweep grid")
    setup = make_setup(config)
    names = sorted(sweep.grid)
    rows, metrics = [], []
    for combo in itertools.product(*(sweep.grid[n] for n in names)):
        params = dict(sweep.base_arm.params)
        step = sweep.base_arm.step_size
        for name, value in zip(names, combo):
            if name == "step_size":
                step = value
            elif name in ("h", "n"):
                params[name] = int(value)
            else:
                params[name] = value
        label = sweep.base_arm.label + "[" + ",".join(f"{n}={v}" for n, v in zip(names, combo)) + "]"
        arm = ArmConfig.from_dict({"label": label, "variant": sweep.base_arm.variant, **params, **({"step_size": step} if step is not None else {})})
        res = run_arm_seeds(setup, arm, config.noise_sigma, config.noise_seeds, max(max(sweep.metric_k), 1))
        for k in sweep.metric_k:
            rows.append([*(fmt(v) for v in combo), k, fmt(res.mean[k]), fmt(res.stderr[k])])
            metrics.append({**dict(zip(names, combo)), "k": k, "mean_mse": float(res.mean[k]), "stderr": float(res.stderr[k])})
    files = {"sweep.csv": _csv(rows, [*names, "k", "mean_mse", "stderr"])}
    summary = RunSummary("sweep", {"points": metrics}, ["summary.json", "sweep.csv"], {})
    files["summary.json"] = summary.to_json()
    if out_dir is not None:
        _write_all(Path(out_dir), files)
    return summary


# ---------------------------------------------------------------------------
# dataset
# ---------------------------------------------------------------------------


def run_dataset(config: ExperimentConfig, out_path: Path) -> Path:
    mdp = build_gridworld(config.grid)
    behavior = epsilon_greedy(optimal_policy(mdp), config.dataset.eps)
    ds = collect_dataset(mdp, behavior, config.dataset.n_traj, config.dataset.max_len, config.dataset.dataset_seed)
    out_path = Path(out_path)
    if out_path.parent and not out_path.parent.exists():
        out_path.parent.mkdir(parents=True)
    out_path.write_bytes(save_dataset(ds))
    return out_path


# ---------------------------------------------------------------------------
# theory
# ---------------------------------------------------------------------------


def regularization_target(op: T.LinearOperatorSpec, dist_sq: float, seed: int) -> np.ndarray:
    """Q* displaced along a random direction so that ||Q* - q_c||^2 = dist_sq."""
    q_star = T.exact_fixed_point(op)
    d = np.random.default_rng([seed, 7]).standard_normal(op.n)
    return q_star + math.sqrt(dist_sq) * d / T.ms_norm(d)


def theorem1_rows(tc: TheoryConfig) -> List[Tuple[int, float, float, float]]:
    bound = T.theorem1_bound(tc.sigma, tc.gamma)
    rows = []
    for i in range(tc.n_instances):
        op = T.make_contraction(tc.n, tc.gamma, tc.instance_seed + i, tc.spectrum)
        res = T.simulate_noisy_iteration(op, tc.sigma, tc.k_max, n_seeds=tc.n_seeds, master_seed=tc.instance_seed + i)
        rows.append((i, res.asymptotic_mse, res.stderr, bound))
    return rows


def scalar_ar1_check(tc: TheoryConfig, beta: float = 0.0) -> Tuple[float, float, float]:
    """(empirical variance about the fixed point, its stderr, exact AR(1) variance)."""
    a = tc.gamma
    # b = q_c = 0 puts the fixed point at the chain's start, so there is no transient to burn
    op = T.LinearOperatorSpec([[a]], [0.0], tc.gamma)
    reg = T.RegularizedOperatorSpec(op, [0.0], beta)
    k_max = max(tc.k_max, 20 * int(math.ceil(1.0 / (1.0 - a / (1.0 + beta)))))
    res = T.simulate_noisy_iteration(reg, tc.sigma, k_max, n_seeds=tc.n_seeds, master_seed=tc.instance_seed + 99_991, reference=T.exact_fixed_point(reg))
    return res.asymptotic_mse, res.stderr, tc.sigma**2 / ((1.0 + beta) ** 2 - a * a)


def bias_triples(tc: TheoryConfig) -> List[Tuple[int, float, float, float, bool]]:
    rows = []
    for i in range(tc.bias_triples):
        rng = np.random.default_rng([tc.instance_seed, i, 1])
        op = T.make_contraction(tc.n, tc.gamma, tc.instance_seed + i, tc.spectrum)
        q_c = rng.standard_normal(tc.n) * rng.uniform(0.1, 10.0)
        beta = 10.0 ** rng.uniform(-3, 3)
        lhs, rhs, ok = T.bias_bound_check(op, q_c, beta)
        rows.append((i, beta, lhs, rhs, ok))
    return rows


def contraction_rows(tc: TheoryConfig) -> List[Tuple[int, float, float, float]]:
    rows = []
    for i in range(tc.contraction_operators):
        rng = np.random.default_rng([tc.instance_seed, i, 2])
        op = T.make_contraction(tc.n, tc.gamma, tc.instance_seed + i, tc.spectrum)
        beta = 0.0 if i == 0 else 10.0 ** rng.uniform(-2, 2)
        reg = T.RegularizedOperatorSpec(op, rng.standard_normal(tc.n), beta)
        ratio = T.contraction_factor_check(reg, tc.contraction_pairs, seed=tc.instance_seed + i)
        rows.append((i, beta, ratio, tc.gamma / (1.0 + beta)))
    return rows


def endpoint_identity_ok() -> bool:
    for sigma in (0.0, 0.01, 0.05, 0.3, 1.0):
        for gamma in (0.1, 0.5, 0.9, 0.99, 0.999):
            t1 = T.theorem1_bound(sigma, gamma)
            t2 = T.theorem2_bound(sigma, gamma, 0.0, 1.234, L=0.0)
            if abs(t2 - t1) > 1e-14 * max(abs(t1), 1e-300):
                return False
    return True


def sweep_report(tc: TheoryConfig) -> T.BoundReport:
    gamma = tc.sweep_gamma if tc.sweep_gamma is not None else tc.gamma
    op = T.make_contraction(tc.n, gamma, tc.instance_seed, tc.spectrum)
    q_c = regularization_target(op, tc.target_dist_sq, tc.instance_seed)
    k_max = tc.sweep_k_max if tc.sweep_k_max is not None else tc.k_max
    return T.beta_sweep(op, q_c, tc.sigma, tc.beta_grid, k_max=k_max, n_seeds=tc.n_seeds, master_seed=tc.instance_seed)


def sweep_shape_ok(report: T.BoundReport, sigma: float) -> bool:
    if sigma == 0.0 or report.dist_sq == 0.0:
        # nothing to trade: pure bias (argmin at 0) or pure variance reduction (argmin at the largest beta)
        diffs = np.diff(report.empirical_mse)
        return bool(np.all(diffs >= -ABS_TOL) if sigma == 0.0 else np.all(diffs <= ABS_TOL))
    return report.interior_optimum(3.0)


def run_theory(config: ExperimentConfig, out_dir: Optional[Path] = None) -> RunSummary:
    tc = config.theory
    t1 = theorem1_rows(tc)
    ar0 = scalar_ar1_check(tc, 0.0)
    ar1 = scalar_ar1_check(tc, 1.0)
    bias = bias_triples(tc)
    contr = contraction_rows(tc)
    report = sweep_report(tc)
    exact_bias = report.exact_bias_sq

    flags = {
        "theorem1_bound": all(m <= b + 3 * s + ABS_TOL for _, m, s, b in t1),
        "scalar_ar1_beta0": abs(ar0[0] - ar0[2]) <= 3 * ar0[1] + ABS_TOL,
        "scalar_ar1_beta1": abs(ar1[0] - ar1[2]) <= 3 * ar1[1] + ABS_TOL,
        "bias_bound": all(ok for *_, ok in bias),
        "contraction_factor": all(r <= lim * (1 + 1e-10) for _, _, r, lim in contr),
        "theorem2_bound": bool(np.all(report.empirical_mse <= report.theoretical_bound + 3 * report.stderr + ABS_TOL)),
        "theorem2_endpoint_identity": endpoint_identity_ok(),
        "bias_monotone_in_beta": bool(np.all(np.diff(exact_bias) >= -1e-12)),
        "sweep_shape": sweep_shape_ok(report, tc.sigma),
    }
    files = {
        "theorem1.csv": _csv([[i, fmt(m), fmt(s), fmt(b)] for i, m, s, b in t1], ["instance", "empirical_mse", "stderr", "bound"]),
        "bias_check.csv": _csv([[i, fmt(be), fmt(l), fmt(r), int(ok)] for i, be, l, r, ok in bias], ["triple", "beta", "lhs", "rhs", "ok"]),
        "contraction.csv": _csv([[i, fmt(be), fmt(r), fmt(lim)] for i, be, r, lim in contr], ["operator", "beta", "max_ratio", "limit"]),
        "bounds.csv": report.to_csv(),
    }
    metrics = {
        "theorem1_bound": T.theorem1_bound(tc.sigma, tc.gamma),
        "theorem1_max_empirical": max(m for _, m, _, _ in t1),
        "scalar_ar1": {"beta0": list(ar0), "beta1": list(ar1)},
        "bias_violations": sum(not ok for *_, ok in bias),
        "contraction_max_ratio_over_limit": max(r / lim for _, _, r, lim in contr),
        "sweep": {
            "argmin_beta": report.argmin_beta,
            "mse_at_beta0": report.endpoints[0],
            "dist_sq": report.dist_sq,
            "min_mse": float(report.empirical_mse.min()),
        },
    }
    summary = RunSummary("theory", metrics, sorted(files) + ["summary.json"], flags)
    files["summary.json"] = summary.to_json()
    if out_dir is not None:
        _write_all(Path(out_dir), files)
    return summary
