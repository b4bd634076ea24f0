"""Dataset-constrained value and Q backups: single-step, chunked, n-step, and chunk-guided.

Every operator is a pure function of its inputs. Noise is drawn per table entry from a
generator keyed on ``(seed, stream, counter)`` so the same arguments always reproduce the
same output, and two operators handed the same :class:`NoiseModel` see identical draws.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from functools import cached_property
from typing import Dict, Optional, Tuple, Union

import numpy as np

from .dataset import ChunkIndex, SuccessorIndex


class BackupConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# noise
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class NoiseModel:
    sigma: float = 0.0
    seed: int = 0
    counter: int = 0
    stream: int = 0

    def __post_init__(self):
        if self.sigma < 0:
            raise BackupConfigError("noise sigma must be non-negative")

    def draw(self, size: int) -> np.ndarray:
        """Zero-mean Gaussian perturbations, entry ``i`` of the result belongs to table entry ``i``."""
        if self.sigma == 0.0:
            return np.zeros(size)
        rng = np.random.default_rng([self.seed, self.stream, self.counter])
        return rng.normal(0.0, self.sigma, size)

    def advance(self, steps: int = 1) -> "NoiseModel":
        return replace(self, counter=self.counter + steps)

    def child(self, stream: int) -> "NoiseModel":
        """Independent stream for a second table updated in the same iteration."""
        return replace(self, stream=self.stream * 1000 + stream)


# ---------------------------------------------------------------------------
# expectile loss
# ---------------------------------------------------------------------------


def expectile_weight(u, tau: float):
    """|tau - 1(u < 0)|: tau for non-negative residuals, 1 - tau for negative ones."""
    if not 0.0 < tau < 1.0:
        raise BackupConfigError(f"tau must lie in (0, 1), got {tau}")
    u = np.asarray(u, dtype=float)
    w = np.where(u < 0, 1.0 - tau, tau)
    return float(w) if w.ndim == 0 else w


def expectile_loss(u, tau: float):
    u = np.asarray(u, dtype=float)
    out = expectile_weight(u, tau) * (u * u)
    return float(out) if np.ndim(out) == 0 else out


# ---------------------------------------------------------------------------
# backup specifications
# ---------------------------------------------------------------------------


def _check_h(h: int, name: str = "h"):
    if int(h) != h or h < 1:
        raise BackupConfigError(f"{name} must be a positive integer, got {h}")


def _check_tau(tau: float):
    if not 0.5 <= tau < 1.0:
        raise BackupConfigError(f"tau must lie in [0.5, 1), got {tau}")


def _check_beta(beta: float):
    if beta < 0:
        raise BackupConfigError(f"beta must be non-negative, got {beta}")


@dataclass(frozen=True)
class SingleStepV:
    pass


@dataclass(frozen=True)
class ChunkedV:
    h: int

    def __post_init__(self):
        _check_h(self.h)


@dataclass(frozen=True)
class CGQBlendV:
    h: int
    w: float = 0.7

    def __post_init__(self):
        _check_h(self.h)
        if not 0.0 <= self.w <= 1.0:
            raise BackupConfigError(f"blend weight w must lie in [0, 1], got {self.w}")


@dataclass(frozen=True)
class NStepV:
    n: int

    def __post_init__(self):
        _check_h(self.n, "n")

    @property
    def h(self) -> int:
        return self.n


@dataclass(frozen=True)
class SingleStepQ:
    pass


@dataclass(frozen=True)
class ChunkedQ:
    h: int

    def __post_init__(self):
        _check_h(self.h)


@dataclass(frozen=True)
class CGQRegQ:
    h: int
    beta: float = 1.0
    tau: float = 0.95

    def __post_init__(self):
        _check_h(self.h)
        _check_beta(self.beta)
        _check_tau(self.tau)


@dataclass(frozen=True)
class CGQMaxQ:
    h: int

    def __post_init__(self):
        _check_h(self.h)


@dataclass(frozen=True)
class CGQDistillQ:
    h: int
    tau: float = 0.95
    beta: float = 1.0

    def __post_init__(self):
        _check_h(self.h)
        _check_beta(self.beta)
        _check_tau(self.tau)


@dataclass(frozen=True)
class CGQOppositeQ:
    h: int
    beta: float = 1.0
    tau: float = 0.95

    def __post_init__(self):
        _check_h(self.h)
        _check_beta(self.beta)
        _check_tau(self.tau)


VVariant = Union[SingleStepV, ChunkedV, CGQBlendV, NStepV]
QVariant = Union[SingleStepQ, ChunkedQ, CGQRegQ, CGQMaxQ, CGQDistillQ, CGQOppositeQ]
Variant = Union[VVariant, QVariant]
V_VARIANTS = (SingleStepV, ChunkedV, CGQBlendV, NStepV)
Q_VARIANTS = (SingleStepQ, ChunkedQ, CGQRegQ, CGQMaxQ, CGQDistillQ, CGQOppositeQ)


@dataclass(frozen=True)
class BackupSpec:
    variant: Variant
    gamma: float = 0.9
    noise: NoiseModel = NoiseModel()
    step_size: Optional[float] = None  # defaults: 1.0 for V-level, 0.5 for Q-level

    def __post_init__(self):
        if not 0.0 < self.gamma < 1.0:
            raise BackupConfigError("gamma must lie strictly inside (0, 1)")
        if self.step_size is None:
            object.__setattr__(self, "step_size", 1.0 if isinstance(self.variant, V_VARIANTS) else 0.5)
        if not 0.0 < self.step_size <= 1.0:
            raise BackupConfigError(f"step_size must lie in (0, 1], got {self.step_size}")

    def with_noise(self, noise: NoiseModel) -> "BackupSpec":
        return replace(self, noise=noise)


def _require(spec: BackupSpec, *kinds):
    if not isinstance(spec.variant, kinds):
        names = ", ".join(k.__name__ for k in kinds)
        raise BackupConfigError(f"variant {type(spec.variant).__name__} is not one of: {names}")


def _check_chunk_h(spec_h: int, chunks: ChunkIndex, gamma: float):
    if chunks.h != spec_h:
        raise BackupConfigError(f"chunk index built with h={chunks.h} but backup expects h={spec_h}")
    if abs(chunks.gamma - gamma) > 1e-15:
        raise BackupConfigError(f"chunk index built with gamma={chunks.gamma} but backup uses {gamma}")


# ---------------------------------------------------------------------------
# array views of the indexes
# ---------------------------------------------------------------------------


class _Candidates:
    """Flat arrays of (source row, reward, bootstrap state, bootstrap discount).

    ``discount`` is 0 for goal-entering candidates, so ``reward + discount * V[boot]``
    covers both the truncated and the bootstrapping case.
    """

    def __init__(self, rows, reward, boot, discount, n_rows: int):
        self.rows = np.asarray(rows, dtype=np.intp)
        self.reward = np.asarray(reward, dtype=float)
        self.boot = np.asarray(boot, dtype=np.intp)
        self.discount = np.asarray(discount, dtype=float)
        self.n_rows = n_rows
        self.covered = np.zeros(n_rows, dtype=bool)
        self.covered[self.rows] = True
        counts = np.bincount(self.rows, minlength=n_rows).astype(float)
        self.inv_count = np.divide(1.0, counts, out=np.zeros(n_rows), where=counts > 0)

    def values(self, V: np.ndarray) -> np.ndarray:
        return self.reward + self.discount * V[self.boot]

    def row_max(self, V: np.ndarray) -> np.ndarray:
        out = np.full(self.n_rows, -np.inf)
        np.maximum.at(out, self.rows, self.values(V))
        return out

    def row_mean(self, V: np.ndarray) -> np.ndarray:
        return np.bincount(self.rows, weights=self.values(V), minlength=self.n_rows) * self.inv_count


def _v_candidates(idx: SuccessorIndex, gamma: float) -> _Candidates:
    cached = idx.__dict__.get("_v_cand")
    if cached is not None and cached[0] == gamma:
        return cached[1]
    rows, rew, boot, disc = [], [], [], []
    for s, outs in sorted(idx.by_state.items()):
        for o in sorted(outs):
            rows.append(s)
            rew.append(o.reward)
            boot.append(o.next_state)
            disc.append(0.0 if o.entered_goal else gamma)
    cand = _Candidates(rows, rew, boot, disc, idx.n_states)
    idx.__dict__["_v_cand"] = (gamma, cand)
    return cand


def _chunk_v_candidates(chunks: ChunkIndex) -> _Candidates:
    cached = chunks.__dict__.get("_v_cand")
    if cached is not None:
        return cached
    uniq = sorted({(g.start_state, g.reward, g.end_state, g.truncated_at_goal, g.length) for g in chunks.segments})
    rows = [u[0] for u in uniq]
    rew = [u[1] for u in uniq]
    boot = [u[2] for u in uniq]
    disc = [0.0 if u[3] else chunks.gamma ** u[4] for u in uniq]
    cand = _Candidates(rows, rew, boot, disc, chunks.n_states)
    chunks.__dict__["_v_cand"] = cand
    return cand


# ---------------------------------------------------------------------------
# V-level backups
# ---------------------------------------------------------------------------


def _max_backup(V: np.ndarray, cand: _Candidates, noise: NoiseModel, step_size: float) -> np.ndarray:
    V = np.asarray(V, dtype=float)
    best = cand.row_max(V)
    out = V.copy()
    rows = cand.covered
    # convex form: exactly ``best`` at step_size 1 and monotone in V for any step_size
    out[rows] = (1.0 - step_size) * V[rows] + step_size * best[rows]
    out[rows] += noise.draw(len(V))[rows]
    return out


def single_step_v_backup(V: np.ndarray, idx: SuccessorIndex, spec: BackupSpec) -> np.ndarray:
    """V(s) <- max over observed (r, s') of r + gamma V(s'), no bootstrap after entering the goal."""
    _require(spec, SingleStepV)
    return _max_backup(V, _v_candidates(idx, spec.gamma), spec.noise, spec.step_size)


def chunked_v_backup(V: np.ndarray, chunks: ChunkIndex, spec: BackupSpec) -> np.ndarray:
    """V(s) <- max over segments starting at s of R + gamma^len V(end)."""
    _require(spec, ChunkedV, NStepV)
    _check_chunk_h(spec.variant.h, chunks, spec.gamma)
    return _max_backup(V, _chunk_v_candidates(chunks), spec.noise, spec.step_size)


def n_step_v_backup(V: np.ndarray, chunks: ChunkIndex, spec: BackupSpec) -> np.ndarray:
    # In the tabular V setting an n-step return over dataset segments is the chunked backup.
    _require(spec, NStepV)
    return chunked_v_backup(V, chunks, spec)


def cgq_blend_v_backup(V: np.ndarray, idx: SuccessorIndex, chunks: ChunkIndex, spec: BackupSpec) -> np.ndarray:
    """w * single-step backup + (1 - w) * chunked backup, both from the same incoming V.

    The single-step constituent uses ``spec.noise`` and the chunked constituent uses
    ``spec.noise.child(1)``, so each constituent carries its own draw. At the endpoints the
    surviving constituent runs on ``spec.noise`` and the result is exactly the pure backup.
    """
    _require(spec, CGQBlendV)
    w, h = spec.variant.w, spec.variant.h
    if w == 1.0:
        return single_step_v_backup(V, idx, replace(spec, variant=SingleStepV()))
    if w == 0.0:
        return chunked_v_backup(V, chunks, replace(spec, variant=ChunkedV(h)))
    single = single_step_v_backup(V, idx, replace(spec, variant=SingleStepV()))
    chunk = chunked_v_backup(V, chunks, replace(spec, variant=ChunkedV(h), noise=spec.noise.child(1)))
    return w * single + (1.0 - w) * chunk


def v_backup(V: np.ndarray, idx: SuccessorIndex, chunks: Optional[ChunkIndex], spec: BackupSpec) -> np.ndarray:
    """Dispatch on ``spec.variant``."""
    v = spec.variant
    if isinstance(v, SingleStepV):
        return single_step_v_backup(V, idx, spec)
    if isinstance(v, NStepV):
        return n_step_v_backup(V, chunks, spec)
    if isinstance(v, ChunkedV):
        return chunked_v_backup(V, chunks, spec)
    if isinstance(v, CGQBlendV):
        return cgq_blend_v_backup(V, idx, chunks, spec)
    raise BackupConfigError(f"{type(v).__name__} is not a V-level variant")


# ---------------------------------------------------------------------------
# Q tables
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class ChunkQTable:
    """Values for dataset-observed chunks, keyed by (start_state, action tuple)."""

    keys: Tuple[Tuple[int, Tuple[int, ...]], ...]
    values: np.ndarray

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=float)
        if vals.shape != (len(self.keys),):
            raise ValueError("one value per chunk key required")
        object.__setattr__(self, "values", vals)

    def __getitem__(self, key) -> float:
        return float(self.values[self.position[key]])

    @cached_property
    def position(self) -> Dict[Tuple[int, Tuple[int, ...]], int]:
        return {k: i for i, k in enumerate(self.keys)}

    def as_dict(self) -> Dict[Tuple[int, Tuple[int, ...]], float]:
        return dict(zip(self.keys, self.values.tolist()))

    def replace_values(self, values: np.ndarray) -> "ChunkQTable":
        out = ChunkQTable(self.keys, values)
        out.__dict__["position"] = self.position
        return out


class _QView:
    """Array form of the single-step (s, a) transitions of a successor index."""

    def __init__(self, idx: SuccessorIndex, gamma: float, n_actions: int):
        self.n_states, self.n_actions = idx.n_states, n_actions
        self.observed = np.zeros((idx.n_states, n_actions), dtype=bool)
        for s, a in idx.by_state_action:
            self.observed[s, a] = True
        rows, rew, boot, disc = [], [], [], []
        for (s, a), outs in sorted(idx.by_state_action.items()):
            for o in sorted(outs):
                rows.append(s * n_actions + a)
                rew.append(o.reward)
                boot.append(o.next_state)
                disc.append(0.0 if o.entered_goal else gamma)
        self.cand = _Candidates(rows, rew, boot, disc, idx.n_states * n_actions)

    def state_values(self, Q: np.ndarray) -> np.ndarray:
        """max over dataset-observed actions; 0 where no action is observed."""
        masked = np.where(self.observed, Q, -np.inf).max(axis=1)
        return np.where(np.isfinite(masked), masked, 0.0)

    def td_targets(self, Q: np.ndarray) -> np.ndarray:
        """Flat [S*A] expected one-step targets (mean over distinct observed outcomes)."""
        return self.cand.row_mean(self.state_values(Q))


class _ChunkView:
    """Array form of the chunk keys, their outcomes, and their coverage of (s, a) pairs."""

    def __init__(self, chunks: ChunkIndex, n_actions: int):
        h, gamma = chunks.h, chunks.gamma
        usable = [g for g in chunks.segments if g.length == h or g.truncated_at_goal]
        self.keys = tuple(sorted({(g.start_state, g.actions) for g in usable}))
        pos = {k: i for i, k in enumerate(self.keys)}
        outcomes = sorted({(pos[(g.start_state, g.actions)], g.reward, g.end_state, g.truncated_at_goal, g.length) for g in usable})
        self.cand = _Candidates(
            [o[0] for o in outcomes],
            [o[1] for o in outcomes],
            [o[2] for o in outcomes],
            [0.0 if o[3] else gamma ** o[4] for o in outcomes],
            len(self.keys),
        )
        self.n_states, self.n_actions = chunks.n_states, n_actions
        self.key_start = np.array([k[0] for k in self.keys], dtype=np.intp)
        self.key_first = np.array([k[1][0] for k in self.keys], dtype=np.intp)
        # flat (s, a) entry covered by each key; keys sharing an entry are averaged
        self.key_entry = self.key_start * n_actions + self.key_first
        counts = np.bincount(self.key_entry, minlength=self.n_states * n_actions).astype(float)
        self.entry_covered = counts > 0
        self.entry_inv_count = np.divide(1.0, counts, out=np.zeros_like(counts), where=counts > 0)

    def state_values(self, qc: np.ndarray) -> np.ndarray:
        out = np.full(self.n_states, -np.inf)
        np.maximum.at(out, self.key_start, qc)
        return np.where(np.isfinite(out), out, 0.0)

    def td_targets(self, qc: np.ndarray) -> np.ndarray:
        return self.cand.row_mean(self.state_values(qc))

    def entry_mean(self, per_key: np.ndarray) -> np.ndarray:
        """Average a per-key quantity onto the flat (s, a) entries each key covers."""
        return np.bincount(self.key_entry, weights=per_key, minlength=self.n_states * self.n_actions) * self.entry_inv_count

    def coverage_mean(self, qc: np.ndarray) -> np.ndarray:
        """Per (s, a): mean of the chunk values covering it (NaN where uncovered)."""
        m = self.entry_mean(qc)
        return np.where(self.entry_covered, m, np.nan).reshape(self.n_states, self.n_actions)


def _q_view(idx: SuccessorIndex, gamma: float, n_actions: int) -> _QView:
    key = ("_q_view", gamma, n_actions)
    view = idx.__dict__.get(key)
    if view is None:
        view = idx.__dict__[key] = _QView(idx, gamma, n_actions)
    return view


def _chunk_view(chunks: ChunkIndex, n_actions: int) -> _ChunkView:
    key = ("_chunk_view", n_actions)
    view = chunks.__dict__.get(key)
    if view is None:
        view = chunks.__dict__[key] = _ChunkView(chunks, n_actions)
    return view


def init_chunk_q(chunks: ChunkIndex, n_actions: int, value: float = 0.0) -> ChunkQTable:
    view = _chunk_view(chunks, n_actions)
    return ChunkQTable(view.keys, np.full(len(view.keys), float(value)))


def q_state_values(Q: np.ndarray, idx: SuccessorIndex, gamma: float = 0.9) -> np.ndarray:
    """Greedy state values of Q restricted to dataset-observed actions (0 if none)."""
    return _q_view(idx, gamma, Q.shape[1]).state_values(Q)


def chunk_state_values(Qc: ChunkQTable, chunks: ChunkIndex, n_actions: int) -> np.ndarray:
    return _chunk_view(chunks, n_actions).state_values(Qc.values)


def chunk_coverage_mean(Qc: ChunkQTable, chunks: ChunkIndex, n_actions: int) -> np.ndarray:
    """[S, A] mean of Qc over the chunks covering each (s, a); NaN where uncovered."""
    return _chunk_view(chunks, n_actions).coverage_mean(Qc.values)


# ---------------------------------------------------------------------------
# Q-level updates
# ---------------------------------------------------------------------------


def _apply(Q: np.ndarray, step: np.ndarray, mask: np.ndarray, alpha: float, noise: NoiseModel) -> np.ndarray:
    flat = np.asarray(Q, dtype=float).reshape(-1).copy()
    flat[mask] += alpha * step[mask] + noise.draw(flat.size)[mask]
    return flat.reshape(np.shape(Q))


def _td_step(Q: np.ndarray, view: _QView) -> np.ndarray:
    return view.td_targets(Q) - Q.reshape(-1)


def _expectile_pull(toward: np.ndarray, current: np.ndarray, tau: float) -> np.ndarray:
    """Gradient-descent direction of l_tau(toward - current) w.r.t. current."""
    u = toward - current
    return 2.0 * expectile_weight(u, tau) * u


def single_step_q_backup(Q: np.ndarray, idx: SuccessorIndex, spec: BackupSpec) -> np.ndarray:
    """Incremental TD step toward r + gamma max_a' Q(s', a') on every dataset (s, a)."""
    _require(spec, SingleStepQ, CGQRegQ, CGQMaxQ, CGQOppositeQ)
    Q = np.asarray(Q, dtype=float)
    view = _q_view(idx, spec.gamma, Q.shape[1])
    return _apply(Q, _td_step(Q, view), view.observed.reshape(-1), spec.step_size, spec.noise)


def chunked_q_backup(Qc: ChunkQTable, chunks: ChunkIndex, spec: BackupSpec, n_actions: int = 4) -> ChunkQTable:
    """Incremental step toward R + gamma^len max over chunks at the end state of Qc."""
    _require(spec, *Q_VARIANTS)
    if isinstance(spec.variant, SingleStepQ):
        raise BackupConfigError("chunked_q_backup needs a chunked variant")
    _check_chunk_h(spec.variant.h, chunks, spec.gamma)
    view = _chunk_view(chunks, n_actions)
    qc = Qc.values
    # -inf entries are "no chunk value" sentinels and stay frozen
    live = view.cand.covered & np.isfinite(qc)
    with np.errstate(invalid="ignore"):
        step = view.td_targets(qc) - qc
    return Qc.replace_values(_apply(qc, step, live, spec.step_size, spec.noise))


def _reg_pull(Q: np.ndarray, Qc: ChunkQTable, cview: _ChunkView, tau: float) -> np.ndarray:
    """Per flat (s, a): mean over covering chunks of the expectile pull toward Qc; 0 if uncovered."""
    flat = Q.reshape(-1)
    return cview.entry_mean(_expectile_pull(Qc.values, flat[cview.key_entry], tau))


def cgq_reg_q_update(
    Q: np.ndarray, Qc: ChunkQTable, idx: SuccessorIndex, chunks: ChunkIndex, spec: BackupSpec
) -> np.ndarray:
    """TD step plus beta times the upper-expectile pull of Q(s, a) toward the covering chunks."""
    _require(spec, CGQRegQ)
    v = spec.variant
    _check_chunk_h(v.h, chunks, spec.gamma)
    Q = np.asarray(Q, dtype=float)
    view = _q_view(idx, spec.gamma, Q.shape[1])
    step = _td_step(Q, view)
    if v.beta != 0.0:
        step = step + v.beta * _reg_pull(Q, Qc, _chunk_view(chunks, Q.shape[1]), v.tau)
    return _apply(Q, step, view.observed.reshape(-1), spec.step_size, spec.noise)


def cgq_variant_q_update(
    Q: np.ndarray, Qc: ChunkQTable, idx: SuccessorIndex, chunks: ChunkIndex, spec: BackupSpec
) -> Tuple[np.ndarray, ChunkQTable]:
    """One iteration of CGQ-Distill, CGQ-Max or CGQ-Opposite.

    The chunked critic is stepped first (noise stream ``child(1)``), then the single-step
    critic (``spec.noise``), in the same order as the CGQ training loop.
    """
    _require(spec, CGQDistillQ, CGQMaxQ, CGQOppositeQ)
    v = spec.variant
    _check_chunk_h(v.h, chunks, spec.gamma)
    Q = np.asarray(Q, dtype=float)
    n_actions = Q.shape[1]
    view = _q_view(idx, spec.gamma, n_actions)
    cview = _chunk_view(chunks, n_actions)
    alpha = spec.step_size
    chunk_noise = spec.noise.child(1)

    if isinstance(v, CGQOppositeQ):
        qc = Qc.values
        step_c = cview.td_targets(qc) - qc
        if v.beta != 0.0:
            step_c = step_c + v.beta * _expectile_pull(Q.reshape(-1)[cview.key_entry], qc, v.tau)
        Qc_new = Qc.replace_values(_apply(qc, step_c, cview.cand.covered, alpha, chunk_noise))
        Q_new = _apply(Q, _td_step(Q, view), view.observed.reshape(-1), alpha, spec.noise)
        return Q_new, Qc_new

    Qc_new = chunked_q_backup(Qc, chunks, replace(spec, noise=chunk_noise), n_actions)
    if isinstance(v, CGQDistillQ):
        step = v.beta * _reg_pull(Q, Qc_new, cview, v.tau)
        mask = view.observed.reshape(-1) & cview.entry_covered
        return _apply(Q, step, mask, alpha, spec.noise), Qc_new

    # CGQ-Max: per covering chunk, target max(TD target, Qc); averaged over covering chunks
    # written as td + mean(max(Qc - td, 0)) so that a chunk that never wins adds exactly zero
    td = view.td_targets(Q)
    bonus = np.maximum(Qc_new.values - td[cview.key_entry], 0.0)
    target = td + cview.entry_mean(bonus)
    return _apply(Q, target - Q.reshape(-1), view.observed.reshape(-1), alpha, spec.noise), Qc_new


def q_training_step(
    Q: np.ndarray, Qc: Optional[ChunkQTable], idx: SuccessorIndex, chunks: Optional[ChunkIndex], spec: BackupSpec
) -> Tuple[np.ndarray, Optional[ChunkQTable]]:
    """Advance both critics by one iteration for any Q-level variant."""
    v = spec.variant
    if isinstance(v, SingleStepQ):
        return single_step_q_backup(Q, idx, spec), Qc
    if isinstance(v, ChunkedQ):
        return Q, chunked_q_backup(Qc, chunks, spec, np.shape(Q)[1])
    if isinstance(v, CGQRegQ):
        Qc_new = chunked_q_backup(Qc, chunks, replace(spec, noise=spec.noise.child(1)), np.shape(Q)[1])
        return cgq_reg_q_update(Q, Qc_new, idx, chunks, spec), Qc_new
    return cgq_variant_q_update(Q, Qc, idx, chunks, spec)


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------


def value_error(V: np.ndarray, V_star: np.ndarray, eval_states) -> float:
    """Mean squared error of V against V_star over ``eval_states``."""
    states = np.asarray(sorted(eval_states) if isinstance(eval_states, (set, frozenset)) else eval_states, dtype=np.intp)
    if states.size == 0:
        raise ValueError("eval_states must be non-empty")
    diff = np.asarray(V, dtype=float)[states] - np.asarray(V_star, dtype=float)[states]
    return float(np.mean(diff * diff))
