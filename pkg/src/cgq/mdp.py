"""Tabular MDPs, the goal-reaching gridworld, and exact dynamic-programming oracles."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional, Sequence, Tuple

import numpy as np

Cell = Tuple[int, int]  # (x, y)

# Actions: 0 up, 1 down, 2 left, 3 right. "up" decreases y.
ACTION_NAMES = ("up", "down", "left", "right")
ACTION_DELTAS: Tuple[Cell, ...] = ((0, -1), (0, 1), (-1, 0), (1, 0))


class MDPError(ValueError):
    pass


class ConvergenceError(RuntimeError):
    def __init__(self, message: str, residual: float):
        super().__init__(message)
        self.residual = residual


@dataclass(frozen=True, eq=False)
class TabularMDP:
    transition: np.ndarray  # [S, A, S]
    reward: np.ndarray  # [S, A]
    terminal: np.ndarray  # [S] bool
    gamma: float
    initial_dist: np.ndarray  # [S]

    def __post_init__(self):
        P = np.asarray(self.transition, dtype=float)
        R = np.asarray(self.reward, dtype=float)
        term = np.asarray(self.terminal, dtype=bool)
        mu = np.asarray(self.initial_dist, dtype=float)
        if P.ndim != 3 or P.shape[0] != P.shape[2]:
            raise MDPError(f"transition must have shape [S, A, S], got {P.shape}")
        S, A, _ = P.shape
        if R.shape != (S, A) or term.shape != (S,) or mu.shape != (S,):
            raise MDPError("reward/terminal/initial_dist shapes do not match transition")
        if not 0.0 < self.gamma < 1.0:
            raise MDPError(f"gamma must lie strictly inside (0, 1), got {self.gamma}")
        if np.any(P < 0) or not np.allclose(P.sum(axis=2), 1.0, atol=1e-9, rtol=0):
            raise MDPError("every transition row must be a probability vector")
        if np.any(mu < 0) or abs(mu.sum() - 1.0) > 1e-9:
            raise MDPError("initial_dist must be a probability vector")
        for s in np.flatnonzero(term):
            if not np.all(P[s, :, s] == 1.0) or np.any(R[s] != 0.0):
                raise MDPError(f"terminal state {s} must self-loop with reward 0")
        for name, arr in (("transition", P), ("reward", R), ("terminal", term), ("initial_dist", mu)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def n_states(self) -> int:
        return self.transition.shape[0]

    @property
    def n_actions(self) -> int:
        return self.transition.shape[1]

    def bellman_optimality(self, V: np.ndarray) -> np.ndarray:
        """One synchronous application of the Bellman optimality operator to V."""
        return self.q_from_v(V).max(axis=1)

    def q_from_v(self, V: np.ndarray) -> np.ndarray:
        Q = self.reward + self.gamma * self.transition @ V
        Q[self.terminal] = 0.0
        return Q

    def to_json(self) -> str:
        return json.dumps(
            {
                "n_states": self.n_states,
                "n_actions": self.n_actions,
                "gamma": self.gamma,
                "transition": self.transition.tolist(),
                "reward": self.reward.tolist(),
                "terminal": self.terminal.tolist(),
                "initial_dist": self.initial_dist.tolist(),
            }
        )

    @classmethod
    def from_json(cls, text: str) -> "TabularMDP":
        doc = json.loads(text)
        mdp = cls(
            transition=np.array(doc["transition"], dtype=float),
            reward=np.array(doc["reward"], dtype=float),
            terminal=np.array(doc["terminal"], dtype=bool),
            gamma=float(doc["gamma"]),
            initial_dist=np.array(doc["initial_dist"], dtype=float),
        )
        if mdp.n_states != doc["n_states"] or mdp.n_actions != doc["n_actions"]:
            raise MDPError("declared sizes disagree with the arrays")
        return mdp


@dataclass(frozen=True)
class GridWorldSpec:
    width: int = 18
    height: int = 18
    goal: Cell = (6, 8)
    goal_reward: float = 1.0
    step_reward: float = 0.0
    gamma: float = 0.9
    walls: frozenset = field(default_factory=frozenset)

    def __post_init__(self):
        object.__setattr__(self, "goal", tuple(self.goal))
        object.__setattr__(self, "walls", frozenset(tuple(w) for w in self.walls))
        if self.width < 1 or self.height < 1:
            raise MDPError("grid must have at least one cell")
        if not self.contains(self.goal):
            raise MDPError(f"goal {self.goal} lies outside the {self.width}x{self.height} grid")
        if self.goal in self.walls:
            raise MDPError("goal cell cannot be a wall")
        for w in self.walls:
            if not self.contains(w):
                raise MDPError(f"wall {w} lies outside the grid")

    def contains(self, cell: Cell) -> bool:
        x, y = cell
        return 0 <= x < self.width and 0 <= y < self.height

    def index(self, cell: Cell) -> int:
        x, y = cell
        return y * self.width + x

    def cell(self, index: int) -> Cell:
        return index % self.width, index // self.width

    @property
    def goal_index(self) -> int:
        return self.index(self.goal)


def build_gridworld(spec: GridWorldSpec) -> TabularMDP:
    """Deterministic four-action gridworld; moves off the grid or into a wall stay put.

    Wall cells are kept as (unreachable, absorbing) states so that indexing stays row-major
    over the full grid.
    """
    S, A = spec.width * spec.height, len(ACTION_DELTAS)
    P = np.zeros((S, A, S))
    R = np.full((S, A), float(spec.step_reward))
    terminal = np.zeros(S, dtype=bool)
    goal = spec.goal_index
    terminal[goal] = True
    for s in range(S):
        x, y = spec.cell(s)
        if s == goal or (x, y) in spec.walls:
            P[s, :, s] = 1.0
            R[s] = 0.0
            terminal[s] = True
            continue
        for a, (dx, dy) in enumerate(ACTION_DELTAS):
            nxt = (x + dx, y + dy)
            if not spec.contains(nxt) or nxt in spec.walls:
                nxt = (x, y)
            s2 = spec.index(nxt)
            P[s, a, s2] = 1.0
            if s2 == goal:
                R[s, a] = spec.goal_reward
    start = np.ones(S)
    start[goal] = 0.0
    for w in spec.walls:
        start[spec.index(w)] = 0.0
    if start.sum() == 0:
        start[goal] = 1.0
    return TabularMDP(P, R, terminal, spec.gamma, start / start.sum())


def value_iteration(
    mdp: TabularMDP, tol: float = 1e-12, max_iter: int = 100_000, V0: Optional[np.ndarray] = None
) -> np.ndarray:
    if tol <= 0:
        raise ValueError("tol must be positive")
    V = np.zeros(mdp.n_states) if V0 is None else np.array(V0, dtype=float)
    prev_delta = np.inf
    for _ in range(max_iter):
        V_new = mdp.bellman_optimality(V)
        delta = float(np.max(np.abs(V_new - V)))
        # contraction sanity check; slack absorbs floating-point noise near convergence
        assert delta <= mdp.gamma * prev_delta + 1e-12, "value iteration failed to contract"
        V, prev_delta = V_new, delta
        if delta * mdp.gamma / (1 - mdp.gamma) <= tol or delta == 0.0:
            return V
    raise ConvergenceError(f"value iteration did not converge in {max_iter} iterations", prev_delta)


def greedy(q: np.ndarray) -> np.ndarray:
    """Row-wise argmax, ties broken by the lowest index."""
    return np.argmax(q, axis=-1)


def policy_matrix(actions: Sequence[int], n_actions: int) -> np.ndarray:
    pi = np.zeros((len(actions), n_actions))
    pi[np.arange(len(actions)), actions] = 1.0
    return pi


def optimal_policy(mdp: TabularMDP, V: Optional[np.ndarray] = None) -> np.ndarray:
    if V is None:
        V = value_iteration(mdp)
    Q = mdp.q_from_v(V)
    # round away float noise so that equal-valued actions really tie
    return policy_matrix(greedy(np.round(Q, 12)), mdp.n_actions)


def epsilon_greedy(policy: np.ndarray, eps: float) -> np.ndarray:
    if not 0.0 <= eps <= 1.0:
        raise ValueError(f"eps must lie in [0, 1], got {eps}")
    n_actions = policy.shape[1]
    greedy_actions = greedy(policy)
    out = np.full(policy.shape, eps / n_actions)
    out[np.arange(len(policy)), greedy_actions] += 1.0 - eps
    return out


def exact_policy_evaluation(mdp: TabularMDP, policy: np.ndarray) -> np.ndarray:
    """Solve (I - gamma P_pi) V = r_pi directly."""
    policy = np.asarray(policy, dtype=float)
    if policy.shape != (mdp.n_states, mdp.n_actions) or not np.allclose(policy.sum(axis=1), 1.0, atol=1e-9):
        raise ValueError("policy rows must be probability vectors over actions")
    P_pi = np.einsum("sa,sat->st", policy, mdp.transition)
    r_pi = np.einsum("sa,sa->s", policy, mdp.reward)
    P_pi[mdp.terminal] = 0.0
    r_pi[mdp.terminal] = 0.0
    M = np.eye(mdp.n_states) - mdp.gamma * P_pi
    try:
        V = np.linalg.solve(M, r_pi)
    except np.linalg.LinAlgError as exc:
        raise MDPError("policy evaluation system is singular") from exc
    residual = np.max(np.abs(M @ V - r_pi))
    if residual > 1e-10:
        raise MDPError(f"policy evaluation residual {residual:.3e} exceeds 1e-10")
    return V


def random_mdp(n_states: int, n_actions: int, gamma: float, seed: int, n_terminal: int = 0) -> TabularMDP:
    """Dense random MDP used by property tests."""
    rng = np.random.default_rng(seed)
    P = rng.dirichlet(np.ones(n_states), size=(n_states, n_actions))
    R = rng.uniform(-1.0, 1.0, size=(n_states, n_actions))
    terminal = np.zeros(n_states, dtype=bool)
    terminal[n_states - n_terminal:] = True
    for s in np.flatnonzero(terminal):
        P[s] = 0.0
        P[s, :, s] = 1.0
        R[s] = 0.0
    return TabularMDP(P, R, terminal, gamma, np.full(n_states, 1.0 / n_states))


def manhattan_distances(spec: GridWorldSpec) -> np.ndarray:
    gx, gy = spec.goal
    return np.array([abs(x - gx) + abs(y - gy) for x, y in map(spec.cell, range(spec.width * spec.height))])
