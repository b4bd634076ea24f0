"""Offline dataset collection and the successor / chunk views consumed by the backups."""

from __future__ import annotations

import json
from collections import defaultdict
from dataclasses import dataclass
from typing import Dict, FrozenSet, Iterable, List, NamedTuple, Tuple

import numpy as np

from .mdp import TabularMDP


class Step(NamedTuple):
    state: int
    action: int
    reward: float
    next_state: int
    done: bool


class DatasetFormatError(ValueError):
    pass


@dataclass(frozen=True)
class Trajectory:
    steps: Tuple[Step, ...]

    def __post_init__(self):
        steps = tuple(Step(int(s), int(a), float(r), int(s2), bool(d)) for s, a, r, s2, d in self.steps)
        object.__setattr__(self, "steps", steps)
        for i in range(len(steps) - 1):
            if steps[i].next_state != steps[i + 1].state:
                raise ValueError(f"step {i} next_state does not match step {i + 1} state")
            if steps[i].done:
                raise ValueError("done may only be set on the final step")

    def __len__(self) -> int:
        return len(self.steps)


@dataclass(frozen=True)
class OfflineDataset:
    trajectories: Tuple[Trajectory, ...]
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "trajectories", tuple(self.trajectories))
        if not self.trajectories:
            raise ValueError("dataset must contain at least one trajectory")

    def transitions(self) -> Iterable[Step]:
        for traj in self.trajectories:
            yield from traj.steps

    def visited_states(self) -> np.ndarray:
        """Every state that appears in the dataset, as a source or a successor."""
        seen = set()
        for traj in self.trajectories:
            for st in traj.steps:
                seen.add(st.state)
                seen.add(st.next_state)
        return np.array(sorted(seen), dtype=int)


def collect_dataset(
    mdp: TabularMDP, behavior: np.ndarray, n_traj: int, max_len: int, seed: int
) -> OfflineDataset:
    """Roll out ``behavior`` from the MDP's initial distribution.

    Uses ``numpy.random.default_rng(seed)`` (PCG64) and draws, per trajectory, one start
    state followed by an (action, next state) pair per step, so the output is a pure
    function of the arguments.
    """
    if n_traj < 1 or max_len < 1:
        raise ValueError("n_traj and max_len must be at least 1")
    rng = np.random.default_rng(seed)
    trajectories = []
    for _ in range(n_traj):
        s = int(rng.choice(mdp.n_states, p=mdp.initial_dist))
        steps: List[Step] = []
        if mdp.terminal[s]:
            # starting in a terminal state: record a single absorbing step
            a = int(rng.choice(mdp.n_actions, p=behavior[s]))
            steps.append(Step(s, a, 0.0, s, True))
        while len(steps) < max_len and not (steps and steps[-1].done):
            a = int(rng.choice(mdp.n_actions, p=behavior[s]))
            s2 = int(rng.choice(mdp.n_states, p=mdp.transition[s, a]))
            steps.append(Step(s, a, float(mdp.reward[s, a]), s2, bool(mdp.terminal[s2])))
            s = s2
        trajectories.append(Trajectory(tuple(steps)))
    return OfflineDataset(tuple(trajectories), seed)


class Outcome(NamedTuple):
    reward: float
    next_state: int
    entered_goal: bool


@dataclass(frozen=True)
class SuccessorIndex:
    """Deduplicated one-step outcomes, keyed by state and by (state, action)."""

    by_state: Dict[int, FrozenSet[Outcome]]
    by_state_action: Dict[Tuple[int, int], FrozenSet[Outcome]]
    n_states: int

    def outcomes(self, s: int) -> FrozenSet[Outcome]:
        return self.by_state.get(s, frozenset())

    def actions(self, s: int) -> List[int]:
        return sorted(a for (s0, a) in self.by_state_action if s0 == s)


def successor_index(dataset: OfflineDataset, n_states: int) -> SuccessorIndex:
    by_state: Dict[int, set] = defaultdict(set)
    by_sa: Dict[Tuple[int, int], set] = defaultdict(set)
    for st in dataset.transitions():
        out = Outcome(st.reward, st.next_state, st.done)
        by_state[st.state].add(out)
        by_sa[(st.state, st.action)].add(out)
    return SuccessorIndex(
        {s: frozenset(v) for s, v in by_state.items()},
        {k: frozenset(v) for k, v in by_sa.items()},
        n_states,
    )


class Segment(NamedTuple):
    start_state: int
    actions: Tuple[int, ...]
    reward: float  # discounted sum over the segment
    end_state: int
    truncated_at_goal: bool
    length: int
    trajectory: int
    offset: int


@dataclass(frozen=True)
class ChunkIndex:
    h: int
    gamma: float
    segments: Tuple[Segment, ...]
    n_states: int

    def starts(self) -> FrozenSet[int]:
        return frozenset(seg.start_state for seg in self.segments)


def chunk_index(dataset: OfflineDataset, h: int, gamma: float, n_states: int) -> ChunkIndex:
    """Sliding-window segments of up to ``h`` steps at every in-trajectory offset.

    A segment stops early at the end of its trajectory; if that step entered the goal the
    segment is flagged ``truncated_at_goal`` and never bootstraps.
    """
    if h < 1:
        raise ValueError("chunk length h must be >= 1")
    segments = []
    for ti, traj in enumerate(dataset.trajectories):
        steps = traj.steps
        for t in range(len(steps)):
            window = steps[t : t + h]
            ret, disc = 0.0, 1.0
            for st in window:
                ret += disc * st.reward
                disc *= gamma
            segments.append(
                Segment(
                    window[0].state,
                    tuple(st.action for st in window),
                    ret,
                    window[-1].next_state,
                    window[-1].done,
                    len(window),
                    ti,
                    t,
                )
            )
    return ChunkIndex(h, gamma, tuple(segments), n_states)


def save_dataset(dataset: OfflineDataset) -> bytes:
    lines = []
    for traj in dataset.trajectories:
        steps = [[st.state, st.action, st.reward, st.next_state, st.done] for st in traj.steps]
        lines.append(json.dumps({"steps": steps}))
    return ("\n".join(lines) + "\n").encode()


def load_dataset(data: bytes, seed: int = 0) -> OfflineDataset:
    trajectories = []
    for lineno, line in enumerate(data.decode().splitlines(), start=1):
        if not line.strip():
            continue
        try:
            doc = json.loads(line)
            steps = tuple(Step(int(s), int(a), float(r), int(s2), bool(d)) for s, a, r, s2, d in doc["steps"])
            trajectories.append(Trajectory(steps))
        except (ValueError, KeyError, TypeError) as exc:
            raise DatasetFormatError(f"line {lineno}: malformed trajectory ({exc})") from exc
    if not trajectories:
        raise DatasetFormatError("no trajectories")
    return OfflineDataset(tuple(trajectories), seed)
