import numpy as np
import pytest

from cgq.dataset import OfflineDataset, Step, Trajectory, chunk_index, collect_dataset, successor_index
from cgq.mdp import GridWorldSpec, build_gridworld, epsilon_greedy, optimal_policy, value_iteration

# criterion id -> (passed, detail); filled by test_acceptance.py, printed at the end of the run
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for cid in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[cid]
        terminalreporter.write_line(f"criterion {cid}: {'PASS' if ok else 'FAIL'}  {detail}")


@pytest.fixture(scope="session")
def grid():
    spec = GridWorldSpec()
    mdp = build_gridworld(spec)
    return spec, mdp, value_iteration(mdp)


@pytest.fixture(scope="session")
def default_dataset(grid):
    _, mdp, v_star = grid
    behavior = epsilon_greedy(optimal_policy(mdp, v_star), 0.9)
    return collect_dataset(mdp, behavior, 60, 15, 0)


@pytest.fixture(scope="session")
def default_idx(default_dataset):
    return successor_index(default_dataset, 324)


@pytest.fixture(scope="session")
def default_chunks(default_dataset):
    return chunk_index(default_dataset, 4, 0.9, 324)


def full_coverage_dataset(mdp):
    """One single-step trajectory for every (non-terminal state, action) of a deterministic MDP."""
    trajs = []
    for s in range(mdp.n_states):
        if mdp.terminal[s]:
            continue
        for a in range(mdp.n_actions):
            s2 = int(np.argmax(mdp.transition[s, a]))
            trajs.append(Trajectory((Step(s, a, float(mdp.reward[s, a]), s2, bool(mdp.terminal[s2])),)))
    return OfflineDataset(tuple(trajs))


def small_grid(width=5, height=4, goal=(3, 1)):
    spec = GridWorldSpec(width=width, height=height, goal=goal)
    return spec, build_gridworld(spec)
