"""Noisy contraction iterations and the error bounds of regularized TD on affine operators.

All norms here are the uniform mean-square norm ``||x||^2 = mean(x_i^2)``. Noise vectors
have i.i.d. N(0, sigma^2) coordinates, so ``E||eps||^2 = sigma^2`` independent of ``n``.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence, Tuple, Union

import numpy as np

from .mdp import TabularMDP


class OperatorError(ValueError):
    pass


def ms_norm(x: np.ndarray) -> float:
    x = np.asarray(x, dtype=float)
    return float(np.sqrt(np.mean(x * x)))


def spectral_norm(A: np.ndarray, iters: int = 1000, seed: int = 0, tol: float = 1e-13) -> float:
    """Largest singular value of ``A`` by power iteration on A^T A."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    x = np.random.default_rng(seed).standard_normal(A.shape[1])
    x /= np.linalg.norm(x)
    est = 0.0
    for _ in range(iters):
        y = A.T @ (A @ x)
        ny = np.linalg.norm(y)
        if ny == 0.0:
            return 0.0
        x = y / ny
        new = math.sqrt(ny)
        if abs(new - est) <= tol * new:
            return new
        est = new
    return est


@dataclass(frozen=True, eq=False)
class LinearOperatorSpec:
    """Affine map Q -> A Q + b with ||A||_2 <= gamma."""

    A: np.ndarray
    b: np.ndarray
    gamma: float

    def __post_init__(self):
        A = np.atleast_2d(np.asarray(self.A, dtype=float))
        b = np.atleast_1d(np.asarray(self.b, dtype=float))
        if A.shape != (b.size, b.size):
            raise OperatorError(f"A must be {b.size}x{b.size}, got {A.shape}")
        if not 0.0 < self.gamma < 1.0:
            raise OperatorError("gamma must lie strictly inside (0, 1)")
        norm = float(np.linalg.norm(A, 2))
        if norm > self.gamma + 1e-10:
            raise OperatorError(f"operator norm {norm:.12g} exceeds gamma={self.gamma}")
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "b", b)

    @property
    def n(self) -> int:
        return self.b.size

    @property
    def lipschitz(self) -> float:
        return self.gamma

    def apply(self, Q: np.ndarray, noise: Optional[np.ndarray] = None) -> np.ndarray:
        """Apply to a vector or to a batch of row vectors, optionally adding noise before any scaling."""
        out = Q @ self.A.T + self.b
        return out if noise is None else out + noise

    def fixed_point(self) -> np.ndarray:
        return exact_fixed_point(self)


@dataclass(frozen=True, eq=False)
class RegularizedOperatorSpec:
    """Q -> (T Q + beta q_c) / (1 + beta); noise enters through T, so it is scaled by 1/(1+beta)."""

    base: LinearOperatorSpec
    q_c: np.ndarray
    beta: float

    def __post_init__(self):
        q_c = np.atleast_1d(np.asarray(self.q_c, dtype=float))
        if q_c.shape != self.base.b.shape:
            raise OperatorError("q_c must match the operator dimension")
        if self.beta < 0:
            raise OperatorError("beta must be non-negative")
        object.__setattr__(self, "q_c", q_c)

    @property
    def n(self) -> int:
        return self.base.n

    @property
    def gamma(self) -> float:
        return self.base.gamma

    @property
    def lipschitz(self) -> float:
        return self.base.gamma / (1.0 + self.beta)

    def apply(self, Q: np.ndarray, noise: Optional[np.ndarray] = None) -> np.ndarray:
        return (self.base.apply(Q, noise) + self.beta * self.q_c) / (1.0 + self.beta)

    def fixed_point(self) -> np.ndarray:
        return exact_fixed_point(self)


Operator = Union[LinearOperatorSpec, RegularizedOperatorSpec]


def _random_orthogonal(rng: np.random.Generator, n: int) -> np.ndarray:
    q, r = np.linalg.qr(rng.standard_normal((n, n)))
    return q * np.sign(np.diag(r))


def make_contraction(n: int, gamma: float, seed: int, spectrum: str = "uniform") -> LinearOperatorSpec:
    """Random affine gamma-contraction ``A = U diag(s) V^T``, ``b ~ U[-1, 1]^n``.

    ``spectrum="uniform"`` draws singular values uniformly in [0, gamma]; ``"flat"`` sets
    every singular value to gamma, which makes the noise amplification hit the worst case.
    """
    if n < 1:
        raise OperatorError("n must be >= 1")
    if not 0.0 < gamma < 1.0:
        raise OperatorError("gamma must lie strictly inside (0, 1)")
    rng = np.random.default_rng(seed)
    if spectrum == "uniform":
        s = rng.uniform(0.0, gamma, n)
    elif spectrum == "flat":
        s = np.full(n, gamma)
    else:
        raise OperatorError(f"unknown spectrum {spectrum!r}")
    U, V = _random_orthogonal(rng, n), _random_orthogonal(rng, n)
    A = (U * s) @ V.T
    b = rng.uniform(-1.0, 1.0, n)
    return LinearOperatorSpec(A, b, gamma)


def contraction_from_mdp(mdp: TabularMDP, policy: np.ndarray) -> LinearOperatorSpec:
    """Policy-evaluation operator V -> r_pi + gamma P_pi V, if it contracts in the L2 norm."""
    P_pi = np.einsum("sa,sat->st", policy, mdp.transition)
    r_pi = np.einsum("sa,sa->s", policy, mdp.reward)
    A = mdp.gamma * P_pi
    measured = spectral_norm(A)
    if measured > mdp.gamma + 1e-10:
        raise OperatorError(f"gamma * P_pi has L2 norm {measured:.6g} > gamma = {mdp.gamma}")
    return LinearOperatorSpec(A, r_pi, mdp.gamma)


def exact_fixed_point(op: Operator) -> np.ndarray:
    if isinstance(op, RegularizedOperatorSpec):
        k = 1.0 + op.beta
        A = op.base.A / k
        rhs = (op.base.b + op.beta * op.q_c) / k
    else:
        A, rhs = op.A, op.b
    M = np.eye(op.n) - A
    Q = np.linalg.solve(M, rhs)
    residual = np.max(np.abs(M @ Q - rhs))
    if residual > 1e-10 * max(1.0, np.max(np.abs(rhs))):
        raise OperatorError(f"fixed-point residual {residual:.3e} too large")
    return Q


@dataclass
class SimulationResult:
    mse_curve: np.ndarray  # [k_max + 1], index k is E||Q_k - reference||^2
    asymptotic_mse: float
    stderr: float
    per_chain: np.ndarray


def simulate_noisy_iteration(
    op: Operator,
    sigma: float,
    k_max: int,
    burn_in: Optional[int] = None,
    n_seeds: int = 100,
    master_seed: int = 0,
    reference: Optional[np.ndarray] = None,
    block: int = 256,
) -> SimulationResult:
    """Run ``n_seeds`` chains ``Q_{k+1} = op(Q_k) + noise`` from ``Q_0 = 0``.

    Errors are measured against ``reference`` (default: the fixed point of the base
    operator, i.e. the unregularized Q*). Chain ``i`` draws from
    ``default_rng([master_seed, i])``. The asymptotic estimate is the mean over chains of
    each chain's time-average over ``k > burn_in``; its standard error comes from the spread
    of those per-chain averages.
    """
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    burn_in = k_max // 2 if burn_in is None else burn_in
    if not 0 <= burn_in < k_max:
        raise ValueError("need 0 <= burn_in < k_max")
    if reference is None:
        reference = exact_fixed_point(op.base if isinstance(op, RegularizedOperatorSpec) else op)
    n = op.n
    rngs = [np.random.default_rng([master_seed, i]) for i in range(n_seeds)]
    Q = np.zeros((n_seeds, n))
    sq = np.empty((k_max + 1, n_seeds))
    sq[0] = np.mean((Q - reference) ** 2, axis=1)
    k = 0
    while k < k_max:
        m = min(block, k_max - k)
        if sigma > 0:
            eps = np.stack([r.normal(0.0, sigma, (m, n)) for r in rngs], axis=1)
        for j in range(m):
            Q = op.apply(Q, eps[j] if sigma > 0 else None)
            k += 1
            sq[k] = np.mean((Q - reference) ** 2, axis=1)
    per_chain = sq[burn_in + 1 :].mean(axis=0)
    stderr = float(per_chain.std(ddof=1) / math.sqrt(n_seeds)) if n_seeds > 1 else float("nan")
    return SimulationResult(sq.mean(axis=1), float(per_chain.mean()), stderr, per_chain)


def theorem1_bound(sigma: float, gamma: float) -> float:
    """sigma^2 / (1 - gamma^2)."""
    if not 0.0 < gamma < 1.0:
        raise ValueError("gamma must lie strictly inside (0, 1)")
    return sigma**2 / (1.0 - gamma**2)


def theorem2_bound(sigma: float, gamma: float, beta: float, dist: float, L: float = 0.0) -> float:
    """Variance + regularization bias + curvature cross term; ``beta=inf`` gives dist^2."""
    if not 0.0 < gamma < 1.0 or beta < 0:
        raise ValueError("need gamma in (0, 1) and beta >= 0")
    if math.isinf(beta):
        return dist**2
    k = 1.0 + beta
    var_den = k * k - gamma * gamma
    if var_den <= 0:
        raise ValueError("(1 + beta)^2 must exceed gamma^2")
    bias_den = (k - gamma) ** 2
    return sigma**2 / var_den + beta**2 * dist**2 / bias_den + L * k * beta * dist * sigma**2 / (var_den * bias_den)


def bias_bound(gamma: float, beta: float, dist: float) -> float:
    """Upper bound on ||Q* - Q*_beta||."""
    if math.isinf(beta):
        return dist
    return beta / (1.0 - gamma + beta) * dist


def bias_bound_check(op: LinearOperatorSpec, q_c: np.ndarray, beta: float) -> Tuple[float, float, bool]:
    q_star = exact_fixed_point(op)
    q_beta = exact_fixed_point(RegularizedOperatorSpec(op, q_c, beta))
    lhs = ms_norm(q_star - q_beta)
    q_c = np.asarray(q_c, dtype=float)
    rhs = bias_bound(op.gamma, beta, ms_norm(q_star - q_c))
    # relative tolerance, plus a round-off floor for the rhs = 0 case (q_c = Q*)
    floor = 1e-12 * max(1.0, ms_norm(q_star), ms_norm(q_c))
    return lhs, rhs, bool(lhs <= rhs * (1.0 + 1e-9) + floor)


def contraction_factor_check(op: Operator, n_pairs: int, seed: int = 0) -> float:
    """Largest observed ||T Q1 - T Q2|| / ||Q1 - Q2|| over random pairs."""
    if n_pairs < 1:
        raise ValueError("n_pairs must be >= 1")
    rng = np.random.default_rng(seed)
    worst = 0.0
    done = 0
    while done < n_pairs:
        scale = 10.0 ** rng.uniform(-3, 3)
        Q1 = rng.standard_normal(op.n) * scale
        Q2 = rng.standard_normal(op.n) * scale
        d = ms_norm(Q1 - Q2)
        if d == 0.0:
            continue
        worst = max(worst, ms_norm(op.apply(Q1) - op.apply(Q2)) / d)
        done += 1
    return worst


@dataclass
class BoundReport:
    beta_grid: np.ndarray
    empirical_mse: np.ndarray
    stderr: np.ndarray
    theoretical_bound: np.ndarray
    bias_bound: np.ndarray  # squared, comparable with the MSE columns
    exact_bias_sq: np.ndarray
    dist_sq: float
    argmin_beta: float
    endpoints: Tuple[float, float] = field(default=(math.nan, math.nan))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["beta", "empirical_mse", "stderr", "theoretical_bound", "bias_bound"])
        for row in zip(self.beta_grid, self.empirical_mse, self.stderr, self.theoretical_bound, self.bias_bound):
            w.writerow([f"{x:.17g}" for x in row])
        return buf.getvalue()

    @property
    def argmin_index(self) -> int:
        return int(np.argmin(self.empirical_mse))

    def interior_optimum(self, n_se: float = 3.0) -> bool:
        """Interior grid argmin that beats both beta=0 and the pure-target error by n_se standard errors."""
        i = self.argmin_index
        if i == 0 or i == len(self.beta_grid) - 1:
            return False
        best, se = self.empirical_mse[i], self.stderr[i]
        gap0 = self.empirical_mse[0] - best
        gap_target = self.dist_sq - best
        return bool(gap0 >= n_se * math.hypot(se, self.stderr[0]) and gap_target >= n_se * se)

    def bound_satisfied(self, n_se: float = 3.0) -> bool:
        return bool(np.all(self.empirical_mse <= self.theoretical_bound + n_se * self.stderr))


def beta_sweep(
    op: LinearOperatorSpec,
    q_c: np.ndarray,
    sigma: float,
    beta_grid: Sequence[float],
    k_max: int = 2000,
    burn_in: Optional[int] = None,
    n_seeds: int = 100,
    master_seed: int = 0,
) -> BoundReport:
    grid = np.asarray(beta_grid, dtype=float)
    if grid.size == 0 or grid[0] != 0.0 or np.any(np.diff(grid) <= 0):
        raise ValueError("beta_grid must be non-empty, strictly increasing and start at 0")
    q_c = np.asarray(q_c, dtype=float)
    q_star = exact_fixed_point(op)
    dist = ms_norm(q_star - q_c)
    mse, se, bound, bias_b, bias_x = [], [], [], [], []
    for beta in grid:
        reg = RegularizedOperatorSpec(op, q_c, beta)
        res = simulate_noisy_iteration(reg, sigma, k_max, burn_in, n_seeds, master_seed, reference=q_star)
        mse.append(res.asymptotic_mse)
        se.append(res.stderr)
        bound.append(theorem2_bound(sigma, op.gamma, beta, dist, L=0.0))
        bias_b.append(bias_bound(op.gamma, beta, dist) ** 2)
        bias_x.append(ms_norm(exact_fixed_point(reg) - q_star) ** 2)
    mse = np.array(mse)
    return BoundReport(
        beta_grid=grid,
        empirical_mse=mse,
        stderr=np.array(se),
        theoretical_bound=np.array(bound),
        bias_bound=np.array(bias_b),
        exact_bias_sq=np.array(bias_x),
        dist_sq=dist**2,
        argmin_beta=float(grid[int(np.argmin(mse))]),
        endpoints=(float(mse[0]), dist**2),
    )
