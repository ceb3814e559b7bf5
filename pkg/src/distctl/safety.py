"""Norm-1 discrete-time exponential CBFs and their linear horizon constraints.

The absolute values in the barrier are resolved by fixing, per pair, the
orthant of the measured relative position at the start of an MPC step. Under
fixed signs the barrier is affine in positions, positions are affine in the
stacked decisions, and every decrement condition becomes one linear row.
"""
from __future__ import annotations

from dataclasses import dataclass
from itertools import combinations

import numpy as np

from .model import AgentModel, AgentState, ErrorState, rollout_matrices


@dataclass(frozen=True)
class CbfParams:
    r1: float = 0.5
    r2: float = 0.25
    gamma: float = 0.1
    # back-off subtracted from each normalized row's right-hand side
    margin: float = 0.0

    def __post_init__(self):
        if not (self.r1 > 0 and self.r2 > 0):
            raise ValueError(f"unsafe radii must be positive, got r1={self.r1}, r2={self.r2}")
        if not 0 < self.gamma <= 1:
            raise ValueError(f"gamma must lie in (0, 1], got {self.gamma}")
        if self.margin < 0:
            raise ValueError(f"margin must be nonnegative, got {self.margin}")


@dataclass(frozen=True)
class OrthantSigns:
    sx: int
    sy: int


@dataclass(frozen=True)
class SafeSetCheck:
    pair: tuple[int, int]
    k: int
    value: float


@dataclass
class PairRows:
    """``H`` inequalities ``coeff_i @ u_i + coeff_j @ u_j <= rhs`` for one pair."""
    pair: tuple[int, int]
    coeff_i: np.ndarray
    coeff_j: np.ndarray
    rhs: np.ndarray


@dataclass
class CoupledConstraintBlock:
    A: np.ndarray
    b: np.ndarray
    row_tags: list[tuple[tuple[int, int], int]]

    @property
    def m(self) -> int:
        return self.A.shape[0]

    def g(self, u) -> np.ndarray:
        """Local share ``A_i u_i - b_i`` of the coupled constraint."""
        return self.A @ u - self.b


def barrier_value(dp, params: CbfParams) -> float:
    dp = np.asarray(dp, dtype=float)
    return abs(dp[0]) / params.r1 + abs(dp[1]) / params.r2 - 1.0


def linearized_barrier(dp, signs: OrthantSigns, params: CbfParams) -> float:
    dp = np.asarray(dp, dtype=float)
    return signs.sx * dp[0] / params.r1 + signs.sy * dp[1] / params.r2 - 1.0


def decrement_satisfied(h_next: float, h_now: float, gamma: float) -> bool:
    return h_next - h_now >= -gamma * h_now


def fix_orthant(state_i: AgentState, state_j: AgentState) -> OrthantSigns:
    dp = state_i.p - state_j.p
    return OrthantSigns(1 if dp[0] >= 0 else -1, 1 if dp[1] >= 0 else -1)


def all_pairs(n: int) -> list[tuple[int, int]]:
    return list(combinations(range(n), 2))


def assemble_pair_constraints(model: AgentModel, e_i0: ErrorState, e_j0: ErrorState,
                              signs: OrthantSigns, params: CbfParams, H: int,
                              targets, pair: tuple[int, int] = (0, 1),
                              matrices=None, normalize: bool = True) -> PairRows:
    """Linear rows for ``h[k+1] >= (1 - gamma) h[k]``, ``k = 0..H-1``.

    ``targets`` is ``(target_i, target_j)``. ``matrices`` optionally passes
    precomputed ``rollout_matrices(model, H)``. With ``normalize`` each row is
    divided by the norm of its ``u_i`` coefficients, which leaves the feasible
    set unchanged and puts all rows on the same (acceleration) scale.
    """
    Phi, Gamma = matrices if matrices is not None else rollout_matrices(model, H)
    if Gamma.shape[1] != 2 * H:
        raise ValueError(f"rollout matrices built for H={Gamma.shape[1] // 2}, requested H={H}")
    t_i, t_j = (np.asarray(t, dtype=float).reshape(2) for t in targets)
    c = np.array([signs.sx / params.r1, signs.sy / params.r2])
    keep = 1.0 - params.gamma

    # position rows of each stacked block
    pos = np.ravel([[4 * l, 4 * l + 1] for l in range(H + 1)])
    d0 = (t_i - t_j) + (Phi[pos] @ (e_i0.e - e_j0.e)).reshape(H + 1, 2)
    G = Gamma[pos].reshape(H + 1, 2, 2 * H)

    coeff_i = np.empty((H, 2 * H))
    rhs = np.empty(H)
    for k in range(H):
        coeff_i[k] = -c @ (G[k + 1] - keep * G[k])
        rhs[k] = c @ (d0[k + 1] - keep * d0[k]) - params.gamma
    if normalize:
        scale = np.linalg.norm(coeff_i, axis=1)
        coeff_i /= scale[:, None]
        rhs /= scale
    rhs -= params.margin
    return PairRows(tuple(pair), coeff_i, -coeff_i, rhs)


def split_blocks(pair_rows: list[PairRows], agent_count: int,
                 agents=None) -> list[CoupledConstraintBlock]:
    """Split stacked pair rows into per-agent ``(A_i, b_i)`` blocks.

    The right-hand side of each pair row is shared equally by its two agents.
    ``agents`` restricts which blocks are built (the rest are ``None``).
    """
    if not pair_rows:
        empty = [CoupledConstraintBlock(np.zeros((0, 0)), np.zeros(0), [])
                 for _ in range(agent_count)]
        return empty
    H = pair_rows[0].rhs.size
    width = pair_rows[0].coeff_i.shape[1]
    for pr in pair_rows:
        if pr.rhs.size != H or pr.coeff_i.shape != (H, width) or pr.coeff_j.shape != (H, width):
            raise ValueError(f"inconsistent row counts for pair {pr.pair}")
    m = H * len(pair_rows)
    wanted = range(agent_count) if agents is None else agents
    tags = [(pr.pair, k) for pr in pair_rows for k in range(H)]
    blocks: list = [None] * agent_count
    for a in wanted:
        A = np.zeros((m, width))
        b = np.zeros(m)
        for r, pr in enumerate(pair_rows):
            rows = slice(r * H, (r + 1) * H)
            if pr.pair[0] == a:
                A[rows] = pr.coeff_i
                b[rows] = pr.rhs / 2
            elif pr.pair[1] == a:
                A[rows] = pr.coeff_j
                b[rows] = pr.rhs / 2
        blocks[a] = CoupledConstraintBlock(A, b, list(tags))
    return blocks


def assemble_blocks(model: AgentModel, states: list[AgentState], targets, params: CbfParams,
                    H: int, agents=None, matrices=None) -> list[CoupledConstraintBlock]:
    """All-pairs constraint blocks from a snapshot of every agent's state.

    Pairs not involving any agent in ``agents`` are skipped; their rows stay
    zero in the requested blocks.
    """
    n = len(states)
    matrices = matrices if matrices is not None else rollout_matrices(model, H)
    wanted = set(range(n) if agents is None else agents)
    rows = []
    for i, j in all_pairs(n):
        if i in wanted or j in wanted:
            e_i = ErrorState(np.concatenate([states[i].p - targets[i], states[i].v]))
            e_j = ErrorState(np.concatenate([states[j].p - targets[j], states[j].v]))
            rows.append(assemble_pair_constraints(
                model, e_i, e_j, fix_orthant(states[i], states[j]), params, H,
                (targets[i], targets[j]), pair=(i, j), matrices=matrices))
        else:
            zero = np.zeros((H, 2 * H))
            rows.append(PairRows((i, j), zero, zero, np.zeros(H)))
    return split_blocks(rows, n, agents=sorted(wanted))


def pair_barriers(positions, params: CbfParams) -> dict[tuple[int, int], float]:
    positions = np.asarray(positions, dtype=float)
    return {(i, j): barrier_value(positions[i] - positions[j], params)
            for i, j in all_pairs(len(positions))}
