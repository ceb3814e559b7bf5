"""Distributed primal-dual Nash-equilibrium seeking with gradient tracking.

Each worker keeps its decision ``u``, a tracker ``s`` of the aggregate
``sigma = mean_j phi_j(u_j)``, a tracker ``y`` of the fleet-average coupled
constraint value ``mean_j (A_j u_j - b_j)`` and a dual estimate ``lam``. One
round is: exchange ``(s, y, lam)`` with neighbours, projected pseudo-gradient
step on ``u``, dynamic-average updates of both trackers, consensus dual ascent.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, replace
from typing import Callable, Mapping

import numpy as np

from .game import LocalGame, project_box
from .safety import CoupledConstraintBlock

log = logging.getLogger(__name__)

WEIGHT_TOL = 1e-12


@dataclass(frozen=True)
class SolverParams:
    alpha_p: float = 0.03
    alpha_d: float = 1.0
    eps: float = 1e-3
    p_max: int = 500
    warm_start: bool = True

    def __post_init__(self):
        if not (self.alpha_p > 0 and self.alpha_d > 0):
            raise ValueError("step sizes must be positive")
        if not self.eps > 0:
            raise ValueError("stopping threshold must be positive")
        if self.p_max < 1:
            raise ValueError("p_max must be at least 1")


@dataclass
class SolverLocalState:
    u: np.ndarray
    s: np.ndarray
    y: np.ndarray
    lam: np.ndarray
    iter: int = 0
    converged_local: bool = False
    flag_age: int = 0


@dataclass
class SolverMessage:
    s: np.ndarray
    y: np.ndarray
    lam: np.ndarray


@dataclass
class InnerResult:
    u: np.ndarray
    iterations: int
    converged: bool
    state: SolverLocalState

    @property
    def control(self) -> np.ndarray:
        return self.u[:2]


def shift_warm_start(u_prev) -> np.ndarray:
    u_prev = np.asarray(u_prev, dtype=float)
    return np.concatenate([u_prev[2:], u_prev[-2:]])


def init_local(u_prev, block: CoupledConstraintBlock, game: LocalGame,
               warm_start: bool = True, lam_prev=None) -> SolverLocalState:
    width = 2 * game.H
    if block.m and block.A.shape[1] != width:
        raise ValueError(f"constraint block has {block.A.shape[1]} columns, decision has {width}")
    if u_prev is not None and warm_start:
        if np.size(u_prev) != width:
            raise ValueError(f"warm start has {np.size(u_prev)} entries, expected {width}")
        u = project_box(shift_warm_start(u_prev), game.model.a_max)
    else:
        u = np.zeros(width)
    y = block.g(u) if block.m else np.zeros(0)
    lam = np.zeros(block.m)
    # previous multipliers are reused unshifted: active rows tend to keep their index
    if lam_prev is not None and warm_start and np.size(lam_prev) == block.m:
        lam = np.maximum(0.0, np.asarray(lam_prev, dtype=float))
    return SolverLocalState(u=u, s=game.phi(u), y=y, lam=lam)


def primal_step(state: SolverLocalState, sigma_tracker, block: CoupledConstraintBlock,
                params: SolverParams, game: LocalGame) -> np.ndarray:
    direction = game.pseudo_gradient(state.u, sigma_tracker)
    if block.m:
        direction = direction + block.A.T @ state.lam
    return project_box(state.u - params.alpha_p * direction, game.model.a_max)


def _check_weights(weights: Mapping[int, float]):
    total = math.fsum(weights.values())
    if abs(total - 1.0) > WEIGHT_TOL:
        raise ValueError(f"consensus weights sum to {total!r}, not 1")


def tracker_update(old_local, new_local, trackers: Mapping[int, np.ndarray],
                   weights: Mapping[int, float]) -> np.ndarray:
    """Dynamic average consensus: ``sum_j w_ij t_j + (new_local - old_local)``.

    ``trackers`` and ``weights`` are keyed by agent id and include the agent
    itself.
    """
    _check_weights(weights)
    mixed = sum(weights[j] * trackers[j] for j in sorted(weights))
    return mixed + (np.asarray(new_local) - np.asarray(old_local))


def dual_step(y_new, lambdas: Mapping[int, np.ndarray], weights: Mapping[int, float],
              params: SolverParams, N: int) -> np.ndarray:
    _check_weights(weights)
    mixed = sum(weights[j] * lambdas[j] for j in sorted(weights))
    return np.maximum(0.0, mixed + params.alpha_d * N * np.asarray(y_new))


def check_stop(u_diff: float, lambda_diff: float, eps: float) -> bool:
    return max(u_diff, lambda_diff) < eps


Exchange = Callable[..., Mapping[int, "object"]]


def inner_loop(agent: int, game: LocalGame, block: CoupledConstraintBlock, params: SolverParams,
               weights: Mapping[int, float], N: int, diameter: int, exchange: Exchange,
               u_prev=None, trace: Callable | None = None, lam_prev=None) -> InnerResult:
    """Run synchronous rounds until fleet-wide convergence or ``p_max``.

    ``exchange(round, payload, control=..., reliable=...)`` must return a
    mapping from each neighbour id to a message with ``payload`` and
    ``control`` attributes. Termination: once an agent has seen converged
    flags spread over ``diameter + 1`` consecutive rounds it proposes a stop
    round ``diameter`` rounds ahead; proposals are flooded by taking the
    minimum, so every agent leaves the loop in the same round.
    """
    _check_weights(weights)
    st = init_local(u_prev, block, game, params.warm_start, lam_prev)
    g_old = st.y.copy()
    phi_old = st.s.copy()
    stop_at = math.inf
    order = sorted(weights)

    for t in range(params.p_max):
        msgs = exchange(t, SolverMessage(st.s, st.y, st.lam),
                        control=(st.flag_age, stop_at), reliable=(t == 0))
        ages = [st.flag_age]
        for j, msg in msgs.items():
            age_j, stop_j = msg.control
            ages.append(age_j)
            stop_at = min(stop_at, stop_j)
        if t >= stop_at:
            return InnerResult(st.u, t, True, st)

        s_all = {j: msgs[j].payload.s for j in msgs}
        s_all[agent] = st.s
        u_new = primal_step(st, st.s, block, params, game)
        phi_new = game.phi(u_new)
        s_new = tracker_update(phi_old, phi_new, s_all, weights)
        if block.m:
            y_all = {j: msgs[j].payload.y for j in msgs}
            y_all[agent] = st.y
            lam_all = {j: msgs[j].payload.lam for j in msgs}
            lam_all[agent] = st.lam
            g_new = block.g(u_new)
            y_new = tracker_update(g_old, g_new, y_all, weights)
            lam_new = dual_step(y_new, lam_all, weights, params, N)
            lam_diff = float(np.max(np.abs(lam_new - st.lam)))
        else:
            g_new, y_new, lam_new, lam_diff = g_old, st.y, st.lam, 0.0
        u_diff = float(np.max(np.abs(u_new - st.u)))

        converged = check_stop(u_diff, lam_diff, params.eps)
        age = min(ages) + 1 if converged else 0
        st = replace(st, u=u_new, s=s_new, y=y_new, lam=lam_new, iter=t + 1,
                     converged_local=converged, flag_age=age)
        phi_old, g_old = phi_new, g_new
        if age >= diameter + 1 and math.isinf(stop_at):
            stop_at = t + diameter + 1
        if trace is not None:
            trace(agent, t, st, phi_new, g_new)

    log.debug("agent %d hit p_max=%d without fleet-wide convergence", agent, params.p_max)
    return InnerResult(st.u, params.p_max, False, st)
