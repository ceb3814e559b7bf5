"""Planar double-integrator agent model.

Zero-order-hold discretisation, error coordinates relative to a fixed
target, horizon rollout with its (constant) sensitivity matrices and an
infinite-horizon LQR terminal weight from the discrete Riccati equation.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

log = logging.getLogger(__name__)

STATE_DIM = 4
INPUT_DIM = 2


class DareError(RuntimeError):
    """Riccati iteration did not converge within the iteration cap."""

    def __init__(self, message: str, residual: float, iterations: int):
        super().__init__(message)
        self.residual = residual
        self.iterations = iterations


@dataclass(frozen=True)
class AgentModel:
    Ad: np.ndarray
    Bd: np.ndarray
    ts: float
    a_max: float = 2.0

    def __post_init__(self):
        if not self.ts > 0:
            raise ValueError(f"sample time must be positive, got {self.ts!r}")
        if not self.a_max > 0:
            raise ValueError(f"acceleration bound must be positive, got {self.a_max!r}")

    def is_controllable(self) -> bool:
        blocks = [self.Bd]
        for _ in range(STATE_DIM - 1):
            blocks.append(self.Ad @ blocks[-1])
        return np.linalg.matrix_rank(np.hstack(blocks)) == STATE_DIM


@dataclass(frozen=True)
class AgentState:
    p: np.ndarray
    v: np.ndarray
    k: int = 0

    def __post_init__(self):
        object.__setattr__(self, "p", np.asarray(self.p, dtype=float).reshape(2))
        object.__setattr__(self, "v", np.asarray(self.v, dtype=float).reshape(2))
        if not (np.all(np.isfinite(self.p)) and np.all(np.isfinite(self.v))):
            raise ValueError("agent state must be finite")
        if self.k < 0:
            raise ValueError("time index must be nonnegative")

    @property
    def z(self) -> np.ndarray:
        return np.concatenate([self.p, self.v])

    @classmethod
    def from_vector(cls, z, k: int = 0) -> "AgentState":
        z = np.asarray(z, dtype=float)
        return cls(z[:2], z[2:4], k)


@dataclass(frozen=True)
class ErrorState:
    e: np.ndarray = field(default_factory=lambda: np.zeros(STATE_DIM))

    def __post_init__(self):
        object.__setattr__(self, "e", np.asarray(self.e, dtype=float).reshape(STATE_DIM))


def discretize(ts: float, a_max: float = 2.0) -> AgentModel:
    """Exact ZOH discretisation of two decoupled double integrators."""
    if not ts > 0:
        raise ValueError(f"sample time must be positive, got {ts!r}")
    Ad = np.eye(STATE_DIM)
    Ad[0, 2] = Ad[1, 3] = ts
    Bd = np.zeros((STATE_DIM, INPUT_DIM))
    Bd[0, 0] = Bd[1, 1] = ts * ts / 2.0
    Bd[2, 0] = Bd[3, 1] = ts
    return AgentModel(Ad, Bd, float(ts), float(a_max))


def step(model: AgentModel, z: AgentState, a) -> AgentState:
    a = np.asarray(a, dtype=float).reshape(INPUT_DIM)
    if not np.all(np.isfinite(a)):
        raise ValueError("control input must be finite")
    return AgentState.from_vector(model.Ad @ z.z + model.Bd @ a, z.k + 1)


def to_error(z: AgentState, target) -> ErrorState:
    target = np.asarray(target, dtype=float).reshape(2)
    return ErrorState(np.concatenate([z.p - target, z.v]))


def from_error(e: ErrorState, target, k: int = 0) -> AgentState:
    target = np.asarray(target, dtype=float).reshape(2)
    return AgentState(e.e[:2] + target, e.e[2:4], k)


def rollout_matrices(model: AgentModel, H: int) -> tuple[np.ndarray, np.ndarray]:
    """Stacked maps with ``E = Phi @ e0 + Gamma @ u`` for ``E = [e[0]; ...; e[H]]``.

    ``Phi`` is ``4(H+1) x 4`` and ``Gamma`` is ``4(H+1) x 2H``; block row ``l``
    of ``Gamma`` holds ``Ad^(l-1-m) Bd`` in block column ``m < l``.
    """
    if H < 1:
        raise ValueError(f"horizon must be at least 1, got {H}")
    n, m = STATE_DIM, INPUT_DIM
    Phi = np.zeros((n * (H + 1), n))
    Gamma = np.zeros((n * (H + 1), m * H))
    powers = [np.eye(n)]
    for _ in range(H):
        powers.append(model.Ad @ powers[-1])
    for l in range(H + 1):
        Phi[n * l:n * (l + 1)] = powers[l]
        for j in range(l):
            Gamma[n * l:n * (l + 1), m * j:m * (j + 1)] = powers[l - 1 - j] @ model.Bd
    return Phi, Gamma


def rollout(model: AgentModel, e0: ErrorState, u, H: int) -> np.ndarray:
    """Error trajectory ``e[0..H]`` as an ``(H+1) x 4`` array."""
    u = np.asarray(u, dtype=float).ravel()
    if u.size != INPUT_DIM * H:
        raise ValueError(f"decision has {u.size} entries, expected {INPUT_DIM * H} for H={H}")
    out = np.empty((H + 1, STATE_DIM))
    out[0] = e0.e
    for l in range(H):
        out[l + 1] = model.Ad @ out[l] + model.Bd @ u[2 * l:2 * l + 2]
    return out


def dare_residual(A, B, Q, R, P) -> float:
    BtP = B.T @ P
    rhs = Q + A.T @ P @ A - A.T @ P @ B @ np.linalg.solve(R + BtP @ B, BtP @ A)
    return float(np.max(np.abs(P - rhs)))


def solve_dare(A, B, Q, R, max_iter: int = 10_000, tol: float = 1e-12) -> np.ndarray:
    """Solve the discrete algebraic Riccati equation by value iteration from ``P = Q``.

    Raises:
        DareError: if the step change has not dropped below ``tol`` (scaled by
            ``max(1, |P|)``) after ``max_iter`` iterations.
    """
    A = np.atleast_2d(np.asarray(A, dtype=float))
    B = np.atleast_2d(np.asarray(B, dtype=float))
    Q = np.atleast_2d(np.asarray(Q, dtype=float))
    R = np.atleast_2d(np.asarray(R, dtype=float))
    if np.min(np.linalg.eigvalsh((R + R.T) / 2)) <= 0:
        raise ValueError("R must be positive definite")
    if np.min(np.linalg.eigvalsh((Q + Q.T) / 2)) < -1e-12:
        raise ValueError("Q must be positive semidefinite")

    P = Q.copy()
    for it in range(1, max_iter + 1):
        BtP = B.T @ P
        P_next = Q + A.T @ P @ A - A.T @ P @ B @ np.linalg.solve(R + BtP @ B, BtP @ A)
        P_next = (P_next + P_next.T) / 2
        change = np.max(np.abs(P_next - P))
        P = P_next
        if change < tol * max(1.0, np.max(np.abs(P))):
            log.debug("DARE converged after %d iterations", it)
            return P
    residual = dare_residual(A, B, Q, R, P)
    raise DareError(
        f"Riccati iteration did not converge in {max_iter} iterations (residual {residual:.3e})",
        residual, max_iter)
