"""Aggregative receding-horizon game: local cost, aggregation, pseudo-gradient."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import AgentModel, ErrorState, rollout_matrices


@dataclass(frozen=True)
class CostParams:
    Q: np.ndarray
    R: np.ndarray
    P: np.ndarray
    beta: float = 1.5
    pa: float = 1.0
    po: np.ndarray = np.zeros(2)
    N: int = 1

    def __post_init__(self):
        for name in ("Q", "R", "P", "po"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float))
        if np.min(np.linalg.eigvalsh(self.Q)) < -1e-12:
            raise ValueError("Q must be positive semidefinite")
        if np.min(np.linalg.eigvalsh(self.R)) <= 0:
            raise ValueError("R must be positive definite")
        if np.min(np.linalg.eigvalsh(self.beta * self.P)) <= 0:
            raise ValueError("beta * P must be positive definite")
        if self.pa < 0:
            raise ValueError("fleet weight pa must be nonnegative")
        if self.N < 1:
            raise ValueError("fleet size must be at least 1")


class LocalGame:
    """Agent ``i``'s slice of the game for one MPC step.

    Precomputes the quadratic form of the local (non-aggregative) terms,
    ``u' Hq u + 2 f' u + const``, and the affine aggregation map
    ``phi(u) = M u + c`` (predicted terminal position).
    """

    def __init__(self, model: AgentModel, e0: ErrorState, target, params: CostParams, H: int,
                 matrices=None):
        self.model = model
        self.e0 = e0
        self.target = np.asarray(target, dtype=float).reshape(2)
        self.params = params
        self.H = H
        Phi, Gamma = matrices if matrices is not None else rollout_matrices(model, H)
        self.Phi, self.Gamma = Phi, Gamma

        W = np.zeros((4 * (H + 1), 4 * (H + 1)))
        for l in range(H):
            W[4 * l:4 * l + 4, 4 * l:4 * l + 4] = params.Q
        W[4 * H:, 4 * H:] = params.beta * params.P
        free = Phi @ e0.e
        self.Hq = Gamma.T @ W @ Gamma + np.kron(np.eye(H), params.R)
        self.f = Gamma.T @ W @ free
        self.const = float(free @ W @ free)

        self.M = Gamma[4 * H:4 * H + 2]
        self.c = self.target + free[4 * H:4 * H + 2]
        self._agg_scale = 2.0 * params.pa / (params.N * params.N)

    def phi(self, u) -> np.ndarray:
        return self.M @ u + self.c

    def local_cost(self, u) -> float:
        return float(u @ self.Hq @ u + 2.0 * self.f @ u + self.const)

    def cost(self, u, sigma) -> float:
        p = self.params
        d = np.asarray(sigma, dtype=float) - p.po
        return self.local_cost(u) + p.pa / p.N * float(d @ d)

    def pseudo_gradient(self, u, sigma) -> np.ndarray:
        grad = 2.0 * (self.Hq @ u + self.f)
        return grad + self._agg_scale * (self.M.T @ (np.asarray(sigma) - self.params.po))


def phi(model: AgentModel, e0: ErrorState, u, target, H: int | None = None) -> np.ndarray:
    """Predicted absolute terminal position ``p_i[H]``."""
    u = np.asarray(u, dtype=float).ravel()
    H = u.size // 2 if H is None else H
    Phi, Gamma = rollout_matrices(model, H)
    terminal = Phi[4 * H:4 * H + 2] @ e0.e + Gamma[4 * H:4 * H + 2] @ u
    return np.asarray(target, dtype=float) + terminal


def phi_matrices(model: AgentModel, e0: ErrorState, target, H: int) -> tuple[np.ndarray, np.ndarray]:
    Phi, Gamma = rollout_matrices(model, H)
    return Gamma[4 * H:4 * H + 2].copy(), np.asarray(target, dtype=float) + Phi[4 * H:4 * H + 2] @ e0.e


def sigma_true(model: AgentModel, us, e0s, targets) -> np.ndarray:
    """Exact aggregate ``(1/N) sum_i phi_i(u_i)``; oracle use only."""
    return np.mean([phi(model, e0, u, t) for u, e0, t in zip(us, e0s, targets)], axis=0)


def cost(model: AgentModel, u, e0: ErrorState, sigma, params: CostParams, target=None) -> float:
    u = np.asarray(u, dtype=float).ravel()
    target = np.zeros(2) if target is None else target
    return LocalGame(model, e0, target, params, u.size // 2).cost(u, sigma)


def pseudo_gradient(model: AgentModel, u, e0: ErrorState, sigma, params: CostParams,
                    target=None) -> np.ndarray:
    u = np.asarray(u, dtype=float).ravel()
    target = np.zeros(2) if target is None else target
    return LocalGame(model, e0, target, params, u.size // 2).pseudo_gradient(u, sigma)


def project_box(u, a_max: float) -> np.ndarray:
    return np.clip(np.asarray(u, dtype=float), -a_max, a_max)
