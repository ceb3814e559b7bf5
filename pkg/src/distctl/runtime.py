"""SPMD mission runner: one long-lived worker thread per agent.

Workers share nothing but the :class:`~distctl.comms.Fabric`. Each MPC step a
worker exchanges state snapshots, assembles its constraint block, runs the
distributed inner solve (timed), applies the first control to its plant seam
and logs the result.
"""
from __future__ import annotations

import logging
import math
import threading
import time
from dataclasses import dataclass, field
from functools import partial
from typing import Any, Callable, Protocol

import numpy as np

from .comms import BarrierTimeout, Fabric, LinkModel, ProtocolError, Topology, metropolis_weights
from .game import LocalGame
from .model import AgentModel, AgentState, ErrorState, rollout_matrices, step
from .safety import CoupledConstraintBlock, assemble_blocks, barrier_value
from .scenario import ScenarioConfig, StepTiming, TimingLog, TrajectoryLog, TrajectoryRecord
from .solver import InnerResult, SolverParams, inner_loop

log = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_SOLVER_CAP = 2
EXIT_BARRIER_TIMEOUT = 3
EXIT_CONFIG = 4


class IsolationError(RuntimeError):
    """A worker context was touched from a thread other than its owner."""


class PlantSeam(Protocol):
    kind: str

    def step(self, agent: int, state: AgentState, control: np.ndarray, ts: float) -> AgentState:
        ...


class SimplePlant:
    """Design model used as the plant (exactly :func:`distctl.model.step`)."""
    kind = "simple-model"

    def __init__(self, model: AgentModel):
        self.model = model

    def step(self, agent, state, control, ts):
        return step(self.model, state, control)


class ExternalPlant:
    """Seam for plants outside the process (digital twins, hardware bridges).

    ``transport`` receives a request dict
    ``{"agent", "k", "state": [px, py, vx, vy], "control": [ax, ay], "ts"}``
    and must return ``{"state": [px, py, vx, vy]}`` for time ``k + 1``. The
    default transport is a loopback that integrates the design model, which
    keeps the wire format exercised without any external process.
    """
    kind = "external"

    def __init__(self, model: AgentModel, transport: Callable[[dict], dict] | None = None):
        self.model = model
        self.transport = transport or self.loopback

    def loopback(self, request: dict) -> dict:
        z = AgentState.from_vector(request["state"], request["k"])
        return {"state": step(self.model, z, request["control"]).z.tolist()}

    def step(self, agent, state, control, ts):
        reply = self.transport({"agent": agent + 1, "k": state.k, "state": state.z.tolist(),
                                "control": [float(c) for c in control], "ts": ts})
        return AgentState.from_vector(reply["state"], state.k + 1)


def make_plant(kind: str, model: AgentModel, transport=None) -> PlantSeam:
    if kind == "simple-model":
        return SimplePlant(model)
    if kind == "external":
        return ExternalPlant(model, transport)
    raise ValueError(f"unknown plant {kind!r}")


class Stopwatch:
    """Monotonic wall-clock timer for one phase."""

    def __enter__(self):
        self.start = time.perf_counter()
        self.seconds = 0.0
        return self

    def __exit__(self, *exc):
        self.seconds = time.perf_counter() - self.start
        return False


def time_step(fn: Callable, *args, **kwargs) -> tuple[Any, float]:
    with Stopwatch() as sw:
        result = fn(*args, **kwargs)
    return result, sw.seconds


class WorkerContext:
    """State private to one worker.

    With ``strict=True`` any public attribute access from a thread other than
    the one that called :meth:`bind` raises :class:`IsolationError`.
    """

    def __init__(self, agent: int, model: AgentModel, state: AgentState, target, targets,
                 fabric: Fabric, plant: PlantSeam, strict: bool = False):
        self._strict = strict
        self._owner = None
        self.agent = agent
        self.model = model
        self.state = state
        self.target = np.asarray(target, dtype=float)
        self.targets = np.asarray(targets, dtype=float)
        self.fabric = fabric
        self.plant = plant
        self.u_prev: np.ndarray | None = None
        self.lam_prev: np.ndarray | None = None
        self.records: list[TrajectoryRecord] = []
        self.timings: list[StepTiming] = []
        self.capped_steps = 0

    def bind(self):
        object.__setattr__(self, "_owner", threading.get_ident())

    def __getattribute__(self, name):
        if not name.startswith("_") and object.__getattribute__(self, "_strict"):
            owner = object.__getattribute__(self, "_owner")
            if owner is not None and owner != threading.get_ident():
                raise IsolationError(
                    f"worker {object.__getattribute__(self, 'agent')} context read "
                    f"({name}) from a foreign thread")
        return object.__getattribute__(self, name)


@dataclass
class MissionResult:
    trajectory: TrajectoryLog
    timing: TimingLog
    status: int
    message_log: list[dict] = field(default_factory=list)
    error: str | None = None
    steps_run: int = 0


def _solver_exchange(fabric: Fabric, agent: int, neighbours, base: int):
    def exchange(t, payload, control=None, reliable=False):
        msgs = fabric.exchange(agent, base + t, payload, neighbours, channel="solver",
                               reliable=reliable, control=control)
        return msgs
    return exchange


class _Mission:
    def __init__(self, cfg: ScenarioConfig, strict: bool, trace, plant_transport):
        self.cfg = cfg
        self.n = cfg.n_agents
        self.model = cfg.model()
        self.matrices = rollout_matrices(self.model, cfg.horizon)
        self.cost = cfg.cost_params()
        self.topology: Topology = cfg.build_topology()
        self.W = metropolis_weights(self.topology)
        self.diameter = self.topology.diameter()
        self.fabric = Fabric(self.n, cfg.links, cfg.barrier_timeout)
        self.trace = trace
        self.contexts = [
            WorkerContext(i, self.model, AgentState(cfg.starts[i], np.zeros(2), 0), cfg.targets[i],
                          cfg.targets, self.fabric,
                          make_plant(cfg.plant, self.model, plant_transport), strict)
            for i in range(self.n)]
        self.errors: list[tuple[int, BaseException]] = []
        self._err_lock = threading.Lock()

    def _weights(self, i: int) -> dict[int, float]:
        row = {i: float(self.W[i, i])}
        row.update({j: float(self.W[i, j]) for j in self.topology.neighbours(i)})
        return row

    def worker(self, ctx: WorkerContext):
        ctx.bind()
        try:
            self._run_worker(ctx)
        except BaseException as exc:  # noqa: BLE001 - recorded and re-surfaced by run()
            with self._err_lock:
                self.errors.append((ctx.agent, exc))
            self.fabric.barrier.abort()

    def _run_worker(self, ctx: WorkerContext):
        cfg, i, n = self.cfg, ctx.agent, self.n
        others = [j for j in range(n) if j != i]
        neighbours = self.topology.neighbours(i)
        weights = self._weights(i)
        tol = cfg.arrival
        solver_round = 0
        for k in range(cfg.steps + 1):
            msgs = ctx.fabric.exchange(i, k, ctx.state.z, others, channel="state",
                                       reliable=(k == 0))
            states = [None] * n
            states[i] = ctx.state
            for j, msg in msgs.items():
                states[j] = AgentState.from_vector(msg.payload, k)
            pos = np.array([s.p for s in states])
            min_h = min((barrier_value(pos[i] - pos[j], cfg.cbf) for j in others), default=math.inf)

            arrived = (np.linalg.norm(ctx.state.p - ctx.target) <= tol.pos_tol
                       and np.linalg.norm(ctx.state.v) <= tol.vel_tol)
            all_arrived = ctx.fabric.barrier.wait(i, ("arrival", k), vote=bool(arrived))
            if all_arrived or k == cfg.steps:
                ctx.records.append(self._record(ctx, k, np.zeros(2), min_h, 0, True))
                return

            with Stopwatch() as sw:
                block = assemble_blocks(self.model, states, ctx.targets, cfg.cbf, cfg.horizon,
                                        agents=[i], matrices=self.matrices)[i]
                e0 = ErrorState(np.concatenate([ctx.state.p - ctx.target, ctx.state.v]))
                game = LocalGame(self.model, e0, ctx.target, self.cost, cfg.horizon,
                                 matrices=self.matrices)
                trace = None if self.trace is None else partial(self.trace, k)
                res: InnerResult = inner_loop(
                    i, game, block, cfg.solver, weights, n, self.diameter,
                    _solver_exchange(ctx.fabric, i, neighbours, solver_round),
                    u_prev=ctx.u_prev, trace=trace, lam_prev=ctx.lam_prev)
            solver_round += res.iterations + 1
            if not res.converged:
                ctx.capped_steps += 1
            ctx.timings.append(StepTiming(i, k, sw.seconds, res.iterations))
            ctx.records.append(self._record(ctx, k, res.control, min_h, res.iterations,
                                            res.converged))
            ctx.state = ctx.plant.step(i, ctx.state, res.control, cfg.ts)
            ctx.u_prev = res.u
            ctx.lam_prev = res.state.lam

    @staticmethod
    def _record(ctx, k, a, min_h, iters, converged) -> TrajectoryRecord:
        z = ctx.state.z
        return TrajectoryRecord(k, ctx.agent, *(float(v) for v in z), float(a[0]), float(a[1]),
                                float(min_h), int(iters), bool(converged))

    def run(self) -> MissionResult:
        threads = [threading.Thread(target=self.worker, args=(ctx,), name=f"agent-{ctx.agent + 1}",
                                    daemon=True) for ctx in self.contexts]
        for t in threads:
            t.start()
        for t in threads:
            t.join()

        trajectory = TrajectoryLog(self.n)
        timing = TimingLog()
        for ctx in self.contexts:
            object.__setattr__(ctx, "_strict", False)
            for rec in ctx.records:
                trajectory.append(rec)
            for rec in ctx.timings:
                timing.append(rec)
        steps_run = max((r.step for r in trajectory.records), default=-1) + 1
        status, error = EXIT_OK, None
        if self.errors:
            root = self._root_cause()
            error = f"agent {root[0] + 1}: {type(root[1]).__name__}: {root[1]}"
            status = EXIT_BARRIER_TIMEOUT if isinstance(root[1], BarrierTimeout) else EXIT_FAILURE
            log.error("mission aborted: %s", error)
        elif any(ctx.capped_steps for ctx in self.contexts):
            status = EXIT_SOLVER_CAP
        return MissionResult(trajectory, timing, status, self.fabric.message_log(), error,
                             steps_run)

    def _root_cause(self):
        for agent, exc in self.errors:
            if not isinstance(exc, BarrierTimeout):
                return agent, exc
        return self.errors[0]


def run_mission(cfg: ScenarioConfig, strict: bool = False, trace: Callable | None = None,
                plant_transport: Callable | None = None) -> MissionResult:
    """Run the closed loop for ``cfg`` with one worker thread per agent.

    ``trace(step, agent, round, solver_state, phi, g)`` is called after every
    inner round when given.
    """
    return _Mission(cfg, strict, trace, plant_transport).run()


def solve_distributed(games: list[LocalGame], blocks: list[CoupledConstraintBlock],
                      topology: Topology, params: SolverParams, links: LinkModel | None = None,
                      u_prev=None, trace: Callable | None = None,
                      barrier_timeout: float = 30.0) -> tuple[list[InnerResult], Fabric]:
    """One distributed inner solve across ``len(games)`` worker threads."""
    n = len(games)
    fabric = Fabric(n, links, barrier_timeout)
    W = metropolis_weights(topology)
    diameter = topology.diameter()
    results: list[InnerResult | None] = [None] * n
    errors: list[BaseException] = []

    def work(i):
        row = {i: float(W[i, i])}
        row.update({j: float(W[i, j]) for j in topology.neighbours(i)})
        try:
            results[i] = inner_loop(i, games[i], blocks[i], params, row, n, diameter,
                                    _solver_exchange(fabric, i, topology.neighbours(i), 0),
                                    u_prev=None if u_prev is None else u_prev[i], trace=trace)
        except BaseException as exc:  # noqa: BLE001
            errors.append(exc)
            fabric.barrier.abort()

    threads = [threading.Thread(target=work, args=(i,), daemon=True) for i in range(n)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    if errors:
        real = [e for e in errors if not isinstance(e, BarrierTimeout)]
        raise (real or errors)[0]
    return results, fabric


__all__ = ["EXIT_OK", "EXIT_FAILURE", "EXIT_SOLVER_CAP", "EXIT_BARRIER_TIMEOUT", "EXIT_CONFIG",
           "ExternalPlant", "IsolationError", "MissionResult", "PlantSeam", "ProtocolError",
           "SimplePlant", "Stopwatch", "WorkerContext", "make_plant", "run_mission",
           "solve_distributed", "time_step"]
