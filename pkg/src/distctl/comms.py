"""Communication fabric for lockstep workers.

Topologies and Metropolis consensus weights, a barrier that checks round
agreement, and an in-process message fabric that emulates per-link latency
(whole rounds), packet loss (hold-last-value) and byte accounting.
"""
from __future__ import annotations

import logging
import threading
from collections import defaultdict
from dataclasses import dataclass, field, fields, is_dataclass
from typing import Any

import networkx as nx
import numpy as np

log = logging.getLogger(__name__)

TOPOLOGY_KINDS = ("fully-connected", "ring", "star", "mesh")


class ProtocolError(RuntimeError):
    """Workers disagreed on the round they were synchronising."""


class BarrierTimeout(RuntimeError):
    """A barrier was not reached by every worker in time (or was aborted)."""


@dataclass(frozen=True)
class Topology:
    n: int
    adjacency: np.ndarray
    kind: str = "mesh"

    def __post_init__(self):
        adj = np.asarray(self.adjacency, dtype=bool)
        if adj.shape != (self.n, self.n):
            raise ValueError(f"adjacency must be {self.n}x{self.n}, got {adj.shape}")
        if not np.array_equal(adj, adj.T):
            raise ValueError("adjacency must be symmetric")
        if np.any(np.diag(adj)):
            raise ValueError("adjacency must not contain self-loops")
        object.__setattr__(self, "adjacency", adj)
        if self.n > 1 and not nx.is_connected(self.graph()):
            raise ValueError(f"{self.kind} topology on {self.n} agents is disconnected")

    def graph(self) -> nx.Graph:
        g = nx.Graph()
        g.add_nodes_from(range(self.n))
        g.add_edges_from(zip(*np.nonzero(np.triu(self.adjacency))))
        return g

    def neighbours(self, i: int) -> list[int]:
        return [int(j) for j in np.flatnonzero(self.adjacency[i])]

    def edges(self) -> list[tuple[int, int]]:
        return [(int(i), int(j)) for i, j in zip(*np.nonzero(np.triu(self.adjacency)))]

    def degree(self, i: int) -> int:
        return int(self.adjacency[i].sum())

    def diameter(self) -> int:
        return 0 if self.n == 1 else int(nx.diameter(self.graph()))


def build_topology(kind: str, n: int, hub: int = 0, adjacency=None) -> Topology:
    if n < 1:
        raise ValueError(f"need at least one agent, got {n}")
    adj = np.zeros((n, n), dtype=bool)
    if kind == "fully-connected":
        adj[:] = True
        np.fill_diagonal(adj, False)
    elif kind == "ring":
        for i in range(n):
            j = (i + 1) % n
            if i != j:
                adj[i, j] = adj[j, i] = True
    elif kind == "star":
        if not 0 <= hub < n:
            raise ValueError(f"hub {hub} out of range for {n} agents")
        adj[hub, :] = adj[:, hub] = True
        adj[hub, hub] = False
    elif kind == "mesh":
        if adjacency is None:
            raise ValueError("mesh topology requires an explicit adjacency matrix")
        adj = np.asarray(adjacency, dtype=bool)
    else:
        raise ValueError(f"unknown topology kind {kind!r}; expected one of {TOPOLOGY_KINDS}")
    return Topology(n, adj, kind)


def metropolis_weights(topology: Topology) -> np.ndarray:
    n = topology.n
    deg = topology.adjacency.sum(axis=1)
    W = np.zeros((n, n))
    for i, j in topology.edges():
        W[i, j] = W[j, i] = 1.0 / (1.0 + max(deg[i], deg[j]))
    W[np.diag_indices(n)] = 1.0 - W.sum(axis=1)
    return W


class LockstepBarrier:
    """Reusable barrier that also checks all workers pass the same round id.

    ``wait`` optionally reduces a boolean vote (logical AND) across workers.
    """

    def __init__(self, parties: int, timeout: float = 30.0):
        self.parties = parties
        self.timeout = timeout
        self._barrier = threading.Barrier(parties, timeout=timeout) if parties > 1 else None
        self._ids: list[list[Any]] = [[None] * parties, [None] * parties]
        self._votes: list[list[bool]] = [[True] * parties, [True] * parties]
        self._count = [0] * parties

    def wait(self, worker: int, round_id: Any, vote: bool = True) -> bool:
        if self._barrier is None:
            return vote
        slot = self._count[worker] & 1
        self._count[worker] += 1
        self._ids[slot][worker] = round_id
        self._votes[slot][worker] = vote
        try:
            self._barrier.wait()
        except threading.BrokenBarrierError as exc:
            raise BarrierTimeout(
                f"worker {worker} broke out of barrier at round {round_id!r}; "
                f"ids seen: {self._ids[slot]}") from exc
        ids = self._ids[slot]
        if any(other != round_id for other in ids):
            raise ProtocolError(f"round mismatch at worker {worker}: {ids}")
        return all(self._votes[slot])

    def abort(self):
        if self._barrier is not None:
            self._barrier.abort()


@dataclass
class LinkModel:
    """Per directed link emulation; scalars apply to every link."""
    delay_rounds: Any = 0
    drop_prob: Any = 0.0
    seed: int = 0

    def delay(self, i: int, j: int) -> int:
        d = self.delay_rounds
        return int(d if np.isscalar(d) else np.asarray(d)[i, j])

    def drop(self, i: int, j: int) -> float:
        p = self.drop_prob
        return float(p if np.isscalar(p) else np.asarray(p)[i, j])

    def validate(self, n: int):
        for name in ("delay_rounds", "drop_prob"):
            v = np.asarray(getattr(self, name), dtype=float)
            if v.ndim not in (0, 2) or (v.ndim == 2 and v.shape != (n, n)):
                raise ValueError(f"{name} must be a scalar or a {n}x{n} matrix")
        if np.any(np.asarray(self.delay_rounds) < 0):
            raise ValueError("delays must be nonnegative")
        p = np.asarray(self.drop_prob, dtype=float)
        if np.any((p < 0) | (p > 1)):
            raise ValueError("drop probabilities must lie in [0, 1]")

    @property
    def ideal(self) -> bool:
        return not np.any(np.asarray(self.delay_rounds)) and not np.any(np.asarray(self.drop_prob))


@dataclass
class RoundMessage:
    round: int
    sender: int
    payload: Any
    control: Any = None


def payload_nbytes(payload) -> int:
    """Wire size estimate: 8 bytes per float/int/bool field, arrays by ``nbytes``."""
    if payload is None:
        return 0
    if isinstance(payload, np.ndarray):
        return int(payload.nbytes)
    if is_dataclass(payload):
        return sum(payload_nbytes(getattr(payload, f.name)) for f in fields(payload))
    if isinstance(payload, (tuple, list)):
        return sum(payload_nbytes(p) for p in payload)
    if isinstance(payload, dict):
        return sum(payload_nbytes(p) for p in payload.values())
    return 8


@dataclass
class _Link:
    rng: np.random.Generator
    lock: threading.Lock = field(default_factory=threading.Lock)
    inflight: list = field(default_factory=list)
    held: dict = field(default_factory=dict)


class Fabric:
    """Synchronous neighbour exchange among ``n`` workers in one process.

    Every call to :meth:`exchange` is a global rendezvous: all workers must
    call it with the same ``(channel, round)``. Payloads travel over directed
    links subject to the link model; ``control`` values always arrive
    (they model the tiny flags a link layer would acknowledge). When a data
    payload is dropped or still in flight, the receiver sees the last payload
    delivered on that link; the first round of a channel is always reliable.
    """

    def __init__(self, n: int, links: LinkModel | None = None, barrier_timeout: float = 30.0,
                 record: bool = True):
        self.n = n
        self.links = links or LinkModel()
        self.links.validate(n)
        self.barrier = LockstepBarrier(n, barrier_timeout)
        self.record = record
        seeds = np.random.SeedSequence(self.links.seed).spawn(n * n)
        self._links = {(i, j): _Link(np.random.default_rng(seeds[i * n + j]))
                       for i in range(n) for j in range(n) if i != j}
        self._control: list[list[dict]] = [[{} for _ in range(n)], [{} for _ in range(n)]]
        self._count = [0] * n
        self._log: list[list[dict]] = [[] for _ in range(n)]

    def exchange(self, agent: int, round_id: int, payload, neighbours, *, channel: str = "solver",
                 reliable: bool = False, control=None) -> dict[int, RoundMessage]:
        """Send ``payload`` to ``neighbours`` and return what they sent this round."""
        neighbours = sorted(neighbours)
        nbytes = payload_nbytes(payload) + payload_nbytes(control)
        for j in neighbours:
            link = self._links[(agent, j)]
            if reliable:
                delivered, arrival = True, round_id
            else:
                p = self.links.drop(agent, j)
                delivered = not (p > 0 and link.rng.random() < p)
                arrival = round_id + self.links.delay(agent, j)
            if delivered:
                with link.lock:
                    link.inflight.append((channel, arrival, round_id, payload))
            if self.record:
                self._log[agent].append({"channel": channel, "round": round_id, "from": agent + 1,
                                         "to": j + 1, "delivered": delivered,
                                         "bytes": nbytes if delivered else 0})
        slot = self._count[agent] & 1
        self._count[agent] += 1
        self._control[slot][agent] = control
        self.barrier.wait(agent, (channel, round_id))

        out = {}
        for j in neighbours:
            link = self._links[(j, agent)]
            with link.lock:
                ready, pending = [], []
                for m in link.inflight:
                    (ready if m[0] == channel and m[1] <= round_id else pending).append(m)
                if ready:
                    link.inflight = pending
                    newest = max(ready, key=lambda m: m[2])
                    prev = link.held.get(channel)
                    if prev is None or newest[2] >= prev[0]:
                        link.held[channel] = (newest[2], newest[3])
                held = link.held.get(channel)
            if held is None:
                raise ProtocolError(f"no payload ever received on link {j}->{agent} ({channel})")
            out[j] = RoundMessage(held[0], j, held[1], self._control[slot][j])
        return out

    def message_log(self) -> list[dict]:
        merged = [rec for per_agent in self._log for rec in per_agent]
        order = {"state": 0, "solver": 1}
        merged.sort(key=lambda r: (order.get(r["channel"], 2), r["round"], r["from"], r["to"]))
        return merged

    def bandwidth_report(self) -> dict[tuple[int, int], dict[str, int]]:
        return bandwidth_report(self.message_log())


def bandwidth_report(message_log) -> dict[tuple[int, int], dict[str, int]]:
    """Per directed link (1-based ids) message, delivery and byte totals."""
    report: dict = defaultdict(lambda: {"sent": 0, "delivered": 0, "dropped": 0, "bytes": 0})
    for rec in message_log:
        entry = report[(rec["from"], rec["to"])]
        entry["sent"] += 1
        entry["delivered"] += int(rec["delivered"])
        entry["dropped"] += int(not rec["delivered"])
        entry["bytes"] += rec["bytes"]
    return dict(report)

