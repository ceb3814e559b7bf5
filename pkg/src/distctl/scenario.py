"""Scenario configuration, the position-swap benchmark, run logs and statistics.

Config documents are flat ``key = value`` text. Keys use dotted sections
(``cbf.r1``, ``solver.eps``); values are JSON literals, and bare words are
read as strings. ``#`` starts a comment.
"""
from __future__ import annotations

import csv
import json
import math
import os
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Iterable

import numpy as np

from .comms import LinkModel, TOPOLOGY_KINDS, build_topology
from .game import CostParams
from .model import AgentModel, discretize, solve_dare
from .safety import CbfParams, all_pairs, barrier_value, decrement_satisfied
from .solver import SolverParams

TRAJECTORY_HEADER = ["step", "agent", "px", "py", "vx", "vy", "ax", "ay",
                     "min_barrier", "inner_iters", "converged"]
TIMING_HEADER = ["step", "agent", "seconds", "inner_iters"]
PLANTS = ("simple-model", "external")


class ConfigError(ValueError):
    pass


class UnsafeInitialConfig(ConfigError):
    def __init__(self, message: str, pair: tuple[int, int], value: float):
        super().__init__(message)
        self.pair = pair
        self.value = value


def _tuple2(x) -> tuple:
    return tuple(tuple(float(v) for v in row) for row in x)


@dataclass(frozen=True)
class TopologySpec:
    kind: str = "fully-connected"
    hub: int = 0
    adjacency: tuple | None = None


@dataclass(frozen=True)
class ArrivalTolerance:
    pos_tol: float = 0.05
    vel_tol: float = 0.05


@dataclass(frozen=True)
class ScenarioConfig:
    n_agents: int = 4
    ts: float = 0.2
    horizon: int = 3
    steps: int = 150
    initial_positions: tuple = ((0.0, 1.0), (0.0, -1.0), (1.0, 0.0), (-1.0, 0.0))
    target_positions: tuple = ((0.0, -1.0), (0.0, 1.0), (-1.0, 0.0), (1.0, 0.0))
    po: tuple = (0.0, 0.0)
    pa: float = 1.0
    Q: tuple = _tuple2(np.diag([5.0, 5.0, 5.0, 5.0]))
    R: tuple = _tuple2(np.diag([2.0, 2.0]))
    beta: float = 1.5
    a_max: float = 2.0
    plant: str = "simple-model"
    cbf: CbfParams = field(default_factory=lambda: CbfParams(margin=0.01))
    solver: SolverParams = field(default_factory=SolverParams)
    topology: TopologySpec = field(default_factory=TopologySpec)
    links: LinkModel = field(default_factory=LinkModel)
    arrival: ArrivalTolerance = field(default_factory=ArrivalTolerance)
    barrier_timeout: float = 30.0

    def model(self) -> AgentModel:
        return discretize(self.ts, self.a_max)

    def terminal_weight(self) -> np.ndarray:
        m = self.model()
        return solve_dare(m.Ad, m.Bd, np.array(self.Q), np.array(self.R))

    def cost_params(self, P: np.ndarray | None = None) -> CostParams:
        P = self.terminal_weight() if P is None else P
        return CostParams(np.array(self.Q), np.array(self.R), P, self.beta, self.pa,
                          np.array(self.po), self.n_agents)

    def build_topology(self):
        t = self.topology
        return build_topology(t.kind, self.n_agents, hub=t.hub,
                              adjacency=None if t.adjacency is None else np.array(t.adjacency))

    @property
    def starts(self) -> np.ndarray:
        return np.array(self.initial_positions, dtype=float)

    @property
    def targets(self) -> np.ndarray:
        return np.array(self.target_positions, dtype=float)


# key -> (section attribute or None, field name, help text)
CONFIG_KEYS: dict[str, tuple[str | None, str, str]] = {
    "n_agents": (None, "n_agents", "number of agents N"),
    "ts": (None, "ts", "sample time in seconds"),
    "horizon": (None, "horizon", "prediction horizon H (steps)"),
    "steps": (None, "steps", "maximum number of MPC steps"),
    "initial_positions": (None, "initial_positions", "list of N [x, y] start positions (m)"),
    "target_positions": (None, "target_positions", "list of N [x, y] targets (m)"),
    "po": (None, "po", "common tracking point [x, y] (m)"),
    "pa": (None, "pa", "fleet (centroid) weight"),
    "Q": (None, "Q", "4x4 running state weight, or its diagonal"),
    "R": (None, "R", "2x2 input weight, or its diagonal"),
    "beta": (None, "beta", "terminal weight scale"),
    "a_max": (None, "a_max", "per-axis acceleration bound (m/s^2)"),
    "plant": (None, "plant", "plant seam: simple-model | external"),
    "cbf.r1": ("cbf", "r1", "norm-1 unsafe radius along x (m)"),
    "cbf.r2": ("cbf", "r2", "norm-1 unsafe radius along y (m)"),
    "cbf.gamma": ("cbf", "gamma", "barrier decrement rate in (0, 1]"),
    "cbf.margin": ("cbf", "margin", "back-off on each normalized constraint row"),
    "solver.alpha_p": ("solver", "alpha_p", "primal step size"),
    "solver.alpha_d": ("solver", "alpha_d", "dual step size"),
    "solver.eps": ("solver", "eps", "stopping threshold on primal/dual differences"),
    "solver.p_max": ("solver", "p_max", "inner-iteration cap"),
    "solver.warm_start": ("solver", "warm_start", "shift previous solution as initial guess"),
    "topology.kind": ("topology", "kind", "fully-connected | ring | star | mesh"),
    "topology.hub": ("topology", "hub", "hub agent for star topologies (0-based)"),
    "topology.adjacency": ("topology", "adjacency", "NxN 0/1 matrix for mesh topologies"),
    "links.delay_rounds": ("links", "delay_rounds", "link latency in rounds (scalar or NxN)"),
    "links.drop_prob": ("links", "drop_prob", "packet drop probability (scalar or NxN)"),
    "links.seed": ("links", "seed", "seed for all emulated randomness"),
    "arrival.pos_tol": ("arrival", "pos_tol", "arrival position tolerance (m)"),
    "arrival.vel_tol": ("arrival", "vel_tol", "arrival velocity tolerance (m/s)"),
    "runtime.barrier_timeout": (None, "barrier_timeout", "barrier timeout in seconds"),
}


def _parse_value(raw: str) -> Any:
    raw = raw.strip()
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        if raw.lower() in ("true", "false"):
            return raw.lower() == "true"
        return raw


def parse_document(text: str) -> dict[str, Any]:
    values: dict[str, Any] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, raw = line.split("=", 1)
        values[key.strip()] = _parse_value(raw)
    return values


def _matrix(value, size: int, key: str) -> tuple:
    arr = np.array(value, dtype=float)
    if arr.shape == (size,):
        arr = np.diag(arr)
    if arr.shape != (size, size):
        raise ConfigError(f"dimension mismatch: {key} must be {size}x{size} or a length-{size} "
                          f"diagonal, got shape {arr.shape}")
    return _tuple2(arr)


def _points(value, n: int, key: str) -> tuple:
    arr = np.array(value, dtype=float)
    if arr.shape != (n, 2):
        raise ConfigError(f"dimension mismatch: {key} must list {n} [x, y] points, "
                          f"got shape {arr.shape}")
    return _tuple2(arr)


def _scalar_or_matrix(value, n: int, key: str, cast):
    arr = np.array(value, dtype=float)
    if arr.ndim == 0:
        return cast(value)
    if arr.shape != (n, n):
        raise ConfigError(f"dimension mismatch: {key} must be a scalar or {n}x{n}, got {arr.shape}")
    return tuple(tuple(cast(v) for v in row) for row in value)


def load_config(document: str | dict | None = None, overrides: dict | None = None) -> ScenarioConfig:
    """Validate a config document (text or mapping) and apply defaults.

    Raises:
        ConfigError: for unknown keys, malformed values or dimension mismatches.
        UnsafeInitialConfig: if some pair starts outside the safe set.
    """
    if document is None:
        values: dict[str, Any] = {}
    elif isinstance(document, str):
        values = parse_document(document)
    else:
        values = dict(document)
    values.update(overrides or {})
    unknown = sorted(set(values) - set(CONFIG_KEYS))
    if unknown:
        raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")

    top: dict[str, Any] = {}
    sections: dict[str, dict[str, Any]] = {"cbf": {}, "solver": {}, "topology": {},
                                           "links": {}, "arrival": {}}
    for key, value in values.items():
        section, name, _ = CONFIG_KEYS[key]
        (top if section is None else sections[section])[name] = value

    base = ScenarioConfig()
    try:
        n = int(top.get("n_agents", base.n_agents))
        if n < 1:
            raise ConfigError("n_agents must be at least 1")
        top["n_agents"] = n
        for name in ("ts", "pa", "beta", "a_max", "barrier_timeout"):
            if name in top:
                top[name] = float(top[name])
        for name in ("horizon", "steps"):
            if name in top:
                top[name] = int(top[name])
        for name in ("initial_positions", "target_positions"):
            top[name] = _points(top.get(name, getattr(base, name)), n, name)
        po = np.array(top.get("po", base.po), dtype=float)
        if po.shape != (2,):
            raise ConfigError(f"dimension mismatch: po must be [x, y], got shape {po.shape}")
        top["po"] = tuple(float(v) for v in po)
        top["Q"] = _matrix(top.get("Q", base.Q), 4, "Q")
        top["R"] = _matrix(top.get("R", base.R), 2, "R")
        if top.get("plant", base.plant) not in PLANTS:
            raise ConfigError(f"plant must be one of {PLANTS}, got {top['plant']!r}")

        cbf = replace(base.cbf, **{k: float(v) for k, v in sections["cbf"].items()})
        sp = sections["solver"]
        for k in ("alpha_p", "alpha_d", "eps"):
            if k in sp:
                sp[k] = float(sp[k])
        if "p_max" in sp:
            sp["p_max"] = int(sp["p_max"])
        if "warm_start" in sp and not isinstance(sp["warm_start"], bool):
            raise ConfigError("solver.warm_start must be true or false")
        solver = replace(base.solver, **sp)

        tp = sections["topology"]
        if tp.get("kind", base.topology.kind) not in TOPOLOGY_KINDS:
            raise ConfigError(f"topology.kind must be one of {TOPOLOGY_KINDS}, got {tp['kind']!r}")
        if tp.get("adjacency") is not None:
            tp["adjacency"] = _scalar_or_matrix(tp["adjacency"], n, "topology.adjacency", int)
        if "hub" in tp:
            tp["hub"] = int(tp["hub"])
        topology = replace(base.topology, **tp)

        lp = sections["links"]
        if "delay_rounds" in lp:
            lp["delay_rounds"] = _scalar_or_matrix(lp["delay_rounds"], n, "links.delay_rounds", int)
        if "drop_prob" in lp:
            lp["drop_prob"] = _scalar_or_matrix(lp["drop_prob"], n, "links.drop_prob", float)
        if "seed" in lp:
            lp["seed"] = int(lp["seed"])
        links = replace(base.links, **lp)
        links.validate(n)
        arrival = replace(base.arrival, **{k: float(v) for k, v in sections["arrival"].items()})

        cfg = replace(base, **top, cbf=cbf, solver=solver, topology=topology, links=links,
                      arrival=arrival)
        if cfg.ts <= 0 or cfg.a_max <= 0 or cfg.horizon < 1 or cfg.steps < 0:
            raise ConfigError("ts and a_max must be positive, horizon >= 1 and steps >= 0")
        cfg.build_topology()
        cfg.cost_params()
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid config: {exc}") from exc

    check_initial_safety(cfg)
    return cfg


def check_initial_safety(cfg: ScenarioConfig) -> dict[tuple[int, int], float]:
    """Initial barrier value of every pair; raises if any is negative."""
    values = initial_barriers(cfg)
    for (i, j), h in values.items():
        if h < 0:
            raise UnsafeInitialConfig(
                f"initial-safety violation: agents {i + 1} and {j + 1} start inside each "
                f"other's unsafe set (barrier value {h:.6g} < 0)", (i, j), h)
    return values


def initial_barriers(cfg: ScenarioConfig) -> dict[tuple[int, int], float]:
    starts = cfg.starts
    return {(i, j): barrier_value(starts[i] - starts[j], cfg.cbf)
            for i, j in all_pairs(cfg.n_agents)}


def config_values(cfg: ScenarioConfig) -> dict[str, Any]:
    """Flat ``key -> JSON-able value`` view of a config (every key present)."""
    out = {}
    for key, (section, name, _) in CONFIG_KEYS.items():
        obj = cfg if section is None else getattr(cfg, section)
        value = getattr(obj, name)
        out[key] = json.loads(json.dumps(value))
    return out


def dump_config(cfg: ScenarioConfig) -> str:
    lines = [f"{key} = {json.dumps(value)}" for key, value in config_values(cfg).items()]
    return "\n".join(lines) + "\n"


def benchmark_position_swap() -> ScenarioConfig:
    """Four agents swapping positions pairwise across the origin."""
    return ScenarioConfig()


@dataclass(frozen=True)
class TrajectoryRecord:
    step: int
    agent: int
    px: float
    py: float
    vx: float
    vy: float
    ax: float
    ay: float
    min_barrier: float
    inner_iters: int
    converged: bool


@dataclass(frozen=True)
class StepTiming:
    agent: int
    step: int
    seconds: float
    inner_iters: int

    def __post_init__(self):
        if self.seconds < 0:
            raise ValueError("durations must be nonnegative")


class TrajectoryLog:
    """Per-agent append-only trajectory records (agent ids are 0-based in memory)."""

    def __init__(self, n_agents: int, records: Iterable[TrajectoryRecord] = ()):
        self.n_agents = n_agents
        self._per_agent: list[list[TrajectoryRecord]] = [[] for _ in range(n_agents)]
        for rec in records:
            self.append(rec)

    def append(self, rec: TrajectoryRecord):
        self._per_agent[rec.agent].append(rec)

    @property
    def records(self) -> list[TrajectoryRecord]:
        return sorted((r for recs in self._per_agent for r in recs), key=lambda r: (r.step, r.agent))

    def agent_records(self, agent: int) -> list[TrajectoryRecord]:
        return list(self._per_agent[agent])

    def positions(self, agent: int) -> np.ndarray:
        return np.array([[r.px, r.py] for r in self._per_agent[agent]]).reshape(-1, 2)

    def __len__(self):
        return sum(len(r) for r in self._per_agent)

    def __eq__(self, other):
        return isinstance(other, TrajectoryLog) and self.records == other.records


class TimingLog:
    def __init__(self, records: Iterable[StepTiming] = ()):
        self._records: list[StepTiming] = list(records)

    def append(self, rec: StepTiming):
        self._records.append(rec)

    @property
    def records(self) -> list[StepTiming]:
        return sorted(self._records, key=lambda r: (r.step, r.agent))

    def durations(self, agent: int | None = None) -> list[float]:
        return [r.seconds for r in self.records if agent is None or r.agent == agent]

    def summary(self, agent: int | None = None) -> "TimingSummary":
        return timing_summary(self.durations(agent))


@dataclass(frozen=True)
class TimingSummary:
    n: int
    median: float
    q1: float
    q3: float
    iqr: float
    minimum: float
    maximum: float
    removed: tuple[float, ...]

    def as_dict(self) -> dict:
        d = asdict(self)
        d["removed"] = list(self.removed)
        return d


OUTLIER_IQR_FACTOR = 10.0


def _quartiles(x: np.ndarray) -> tuple[float, float, float]:
    q1, med, q3 = np.percentile(x, [25, 50, 75], method="linear")
    return float(q1), float(med), float(q3)


def timing_summary(durations, factor: float = OUTLIER_IQR_FACTOR) -> TimingSummary:
    """Quartile summary after removing points far outside the interquartile band.

    A point is removed when it lies outside ``[Q1 - factor*IQR, Q3 + factor*IQR]``
    where the quartiles are taken over the *other* points (leave-one-out), so a
    single extreme value cannot inflate the band that judges it. Quartiles use
    linear interpolation between order statistics.
    """
    x = np.asarray(list(durations), dtype=float)
    if x.size == 0:
        raise ValueError("timing_summary needs at least one duration")
    keep = np.ones(x.size, dtype=bool)
    if x.size >= 3:
        order = np.argsort(x, kind="stable")
        xs = x[order]
        for pos in range(xs.size):
            rest = np.delete(xs, pos)
            q1, _, q3 = _quartiles(rest)
            band = factor * (q3 - q1)
            if xs[pos] < q1 - band or xs[pos] > q3 + band:
                keep[order[pos]] = False
    kept = x[keep]
    q1, med, q3 = _quartiles(kept)
    return TimingSummary(int(kept.size), med, q1, q3, q3 - q1, float(kept.min()),
                         float(kept.max()), tuple(sorted(float(v) for v in x[~keep])))


def _fmt(value) -> str:
    if isinstance(value, (bool, np.bool_)):
        return "1" if value else "0"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return repr(float(value))


def write_trajectory_csv(log: TrajectoryLog, path) -> Path:
    path = Path(path)
    try:
        with path.open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(TRAJECTORY_HEADER)
            for r in log.records:
                w.writerow([_fmt(r.step), _fmt(r.agent + 1), *(_fmt(getattr(r, k)) for k in
                            ("px", "py", "vx", "vy", "ax", "ay", "min_barrier")),
                            _fmt(r.inner_iters), _fmt(r.converged)])
    except OSError as exc:
        raise OSError(f"cannot write trajectory to {path}: {exc}") from exc
    return path


def read_trajectory_csv(path) -> TrajectoryLog:
    path = Path(path)
    with path.open(newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0] != TRAJECTORY_HEADER:
        raise ValueError(f"{path}: header does not match {','.join(TRAJECTORY_HEADER)}")
    records = []
    for lineno, row in enumerate(rows[1:], 2):
        try:
            records.append(TrajectoryRecord(
                int(row[0]), int(row[1]) - 1, *(float(v) for v in row[2:9]),
                int(row[9]), row[10] == "1"))
        except (ValueError, IndexError) as exc:
            raise ValueError(f"{path}:{lineno}: malformed trajectory row ({exc})") from exc
    n = max((r.agent for r in records), default=-1) + 1
    return TrajectoryLog(n, records)


def write_timing_csv(log: TimingLog, path) -> Path:
    path = Path(path)
    try:
        with path.open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(TIMING_HEADER)
            for r in log.records:
                w.writerow([_fmt(r.step), _fmt(r.agent + 1), _fmt(r.seconds), _fmt(r.inner_iters)])
    except OSError as exc:
        raise OSError(f"cannot write timing to {path}: {exc}") from exc
    return path


def read_timing_csv(path) -> TimingLog:
    path = Path(path)
    with path.open(newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ValueError(f"{path}: empty timing file")
    if rows[0] != TIMING_HEADER:
        raise ValueError(f"{path}:1: header does not match {','.join(TIMING_HEADER)}")
    records = []
    for lineno, row in enumerate(rows[1:], 2):
        try:
            if len(row) != len(TIMING_HEADER):
                raise ValueError(f"expected {len(TIMING_HEADER)} fields, got {len(row)}")
            records.append(StepTiming(int(row[1]) - 1, int(row[0]), float(row[2]), int(row[3])))
        except ValueError as exc:
            raise ValueError(f"{path}:{lineno}: malformed timing row ({exc})") from exc
    if not records:
        raise ValueError(f"{path}: no timing records")
    return TimingLog(records)


def write_message_log(message_log, path) -> Path:
    path = Path(path)
    with path.open("w") as fh:
        for rec in message_log:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    return path


def export(trajectory: TrajectoryLog, timing: TimingLog, out_dir, config: ScenarioConfig,
           exit_status: int, message_log=None, extra: dict | None = None) -> dict[str, Path]:
    """Write ``trajectory.csv``, ``timing.csv``, ``manifest.json`` (and messages)."""
    from . import __version__

    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {out}: {exc}") from exc
    paths = {"trajectory": write_trajectory_csv(trajectory, out / "trajectory.csv"),
             "timing": write_timing_csv(timing, out / "timing.csv")}
    if message_log is not None:
        paths["messages"] = write_message_log(message_log, out / "messages.jsonl")
    manifest = {"config": config_values(config), "seed": config.links.seed,
                "exit_status": exit_status, "version": __version__,
                "steps_logged": max((r.step for r in trajectory.records), default=-1) + 1}
    manifest.update(extra or {})
    paths["manifest"] = out / "manifest.json"
    try:
        paths["manifest"].write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    except OSError as exc:
        raise OSError(f"cannot write manifest to {paths['manifest']}: {exc}") from exc
    return paths


def load_manifest_config(path) -> ScenarioConfig:
    manifest = json.loads(Path(path).read_text())
    return load_config(manifest["config"])


_COLOURS = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2",
            "#7f7f7f", "#bcbd22", "#17becf"]


def write_plot(trajectory: TrajectoryLog, out_dir, cbf: CbfParams, size: int = 480) -> dict[str, Path]:
    """Per-agent polyline CSVs and an SVG of the trajectory plane.

    Start points get a square marker, end points a circle, and each end point
    carries its norm-1 safety diamond (half-widths ``r1``, ``r2``).
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths: dict[str, Path] = {}
    polys = [trajectory.positions(a) for a in range(trajectory.n_agents)]
    for a, pts in enumerate(polys):
        p = out / f"agent_{a + 1}.csv"
        with p.open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["x", "y"])
            w.writerows([[_fmt(x), _fmt(y)] for x, y in pts])
        paths[f"agent_{a + 1}"] = p

    allpts = np.vstack([p for p in polys if len(p)] or [np.zeros((1, 2))])
    lo = allpts.min(axis=0) - max(cbf.r1, cbf.r2) - 0.1
    hi = allpts.max(axis=0) + max(cbf.r1, cbf.r2) + 0.1
    scale = (size - 40) / float(max(hi - lo))

    def xy(p):
        return 20 + (p[0] - lo[0]) * scale, size - 20 - (p[1] - lo[1]) * scale

    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" '
             f'viewBox="0 0 {size} {size}">',
             f'<rect width="{size}" height="{size}" fill="white"/>']
    for a, pts in enumerate(polys):
        if not len(pts):
            continue
        colour = _COLOURS[a % len(_COLOURS)]
        line = " ".join("%.2f,%.2f" % xy(p) for p in pts)
        parts.append(f'<polyline points="{line}" fill="none" stroke="{colour}" stroke-width="2"/>')
        sx, sy = xy(pts[0])
        parts.append(f'<rect x="{sx - 4:.2f}" y="{sy - 4:.2f}" width="8" height="8" fill="{colour}"/>')
        ex, ey = xy(pts[-1])
        parts.append(f'<circle cx="{ex:.2f}" cy="{ey:.2f}" r="5" fill="none" stroke="{colour}" '
                     f'stroke-width="2"/>')
        c = pts[-1]
        diamond = [c + [cbf.r1, 0], c + [0, cbf.r2], c - [cbf.r1, 0], c - [0, cbf.r2]]
        parts.append('<polygon points="%s" fill="none" stroke="%s" stroke-dasharray="4 3"/>'
                     % (" ".join("%.2f,%.2f" % xy(p) for p in diamond), colour))
        parts.append(f'<text x="{sx + 6:.2f}" y="{sy - 6:.2f}" font-size="12" '
                     f'fill="{colour}">{a + 1}</text>')
    parts.append("</svg>")
    svg = out / "trajectories.svg"
    svg.write_text("\n".join(parts) + "\n")
    paths["svg"] = svg
    return paths


def safety_audit(trajectory: TrajectoryLog, cbf: CbfParams) -> dict[str, Any]:
    """Post-hoc check of the barrier and its decrement condition over a run.

    Returns the minimum barrier value and every ``(pair, step)`` whose
    decrement condition fails, with whether either agent's inner solve at that
    step was unconverged.
    """
    by_step: dict[int, dict[int, TrajectoryRecord]] = {}
    for r in trajectory.records:
        by_step.setdefault(r.step, {})[r.agent] = r
    steps = sorted(by_step)
    n = trajectory.n_agents
    min_h = math.inf
    audits = 0
    failures = []
    for k in steps:
        recs = by_step[k]
        for i, j in all_pairs(n):
            if i not in recs or j not in recs:
                continue
            h = barrier_value([recs[i].px - recs[j].px, recs[i].py - recs[j].py], cbf)
            min_h = min(min_h, h)
            nxt = by_step.get(k + 1)
            if nxt is None or i not in nxt or j not in nxt:
                continue
            h_next = barrier_value([nxt[i].px - nxt[j].px, nxt[i].py - nxt[j].py], cbf)
            audits += 1
            if not decrement_satisfied(h_next, h, cbf.gamma):
                failures.append({"pair": (i, j), "step": k, "h": h, "h_next": h_next,
                                 "unconverged": not (recs[i].converged and recs[j].converged)})
    return {"min_barrier": min_h, "audits": audits, "failures": failures}
