"""Command-line entry point: ``distctl {run,bench,stats,plot,validate}``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .runtime import EXIT_CONFIG, EXIT_FAILURE, EXIT_OK, EXIT_SOLVER_CAP, run_mission
from .safety import assemble_blocks
from .model import AgentState
from .scenario import (CONFIG_KEYS, ConfigError, UnsafeInitialConfig, _parse_value,
                       benchmark_position_swap, export, initial_barriers, load_config,
                       load_manifest_config, read_timing_csv, read_trajectory_csv, safety_audit,
                       timing_summary, write_plot)

BUDGET_SECONDS = 0.2
log = logging.getLogger("distctl")


def _keys_epilog() -> str:
    width = max(len(k) for k in CONFIG_KEYS)
    lines = ["config keys (file 'key = value' lines or --set key=value):"]
    lines += [f"  {k:<{width}}  {help_}" for k, (_, _, help_) in CONFIG_KEYS.items()]
    lines.append("")
    lines.append("exit codes: 0 ok, 1 failure, 2 solver cap hit, 3 barrier timeout, 4 config error")
    return "\n".join(lines)


def _add_config_args(p: argparse.ArgumentParser):
    p.add_argument("-c", "--config", type=Path, help="config document (flat key = value text)")
    p.add_argument("--benchmark", action="store_true",
                   help="use the four-agent position-swap benchmark")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config key after loading (repeatable)")
    p.add_argument("--seed", type=int, help="seed for all emulated randomness (links.seed)")


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.RawDescriptionHelpFormatter
    parser = argparse.ArgumentParser(prog="distctl", description=__doc__, epilog=_keys_epilog(),
                                     formatter_class=fmt)
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("run", help="run a scenario and write its logs", epilog=_keys_epilog(),
                       formatter_class=fmt)
    _add_config_args(p)
    p.add_argument("-o", "--out", type=Path, default=Path("out"), help="output directory")

    p = sub.add_parser("bench", help="run the benchmark and report timing against the budget",
                       epilog=_keys_epilog(), formatter_class=fmt)
    _add_config_args(p)
    p.add_argument("-o", "--out", type=Path, default=Path("out"), help="output directory")

    p = sub.add_parser("stats", help="summarise a timing.csv")
    p.add_argument("timing", type=Path)
    p.add_argument("-o", "--out", type=Path, help="directory for summary.json (default: beside input)")

    p = sub.add_parser("plot", help="write polyline data and an SVG from a trajectory.csv")
    p.add_argument("trajectory", type=Path)
    p.add_argument("-c", "--config", type=Path, help="config for safety radii (default: manifest "
                                                     "beside the input, else the benchmark)")
    p.add_argument("-o", "--out", type=Path, help="output directory (default: beside input)")

    p = sub.add_parser("validate", help="check a config and print derived quantities",
                       epilog=_keys_epilog(), formatter_class=fmt)
    _add_config_args(p)
    return parser


def _load(args):
    overrides = {}
    for item in args.overrides:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        key, raw = item.split("=", 1)
        overrides[key.strip()] = _parse_value(raw)
    if args.seed is not None:
        overrides["links.seed"] = args.seed
    if args.config is not None and args.benchmark:
        raise ConfigError("use either --config or --benchmark, not both")
    if args.config is not None:
        try:
            document = args.config.read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from exc
        return load_config(document, overrides)
    return load_config(None, overrides)


def _summary_dict(durations) -> dict:
    return timing_summary(durations).as_dict()


def _print_summary(label: str, s: dict):
    print(f"{label:>8}: n={s['n']} median={s['median'] * 1e3:.2f} ms "
          f"Q1={s['q1'] * 1e3:.2f} ms Q3={s['q3'] * 1e3:.2f} ms IQR={s['iqr'] * 1e3:.2f} ms "
          f"removed={len(s['removed'])}")


def cmd_run(args) -> int:
    cfg = _load(args)
    result = run_mission(cfg)
    audit = safety_audit(result.trajectory, cfg.cbf)
    extra = {"steps_run": result.steps_run, "error": result.error,
             "min_barrier": audit["min_barrier"], "decrement_failures": len(audit["failures"])}
    paths = export(result.trajectory, result.timing, args.out, cfg, result.status,
                   result.message_log, extra)
    for name, path in paths.items():
        print(f"{name}: {path}")
    print(f"status: {result.status}" + (f" ({result.error})" if result.error else ""))
    return result.status


def cmd_bench(args) -> int:
    if args.config is None:
        args.benchmark = True
    status = cmd_run(args)
    if status in (EXIT_OK, EXIT_SOLVER_CAP):
        summary = stats_report(args.out / "timing.csv", args.out)
        if summary["pooled"]["median"] >= BUDGET_SECONDS:
            return status or EXIT_FAILURE
    return status


def stats_report(timing_path: Path, out_dir: Path | None = None) -> dict:
    timing = read_timing_csv(timing_path)
    agents = sorted({r.agent for r in timing.records})
    report = {"pooled": _summary_dict(timing.durations()),
              "agents": {str(a + 1): _summary_dict(timing.durations(a)) for a in agents}}
    for a in agents:
        _print_summary(f"agent {a + 1}", report["agents"][str(a + 1)])
    _print_summary("pooled", report["pooled"])
    over = [k for k, s in report["agents"].items() if s["median"] >= BUDGET_SECONDS]
    report["budget_seconds"] = BUDGET_SECONDS
    report["budget_pass"] = report["pooled"]["median"] < BUDGET_SECONDS
    report["agents_over_budget"] = over
    print(f"budget: {'PASS' if report['budget_pass'] else 'FAIL'} "
          f"(pooled median {report['pooled']['median'] * 1e3:.2f} ms vs "
          f"{BUDGET_SECONDS * 1e3:.0f} ms)")
    if over:
        print(f"agents with median over budget: {', '.join(over)}")
    out = Path(out_dir) if out_dir is not None else timing_path.parent
    out.mkdir(parents=True, exist_ok=True)
    path = out / "summary.json"
    path.write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    print(f"summary: {path}")
    return report


def cmd_stats(args) -> int:
    stats_report(args.timing, args.out)
    return EXIT_OK


def cmd_plot(args) -> int:
    trajectory = read_trajectory_csv(args.trajectory)
    manifest = args.trajectory.parent / "manifest.json"
    if args.config is not None:
        cfg = load_config(args.config.read_text())
    elif manifest.exists():
        cfg = load_manifest_config(manifest)
    else:
        cfg = benchmark_position_swap()
    out = args.out if args.out is not None else args.trajectory.parent
    for name, path in write_plot(trajectory, out, cfg.cbf).items():
        print(f"{name}: {path}")
    return EXIT_OK


def cmd_validate(args) -> int:
    cfg = _load(args)
    model = cfg.model()
    P = cfg.terminal_weight()
    states = [AgentState(p, np.zeros(2)) for p in cfg.starts]
    blocks = assemble_blocks(model, states, cfg.targets, cfg.cbf, cfg.horizon)
    topo = cfg.build_topology()
    np.set_printoptions(precision=6, suppress=True)
    print(f"agents: {cfg.n_agents}  horizon: {cfg.horizon}  ts: {cfg.ts}")
    print(f"topology: {topo.kind}, {len(topo.edges())} edges, diameter {topo.diameter()}")
    print("terminal weight P (DARE):")
    print(P)
    print(f"constraint rows per agent: {blocks[0].m if blocks else 0}")
    for (i, j), h in initial_barriers(cfg).items():
        print(f"initial barrier {i + 1}-{j + 1}: {h:.6g}")
    print("config: valid")
    return EXIT_OK


COMMANDS = {"run": cmd_run, "bench": cmd_bench, "stats": cmd_stats, "plot": cmd_plot,
            "validate": cmd_validate}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.verb](args)
    except UnsafeInitialConfig as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
