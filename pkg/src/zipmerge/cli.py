"""Command-line entry point: ``zipmerge {train,eval,replay,selftest}``.

Exit status is 0 on success, 1 for usage errors (bad flags, missing files,
invalid configuration) and 2 for faults while running.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

EXIT_OK, EXIT_USAGE, EXIT_FAULT = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _existing(path: str | None, what: str) -> Path | None:
    if path is None:
        return None
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"{what} not found: {path}")
    return p


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="zipmerge", description="Zipper-merge traffic simulator and self-play trainer.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    t = sub.add_parser("train", help="run a staged self-play schedule")
    t.add_argument("--schedule", default="default",
                   help="schedule file, or the name of a shipped schedule (default, desk)")
    t.add_argument("--map", help="map file (default: shipped zipper merge)")
    t.add_argument("--config", help="flat key=value configuration file")
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--out", required=True, help="output directory (metrics, curve, zoo)")

    e = sub.add_parser("eval", help="evaluate a policy snapshot against a population")
    src = e.add_mutually_exclusive_group(required=True)
    src.add_argument("--snapshot", help="policy snapshot file")
    src.add_argument("--idm-ego", action="store_true", help="evaluate the rule-based baseline instead")
    e.add_argument("--population", default="popul1",
                   help="popul1..popul4 or IDM:p,RL:p,SP1:p,SP2:p (default popul1)")
    e.add_argument("--trials", type=int, default=250)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--zoo", help="zoo directory providing RL/SP1/SP2 sparring agents")
    e.add_argument("--map", help="map file (default: shipped zipper merge)")
    e.add_argument("--config", help="flat key=value configuration file")
    e.add_argument("--trace", help="write every trial's trace to this CSV")
    e.add_argument("--json", help="write the report as JSON")

    r = sub.add_parser("replay", help="render a trace CSV to PPM frames")
    r.add_argument("--trace", required=True)
    r.add_argument("--out", required=True)
    r.add_argument("--map", help="map file the trace was recorded on (default: shipped zipper merge)")
    r.add_argument("--size", type=int, default=256, help="frame size in pixels")

    sub.add_parser("selftest", help="run the fast oracle checks")
    return p


def _road(path):
    from .road_network import default_map, load_map_file
    return load_map_file(path) if path else default_map()


def _schedule(arg: str):
    from .selfplay import default_schedule, load_schedule
    if Path(arg).is_file():
        return load_schedule(arg)
    try:
        return default_schedule(arg)
    except FileNotFoundError:
        raise UsageError(f"schedule not found: {arg}") from None


def cmd_train(args) -> int:
    from .config import load_config
    from .evaluation import emit_training_curve, training_curve
    from .policy import save_snapshot
    from .selfplay import run_selfplay

    _existing(args.map, "map file")
    _existing(args.config, "config file")
    cfg = load_config(args.config)
    schedule = _schedule(args.schedule)
    road = _road(args.map)
    out = Path(args.out)
    result = run_selfplay(schedule, road, cfg.env, cfg.ppo, args.seed, out, arch=cfg.arch, obs_spec=cfg.obs)
    save_snapshot(result.policy, {"seed": args.seed, "update_index": result.update_index}, out / "final.snap")
    n = emit_training_curve(training_curve(result.metrics_path), out / "curve.csv")
    print(f"trained {result.update_index} updates ({n} curve rows); zoo {result.zoo.tags()} in {out / 'zoo'}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .config import load_config
    from .evaluation import evaluate
    from .policy import load_snapshot
    from .selfplay import AgentZoo, PopulationSpec

    _existing(args.map, "map file")
    _existing(args.config, "config file")
    snap = _existing(args.snapshot, "snapshot")
    if args.zoo is not None and not (Path(args.zoo) / "zoo.index").is_file():
        raise UsageError(f"no zoo index in {args.zoo}")
    if args.trials < 1:
        raise UsageError("--trials must be positive")
    population = PopulationSpec.parse(args.population)
    cfg = load_config(args.config)
    policy, tag = None, "IDM"
    if snap is not None:
        policy, meta = load_snapshot(snap)
        policy.eval()
        tag = meta.get("tag", snap.stem)
    zoo = AgentZoo(args.zoo) if args.zoo else None
    report = evaluate(policy, population, _road(args.map), n=args.trials, seed=args.seed, config=cfg.env,
                      zoo=zoo, policy_tag=tag, obs_spec=cfg.obs, trace_path=args.trace)
    print(report.summary())
    if args.json:
        Path(args.json).write_text(json.dumps(report.as_dict(), indent=2, sort_keys=True) + "\n",
                                   encoding="utf-8")
    return EXIT_OK


def cmd_replay(args) -> int:
    from .evaluation import ReplayView, export_replay
    from .sim_env import read_trace_csv

    trace = _existing(args.trace, "trace file")
    _existing(args.map, "map file")
    road = _road(args.map)
    frames = export_replay(read_trace_csv(trace), road, args.out, view=ReplayView.fit(road, args.size))
    print(f"wrote {len(frames)} frames to {args.out}")
    return EXIT_OK


def cmd_selftest(args) -> int:
    from .checks import run_fast_checks
    return EXIT_OK if run_fast_checks() else EXIT_FAULT


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "replay": cmd_replay, "selftest": cmd_selftest}


def main(argv=None) -> int:
    from .config import ConfigFileError
    from .selfplay import ConfigError

    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(asctime)s %(name)s %(message)s")
        return COMMANDS[args.command](args)
    except (UsageError, ConfigError, ConfigFileError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except KeyboardInterrupt:
        return EXIT_FAULT
    except Exception as exc:  # any other failure is a runtime fault
        print(f"fault: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAULT


if __name__ == "__main__":
    sys.exit(main())
