"""Command-line front end: single runs, parameter sweeps and baseline comparison.

Exit codes: 0 on success (``run``: source found), 2 when ``run`` times out,
1 on any validation or runtime error.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import math
import os
import sys
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import __version__, comms
from .engine import (BayesSwarm, Exhaustive, RandomWalk, SimSettings, collect_metrics, run,
                     settings_dict, write_run_log, write_trajectory_csv)
from .environment import load_case, registry_version
from .gp import Observation

WORKERS_ENV = "BAYES_SWARM_WORKERS"
POLICIES = ("bayes", "random", "exhaustive")

# short names accepted by --override, on top of SimSettings field names
OVERRIDE_ALIASES = {
    "V": "speed",
    "T_first": "horizon_first",
    "T": "horizon",
    "T_later": "horizon",
    "N_max": "n_max",
    "eps": "epsilon",
    "nodes": "quadrature_nodes",
    "dtheta": "delta_theta",
}
_SETTING_TYPES = {f.name: f.type for f in fields(SimSettings)}


class ConfigError(ValueError):
    pass


def parse_override(text: str) -> tuple[str, object]:
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not of the form key=value")
    key, raw = (s.strip() for s in text.split("=", 1))
    name = OVERRIDE_ALIASES.get(key, key)
    if name not in _SETTING_TYPES:
        known = sorted(set(_SETTING_TYPES) | set(OVERRIDE_ALIASES))
        raise ConfigError(f"unknown override {key!r}; known keys: {', '.join(known)}")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        raise ConfigError(f"override {key}: cannot parse value {raw!r}") from None
    return name, value


@dataclass
class ExperimentConfig:
    """Resolved description of one CLI invocation."""

    case: int
    policy: str = "bayes"
    alpha: float = 0.4
    robots: list[int] = field(default_factory=lambda: [5])
    seeds: list[int] = field(default_factory=lambda: [1])
    alphas: list[float] = field(default_factory=list)
    overrides: dict = field(default_factory=dict)
    out: str = "."

    def validate(self) -> "ExperimentConfig":
        if self.policy not in POLICIES:
            raise ConfigError(f"policy must be one of {POLICIES}")
        for a in [self.alpha, *self.alphas]:
            if not (isinstance(a, (int, float)) and 0.0 <= a <= 1.0):
                raise ConfigError(f"alpha must lie in [0, 1], got {a}")
        if not self.robots or any(int(n) < 1 for n in self.robots):
            raise ConfigError("robot counts must be >= 1")
        if not self.seeds:
            raise ConfigError("at least one seed is required")
        self.settings()
        return self

    def settings(self) -> SimSettings:
        try:
            return SimSettings(**self.overrides)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"invalid override: {exc}") from None

    def policy_object(self, alpha: float | None = None):
        if self.policy == "bayes":
            return BayesSwarm(self.alpha if alpha is None else alpha)
        return RandomWalk() if self.policy == "random" else Exhaustive()

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        return cls(**d)

    @classmethod
    def from_json(cls, text: str) -> "ExperimentConfig":
        return cls.from_dict(json.loads(text))


def stamp(config: ExperimentConfig, settings: SimSettings) -> dict:
    """Reproducibility header attached to every output file."""
    return {
        "artifact": "bayes_swarm",
        "version": __version__,
        "case_registry": registry_version(),
        "seeds": list(config.seeds),
        "config": config.to_dict(),
        "settings": settings_dict(settings),
    }


def _resolve_settings(config: ExperimentConfig) -> SimSettings:
    settings = config.settings()
    if "workers" not in config.overrides and os.environ.get(WORKERS_ENV):
        try:
            settings = replace(settings, workers=int(os.environ[WORKERS_ENV]))
        except ValueError:
            raise ConfigError(f"{WORKERS_ENV} must be a positive integer") from None
    return settings


def _write_csv(path: Path, header: dict, columns, rows) -> Path:
    buf = io.StringIO()
    buf.write("# " + json.dumps(header, sort_keys=True) + "\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    w.writerows(rows)
    path.write_text(buf.getvalue(), encoding="utf-8")
    return path


def _fmt(v):
    if isinstance(v, float):
        return "nan" if math.isnan(v) else repr(v)
    return v


def cmd_run(config: ExperimentConfig) -> int:
    settings = _resolve_settings(config)
    case = load_case(config.case)
    n, seed = int(config.robots[0]), int(config.seeds[0])
    result = run(case, config.policy_object(), n, seed, settings)
    out = Path(config.out)
    out.mkdir(parents=True, exist_ok=True)
    header = stamp(config, settings)
    write_run_log(result, out / "run.jsonl", header)
    write_trajectory_csv(result, out / "trajectory.csv", header)
    metrics = collect_metrics(result)
    (out / "metrics.json").write_text(
        json.dumps({"header": header, "metrics": metrics}, sort_keys=True, indent=2) + "\n",
        encoding="utf-8")
    print(f"case {case.id} {config.policy} n={n} seed={seed}: {metrics['outcome']} "
          f"at {metrics['completion_time']:.3f} s")
    return 0 if metrics["success"] else 2


def cmd_sweep_alpha(config: ExperimentConfig) -> int:
    if not config.alphas:
        raise ConfigError("sweep-alpha needs a non-empty alpha list")
    settings = _resolve_settings(config)
    case = load_case(config.case)
    rows, summary = [], []
    for alpha in config.alphas:
        for n in config.robots:
            group = []
            for seed in config.seeds:
                m = collect_metrics(run(case, BayesSwarm(alpha), int(n), int(seed), settings))
                group.append(m)
                rows.append([alpha, n, seed, _fmt(m["completion_time"]), _fmt(m["mapping_error"]),
                             int(m["success"])])
            summary.append([alpha, n, "mean",
                            _fmt(float(np.mean([g["completion_time"] for g in group]))),
                            _fmt(float(np.mean([g["mapping_error"] for g in group]))),
                            _fmt(float(np.mean([g["success"] for g in group])))])
    out = Path(config.out)
    out.mkdir(parents=True, exist_ok=True)
    cols = ["alpha", "n_robots", "seed", "completion_time", "mapping_error", "success"]
    path = _write_csv(out / "sweep_alpha.csv", stamp(config, settings), cols, rows + summary)
    print(f"wrote {path}")
    return 0


def cmd_sweep_size(config: ExperimentConfig) -> int:
    settings = _resolve_settings(config)
    case = load_case(config.case)
    rows = []
    for n in config.robots:
        for seed in config.seeds:
            m = collect_metrics(run(case, config.policy_object(), int(n), int(seed), settings))
            rows.append([n, seed, _fmt(m["completion_time"]), _fmt(m["mean_knowledge_gain"]),
                         _fmt(m["mean_decisions"]), _fmt(m["mapping_error"]), int(m["success"])])
    out = Path(config.out)
    out.mkdir(parents=True, exist_ok=True)
    cols = ["n_robots", "seed", "completion_time", "mean_knowledge_gain", "mean_decisions",
            "mapping_error", "success"]
    path = _write_csv(out / "sweep_size.csv", stamp(config, settings), cols, rows)
    print(f"wrote {path}")
    return 0


def compare_case(case_id: int, n_robots: int, alpha: float, bayes_seed: int, random_seeds,
                 settings: SimSettings) -> dict:
    """Bayes-Swarm (one seed), random walk (best of several seeds) and exhaustive search."""
    case = load_case(case_id)
    bayes = collect_metrics(run(case, BayesSwarm(alpha), n_robots, bayes_seed, settings))
    walks = [collect_metrics(run(case, RandomWalk(), n_robots, s, replace(settings, record_trajectory=False)))
             for s in random_seeds]
    exhaustive = collect_metrics(run(case, Exhaustive(), n_robots, 1, settings))
    found = [w["completion_time"] for w in walks if w["success"]]
    return {
        "case": case_id,
        "bayes_time": bayes["completion_time"], "bayes_success": int(bayes["success"]),
        "random_best_time": min(found) if found else math.nan,
        "random_successes": len(found), "random_runs": len(walks),
        "exhaustive_time": exhaustive["completion_time"],
        "exhaustive_success": int(exhaustive["success"]),
        "speedup_vs_exhaustive": exhaustive["completion_time"] / bayes["completion_time"]
        if bayes["completion_time"] > 0 else math.inf,
        "speedup_vs_random": (min(found) / bayes["completion_time"]) if found else math.nan,
    }


def cmd_compare(config: ExperimentConfig, cases) -> int:
    settings = _resolve_settings(config)
    n = int(config.robots[0])
    rows = [compare_case(c, n, config.alpha, int(config.seeds[0]), range(1, 6), settings)
            for c in cases]
    out = Path(config.out)
    out.mkdir(parents=True, exist_ok=True)
    cols = list(rows[0])
    _write_csv(out / "compare.csv", stamp(config, settings), cols,
               [[_fmt(r[c]) for c in cols] for r in rows])
    print(f"{'case':>4} {'bayes [s]':>10} {'random best [s]':>16} {'rw succ':>8} "
          f"{'exhaustive [s]':>15} {'x exh':>6} {'x rw':>6}")
    for r in rows:
        print(f"{r['case']:>4} {r['bayes_time']:>10.1f} {r['random_best_time']:>16.1f} "
              f"{r['random_successes']:>4}/{r['random_runs']:<3} {r['exhaustive_time']:>15.1f} "
              f"{r['speedup_vs_exhaustive']:>6.2f} {r['speedup_vs_random']:>6.2f}")
    return 0


def cmd_dump_packet(case_id: int, waypoint, observations) -> int:
    case = load_case(case_id)
    obs = tuple(Observation((x, y), v, 0.0, 0) for x, y, v in observations)
    data = comms.encode(comms.Packet(0, tuple(waypoint), obs), case.arena, case.value_range)
    print(f"{len(data)} bytes")
    print(comms.hexdump(data))
    return 0


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _triple(text: str) -> tuple[float, float, float]:
    parts = text.split(",")
    if len(parts) != 3:
        raise argparse.ArgumentTypeError(f"expected x,y,value; got {text!r}")
    return tuple(float(p) for p in parts)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="bayes-swarm", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, robots_default="5", multi_robots=False):
        sp.add_argument("--case", type=int, required=True)
        sp.add_argument("--policy", choices=POLICIES, default="bayes")
        sp.add_argument("--alpha", type=float, default=0.4)
        if multi_robots:
            sp.add_argument("--robots", type=int, nargs="+", default=[int(robots_default)])
        else:
            sp.add_argument("--robots", type=int, default=int(robots_default))
        sp.add_argument("--out", default=".")
        sp.add_argument("--override", action="append", default=[], metavar="KEY=VALUE",
                        help="simulation setting, e.g. V=0.1 T=10 N_max=400 eps=0.05 nodes=32")

    sp = sub.add_parser("run", help="single simulation")
    common(sp)
    sp.add_argument("--seed", type=int, default=1)

    sp = sub.add_parser("sweep-alpha", help="exploitation coefficient sweep")
    common(sp, robots_default="4", multi_robots=True)
    sp.add_argument("--alphas", type=float, nargs="*", default=[0.0, 0.4, 1.0])
    sp.add_argument("--seeds", type=int, nargs="+", default=[1, 2, 3, 4, 5])

    sp = sub.add_parser("sweep-size", help="swarm size sweep")
    common(sp, multi_robots=True)
    sp.add_argument("--seeds", type=int, nargs="+", default=[1])

    sp = sub.add_parser("compare", help="Bayes-Swarm against random walk and exhaustive search")
    sp.add_argument("--cases", type=int, nargs="+", default=[1, 2, 3, 4])
    sp.add_argument("--alpha", type=float, default=0.4)
    sp.add_argument("--robots", type=int, default=5)
    sp.add_argument("--seed", type=int, default=1)
    sp.add_argument("--out", default=".")
    sp.add_argument("--override", action="append", default=[], metavar="KEY=VALUE")

    sp = sub.add_parser("dump-packet", help="hex dump of an encoded broadcast")
    sp.add_argument("--case", type=int, required=True)
    sp.add_argument("--waypoint", type=float, nargs=2, required=True)
    sp.add_argument("--obs", type=_triple, nargs="*", default=[], metavar="X,Y,V")
    return p


def config_from_args(args) -> ExperimentConfig:
    overrides = dict(parse_override(o) for o in args.override)
    robots = args.robots if isinstance(args.robots, list) else [args.robots]
    if args.command in ("run", "compare"):
        seeds = [args.seed]
    else:
        seeds = list(args.seeds)
    return ExperimentConfig(
        case=getattr(args, "case", 0) or 0,
        policy=getattr(args, "policy", "bayes"),
        alpha=args.alpha,
        robots=list(robots),
        seeds=seeds,
        alphas=list(getattr(args, "alphas", [])),
        overrides=overrides,
        out=args.out,
    )


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "dump-packet":
            return cmd_dump_packet(args.case, args.waypoint, args.obs)
        config = config_from_args(args).validate()
        if args.command == "run":
            return cmd_run(config)
        if args.command == "sweep-alpha":
            return cmd_sweep_alpha(config)
        if args.command == "sweep-size":
            return cmd_sweep_size(config)
        return cmd_compare(config, args.cases)
    except (ConfigError, KeyError, ValueError, OSError) as exc:
        print(f"bayes-swarm: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
