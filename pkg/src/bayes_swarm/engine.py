"""Discrete-event swarm simulation with Bayes-Swarm and baseline policies.

Time is kept in integer ticks of ``SimSettings.tick`` seconds so event ordering
never depends on float rounding.  Motion between waypoints is analytic; the
tick only fixes when a robot is first seen inside the detection radius.

Events at the same tick pop in priority order: detection, timeout, packet
delivery, waypoint arrival; ties within a priority go by creation order.
Arrivals at one instant are processed one robot at a time, so a robot deciding
later at that instant already holds the packets of those that decided before.
"""

from __future__ import annotations

import heapq
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Union

import numpy as np

from . import comms
from .agent import AgentSettings, AgentState, Termination, take_decision, take_first_decision
from .environment import CaseStudy, mapping_error, sample_along, sample_stationary
from .geometry import Box
from .gp import FitBudget, Observation, SingularKernel

FOUND, TIMEOUT, DELIVERY, ARRIVAL = 0, 1, 2, 3
_EVENT_NAMES = {FOUND: "found", TIMEOUT: "timeout", DELIVERY: "delivery", ARRIVAL: "arrival"}


@dataclass(frozen=True)
class BayesSwarm:
    alpha: float = 0.4
    name = "bayes"

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")


@dataclass(frozen=True)
class RandomWalk:
    name = "random"


@dataclass(frozen=True)
class Exhaustive:
    name = "exhaustive"


Policy = Union[BayesSwarm, RandomWalk, Exhaustive]


@dataclass(frozen=True)
class SimSettings:
    """Run parameters.  ``None`` fields fall back to the case study (or, for
    ``t_max``, to the policy's limit from the case registry)."""

    speed: float = 0.1
    horizon_first: float = 4.0
    horizon: float = 10.0
    n_max: int = 400
    epsilon: float | None = None
    quadrature_nodes: int = 32
    delta_theta: float | None = None
    sample_rate: float = 1.0
    tick: float = 1e-3
    decision_latency: float = 0.0
    delivery_latency: float = 0.0
    t_max: float | None = None
    swath: float = 0.1
    fit_starts: int = 5
    fit_max_iter: int = 30
    fit_max_points: int | None = 200
    workers: int = 1
    mapping_lattice: int = 50
    record_trajectory: bool = True

    def __post_init__(self):
        positive = ("speed", "horizon_first", "horizon", "sample_rate", "tick", "swath")
        for name in positive:
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.n_max < 1 or self.quadrature_nodes < 2 or self.workers < 1:
            raise ValueError("n_max >= 1, quadrature_nodes >= 2 and workers >= 1 are required")
        if self.epsilon is not None and not self.epsilon > 0:
            raise ValueError("epsilon must be positive")
        if self.delta_theta is not None and not 0 <= self.delta_theta <= 360:
            raise ValueError("delta_theta must lie in [0, 360]")
        if self.t_max is not None and self.t_max < 0:
            raise ValueError("t_max must be non-negative")
        if self.decision_latency < 0 or self.delivery_latency < 0:
            raise ValueError("latencies must be non-negative")

    def agent_settings(self) -> AgentSettings:
        return AgentSettings(
            speed=self.speed, horizon_first=self.horizon_first, horizon=self.horizon,
            n_max=self.n_max, sample_rate=self.sample_rate,
            quadrature_nodes=self.quadrature_nodes,
            fit_budget=FitBudget(n_starts=self.fit_starts, max_iter=self.fit_max_iter,
                                 max_points=self.fit_max_points),
            workers=self.workers,
        )


@dataclass
class Leg:
    robot: int
    t_start: float
    t_end: float
    start: tuple[float, float]
    end: tuple[float, float]

    def position(self, t, speed: float) -> np.ndarray:
        """Location at time(s) ``t`` within the leg (held at ``end`` after arrival)."""
        a, b = np.asarray(self.start), np.asarray(self.end)
        length = float(np.linalg.norm(b - a))
        t = np.asarray(t, dtype=float)
        if length == 0.0:
            return np.broadcast_to(a, t.shape + (2,)).copy()
        frac = np.clip((t - self.t_start) * speed / length, 0.0, 1.0)
        return a + frac[..., None] * (b - a)


@dataclass
class RobotRecord:
    robot_id: int
    decisions: int = 0
    knowledge_gain: float = 0.0
    bytes_sent: int = 0
    decision_times: list[float] = field(default_factory=list)
    waypoints: list[tuple[float, float]] = field(default_factory=list)


@dataclass
class RunResult:
    outcome: Termination
    completion_time: float
    found_by: int | None
    case_id: int
    policy: str
    alpha: float | None
    n_robots: int
    seed: int
    t_max: float
    robots: list[RobotRecord]
    legs: list[Leg]
    mapping_error: float
    events: list[dict]
    trajectory: list[tuple[int, float, float, float, float]]


def _ticks(seconds: float, tick: float) -> int:
    return int(math.ceil(seconds / tick - 1e-6))


def reflect_into(points, arena: Box) -> np.ndarray:
    """Mirror points back into the arena across its walls (any number of bounces)."""
    p = np.asarray(points, dtype=float)
    lo, span = arena.lower, arena.extent
    r = np.mod(p - lo, 2.0 * span)
    return lo + np.where(r > span, 2.0 * span - r, r)


def random_walk_step(position, speed: float, horizon: float, arena: Box,
                     rng: np.random.Generator) -> np.ndarray:
    """Waypoint one ``speed * horizon`` step away in a uniform random direction,
    reflected into the arena."""
    phi = rng.uniform(0.0, 2.0 * np.pi)
    target = np.asarray(position, dtype=float) + speed * horizon * np.array([np.cos(phi), np.sin(phi)])
    return reflect_into(target, arena)


def partition_arena(arena: Box, n_robots: int) -> list[Box]:
    """Equal vertical strips, or 2x2 quarters for four robots."""
    if n_robots < 1:
        raise ValueError("n_robots must be >= 1")
    if n_robots == 4:
        xm, ym = arena.center
        return [Box(arena.xmin, arena.ymin, xm, ym), Box(xm, arena.ymin, arena.xmax, ym),
                Box(arena.xmin, ym, xm, arena.ymax), Box(xm, ym, arena.xmax, arena.ymax)]
    edges = np.linspace(arena.xmin, arena.xmax, n_robots + 1)
    return [Box(float(edges[i]), arena.ymin, float(edges[i + 1]), arena.ymax) for i in range(n_robots)]


def lawnmower(region: Box, swath: float) -> list[np.ndarray]:
    """Boustrophedon waypoints over ``region``: vertical rows ``swath`` apart,
    starting at the lower-left corner; the last row sits on the right edge."""
    if not swath > 0:
        raise ValueError("swath must be positive")
    width = region.xmax - region.xmin
    n_gaps = max(0, int(math.ceil(width / swath - 1e-9)))
    xs = [min(region.xmin + j * swath, region.xmax) for j in range(n_gaps + 1)]
    pts = []
    for j, x in enumerate(xs):
        ys = (region.ymin, region.ymax) if j % 2 == 0 else (region.ymax, region.ymin)
        pts.extend([np.array([x, ys[0]]), np.array([x, ys[1]])])
    return pts


def exhaustive_plan(arena: Box, n_robots: int, swath: float) -> list[list[np.ndarray]]:
    return [lawnmower(region, swath) for region in partition_arena(arena, n_robots)]


def path_length(points) -> float:
    p = np.asarray(points, dtype=float)
    return float(np.sum(np.linalg.norm(np.diff(p, axis=0), axis=1))) if len(p) > 1 else 0.0


def first_entry_tick(leg_start, leg_end, duration_ticks: int, tick: float, speed: float,
                     target, epsilon: float) -> int | None:
    """Smallest tick offset ``k`` in ``[0, duration_ticks]`` at which the robot is
    within ``epsilon`` of ``target``, or ``None``."""
    a, b, s = (np.asarray(v, dtype=float) for v in (leg_start, leg_end, target))
    length = float(np.linalg.norm(b - a))

    def inside(k: int) -> bool:
        tau = min(k * tick * speed, length)
        p = a if length == 0.0 else a + (tau / length) * (b - a)
        return float(np.linalg.norm(p - s)) <= epsilon

    if length == 0.0:
        return 0 if inside(0) else None
    u = (b - a) / length
    d = a - s
    # distance^2 along the path as a function of arc length l: l^2 + 2 l u.d + |d|^2
    ud = float(u @ d)
    disc = ud * ud - (float(d @ d) - epsilon * epsilon)
    if disc < 0:
        return None
    l_in, l_out = -ud - math.sqrt(disc), -ud + math.sqrt(disc)
    if l_out < 0 or l_in > length:
        return None
    k = max(0, int(math.floor(max(l_in, 0.0) / (speed * tick))) - 1)
    last_moving = int(math.ceil(min(l_out, length) / (speed * tick))) + 1
    for j in range(k, min(last_moving, duration_ticks) + 1):
        if inside(j):
            return j
    return None


class _Robot:
    def __init__(self, rid: int, start: np.ndarray, sense_rng, decide_rng, alpha):
        self.id = rid
        self.state = AgentState(rid, start.copy(), alpha if alpha is not None else 0.0, decide_rng)
        self.sense_rng = sense_rng
        self.record = RobotRecord(rid)
        self.leg: Leg | None = None
        self.leg_obs: list[Observation] = []
        self.plan: list[np.ndarray] = []


class Simulation:
    """One run; use :func:`run` unless stepping through internals."""

    def __init__(self, case: CaseStudy, policy: Policy, n_robots: int, seed: int,
                 settings: SimSettings = SimSettings()):
        if n_robots < 1:
            raise ValueError("n_robots must be >= 1")
        self.case, self.policy, self.n, self.seed, self.cfg = case, policy, n_robots, seed, settings
        self.arena = case.arena
        self.epsilon = settings.epsilon if settings.epsilon is not None else case.epsilon
        self.delta_theta = settings.delta_theta if settings.delta_theta is not None else case.delta_theta
        if settings.t_max is not None:
            self.t_max = settings.t_max
        elif isinstance(policy, BayesSwarm):
            self.t_max = case.t_max_bayes
        elif isinstance(policy, RandomWalk):
            self.t_max = case.t_max_random
        else:
            self.t_max = math.inf
        self.agent_cfg = settings.agent_settings()
        self.source = case.source
        start = np.asarray(case.start_position, dtype=float)
        alpha = policy.alpha if isinstance(policy, BayesSwarm) else None
        self.robots = []
        for rid, child in enumerate(np.random.SeedSequence(seed).spawn(n_robots)):
            s_seq, d_seq = child.spawn(2)
            self.robots.append(_Robot(rid, start, np.random.default_rng(s_seq),
                                      np.random.default_rng(d_seq), alpha))
        if isinstance(policy, Exhaustive):
            for robot, pts in zip(self.robots, exhaustive_plan(self.arena, n_robots, settings.swath)):
                robot.plan = pts
        self._queue: list = []
        self._seq = 0
        self.events: list[dict] = []
        self.legs: list[Leg] = []
        self.trajectory: list[tuple] = []
        self.outcome: Termination | None = None
        self.completion_tick: int | None = None
        self.found_by: int | None = None

    # -- queue ---------------------------------------------------------------
    def _push(self, tick: int, priority: int, payload):
        heapq.heappush(self._queue, (tick, priority, self._seq, payload))
        self._seq += 1

    def _t(self, tick: int) -> float:
        return round(tick * self.cfg.tick, 9)

    # -- robot actions ---------------------------------------------------------
    def _broadcast(self, robot: _Robot, tick: int, waypoint, observations):
        packet = comms.Packet(robot.id, (float(waypoint[0]), float(waypoint[1])),
                              tuple(observations), self._t(tick))
        data = comms.encode(packet, self.arena, self.case.value_range)
        robot.record.bytes_sent += len(data)
        self.events.append({"event": "broadcast", "t": self._t(tick), "robot": robot.id,
                            "bytes": len(data), "n_obs": len(observations)})
        at = tick + _ticks(self.cfg.delivery_latency, self.cfg.tick)
        for other in self.robots:
            if other.id != robot.id:
                self._push(at, DELIVERY, (other.id, robot.id, tick, data))

    def _log_decision(self, robot: _Robot, tick: int, waypoint):
        st = robot.state
        rec = robot.record
        rec.decisions += 1
        rec.decision_times.append(self._t(tick))
        rec.waypoints.append((float(waypoint[0]), float(waypoint[1])))
        entry = {"event": "decision", "t": self._t(tick), "robot": robot.id, "k": rec.decisions - 1,
                 "waypoint": [float(waypoint[0]), float(waypoint[1])]}
        if isinstance(self.policy, BayesSwarm):
            entry["n_data"] = len(st.dataset)
            if st.model is not None:
                entry["source_estimate"] = [float(v) for v in st.source_estimate]
                entry["knowledge_gain"] = st.last_knowledge_gain
                entry["hyper"] = st.model.hyper.to_dict()
        self.events.append(entry)

    def _start_leg(self, robot: _Robot, tick: int, waypoint, horizon: float):
        cfg = self.cfg
        t0 = tick + _ticks(cfg.decision_latency, cfg.tick)
        start = robot.state.position.copy()
        end = self.arena.clip(np.asarray(waypoint, dtype=float))
        length = float(np.linalg.norm(end - start))
        if length < 1e-9 and isinstance(self.policy, Exhaustive):
            end, duration, obs = start, 0, []
        elif length < cfg.speed / cfg.sample_rate and not isinstance(self.policy, Exhaustive):
            # shorter than one sample spacing: step there and hold for the horizon
            if length < 1e-9:
                end = start
            duration = _ticks(max(horizon, length / cfg.speed), cfg.tick)
            obs = sample_stationary(self.case.field, end, horizon, cfg.sample_rate, self._t(t0),
                                    self.case.noise_sd, robot.sense_rng, robot.id)
        else:
            duration = _ticks(length / cfg.speed, cfg.tick)
            obs = sample_along(self.case.field, start, end, cfg.speed, cfg.sample_rate, self._t(t0),
                               self.case.noise_sd, robot.sense_rng, robot.id)
        leg = Leg(robot.id, self._t(t0), self._t(t0 + duration),
                  (float(start[0]), float(start[1])), (float(end[0]), float(end[1])))
        robot.leg, robot.leg_obs = leg, obs
        self.legs.append(leg)
        if cfg.record_trajectory:
            self.trajectory.extend((robot.id, o.time, o.position[0], o.position[1], o.value) for o in obs)
        hit = first_entry_tick(start, end, duration, cfg.tick, cfg.speed, self.source, self.epsilon)
        if hit is not None:
            self._push(t0 + hit, FOUND, robot.id)
        self._push(t0 + duration, ARRIVAL, robot.id)

    def _first_decision(self, robot: _Robot):
        cfg = self.cfg
        start = robot.state.position
        if isinstance(self.policy, BayesSwarm):
            w = take_first_decision(robot.id, self.n, self.delta_theta, cfg.speed, cfg.horizon_first,
                                    start=start)
            w = self.arena.clip(w)
            robot.state.next_waypoint = w
            robot.state.iteration = 1
            self._log_decision(robot, 0, w)
            self._broadcast(robot, 0, w, ())
        elif isinstance(self.policy, RandomWalk):
            w = random_walk_step(start, cfg.speed, cfg.horizon_first, self.arena, robot.state.rng)
            self._log_decision(robot, 0, w)
        else:
            w = robot.plan.pop(0)
            self._log_decision(robot, 0, w)
        self._start_leg(robot, 0, w, cfg.horizon_first)

    def _arrive(self, robot: _Robot, tick: int):
        cfg = self.cfg
        st = robot.state
        leg = robot.leg
        st.position = np.asarray(leg.end, dtype=float)
        moved = np.subtract(leg.end, leg.start)
        if np.linalg.norm(moved) > 0:
            st.heading = moved
        if isinstance(self.policy, BayesSwarm):
            st.dataset.extend(robot.leg_obs)
            try:
                w = take_decision(st, cfg.speed, cfg.horizon, self.arena, self.agent_cfg)
            except SingularKernel as exc:
                raise SingularKernel(
                    f"case {self.case.id}, seed {self.seed}, robot {robot.id}, t={self._t(tick):.3f}s, "
                    f"decision {st.iteration}: {exc}") from exc
            robot.record.knowledge_gain = st.knowledge_gain_total
            self._log_decision(robot, tick, w)
            self._broadcast(robot, tick, w, robot.leg_obs)
        elif isinstance(self.policy, RandomWalk):
            w = random_walk_step(st.position, cfg.speed, cfg.horizon, self.arena, st.rng)
            self._log_decision(robot, tick, w)
        else:
            if not robot.plan:
                return
            w = robot.plan.pop(0)
            self._log_decision(robot, tick, w)
        self._start_leg(robot, tick, w, cfg.horizon)

    def _deliver(self, tick: int, recipient: int, sender: int, send_tick: int, data: bytes):
        packet = comms.decode(data, self.arena, self.case.value_range, sender=sender,
                              send_time=self._t(send_tick), sample_rate=self.cfg.sample_rate)
        comms.receive_information(self.robots[recipient].state, packet)
        self.events.append({"event": "delivery", "t": self._t(tick), "sender": sender,
                            "recipient": recipient, "bytes": len(data)})

    # -- main loop --------------------------------------------------------------
    def run(self) -> RunResult:
        for robot in self.robots:
            self._first_decision(robot)
        if math.isfinite(self.t_max):
            self._push(int(round(self.t_max / self.cfg.tick)), TIMEOUT, None)
        while self._queue:
            tick, kind, _, payload = heapq.heappop(self._queue)
            if kind == FOUND:
                self.outcome, self.completion_tick, self.found_by = Termination.FOUND, tick, payload
                break
            if kind == TIMEOUT:
                self.outcome, self.completion_tick = Termination.TIMEOUT, tick
                break
            if kind == DELIVERY:
                self._deliver(tick, *payload)
            else:
                self._arrive(self.robots[payload], tick)
        else:
            # every robot finished its plan without detection
            self.outcome = Termination.TIMEOUT
            self.completion_tick = max(_ticks(leg.t_end, self.cfg.tick) for leg in self.legs)
        completion = self._t(self.completion_tick)
        term = {"event": "termination", "t": completion, "outcome": self.outcome.value}
        if self.found_by is not None:
            term["robot"] = self.found_by
        self.events.append(term)
        return RunResult(
            outcome=self.outcome, completion_time=completion, found_by=self.found_by,
            case_id=self.case.id, policy=self.policy.name,
            alpha=getattr(self.policy, "alpha", None), n_robots=self.n, seed=self.seed,
            t_max=self.t_max, robots=[r.record for r in self.robots], legs=self.legs,
            mapping_error=self._mapping_error(), events=self.events, trajectory=self.trajectory,
        )

    def _mapping_error(self) -> float:
        models = [r.state.model for r in self.robots if r.state.model is not None]
        if not isinstance(self.policy, BayesSwarm) or not models:
            return math.nan
        return float(np.mean([mapping_error(m, self.case.field, self.cfg.mapping_lattice) for m in models]))


def run(case: CaseStudy, policy: Policy, n_robots: int, seed: int,
        settings: SimSettings = SimSettings()) -> RunResult:
    """Simulate ``n_robots`` searching ``case`` under ``policy`` until detection or timeout."""
    return Simulation(case, policy, n_robots, seed, settings).run()


def collect_metrics(result: RunResult) -> dict:
    """Completion time, mean knowledge gain and decision count per robot,
    mapping error and total bytes broadcast."""
    robots = result.robots
    return {
        "outcome": result.outcome.value,
        "success": result.outcome is Termination.FOUND,
        "completion_time": result.completion_time,
        "mean_knowledge_gain": float(np.mean([r.knowledge_gain for r in robots])),
        "mean_decisions": float(np.mean([r.decisions for r in robots])),
        "mapping_error": result.mapping_error,
        "total_bytes": int(sum(r.bytes_sent for r in robots)),
    }


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"cannot serialise {type(o).__name__}")


def format_run_log(result: RunResult, header: dict | None = None) -> str:
    """Line-delimited JSON: optional header record, then one record per event."""
    lines = []
    if header is not None:
        lines.append(json.dumps({"event": "header", **header}, sort_keys=True, default=_json_default))
    lines.extend(json.dumps(e, sort_keys=True, default=_json_default) for e in result.events)
    return "\n".join(lines) + "\n"


def write_run_log(result: RunResult, path, header: dict | None = None) -> Path:
    path = Path(path)
    path.write_text(format_run_log(result, header), encoding="utf-8")
    return path


TRAJECTORY_COLUMNS = ("robot", "t", "x", "y", "value")


def format_trajectory_csv(result: RunResult, header: dict | None = None) -> str:
    lines = []
    if header is not None:
        lines.append("# " + json.dumps(header, sort_keys=True, default=_json_default))
    lines.append(",".join(TRAJECTORY_COLUMNS))
    lines.extend(f"{r},{t!r},{x!r},{y!r},{v!r}" for r, t, x, y, v in result.trajectory)
    return "\n".join(lines) + "\n"


def write_trajectory_csv(result: RunResult, path, header: dict | None = None) -> Path:
    path = Path(path)
    path.write_text(format_trajectory_csv(result, header), encoding="utf-8")
    return path


def settings_dict(settings: SimSettings) -> dict:
    return asdict(settings)
