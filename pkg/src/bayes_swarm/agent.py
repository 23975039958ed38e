"""Per-robot decision making: first fan-out, refit, plan, terminate."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace

import numpy as np

from .acquisition import AcquisitionContext, PendingPlan, knowledge_gain, plan_waypoint
from .geometry import Box
from .gp import Dataset, FitBudget, GpModel, Hyperparameters, downsample, fit


@dataclass(frozen=True)
class AgentSettings:
    """Robot and planner parameters; defaults follow the reference setup."""

    speed: float = 0.1
    horizon_first: float = 4.0
    horizon: float = 10.0
    n_max: int = 400
    sample_rate: float = 1.0
    quadrature_nodes: int = 32
    fit_budget: FitBudget = FitBudget(n_starts=5, max_iter=30, max_points=200)
    workers: int = 1

    def budget_for(self, arena: Box) -> FitBudget:
        """Fit budget with length-scale bounds tied to the arena size."""
        span = float(np.max(arena.extent))
        return replace(self.fit_budget, length_scale_bounds=(0.02 * span, span))


@dataclass
class AgentState:
    robot_id: int
    position: np.ndarray
    alpha: float
    rng: np.random.Generator
    dataset: Dataset = field(default_factory=Dataset)
    iteration: int = 0
    model: GpModel | None = None
    peer_table: dict[int, PendingPlan] = field(default_factory=dict)
    next_waypoint: np.ndarray | None = None
    heading: np.ndarray | None = None
    source_estimate: np.ndarray | None = None
    knowledge_gain_total: float = 0.0
    last_knowledge_gain: float = 0.0

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=float)

    def peer_plans(self) -> list[PendingPlan]:
        return [self.peer_table[p] for p in sorted(self.peer_table) if p != self.robot_id]


def first_decision_angle(robot_id: int, n_robots: int, delta_theta: float) -> float:
    """Fan-out heading in degrees.

    With a full 360 degree range robots are spread as ``r * 360 / N`` with
    ``r = robot_id``; otherwise as ``r * delta / (N + 1)`` with ``r = robot_id + 1``
    so that no robot runs along either edge of the range.
    """
    if not 0 <= robot_id < n_robots:
        raise ValueError(f"robot_id {robot_id} outside [0, {n_robots})")
    if not 0 <= delta_theta <= 360:
        raise ValueError("delta_theta must lie in [0, 360]")
    if delta_theta == 360:
        return robot_id * delta_theta / n_robots
    return (robot_id + 1) * delta_theta / (n_robots + 1)


def take_first_decision(robot_id: int, n_robots: int, delta_theta: float, speed: float,
                        horizon_first: float, start=(0.0, 0.0)) -> np.ndarray:
    d = speed * horizon_first
    theta = np.deg2rad(first_decision_angle(robot_id, n_robots, delta_theta))
    return np.asarray(start, dtype=float) + d * np.array([np.cos(theta), np.sin(theta)])


def initial_hyperparameters(dataset: Dataset, arena: Box) -> Hyperparameters:
    y = dataset.targets
    mean = float(np.mean(y))
    sf2 = max(float(np.var(y)), (0.1 * mean) ** 2, 1e-6)
    ls = float(np.max(arena.extent)) / 5.0
    return Hyperparameters(sf2, (ls, ls), 1e-2 * sf2, mean)


def take_decision(state: AgentState, speed: float, horizon: float, arena: Box,
                  settings: AgentSettings = AgentSettings()) -> np.ndarray:
    """Down-sample, refit the GP, pick the next waypoint; updates ``state`` in place.

    The previous fit warm-starts the hyperparameter search.
    """
    if state.iteration < 1:
        raise ValueError("the first decision is taken by take_first_decision")
    if len(state.dataset) == 0:
        raise ValueError(f"robot {state.robot_id} has no observations to fit")
    if len(state.dataset) > settings.n_max:
        state.dataset = downsample(state.dataset, settings.n_max, state.rng, recent_window=horizon)
    init = state.model.hyper if state.model is not None else initial_hyperparameters(state.dataset, arena)
    state.model = fit(state.dataset, init, settings.budget_for(arena), state.rng, settings.workers)

    ctx = AcquisitionContext(
        state.model, arena.clip(state.position), arena, state.peer_plans(),
        alpha=state.alpha, speed=speed, horizon=horizon,
        quadrature_nodes=settings.quadrature_nodes, sample_rate=settings.sample_rate,
        heading=state.heading,
    )
    waypoint = plan_waypoint(ctx)
    gain = knowledge_gain(waypoint, ctx)
    state.source_estimate = ctx.source
    state.last_knowledge_gain = gain
    state.knowledge_gain_total += gain
    state.next_waypoint = waypoint
    state.iteration += 1
    return waypoint


class Termination(enum.Enum):
    FOUND = "found"
    TIMEOUT = "timeout"
    CONTINUE = "continue"


def check_termination(positions, true_source, epsilon: float, elapsed: float,
                      t_max: float) -> Termination:
    if epsilon <= 0 or t_max < 0:
        raise ValueError("epsilon must be positive and t_max non-negative")
    p = np.atleast_2d(np.asarray(positions, dtype=float))
    if p.size and np.min(np.linalg.norm(p - np.asarray(true_source, dtype=float), axis=1)) <= epsilon:
        return Termination.FOUND
    if elapsed >= t_max:
        return Termination.TIMEOUT
    return Termination.CONTINUE
