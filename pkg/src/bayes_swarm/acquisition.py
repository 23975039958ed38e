"""Waypoint selection: exploitation toward the expected source plus
path-integrated uncertainty, maximised over the reachable disk.

The objective for a candidate waypoint ``x`` is::

    alpha * h(x) + (1 - alpha) * g(x) / (V * T * sigma_f)

where ``h`` is an inverse-quadratic reward centred on the posterior-mean
maximiser and ``g`` is the line integral (arc length) of the posterior standard
deviation along the straight path from the robot to ``x``.  Before ``g`` is
evaluated the GP is conditioned on placeholder inputs along every peer's
in-flight segment, so paths that overlap planned peer observations lose value.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import Sequence

import numpy as np
from scipy import linalg, optimize
from scipy.stats import qmc

from .geometry import Box, project_feasible
from .gp import GpModel, condition_on_inputs, kernel_matrix, predict_mean

SOURCE_LATTICE = 50
DEFAULT_QUADRATURE_NODES = 32


class NoFeasiblePoint(ValueError):
    """The reachable disk does not intersect the arena."""


@dataclass(frozen=True)
class PendingPlan:
    """A peer's current path segment, from its last to its next waypoint."""

    robot_id: int
    segment_start: tuple[float, float]
    segment_end: tuple[float, float]

    @property
    def length(self) -> float:
        return float(np.hypot(self.segment_end[0] - self.segment_start[0],
                              self.segment_end[1] - self.segment_start[1]))


@dataclass
class AcquisitionContext:
    """Everything a robot needs to score candidate waypoints.

    ``source`` may be supplied to pin the expected source location; otherwise
    it is computed from the model on first use.
    """

    model: GpModel
    current_position: np.ndarray
    arena: Box
    peer_plans: Sequence[PendingPlan] = ()
    alpha: float = 0.4
    speed: float = 0.1
    horizon: float = 10.0
    quadrature_nodes: int = DEFAULT_QUADRATURE_NODES
    sample_rate: float = 1.0
    heading: np.ndarray | None = None
    source: np.ndarray | None = field(default=None)

    def __post_init__(self):
        self.current_position = np.asarray(self.current_position, dtype=float)
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")
        if not (self.speed > 0 and self.horizon > 0):
            raise ValueError("speed and horizon must be positive")
        if self.quadrature_nodes < 2:
            raise ValueError("quadrature_nodes must be >= 2")
        if self.source is None:
            self.source = expected_source(self.model, self.arena, near=self.current_position)
        else:
            self.source = np.asarray(self.source, dtype=float)

    @property
    def reach(self) -> float:
        return self.speed * self.horizon

    @cached_property
    def conditioned_model(self) -> GpModel:
        return condition_on_inputs(
            self.model, fantasy_inputs(self.peer_plans, self.speed / self.sample_rate)
        )


def fantasy_inputs(plans: Sequence[PendingPlan], spacing: float) -> np.ndarray:
    """Sample locations a peer will visit along its segment, one per ``spacing``
    meters and always including the segment end."""
    pts = []
    for plan in plans:
        a = np.asarray(plan.segment_start, dtype=float)
        b = np.asarray(plan.segment_end, dtype=float)
        n = max(1, int(round(plan.length / spacing)))
        u = np.arange(1, n + 1)[:, None] / n
        pts.append(a + u * (b - a))
    return np.vstack(pts) if pts else np.empty((0, 2))


def expected_source(model: GpModel, arena: Box, near=None, lattice: int = SOURCE_LATTICE) -> np.ndarray:
    """Maximiser of the posterior mean over the arena.

    Lattice scan then bounded local refinement from the best cell.  Near-ties on
    the lattice go to the candidate nearest ``near`` (which is itself a
    candidate, so a flat mean returns ``near``).
    """
    cands = arena.lattice(lattice)
    if near is not None:
        cands = np.vstack([arena.clip(np.asarray(near, dtype=float)), cands])
    mu = predict_mean(model, cands)
    top = mu.max()
    tol = 1e-9 * max(abs(top), np.sqrt(model.hyper.signal_variance))
    tied = np.flatnonzero(mu >= top - tol)
    if near is not None and len(tied) > 1:
        d = np.linalg.norm(cands[tied] - cands[0], axis=1)
        best = tied[np.argmin(d)]
    else:
        best = tied[0]
    x0 = cands[best]
    if top - mu.min() <= tol:
        return x0.copy()

    hyper = model.hyper

    def neg_mean(x):
        k = kernel_matrix(x[None, :], model.inputs, hyper)[0]
        grad = -((x - model.inputs) / np.square(hyper.length_scales) * (k * model.weights)[:, None]).sum(0)
        return -(hyper.beta + k @ model.weights), -grad

    res = optimize.minimize(neg_mean, x0, jac=True, method="L-BFGS-B",
                            bounds=list(zip(arena.lower, arena.upper)))
    x = arena.clip(res.x)
    if predict_mean(model, x[None, :])[0] > top:
        return x
    return x0.copy()


def source_seeking(x, ctx: AcquisitionContext) -> np.ndarray | float:
    """``1 / (1 + |x - source|^2)``; vectorised over leading axes."""
    d = np.asarray(x, dtype=float) - ctx.source
    out = 1.0 / (1.0 + np.sum(d * d, axis=-1))
    return float(out) if np.ndim(out) == 0 else out


def _trapezoid_weights(n: int) -> np.ndarray:
    w = np.full(n, 1.0 / (n - 1))
    w[[0, -1]] *= 0.5
    return w


def _posterior_std(model: GpModel, Q: np.ndarray) -> np.ndarray:
    Kq = kernel_matrix(Q, model.inputs, model.hyper)
    v = linalg.solve_triangular(model.chol, Kq.T, lower=True, check_finite=False)
    var = model.hyper.signal_variance - np.einsum("ij,ij->j", v, v)
    return np.sqrt(np.maximum(var, 0.0))


def knowledge_gain(x, ctx: AcquisitionContext, quadrature_nodes: int | None = None):
    """Arc-length integral of the peer-conditioned posterior std along the
    straight path from the robot to ``x`` (composite trapezoid rule)."""
    n = ctx.quadrature_nodes if quadrature_nodes is None else quadrature_nodes
    if n < 2:
        raise ValueError("quadrature_nodes must be >= 2")
    pts = np.atleast_2d(np.asarray(x, dtype=float))
    start = ctx.current_position
    u = np.linspace(0.0, 1.0, n)
    path = start + u[None, :, None] * (pts - start)[:, None, :]
    sigma = _posterior_std(ctx.conditioned_model, path.reshape(-1, 2)).reshape(len(pts), n)
    length = np.linalg.norm(pts - start, axis=1)
    g = length * (sigma @ _trapezoid_weights(n))
    return float(g[0]) if np.ndim(x) == 1 else g


def normalized_knowledge_gain(x, ctx: AcquisitionContext):
    return knowledge_gain(x, ctx) / (ctx.reach * np.sqrt(ctx.model.hyper.signal_variance))


def acquisition_value(x, ctx: AcquisitionContext):
    """Weighted exploitation/exploration score.  At the extremes of ``alpha`` the
    unused term is never evaluated."""
    if ctx.alpha == 1.0:
        return source_seeking(x, ctx)
    if ctx.alpha == 0.0:
        return normalized_knowledge_gain(x, ctx)
    return ctx.alpha * source_seeking(x, ctx) + (1.0 - ctx.alpha) * normalized_knowledge_gain(x, ctx)


def seed_points(ctx: AcquisitionContext, n_boundary: int = 16, n_interior: int = 16) -> np.ndarray:
    """Deterministic start set for the waypoint search, projected to be feasible."""
    c, R = ctx.current_position, ctx.reach
    ang = 2.0 * np.pi * np.arange(n_boundary) / n_boundary
    seeds = [c + R * np.column_stack([np.cos(ang), np.sin(ang)])]
    h = qmc.Halton(d=2, scramble=False).random(n_interior + 1)[1:]
    r, t = R * np.sqrt(h[:, 0]), 2.0 * np.pi * h[:, 1]
    seeds.append(c + np.column_stack([r * np.cos(t), r * np.sin(t)]))
    if ctx.alpha > 0.0:
        seeds.append(ctx.source[None, :])
    if ctx.heading is not None and np.linalg.norm(ctx.heading) > 0:
        hd = np.asarray(ctx.heading, dtype=float)
        seeds.append(c + R * hd[None, :] / np.linalg.norm(hd))
    return project_feasible(np.vstack(seeds), c, R, ctx.arena)


def plan_waypoint(ctx: AcquisitionContext, n_refine: int = 3, tol: float = 1e-3,
                  max_rounds: int = 200) -> np.ndarray:
    """Best feasible waypoint found by multi-start compass search.

    Feasible means within ``speed * horizon`` of the robot and inside the arena.
    The best few seeds are refined in polar coordinates about the robot (radial
    and arc-length moves, step halved on failure down to ``tol`` meters), so
    optima on the reach boundary are tracked exactly.  The result scores at
    least as well as every seed.
    """
    c, R = ctx.current_position, ctx.reach
    if not ctx.arena.contains(c, tol=1e-9):
        raise NoFeasiblePoint(f"robot at {c} lies outside {ctx.arena}")
    c = ctx.arena.clip(c)

    seeds = seed_points(ctx)
    values = np.asarray(acquisition_value(seeds, ctx), dtype=float)
    order = np.argsort(-values, kind="stable")[:n_refine]
    pts, vals = seeds[order].copy(), values[order].copy()
    d = pts - c
    radius = np.minimum(np.hypot(d[:, 0], d[:, 1]), R)
    phi = np.arctan2(d[:, 1], d[:, 0])
    steps = np.full(len(pts), R / 4.0)

    for _ in range(max_rounds):
        active = np.flatnonzero(steps >= tol)
        if len(active) == 0:
            break
        s_, r_, p_ = steps[active], radius[active], phi[active]
        dphi = s_ / np.maximum(r_, s_)
        cand_r = np.clip(np.stack([r_ + s_, r_ - s_, r_, r_], axis=1), 0.0, R)
        cand_p = np.stack([p_, p_, p_ + dphi, p_ - dphi], axis=1)
        xy = c + np.stack([cand_r * np.cos(cand_p), cand_r * np.sin(cand_p)], axis=-1)
        xy = ctx.arena.clip(xy.reshape(-1, 2))
        mv = np.asarray(acquisition_value(xy, ctx), dtype=float).reshape(len(active), 4)
        xy = xy.reshape(len(active), 4, 2)
        pick = np.argmax(mv, axis=1)
        for j, i in enumerate(active):
            k = pick[j]
            if mv[j, k] > vals[i]:
                pts[i], vals[i] = xy[j, k], mv[j, k]
                radius[i], phi[i] = cand_r[j, k], cand_p[j, k]
            else:
                steps[i] *= 0.5

    best = int(np.argmax(vals))
    if vals[best] < values.max():
        return seeds[int(np.argmax(values))].copy()
    return pts[best].copy()
