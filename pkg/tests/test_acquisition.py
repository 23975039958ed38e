import numpy as np
import pytest

from bayes_swarm.acquisition import (
    AcquisitionContext, NoFeasiblePoint, PendingPlan, acquisition_value, expected_source,
    fantasy_inputs, knowledge_gain, normalized_knowledge_gain, plan_waypoint, seed_points,
    source_seeking,
)
from bayes_swarm.geometry import Box
from bayes_swarm.gp import Hyperparameters, build_model

import oracles

ARENA = Box(0, 0, 4, 4)
H = Hyperparameters(0.5, (0.6, 0.8), 1e-3, 0.1)


def bump_model(rng, n=25, center=(2.5, 3.0)):
    X = rng.uniform(0, 4, size=(n, 2))
    y = np.exp(-np.sum((X - center) ** 2, axis=1))
    return build_model(X, y, H), X, y


def random_points_in_disk(rng, c, R, n):
    r = R * np.sqrt(rng.uniform(size=n))
    t = rng.uniform(0, 2 * np.pi, size=n)
    return c + np.column_stack([r * np.cos(t), r * np.sin(t)])


class TestSourceSeeking:
    def test_values(self, rng):
        m, _, _ = bump_model(rng)
        ctx = AcquisitionContext(m, [1, 1], ARENA, source=[2.0, 2.0])
        assert source_seeking([2.0, 2.0], ctx) == 1.0
        assert source_seeking([3.0, 2.0], ctx) == pytest.approx(0.5)

    def test_expected_source_matches_lattice(self, rng):
        m, _, _ = bump_model(rng, n=40)
        pts = ARENA.lattice(801)
        mu = m.hyper.beta + (np.exp(-0.5 * (((pts[:, None, :] - m.inputs) / m.hyper.length_scales) ** 2)
                                    .sum(-1)) * m.hyper.signal_variance) @ m.weights
        ref = pts[np.argmax(mu)]
        assert np.linalg.norm(expected_source(m, ARENA) - ref) < 0.01

    def test_flat_mean_returns_near(self):
        m = build_model([[100.0, 100.0]], [0.0], Hyperparameters(1.0, (0.1, 0.1), 0.1, 0.0))
        np.testing.assert_array_equal(expected_source(m, ARENA, near=[1.3, 0.7]), [1.3, 0.7])


class TestKnowledgeGain:
    def test_zero_at_current_position(self, rng):
        m, _, _ = bump_model(rng)
        ctx = AcquisitionContext(m, [1.0, 1.0], ARENA)
        assert knowledge_gain([1.0, 1.0], ctx) == 0.0

    def test_matches_fine_quadrature(self, rng):
        m, X, y = bump_model(rng)
        ctx = AcquisitionContext(m, [1.0, 1.0], ARENA, quadrature_nodes=256)
        ref = oracles.line_integral_std(X, y, H, [1.0, 1.0], [1.6, 1.5])
        assert knowledge_gain([1.6, 1.5], ctx) == pytest.approx(ref, rel=1e-4)

    def test_prior_path_is_length_times_sigma(self):
        m = build_model([[100.0, 100.0]], [0.0], H)
        ctx = AcquisitionContext(m, [1.0, 1.0], ARENA)
        assert knowledge_gain([1.3, 1.4], ctx) == pytest.approx(0.5 * np.sqrt(H.signal_variance))
        assert normalized_knowledge_gain([1.3, 1.4], ctx) == pytest.approx(0.5)

    def test_vectorised_matches_scalar(self, rng):
        m, _, _ = bump_model(rng)
        ctx = AcquisitionContext(m, [1.0, 1.0], ARENA)
        pts = random_points_in_disk(rng, ctx.current_position, 1.0, 5)
        np.testing.assert_allclose(knowledge_gain(pts, ctx), [knowledge_gain(p, ctx) for p in pts])

    def test_peer_overlap_reduces_gain(self):
        m = build_model([[100.0, 100.0]], [0.0], H)
        alone = AcquisitionContext(m, [1.0, 1.0], ARENA)
        crowded = AcquisitionContext(m, [1.0, 1.0], ARENA,
                                     peer_plans=[PendingPlan(1, (1.0, 1.0), (2.0, 1.0))])
        assert knowledge_gain([2.0, 1.0], crowded) < 0.5 * knowledge_gain([2.0, 1.0], alone)
        # a path perpendicular to the peer is far less affected
        assert knowledge_gain([1.0, 2.0], crowded) > knowledge_gain([2.0, 1.0], crowded)

    def test_fantasy_spacing(self):
        pts = fantasy_inputs([PendingPlan(1, (0.0, 0.0), (1.0, 0.0))], 0.1)
        assert len(pts) == 10
        np.testing.assert_allclose(pts[-1], [1.0, 0.0])
        single = fantasy_inputs([PendingPlan(1, (2.0, 2.0), (2.0, 2.0))], 0.1)
        np.testing.assert_allclose(single, [[2.0, 2.0]])


class TestAcquisition:
    def test_alpha_one_ignores_variance_term(self, rng):
        m, _, _ = bump_model(rng)
        ctx = AcquisitionContext(m, [1, 1], ARENA, alpha=1.0)
        pts = random_points_in_disk(rng, ctx.current_position, ctx.reach, 10)
        np.testing.assert_array_equal(acquisition_value(pts, ctx), source_seeking(pts, ctx))
        assert "conditioned_model" not in ctx.__dict__

    def test_blend(self, rng):
        m, _, _ = bump_model(rng)
        ctx = AcquisitionContext(m, [1, 1], ARENA, alpha=0.3)
        x = np.array([1.5, 1.2])
        ref = 0.3 * source_seeking(x, ctx) + 0.7 * normalized_knowledge_gain(x, ctx)
        assert acquisition_value(x, ctx) == pytest.approx(ref)

    def test_invalid_alpha(self, rng):
        m, _, _ = bump_model(rng)
        with pytest.raises(ValueError):
            AcquisitionContext(m, [1, 1], ARENA, alpha=1.5)


class TestPlanWaypoint:
    def test_feasible_and_beats_random_search(self, rng):
        m, _, _ = bump_model(rng)
        ctx = AcquisitionContext(m, [1.0, 1.2], ARENA, alpha=0.4,
                                 peer_plans=[PendingPlan(1, (0.5, 0.5), (1.2, 1.5))])
        w = plan_waypoint(ctx)
        assert np.linalg.norm(w - ctx.current_position) <= ctx.reach + 1e-12
        assert ARENA.contains(w)
        cand = ARENA.clip(random_points_in_disk(rng, ctx.current_position, ctx.reach, 5000))
        assert acquisition_value(w, ctx) >= acquisition_value(cand, ctx).max() - 1e-4

    def test_greedy_heads_to_source(self, rng):
        m, _, _ = bump_model(rng, n=60)
        ctx = AcquisitionContext(m, [1.0, 1.0], ARENA, alpha=1.0)
        w = plan_waypoint(ctx)
        direction = (ctx.source - ctx.current_position) / np.linalg.norm(ctx.source - ctx.current_position)
        np.testing.assert_allclose(w, ctx.current_position + ctx.reach * direction, atol=2e-3)

    def test_source_inside_reach_is_reached(self, rng):
        m, _, _ = bump_model(rng, n=60)
        src = expected_source(m, ARENA)
        ctx = AcquisitionContext(m, src + [0.3, 0.2], ARENA, alpha=1.0)
        np.testing.assert_allclose(plan_waypoint(ctx), src, atol=1e-9)

    def test_corner_start(self, rng):
        m, _, _ = bump_model(rng)
        ctx = AcquisitionContext(m, [0.0, 0.0], ARENA, alpha=0.0)
        w = plan_waypoint(ctx)
        assert ARENA.contains(w) and np.linalg.norm(w) <= ctx.reach + 1e-12

    def test_robot_outside_arena(self, rng):
        m, _, _ = bump_model(rng)
        with pytest.raises(NoFeasiblePoint):
            plan_waypoint(AcquisitionContext(m, [5.0, 5.0], ARENA))

    def test_seeds_are_feasible(self, rng):
        m, _, _ = bump_model(rng)
        ctx = AcquisitionContext(m, [3.9, 0.1], ARENA, heading=np.array([1.0, 0.0]))
        s = seed_points(ctx)
        assert np.all(np.linalg.norm(s - ctx.current_position, axis=1) <= ctx.reach + 1e-12)
        assert np.all(ARENA.contains(s))
