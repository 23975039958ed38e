import json
import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from bayes_swarm.agent import Termination
from bayes_swarm.engine import (
    BayesSwarm, Exhaustive, RandomWalk, RobotRecord, RunResult, SimSettings, Simulation,
    collect_metrics, exhaustive_plan, first_entry_tick, format_run_log, format_trajectory_csv,
    lawnmower, partition_arena, path_length, random_walk_step, reflect_into, run,
)
from bayes_swarm.environment import CaseStudy, GaussianComponent, SignalField
from bayes_swarm.geometry import Box

FAST = SimSettings(fit_starts=2, fit_max_iter=15)


def small_case(center=(1.5, 0.5), arena=Box(0, 0, 2, 2), start=(0.2, 0.5), t_max=100.0,
               delta_theta=360.0):
    field = SignalField((GaussianComponent(center, 1.0, ((0.8, 0.0), (0.0, 0.8))),), arena)
    return CaseStudy(99, "test", field, t_max, 10 * t_max, 0.05, start, delta_theta, 0.01, (-0.5, 1.5))


def segment_distance(p, a, b):
    a, b = np.asarray(a), np.asarray(b)
    d = b - a
    u = np.clip(((p - a) @ d) / max(d @ d, 1e-300), 0, 1)
    return np.linalg.norm(p - (a + u[:, None] * d), axis=1)


class TestLawnmower:
    def test_unit_square(self):
        pts = lawnmower(Box(0, 0, 1, 1), 0.1)
        assert len(pts) == 22
        assert len({round(p[0], 9) for p in pts}) == 11
        assert path_length(pts) == pytest.approx(11 * 1 + 10 * 0.1)

    def test_four_quarters(self):
        parts = partition_arena(Box(0, 0, 10, 10), 4)
        assert len(parts) == 4
        assert {tuple(np.round(p.extent, 12)) for p in parts} == {(5.0, 5.0)}
        assert sum(np.prod(p.extent) for p in parts) == pytest.approx(100)

    def test_strips(self):
        parts = partition_arena(Box(0, 0, 10, 4), 5)
        assert [p.xmin for p in parts] == pytest.approx([0, 2, 4, 6, 8])
        assert all(p.ymin == 0 and p.ymax == 4 for p in parts)

    @pytest.mark.parametrize("n", [1, 3, 4, 5])
    def test_coverage_at_two_epsilon(self, n):
        arena, eps = Box(0, 0, 2.4, 2.4), 0.05
        probes = arena.lattice(121)
        best = np.full(len(probes), np.inf)
        for plan in exhaustive_plan(arena, n, 2 * eps):
            for a, b in zip(plan, plan[1:]):
                best = np.minimum(best, segment_distance(probes, a, b))
        assert best.max() <= eps + 1e-12

    def test_invalid_swath(self):
        with pytest.raises(ValueError):
            lawnmower(Box(0, 0, 1, 1), 0.0)


class TestRandomWalk:
    ARENA = Box(0, 0, 10, 10)

    def test_interior_step_length(self, rng):
        w = random_walk_step([5, 5], 0.1, 10.0, self.ARENA, rng)
        assert np.linalg.norm(w - [5, 5]) == pytest.approx(1.0)

    def test_reflection_at_wall(self):
        np.testing.assert_allclose(reflect_into([10.4, -0.3], self.ARENA), [9.6, 0.3])

    @given(st.floats(-50, 50), st.floats(-50, 50))
    def test_reflection_stays_inside(self, x, y):
        assert self.ARENA.contains(reflect_into([x, y], self.ARENA), tol=1e-9)

    def test_edge_robot_stays_inside(self, rng):
        for _ in range(200):
            assert self.ARENA.contains(random_walk_step([0.0, 9.95], 0.1, 10.0, self.ARENA, rng))

    def test_seeded_repeat(self):
        case = small_case()
        a = run(case, RandomWalk(), 2, 3, replace(FAST, t_max=200))
        b = run(case, RandomWalk(), 2, 3, replace(FAST, t_max=200))
        assert [l.end for l in a.legs] == [l.end for l in b.legs]


class TestEntryTick:
    def brute(self, a, b, duration, tick, speed, s, eps):
        for k in range(duration + 1):
            length = np.linalg.norm(np.subtract(b, a))
            tau = min(k * tick * speed, length)
            p = np.asarray(a) + (tau / length if length else 0) * np.subtract(b, a)
            if np.linalg.norm(p - s) <= eps:
                return k
        return None

    @given(st.floats(0, 2), st.floats(0, 2), st.floats(0, 2), st.floats(0, 2), st.floats(0.3, 1.7),
           st.floats(0.3, 1.7))
    def test_matches_tick_scan(self, ax, ay, bx, by, sx, sy):
        a, b, s = (ax, ay), (bx, by), np.array([sx, sy])
        speed, tick = 0.1, 0.01
        duration = math.ceil(np.linalg.norm(np.subtract(b, a)) / speed / tick)
        got = first_entry_tick(a, b, duration, tick, speed, s, 0.3)
        assert got == self.brute(a, b, duration, tick, speed, s, 0.3)

    def test_grazing_miss(self):
        assert first_entry_tick((0, 0), (1, 0), 10_000, 1e-3, 0.1, (0.5, 0.0501), 0.05) is None


class TestRun:
    def test_zero_time_budget(self):
        r = run(small_case(), BayesSwarm(0.4), 3, 1, replace(FAST, t_max=0.0))
        assert r.outcome is Termination.TIMEOUT and r.completion_time == 0.0
        assert [rec.decisions for rec in r.robots] == [1, 1, 1]

    def test_greedy_single_robot_finds_convex_peak(self):
        case = small_case()
        r = run(case, BayesSwarm(1.0), 1, 1, FAST)
        assert r.outcome is Termination.FOUND
        assert r.completion_time <= 3 * 10 + 4 + 1

    def test_found_position_within_epsilon(self):
        case = small_case()
        r = run(case, BayesSwarm(0.4), 2, 2, FAST)
        assert r.outcome is Termination.FOUND
        leg = [l for l in r.legs if l.robot == r.found_by and l.t_start <= r.completion_time <= l.t_end][-1]
        p = leg.position(r.completion_time, 0.1)
        assert np.linalg.norm(p - case.source) <= 0.05
        assert r.completion_time <= case.t_max_bayes

    def test_exhaustive_always_finds(self):
        r = run(small_case(center=(1.93, 1.61)), Exhaustive(), 3, 1, FAST)
        assert r.outcome is Termination.FOUND
        assert math.isnan(r.mapping_error)

    def test_invalid_robot_count(self):
        with pytest.raises(ValueError):
            run(small_case(), BayesSwarm(), 0, 1)

    def test_bytes_are_encoded_lengths(self):
        r = run(small_case(), BayesSwarm(0.4), 2, 1, replace(FAST, t_max=40.0))
        for rec in r.robots:
            sent = [e for e in r.events if e["event"] == "broadcast" and e["robot"] == rec.robot_id]
            assert sent[0]["bytes"] == 4
            assert all(e["bytes"] == 4 + 6 * e["n_obs"] for e in sent)
            assert rec.bytes_sent == sum(e["bytes"] for e in sent)
        # robot 0's second broadcast carries the 4 first-horizon samples
        first_leg = [e for e in r.events if e["event"] == "broadcast" and e["robot"] == 0][1]
        assert first_leg["bytes"] == 4 + 24

    def test_asynchronous_decisions(self):
        # corner start with a clipped fan-out gives legs of different length
        case = small_case(start=(0.0, 0.0), delta_theta=360.0)
        r = run(case, BayesSwarm(0.4), 3, 1, replace(FAST, t_max=40.0))
        later = [set(rec.decision_times[1:]) for rec in r.robots]
        assert later[0] != later[1] or later[1] != later[2]

    def test_time_causality_and_growth(self):
        # peer packets are merged on delivery, so at an arrival the dataset
        # grows by exactly the robot's own samples from the finished leg
        class Checked(Simulation):
            def _arrive(self, robot, tick):
                before, own = len(robot.state.dataset), len(robot.leg_obs)
                super()._arrive(robot, tick)
                t = self._t(tick)
                assert all(o.time <= t + 1e-9 for o in robot.state.dataset)
                self.growth.append((len(robot.state.dataset) - before, own))

        sim = Checked(small_case(), BayesSwarm(0.4), 2, 4, replace(FAST, t_max=60.0))
        sim.growth = []
        sim.run()
        assert len(sim.growth) >= 4
        assert all(g == own for g, own in sim.growth)
        assert sim.growth[-1][1] == 10

    def test_worker_pool_does_not_change_log(self):
        case = small_case()
        cfg = replace(FAST, t_max=40.0)
        a = format_run_log(run(case, BayesSwarm(0.4), 2, 5, cfg))
        b = format_run_log(run(case, BayesSwarm(0.4), 2, 5, replace(cfg, workers=3)))
        assert a == b


class TestOutputs:
    def test_log_and_trajectory_formats(self):
        r = run(small_case(), BayesSwarm(0.4), 2, 1, replace(FAST, t_max=20.0))
        lines = format_run_log(r, {"seed": 1}).splitlines()
        records = [json.loads(l) for l in lines]
        assert records[0]["event"] == "header"
        assert {x["event"] for x in records[1:]} <= {"decision", "broadcast", "delivery", "termination"}
        assert records[-1]["event"] == "termination"
        csv_lines = format_trajectory_csv(r, {"seed": 1}).splitlines()
        assert csv_lines[0].startswith("# ")
        assert csv_lines[1] == "robot,t,x,y,value"
        assert len(csv_lines) == 2 + len(r.trajectory)

    def test_metrics_means(self):
        res = RunResult(Termination.FOUND, 5.0, 0, 1, "bayes", 0.4, 2, 1, 10.0,
                        [RobotRecord(0, 10, 1.0, 28), RobotRecord(1, 14, 3.0, 112)], [], 0.1, [], [])
        m = collect_metrics(res)
        assert m["mean_decisions"] == 12
        assert m["mean_knowledge_gain"] == 2.0
        assert m["total_bytes"] == 140
        assert m["success"]
