import numpy as np
import pytest

from bayes_swarm.agent import (
    AgentSettings, AgentState, Termination, check_termination, first_decision_angle,
    take_decision, take_first_decision,
)
from bayes_swarm.environment import GaussianComponent, SignalField, sample_along
from bayes_swarm.geometry import Box
from bayes_swarm.gp import Dataset


class TestFirstDecision:
    @pytest.mark.parametrize("n, dtheta, expected", [
        (1, 360, [0.0]),
        (4, 360, [0.0, 90.0, 180.0, 270.0]),
        (2, 90, [30.0, 60.0]),
        (5, 120, [20.0, 40.0, 60.0, 80.0, 100.0]),
    ])
    def test_angles(self, n, dtheta, expected):
        assert [first_decision_angle(r, n, dtheta) for r in range(n)] == pytest.approx(expected)

    def test_segment(self):
        w = take_first_decision(1, 4, 360, 0.1, 4.0, start=(1.0, 1.0))
        np.testing.assert_allclose(w, [1.0, 1.4], atol=1e-15)

    @pytest.mark.parametrize("args", [(4, 4, 360), (0, 2, 400), (-1, 2, 90)])
    def test_invalid(self, args):
        with pytest.raises(ValueError):
            first_decision_angle(*args)


def bump_field(center=(2.2, 1.6), arena=Box(0, 0, 3, 3)):
    return SignalField((GaussianComponent(center, 1.0, ((1.5, 0.0), (0.0, 1.5))),), arena)


class TestTakeDecision:
    def make_state(self, field, alpha, rng, y0=0.3):
        st = AgentState(0, np.array([0.4, y0]), alpha, rng)
        st.dataset = Dataset(sample_along(field, [0.0, y0], [0.4, y0], 0.1, 1.0, 0.0, 0.0, rng))
        st.iteration = 1
        st.heading = np.array([1.0, 0.0])
        return st

    def test_updates_state(self, rng):
        f = bump_field()
        st = self.make_state(f, 0.4, rng)
        w = take_decision(st, 0.1, 10.0, f.arena)
        assert st.iteration == 2
        assert st.model is not None and st.model.n == 4
        assert np.linalg.norm(w - st.position) <= 1.0 + 1e-12
        assert st.knowledge_gain_total == st.last_knowledge_gain > 0

    def test_requires_first_decision(self, rng):
        f = bump_field()
        st = self.make_state(f, 0.4, rng)
        st.iteration = 0
        with pytest.raises(ValueError):
            take_decision(st, 0.1, 10.0, f.arena)

    def test_downsampling_caps_dataset(self, rng):
        f = bump_field()
        st = self.make_state(f, 0.4, rng)
        st.dataset.extend(sample_along(f, [0.4, 0.3], [2.9, 2.9], 0.1, 1.0, 4.0, 0.01, rng))
        take_decision(st, 0.1, 10.0, f.arena, AgentSettings(n_max=20))
        assert len(st.dataset) == 20

    def test_greedy_rollout_approaches_peak(self, rng):
        # noise-free single bump on the initial heading line: greedy waypoints
        # should close in on the peak
        f = bump_field()
        st = self.make_state(f, 1.0, rng, y0=1.6)
        peak = np.asarray(f.global_max_location)
        dist = [np.linalg.norm(st.position - peak)]
        for _ in range(10):
            start = st.position.copy()
            w = take_decision(st, 0.1, 10.0, f.arena)
            st.dataset.extend(sample_along(f, start, w, 0.1, 1.0, 0.0 + st.iteration * 10, 0.0, rng))
            st.heading = w - start
            st.position = w
            dist.append(np.linalg.norm(w - peak))
            if dist[-1] < 0.05:
                break
        assert all(b <= a + 1e-6 for a, b in zip(dist, dist[1:]))
        assert dist[-1] < 0.05


class TestTermination:
    def test_found(self):
        assert check_termination([[0, 0], [1, 1.04]], [1, 1], 0.05, 3.0, 10.0) is Termination.FOUND

    def test_boundary_inclusive(self):
        assert check_termination([[1.05, 1.0]], [1, 1], 0.05 + 1e-12, 3.0, 10.0) is Termination.FOUND

    def test_just_outside(self):
        assert check_termination([[1.0501, 1.0]], [1, 1], 0.05, 3.0, 10.0) is Termination.CONTINUE

    def test_timeout(self):
        assert check_termination([[0, 0]], [1, 1], 0.05, 10.0, 10.0) is Termination.TIMEOUT
        assert check_termination([[0, 0]], [1, 1], 0.05, 0.0, 0.0) is Termination.TIMEOUT

    def test_found_beats_timeout(self):
        assert check_termination([[1, 1]], [1, 1], 0.05, 10.0, 10.0) is Termination.FOUND
