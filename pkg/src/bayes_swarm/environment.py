"""Ground-truth signal fields, case-study registry and trajectory sampling."""

from __future__ import annotations

import json
from dataclasses import dataclass
from functools import cached_property
from importlib import resources
from pathlib import Path

import numpy as np
from scipy import optimize

from .geometry import Box
from .gp import GpModel, Observation, predict_mean

CASES_RESOURCE = "cases.json"


@dataclass(frozen=True)
class GaussianComponent:
    center: tuple[float, float]
    amplitude: float
    covariance: tuple[tuple[float, float], tuple[float, float]]

    def __post_init__(self):
        cov = np.asarray(self.covariance, dtype=float)
        if cov.shape != (2, 2) or not np.allclose(cov, cov.T):
            raise ValueError("covariance must be a symmetric 2x2 matrix")
        if np.linalg.eigvalsh(cov).min() <= 0:
            raise ValueError("covariance must be positive definite")
        if not self.amplitude > 0:
            raise ValueError("amplitude must be positive")

    @cached_property
    def precision(self) -> np.ndarray:
        return np.linalg.inv(np.asarray(self.covariance, dtype=float))

    def __call__(self, x: np.ndarray) -> np.ndarray:
        d = x - np.asarray(self.center)
        q = np.einsum("...i,ij,...j->...", d, self.precision, d)
        return self.amplitude * np.exp(-0.5 * q)

    def gradient(self, x: np.ndarray) -> np.ndarray:
        d = x - np.asarray(self.center)
        return -self(x)[..., None] * (d @ self.precision)


@dataclass(frozen=True)
class SignalField:
    """Sum of anisotropic Gaussian bumps over an arena."""

    components: tuple[GaussianComponent, ...]
    arena: Box

    def __post_init__(self):
        if not self.components:
            raise ValueError("a field needs at least one component")

    def __call__(self, x) -> np.ndarray | float:
        return field_value(self, x)

    @property
    def max_amplitude(self) -> float:
        return max(c.amplitude for c in self.components)

    def local_maxima(self) -> np.ndarray:
        """Maxima reached by ascent from each component center, deduplicated."""
        found: list[np.ndarray] = []
        for comp in self.components:
            res = optimize.minimize(
                lambda x: -float(field_value(self, x)),
                np.asarray(comp.center, dtype=float),
                jac=lambda x: -sum(c.gradient(x) for c in self.components),
                method="BFGS", options={"gtol": 1e-12},
            )
            if not any(np.linalg.norm(res.x - f) < 1e-4 for f in found):
                found.append(res.x)
        return np.array(found)

    @cached_property
    def global_max_location(self) -> np.ndarray:
        peaks = self.local_maxima()
        return peaks[int(np.argmax(field_value(self, peaks)))]


def field_value(field: SignalField, x) -> np.ndarray | float:
    """Signal strength at one point or an ``(..., 2)`` array of points."""
    p = np.asarray(x, dtype=float)
    out = sum(c(p) for c in field.components)
    return float(out) if np.ndim(out) == 0 else out


@dataclass(frozen=True)
class CaseStudy:
    id: int
    name: str
    field: SignalField
    t_max_bayes: float
    t_max_random: float
    epsilon: float
    start_position: tuple[float, float]
    delta_theta: float
    noise_sd: float
    value_range: tuple[float, float]

    @property
    def arena(self) -> Box:
        return self.field.arena

    @property
    def source(self) -> np.ndarray:
        return self.field.global_max_location


def _parse_case(entry: dict) -> CaseStudy:
    arena = Box.from_list(entry["arena"])
    comps = tuple(
        GaussianComponent(
            tuple(float(v) for v in c["center"]),
            float(c["amplitude"]),
            tuple(tuple(float(v) for v in row) for row in c["covariance"]),
        )
        for c in entry["components"]
    )
    return CaseStudy(
        id=int(entry["id"]),
        name=entry.get("name", f"case {entry['id']}"),
        field=SignalField(comps, arena),
        t_max_bayes=float(entry["t_max"]["bayes"]),
        t_max_random=float(entry["t_max"]["random"]),
        epsilon=float(entry["epsilon"]),
        start_position=tuple(float(v) for v in entry["start"]),
        delta_theta=float(entry["delta_theta"]),
        noise_sd=float(entry["noise_sd"]),
        value_range=tuple(float(v) for v in entry["value_range"]),
    )


def load_cases(path: str | Path | None = None) -> dict[int, CaseStudy]:
    """Parse a case registry file (the bundled one by default)."""
    if path is None:
        text = resources.files("bayes_swarm.data").joinpath(CASES_RESOURCE).read_text("utf-8")
    else:
        text = Path(path).read_text("utf-8")
    doc = json.loads(text)
    return {c.id: c for c in map(_parse_case, doc["cases"])}


def registry_version(path: str | Path | None = None) -> str:
    if path is None:
        text = resources.files("bayes_swarm.data").joinpath(CASES_RESOURCE).read_text("utf-8")
    else:
        text = Path(path).read_text("utf-8")
    return str(json.loads(text)["version"])


def load_case(case_id: int, path: str | Path | None = None) -> CaseStudy:
    cases = load_cases(path)
    if case_id not in cases:
        raise KeyError(f"unknown case {case_id}; available: {sorted(cases)}")
    return cases[case_id]


def sample_times(duration: float, rate: float) -> np.ndarray:
    """Offsets ``i / rate`` (i >= 1) that fall within ``duration`` seconds."""
    if rate <= 0:
        raise ValueError("rate must be positive")
    n = int(np.floor(duration * rate + 1e-9))
    return np.arange(1, n + 1) / rate


def sample_along(
    field: SignalField,
    start,
    end,
    speed: float,
    rate: float,
    t0: float,
    noise_sd: float,
    rng: np.random.Generator,
    robot_id: int = 0,
) -> list[Observation]:
    """Observations taken at ``rate`` Hz while moving from ``start`` to ``end``.

    The first sample is one period after departure; a sample landing exactly on
    arrival is included.  A zero-length leg yields nothing.
    """
    if speed <= 0:
        raise ValueError("speed must be positive")
    a = np.asarray(start, dtype=float)
    b = np.asarray(end, dtype=float)
    length = float(np.linalg.norm(b - a))
    if length == 0.0:
        return []
    offsets = sample_times(length / speed, rate)
    pts = a + (speed * offsets / length)[:, None] * (b - a)
    return _observe(field, pts, t0 + offsets, noise_sd, rng, robot_id)


def sample_stationary(field, position, duration, rate, t0, noise_sd, rng, robot_id=0):
    """Observations from a robot holding position for ``duration`` seconds."""
    offsets = sample_times(duration, rate)
    pts = np.repeat(np.asarray(position, dtype=float)[None, :], len(offsets), axis=0)
    return _observe(field, pts, t0 + offsets, noise_sd, rng, robot_id)


def _observe(field, pts, times, noise_sd, rng, robot_id):
    values = field_value(field, pts)
    if noise_sd > 0:
        values = values + noise_sd * rng.standard_normal(len(pts))
    return [
        Observation((float(p[0]), float(p[1])), float(v), float(t), robot_id)
        for p, v, t in zip(pts, np.atleast_1d(values), times)
    ]


def mapping_error(model: GpModel, field: SignalField, lattice: int = 50) -> float:
    """RMSE of the posterior mean against the true field on a uniform lattice."""
    if lattice < 2:
        raise ValueError("lattice must be >= 2")
    pts = field.arena.lattice(lattice)
    err = predict_mean(model, pts) - field_value(field, pts)
    return float(np.sqrt(np.mean(err * err)))
