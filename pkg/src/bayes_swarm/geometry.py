"""Planar helpers shared by the planner, the environment and the engine."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class Box:
    """Axis-aligned rectangle ``[xmin, xmax] x [ymin, ymax]`` in meters."""

    xmin: float
    ymin: float
    xmax: float
    ymax: float

    def __post_init__(self):
        if not (self.xmax > self.xmin and self.ymax > self.ymin):
            raise ValueError(f"degenerate box {self}")

    @property
    def lower(self) -> np.ndarray:
        return np.array([self.xmin, self.ymin])

    @property
    def upper(self) -> np.ndarray:
        return np.array([self.xmax, self.ymax])

    @property
    def extent(self) -> np.ndarray:
        return self.upper - self.lower

    @property
    def center(self) -> np.ndarray:
        return 0.5 * (self.lower + self.upper)

    def contains(self, points, tol: float = 0.0):
        p = np.asarray(points, dtype=float)
        inside = (p >= self.lower - tol) & (p <= self.upper + tol)
        return np.all(inside, axis=-1)

    def clip(self, points) -> np.ndarray:
        return np.clip(np.asarray(points, dtype=float), self.lower, self.upper)

    def lattice(self, n: int) -> np.ndarray:
        """``n * n`` points on a uniform grid including the edges, row-major in y."""
        xs = np.linspace(self.xmin, self.xmax, n)
        ys = np.linspace(self.ymin, self.ymax, n)
        gx, gy = np.meshgrid(xs, ys)
        return np.column_stack([gx.ravel(), gy.ravel()])

    def to_list(self) -> list[float]:
        return [self.xmin, self.ymin, self.xmax, self.ymax]

    @classmethod
    def from_list(cls, values) -> "Box":
        xmin, ymin, xmax, ymax = (float(v) for v in values)
        return cls(xmin, ymin, xmax, ymax)


def project_to_disk(points, center, radius: float) -> np.ndarray:
    """Radially pull points outside the disk back onto its boundary."""
    p = np.asarray(points, dtype=float)
    c = np.asarray(center, dtype=float)
    d = p - c
    r = np.linalg.norm(d, axis=-1, keepdims=True)
    scale = np.where(r > radius, radius / np.maximum(r, 1e-300), 1.0)
    return c + d * scale


def project_feasible(points, center, radius: float, box: Box) -> np.ndarray:
    """Project onto disk(center, radius) then onto the box.

    Box clipping is non-expansive and keeps ``center`` fixed when it lies in the
    box, so the result stays within ``radius`` of ``center``.
    """
    return box.clip(project_to_disk(points, center, radius))
