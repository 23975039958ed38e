"""Gaussian-process regression over planar inputs.

Anisotropic squared-exponential kernel with a constant basis function.  The
covariance matrix is factorised once per model by Cholesky; every query reuses
that factor.  Hyperparameters are fitted by maximising the marginal
log-likelihood with a small multi-start L-BFGS-B search in log space, the
basis coefficient being profiled out in closed form (generalised least
squares) at every step.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from typing import Iterable, NamedTuple, Sequence

import numpy as np
from scipy import linalg, optimize
from scipy.linalg import lapack

#: Lower bound on ``noise_variance / signal_variance``.
NOISE_FLOOR = 1e-8
#: Largest relative diagonal jitter tried before giving up on a factorisation.
MAX_JITTER = 1e-2

_LOG_2PI = np.log(2.0 * np.pi)


class SingularKernel(np.linalg.LinAlgError):
    """The covariance matrix could not be factorised even with maximum jitter."""


class Observation(NamedTuple):
    """A single timestamped signal measurement."""

    position: tuple[float, float]
    value: float
    time: float
    origin_robot: int


class Dataset:
    """Ordered, duplicate-free collection of observations.

    Two observations are duplicates when they share position, time and origin
    robot; the later one is silently dropped.
    """

    def __init__(self, observations: Iterable[Observation] = ()):
        self._obs: list[Observation] = []
        self._keys: set = set()
        self._arrays = None
        self.extend(observations)

    @staticmethod
    def _key(obs: Observation):
        return (obs.position, obs.time, obs.origin_robot)

    def add(self, obs: Observation) -> bool:
        key = self._key(obs)
        if key in self._keys:
            return False
        self._keys.add(key)
        self._obs.append(obs)
        self._arrays = None
        return True

    def extend(self, observations: Iterable[Observation]) -> int:
        return sum(self.add(o) for o in observations)

    def __len__(self) -> int:
        return len(self._obs)

    def __iter__(self):
        return iter(self._obs)

    def __getitem__(self, i):
        return self._obs[i]

    def __contains__(self, obs) -> bool:
        return self._key(obs) in self._keys

    @property
    def observations(self) -> list[Observation]:
        return list(self._obs)

    def _materialise(self):
        if self._arrays is None:
            if self._obs:
                X = np.array([o.position for o in self._obs], dtype=float)
                y = np.array([o.value for o in self._obs], dtype=float)
            else:
                X, y = np.empty((0, 2)), np.empty(0)
            self._arrays = (X, y)
        return self._arrays

    @property
    def inputs(self) -> np.ndarray:
        return self._materialise()[0]

    @property
    def targets(self) -> np.ndarray:
        return self._materialise()[1]

    def copy(self) -> "Dataset":
        return Dataset(self._obs)


@dataclass(frozen=True)
class Hyperparameters:
    """Kernel and mean parameters.

    ``beta`` is the coefficient of the constant basis function, i.e. the prior
    mean level.
    """

    signal_variance: float
    length_scales: tuple[float, float]
    noise_variance: float
    beta: float = 0.0

    def __post_init__(self):
        ls = tuple(float(v) for v in self.length_scales)
        object.__setattr__(self, "length_scales", ls)
        if len(ls) != 2:
            raise ValueError("length_scales must have two entries")
        if not self.signal_variance > 0 or min(ls) <= 0:
            raise ValueError(f"non-positive kernel parameter in {self}")
        if not self.noise_variance >= 0:
            raise ValueError("noise_variance must be >= 0")
        if not np.isfinite(self.beta):
            raise ValueError("beta must be finite")

    @property
    def noise_floor(self) -> float:
        return NOISE_FLOOR * self.signal_variance

    def with_noise_floor(self) -> "Hyperparameters":
        if self.noise_variance >= self.noise_floor:
            return self
        return replace(self, noise_variance=self.noise_floor)

    def to_dict(self) -> dict:
        return {
            "signal_variance": self.signal_variance,
            "length_scales": list(self.length_scales),
            "noise_variance": self.noise_variance,
            "beta": self.beta,
        }


def _as_arrays(data) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(data, Dataset):
        return data.inputs, data.targets
    X, y = data
    return np.atleast_2d(np.asarray(X, dtype=float)), np.asarray(y, dtype=float).ravel()


def kernel_matrix(A, B, hyper: Hyperparameters) -> np.ndarray:
    A = np.atleast_2d(np.asarray(A, dtype=float)) / hyper.length_scales
    B = np.atleast_2d(np.asarray(B, dtype=float)) / hyper.length_scales
    sq = (A * A).sum(1)[:, None] + (B * B).sum(1)[None, :] - 2.0 * (A @ B.T)
    np.maximum(sq, 0.0, out=sq)
    return hyper.signal_variance * np.exp(-0.5 * sq)


def kernel(a, b, hyper: Hyperparameters) -> float:
    """Squared-exponential covariance between two points."""
    d = (np.asarray(a, dtype=float) - np.asarray(b, dtype=float)) / hyper.length_scales
    return float(hyper.signal_variance * np.exp(-0.5 * float(d @ d)))


def _cholesky(C: np.ndarray, signal_variance: float) -> tuple[np.ndarray, float]:
    """Lower Cholesky factor of ``C + jitter*I`` with escalating jitter."""
    jitter = 0.0
    eye = np.eye(C.shape[0])
    while True:
        try:
            return linalg.cholesky(C + jitter * eye, lower=True, check_finite=False), jitter
        except linalg.LinAlgError:
            pass
        jitter = NOISE_FLOOR * signal_variance if jitter == 0.0 else jitter * 10.0
        if jitter > MAX_JITTER * signal_variance * (1 + 1e-9):
            raise SingularKernel(
                f"kernel matrix of size {C.shape[0]} not positive definite "
                f"with jitter up to {MAX_JITTER:g} x signal variance"
            )


def covariance_matrix(X, hyper: Hyperparameters) -> np.ndarray:
    """``K + noise_variance * I`` on the training inputs."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    C = kernel_matrix(X, X, hyper)
    C[np.diag_indices_from(C)] += hyper.noise_variance
    return C


@dataclass(frozen=True, eq=False)
class GpModel:
    """A fitted GP: hyperparameters plus the factorised training covariance.

    ``chol`` is the lower Cholesky factor of ``K + (noise_variance + jitter) I``
    and ``weights`` solves that system for the centred targets.
    """

    hyper: Hyperparameters
    inputs: np.ndarray
    targets: np.ndarray
    chol: np.ndarray
    weights: np.ndarray
    jitter: float = 0.0

    @property
    def n(self) -> int:
        return self.inputs.shape[0]


def build_model(X, y, hyper: Hyperparameters) -> GpModel:
    X, y = _as_arrays((X, y))
    if X.shape[0] == 0:
        raise ValueError("cannot build a GP on an empty dataset")
    L, jitter = _cholesky(covariance_matrix(X, hyper), hyper.signal_variance)
    w = linalg.cho_solve((L, True), y - hyper.beta, check_finite=False)
    for arr in (X, y, L, w):
        arr.setflags(write=False)
    return GpModel(hyper, X, y, L, w, jitter)


def predict(model: GpModel, queries) -> tuple[np.ndarray, np.ndarray]:
    """Posterior mean and latent-function variance at many points."""
    Q = np.atleast_2d(np.asarray(queries, dtype=float))
    Kq = kernel_matrix(Q, model.inputs, model.hyper)
    mean = model.hyper.beta + Kq @ model.weights
    v = linalg.solve_triangular(model.chol, Kq.T, lower=True, check_finite=False)
    var = model.hyper.signal_variance - np.einsum("ij,ij->j", v, v)
    return mean, np.maximum(var, 0.0)


def predict_mean(model: GpModel, queries) -> np.ndarray:
    Q = np.atleast_2d(np.asarray(queries, dtype=float))
    return model.hyper.beta + kernel_matrix(Q, model.inputs, model.hyper) @ model.weights


def predict_std(model: GpModel, queries) -> np.ndarray:
    return np.sqrt(predict(model, queries)[1])


def posterior(model: GpModel, query) -> tuple[float, float]:
    """Posterior ``(mean, variance)`` at a single point."""
    m, v = predict(model, np.asarray(query, dtype=float).reshape(1, 2))
    return float(m[0]), float(v[0])


def condition_on_inputs(model: GpModel, extra_inputs) -> GpModel:
    """Condition on extra input locations without target values.

    The extra targets are set to the current posterior mean, which leaves the
    mean surface unchanged while shrinking the variance around the new inputs.
    """
    F = np.atleast_2d(np.asarray(extra_inputs, dtype=float))
    if F.shape[0] == 0:
        return model
    X = np.vstack([model.inputs, F])
    y = np.concatenate([model.targets, predict_mean(model, F)])
    return build_model(X, y, model.hyper)


# ---------------------------------------------------------------------------
# Marginal likelihood
# ---------------------------------------------------------------------------


def log_likelihood(data, hyper: Hyperparameters) -> float:
    """Gaussian marginal log-likelihood of the targets."""
    X, y = _as_arrays(data)
    if X.shape[0] == 0:
        raise ValueError("log-likelihood of an empty dataset")
    L, _ = _cholesky(covariance_matrix(X, hyper), hyper.signal_variance)
    r = y - hyper.beta
    a = linalg.solve_triangular(L, r, lower=True, check_finite=False)
    return float(-0.5 * a @ a - np.log(np.diag(L)).sum() - 0.5 * len(y) * _LOG_2PI)


def _squared_differences(X) -> np.ndarray:
    return np.stack([(X[:, d][:, None] - X[:, d][None, :]) ** 2 for d in range(2)])


def _likelihood_terms(X, y, hyper: Hyperparameters, beta: float | None, sqdiff=None):
    """Value and natural-parameter gradient of the log-likelihood.

    If ``beta`` is None the GLS optimum is used for it.  Returns
    ``(value, grad, beta)`` with ``grad`` ordered as (signal_variance,
    length_scale_x, length_scale_y, noise_variance, beta).
    """
    n = len(y)
    if sqdiff is None:
        sqdiff = _squared_differences(X)
    ls2 = np.square(hyper.length_scales)
    K = hyper.signal_variance * np.exp(-0.5 * (sqdiff[0] / ls2[0] + sqdiff[1] / ls2[1]))
    C = K.copy()
    C[np.diag_indices_from(C)] += hyper.noise_variance
    L, _ = _cholesky(C, hyper.signal_variance)
    Cinv, info = lapack.dpotri(L, lower=1)
    if info != 0:
        raise SingularKernel(f"dpotri failed with info={info}")
    Cinv = np.tril(Cinv) + np.tril(Cinv, -1).T
    if beta is None:
        ones_c = Cinv.sum(0)
        beta = float(ones_c @ y / ones_c.sum())
    r = y - beta
    a = Cinv @ r
    value = -0.5 * r @ a - np.log(np.diag(L)).sum() - 0.5 * n * _LOG_2PI
    W = np.outer(a, a) - Cinv
    WK = W * K
    grad = np.empty(5)
    grad[0] = 0.5 * WK.sum() / hyper.signal_variance
    for d in range(2):
        grad[1 + d] = 0.5 * (WK * sqdiff[d]).sum() / hyper.length_scales[d] ** 3
    grad[3] = 0.5 * np.trace(W)
    grad[4] = a.sum()
    return float(value), grad, beta


def log_likelihood_gradient(data, hyper: Hyperparameters) -> np.ndarray:
    """Analytic gradient ordered as (signal_variance, length_scale_x,
    length_scale_y, noise_variance, beta)."""
    X, y = _as_arrays(data)
    return _likelihood_terms(X, y, hyper, hyper.beta)[1]


# ---------------------------------------------------------------------------
# Fitting
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FitBudget:
    """Limits for the hyperparameter search.

    ``signal_variance_bounds`` are relative to the empirical target variance.
    With ``max_points`` set, the likelihood search runs on a random subset of
    that size; the returned model still conditions on every observation and
    the never-worse-than-init check uses the full data.
    """

    n_starts: int = 5
    max_iter: int = 40
    perturbation: float = 1.0
    length_scale_bounds: tuple[float, float] = (1e-2, 1e2)
    signal_variance_bounds: tuple[float, float] = (1e-2, 1e4)
    noise_ratio_bounds: tuple[float, float] = (NOISE_FLOOR, 10.0)
    max_points: int | None = None


def _to_log(h: Hyperparameters) -> np.ndarray:
    ratio = max(h.noise_variance / h.signal_variance, NOISE_FLOOR)
    return np.log([h.signal_variance, *h.length_scales, ratio])


def _from_log(u, beta: float) -> Hyperparameters:
    sf2, l1, l2, ratio = np.exp(u)
    return Hyperparameters(float(sf2), (float(l1), float(l2)), float(ratio * sf2), beta)


def _log_bounds(y: np.ndarray, budget: FitBudget) -> np.ndarray:
    scale = max(float(np.var(y)), 1e-6 * float(np.mean(y * y)), 1e-12)
    sv = np.array(budget.signal_variance_bounds) * scale
    return np.log(np.array([sv, budget.length_scale_bounds, budget.length_scale_bounds,
                            budget.noise_ratio_bounds], dtype=float))


def _negative_profile(u, X, y, sqdiff):
    """Negative profile log-likelihood and its gradient in log space."""
    try:
        h = _from_log(u, 0.0)
        value, g, _ = _likelihood_terms(X, y, h, None, sqdiff)
    except SingularKernel:
        return 1e25, np.zeros(4)
    # noise_variance = ratio * signal_variance
    du = np.array([
        h.signal_variance * g[0] + h.noise_variance * g[3],
        h.length_scales[0] * g[1],
        h.length_scales[1] * g[2],
        h.noise_variance * g[3],
    ])
    return -value, -du


def _local_search(u0, X, y, sqdiff, bounds, max_iter):
    res = optimize.minimize(
        _negative_profile, u0, args=(X, y, sqdiff), jac=True, method="L-BFGS-B",
        bounds=bounds, options={"maxiter": max_iter},
    )
    return float(res.fun), res.x


def fit(
    data,
    init: Hyperparameters,
    budget: FitBudget = FitBudget(),
    rng: np.random.Generator | None = None,
    workers: int = 1,
) -> GpModel:
    """Fit hyperparameters by maximum marginal likelihood.

    Starts from ``init`` plus ``budget.n_starts - 1`` random log-space
    perturbations of it.  The returned model never has a lower log-likelihood
    than ``init`` itself.  A single observation skips the search.
    """
    X, y = _as_arrays(data)
    if X.shape[0] == 0:
        raise ValueError("cannot fit a GP on an empty dataset")
    init = init.with_noise_floor()
    if X.shape[0] == 1:
        return build_model(X, y, init)

    rng = np.random.default_rng(0) if rng is None else rng
    bounds = _log_bounds(y, budget)
    u_init = np.clip(_to_log(init), bounds[:, 0], bounds[:, 1])
    starts = [u_init]
    for _ in range(max(budget.n_starts, 1) - 1):
        u = u_init + budget.perturbation * rng.standard_normal(4)
        starts.append(np.clip(u, bounds[:, 0], bounds[:, 1]))

    Xs, ys = X, y
    if budget.max_points is not None and X.shape[0] > budget.max_points:
        idx = np.sort(rng.choice(X.shape[0], size=budget.max_points, replace=False))
        Xs, ys = X[idx], y[idx]
    sqdiff = _squared_differences(Xs)

    def search(u):
        return _local_search(u, Xs, ys, sqdiff, bounds, budget.max_iter)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(search, starts))
    else:
        results = [search(u) for u in starts]
    best = min(range(len(results)), key=lambda i: (results[i][0], i))
    u_best = results[best][1]

    value, _, beta = _likelihood_terms(X, y, _from_log(u_best, 0.0), None)
    candidate = _from_log(u_best, beta).with_noise_floor()
    if value < log_likelihood((X, y), init):
        candidate = init
    return build_model(X, y, candidate)


def downsample(
    data: Dataset,
    n_max: int,
    rng: np.random.Generator,
    recent_window: float | None = None,
) -> Dataset:
    """Uniform random subset of at most ``n_max`` observations.

    With ``recent_window`` set, every observation taken within that many
    seconds of its origin robot's newest observation is kept first.  Original
    ordering is preserved.
    """
    if n_max < 1:
        raise ValueError("n_max must be >= 1")
    n = len(data)
    if n <= n_max:
        return data.copy()
    obs = data.observations
    protected = np.zeros(n, dtype=bool)
    if recent_window is not None:
        newest: dict[int, float] = {}
        for o in obs:
            newest[o.origin_robot] = max(newest.get(o.origin_robot, -np.inf), o.time)
        protected = np.array([o.time >= newest[o.origin_robot] - recent_window for o in obs])
    keep_idx = np.flatnonzero(protected)
    rest_idx = np.flatnonzero(~protected)
    if len(keep_idx) >= n_max:
        chosen = rng.choice(keep_idx, size=n_max, replace=False)
    else:
        extra = rng.choice(rest_idx, size=n_max - len(keep_idx), replace=False)
        chosen = np.concatenate([keep_idx, extra])
    return Dataset(obs[i] for i in np.sort(chosen))


def dataset_from_arrays(X: Sequence, y: Sequence, time: float = 0.0, origin: int = 0) -> Dataset:
    """Convenience constructor; observation times are ``time + index``."""
    return Dataset(
        Observation((float(p[0]), float(p[1])), float(v), time + i, origin)
        for i, (p, v) in enumerate(zip(np.asarray(X, dtype=float), y))
    )
