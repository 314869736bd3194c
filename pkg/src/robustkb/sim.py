"""Path simulation under a drift-shifted prior and Girsanov densities.

Under the prior indexed by ``theta = (theta1, theta2)`` the system is

    dx = (B x + b - theta1) dt + Q^{1/2} dW,
    dm = (H x + h - theta2) dt + R^{1/2} dV,

with ``W, V`` independent standard Brownian motions under that prior.  The
density with respect to the reference measure (``theta = 0``) is

    f(t) = exp(-int theta1 . dW0 - 1/2 int |theta1|^2 ds
               -int theta2 . dV0 - 1/2 int |theta2|^2 ds),

where ``W0, V0`` are the standardized reference-measure Brownian motions.
All densities are built from standardized increments, so non-identity
``Q``/``R`` never enter the exponent.
"""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import BoundViolation, GridMismatch
from .model import ModelCoefficients, TimeGrid

DETERMINISTIC = "deterministic"
FEEDBACK_OBS = "feedback-on-observation"
FEEDBACK_SIGNAL = "feedback-on-signal"
PATHWISE = "pathwise"
_TAGS = (DETERMINISTIC, FEEDBACK_OBS, FEEDBACK_SIGNAL, PATHWISE)

FeedbackFn = Callable[[float, np.ndarray], tuple]


@dataclass(frozen=True, eq=False)
class ThetaPath:
    """An uncertainty parameter path.

    ``deterministic``: ``theta1`` is ``(N+1, n)`` and ``theta2`` is ``(N+1, m)``.
    ``pathwise``: one path per sample, shapes ``(K, N+1, n)`` / ``(K, N+1, m)``,
    aligned with a specific :class:`PathBatch`.
    ``feedback-on-*``: ``feedback(t, state)`` maps a ``(K, dim)`` state array
    (signal or observation) to ``(theta1 (K, n), theta2 (K, m))``.
    """

    tag: str
    n: int
    m: int
    theta1: np.ndarray | None = None
    theta2: np.ndarray | None = None
    feedback: FeedbackFn | None = None

    def __post_init__(self):
        if self.tag not in _TAGS:
            raise ValueError(f"unknown theta tag {self.tag!r}")
        if self.tag in (DETERMINISTIC, PATHWISE):
            t1 = np.array(self.theta1, dtype=float)
            t2 = np.array(self.theta2, dtype=float)
            t1.setflags(write=False)
            t2.setflags(write=False)
            object.__setattr__(self, "theta1", t1)
            object.__setattr__(self, "theta2", t2)
            ndim = 2 if self.tag == DETERMINISTIC else 3
            if t1.ndim != ndim or t2.ndim != ndim or t1.shape[-1] != self.n or t2.shape[-1] != self.m:
                raise ValueError(f"{self.tag} theta has shapes {t1.shape}, {t2.shape}")
        elif self.feedback is None:
            raise ValueError("feedback theta needs a feedback function")

    # -- constructors --------------------------------------------------
    @classmethod
    def zero(cls, grid: TimeGrid, n: int = 1, m: int = 1) -> "ThetaPath":
        return cls.constant(grid, np.zeros(n), np.zeros(m))

    @classmethod
    def constant(cls, grid: TimeGrid, theta1, theta2) -> "ThetaPath":
        t1 = np.atleast_1d(np.asarray(theta1, dtype=float))
        t2 = np.atleast_1d(np.asarray(theta2, dtype=float))
        return cls(DETERMINISTIC, t1.size, t2.size,
                   np.tile(t1, (grid.N + 1, 1)), np.tile(t2, (grid.N + 1, 1)))

    @classmethod
    def deterministic(cls, theta1, theta2) -> "ThetaPath":
        t1 = np.asarray(theta1, dtype=float)
        t2 = np.asarray(theta2, dtype=float)
        t1 = t1[:, None] if t1.ndim == 1 else t1
        t2 = t2[:, None] if t2.ndim == 1 else t2
        return cls(DETERMINISTIC, t1.shape[1], t2.shape[1], t1, t2)

    @classmethod
    def signal_feedback(cls, func: FeedbackFn, n: int = 1, m: int = 1) -> "ThetaPath":
        return cls(FEEDBACK_SIGNAL, n, m, feedback=func)

    @classmethod
    def observation_feedback(cls, func: FeedbackFn, n: int = 1, m: int = 1) -> "ThetaPath":
        return cls(FEEDBACK_OBS, n, m, feedback=func)

    # -- queries ---------------------------------------------------------
    @property
    def is_deterministic(self) -> bool:
        return self.tag == DETERMINISTIC

    @property
    def is_observation_adapted(self) -> bool:
        return self.tag in (DETERMINISTIC, FEEDBACK_OBS)

    def is_zero(self) -> bool:
        return self.is_deterministic and not self.theta1.any() and not self.theta2.any()

    def check_bound(self, mu: float, tol: float = 1e-12) -> None:
        if self.tag in (DETERMINISTIC, PATHWISE):
            worst = max(np.max(np.abs(self.theta1), initial=0.0), np.max(np.abs(self.theta2), initial=0.0))
            if worst > mu + tol:
                raise BoundViolation(f"|theta| reaches {worst:.6g} > mu = {mu:.6g}")

    def at(self, k: int, t: float, x: np.ndarray, m: np.ndarray, paths: slice | None = None):
        """Parameter values at grid index ``k`` for a ``(K, .)`` block of states."""
        K = x.shape[0]
        if self.tag == DETERMINISTIC:
            return (np.broadcast_to(self.theta1[k], (K, self.n)),
                    np.broadcast_to(self.theta2[k], (K, self.m)))
        if self.tag == PATHWISE:
            sl = paths if paths is not None else slice(None)
            return self.theta1[sl, k], self.theta2[sl, k]
        state = x if self.tag == FEEDBACK_SIGNAL else m
        t1, t2 = self.feedback(t, state)
        return (np.broadcast_to(np.asarray(t1, dtype=float).reshape(K, -1), (K, self.n)),
                np.broadcast_to(np.asarray(t2, dtype=float).reshape(K, -1), (K, self.m)))

    def scaled(self, factor: float) -> "ThetaPath":
        if not self.is_deterministic:
            raise ValueError("only deterministic theta paths can be rescaled")
        return ThetaPath(DETERMINISTIC, self.n, self.m, factor * self.theta1, factor * self.theta2)


@dataclass(frozen=True)
class SamplePath:
    dw: np.ndarray
    dv: np.ndarray
    x: np.ndarray
    m_obs: np.ndarray
    f_theta: np.ndarray


@dataclass(frozen=True, eq=False)
class PathBatch:
    """A reproducible batch of simulated paths, stored as stacked arrays.

    ``dw_std``/``dv_std`` are the standardized Brownian increments of the
    noise driving the simulation (Brownian under the simulating prior);
    ``dw``/``dv`` are the same increments scaled by ``Q^{1/2}``/``R^{1/2}``.
    """

    seed: int
    grid: TimeGrid
    theta: ThetaPath
    x: np.ndarray
    m_obs: np.ndarray
    dw: np.ndarray
    dv: np.ndarray
    dw_std: np.ndarray
    dv_std: np.ndarray
    f_theta: np.ndarray

    @property
    def n_paths(self) -> int:
        return self.x.shape[0]

    def path(self, i: int) -> SamplePath:
        return SamplePath(self.dw[i], self.dv[i], self.x[i], self.m_obs[i], self.f_theta[i])

    @property
    def paths(self) -> list[SamplePath]:
        return [self.path(i) for i in range(self.n_paths)]

    def __len__(self):
        return self.n_paths

    def is_reference(self) -> bool:
        return self.theta.is_zero()


def path_normals(seed: int, index: int, size: int) -> np.ndarray:
    """Standard normals for one path from a counter-based stream.

    The Philox counter is offset by ``index << 192``, so each path owns a
    disjoint stream and adding paths never reshuffles earlier ones.
    """
    bitgen = np.random.Philox(key=int(seed), counter=int(index) << 192)
    return np.random.Generator(bitgen).standard_normal(size)


def sqrtm_psd(a: np.ndarray) -> np.ndarray:
    """Symmetric square root of a stack of PSD matrices."""
    w, v = np.linalg.eigh(0.5 * (a + np.swapaxes(a, -1, -2)))
    return (v * np.sqrt(np.clip(w, 0.0, None))[..., None, :]) @ np.swapaxes(v, -1, -2)


def _simulate_chunk(model, grid, theta, seed, start, stop, mu):
    # time-major work arrays: (step, path, component)
    N, n, m = grid.N, model.n, model.m
    K = stop - start
    dt = grid.dt
    z = np.empty((N, K, n + m))
    for j, i in enumerate(range(start, stop)):
        z[:, j, :] = path_normals(seed, i, N * (n + m)).reshape(N, n + m)
    z *= np.sqrt(dt)
    dw_std = z[:, :, :n]
    dv_std = z[:, :, n:]
    sqrt_q = sqrtm_psd(model.Q)
    sqrt_r = sqrtm_psd(model.R)
    dw = np.einsum("kpj,kij->kpi", dw_std, sqrt_q[:-1])
    dv = np.einsum("kpj,kij->kpi", dv_std, sqrt_r[:-1])
    times = grid.times

    x = np.empty((N + 1, K, n))
    mo = np.empty((N + 1, K, m))
    logf = np.zeros((N + 1, K))
    x[0] = model.x0
    mo[0] = 0.0
    paths = slice(start, stop)
    for k in range(N):
        xk, mk = x[k], mo[k]
        t1, t2 = theta.at(k, times[k], xk, mk, paths)
        if mu is not None and not theta.is_deterministic:
            worst = max(np.max(np.abs(t1)), np.max(np.abs(t2)))
            if worst > mu + 1e-12:
                raise BoundViolation(f"|theta| reaches {worst:.6g} > mu = {mu:.6g} at step {k}")
        x[k + 1] = xk + (xk @ model.B[k].T + model.b[k] - t1) * dt + dw[k]
        mo[k + 1] = mk + (xk @ model.H[k].T + model.h[k] - t2) * dt + dv[k]
        # dW0 = dW - theta dt, so -theta.dW0 - |theta|^2 dt/2 = -theta.dW + |theta|^2 dt/2
        sq = np.sum(t1 * t1, axis=1) + np.sum(t2 * t2, axis=1)
        logf[k + 1] = (logf[k] - np.sum(t1 * dw_std[k], axis=1)
                       - np.sum(t2 * dv_std[k], axis=1) + 0.5 * sq * dt)
    return x, mo, dw, dv, np.ascontiguousarray(dw_std), np.ascontiguousarray(dv_std), np.exp(logf)


def simulate_paths(model: ModelCoefficients, grid: TimeGrid, theta: ThetaPath,
                   n_paths: int, seed: int, mu: float | None = None,
                   threads: int = 1) -> PathBatch:
    """Euler-Maruyama paths of the system under the prior indexed by ``theta``.

    ``mu``, when given, is enforced on ``theta`` (deterministic paths up
    front, feedback values at every step).  ``threads > 1`` splits the
    batch into contiguous path blocks; results are bitwise identical to the
    single-threaded run because every path has its own random stream.
    """
    if model.n_grid != grid.N + 1:
        raise GridMismatch(f"model has {model.n_grid} grid values, grid has {grid.N + 1}")
    if theta.n != model.n or theta.m != model.m:
        raise ValueError("theta dimensions do not match the model")
    if mu is not None:
        theta.check_bound(mu)
    if theta.tag == PATHWISE and theta.theta1.shape[0] != n_paths:
        raise ValueError("pathwise theta is aligned with a different number of paths")

    bounds = np.linspace(0, n_paths, max(1, min(threads, n_paths)) + 1).astype(int)
    jobs = [(int(a), int(b)) for a, b in zip(bounds[:-1], bounds[1:]) if b > a]
    if len(jobs) == 1:
        parts = [_simulate_chunk(model, grid, theta, seed, *jobs[0], mu)]
    else:
        with ThreadPoolExecutor(max_workers=len(jobs)) as pool:
            parts = list(pool.map(lambda j: _simulate_chunk(model, grid, theta, seed, *j, mu), jobs))
    arrays = []
    for a in zip(*parts):
        a = a[0] if len(a) == 1 else np.concatenate(a, axis=1)
        a.setflags(write=False)
        arrays.append(np.swapaxes(a, 0, 1))  # path-major view
    x, mo, dw, dv, dw_std, dv_std, f = arrays
    return PathBatch(seed, grid, theta, x, mo, dw, dv, dw_std, dv_std, f)


def theta_on_batch(theta: ThetaPath, batch: PathBatch):
    """Evaluate ``theta`` along every path of ``batch``: ``(K, N+1, n)``, ``(K, N+1, m)``."""
    K, N = batch.n_paths, batch.grid.N
    if theta.tag == DETERMINISTIC:
        return (np.broadcast_to(theta.theta1, (K, N + 1, theta.n)),
                np.broadcast_to(theta.theta2, (K, N + 1, theta.m)))
    if theta.tag == PATHWISE:
        if theta.theta1.shape[:2] != (K, N + 1):
            raise ValueError("pathwise theta is not aligned with this batch")
        return theta.theta1, theta.theta2
    t1 = np.empty((K, N + 1, theta.n))
    t2 = np.empty((K, N + 1, theta.m))
    times = batch.grid.times
    for k in range(N + 1):
        t1[:, k], t2[:, k] = theta.at(k, times[k], batch.x[:, k], batch.m_obs[:, k])
    return t1, t2


def density_path(theta: ThetaPath, batch: PathBatch) -> np.ndarray:
    """Density of the ``theta`` prior along reference paths, shape ``(K, N+1)``."""
    if not batch.is_reference():
        raise ValueError("density_path reweights paths simulated under the reference measure")
    t1, t2 = theta_on_batch(theta, batch)
    t1, t2 = t1[:, :-1], t2[:, :-1]
    dt = batch.grid.dt
    incr = (-np.sum(t1 * batch.dw_std, axis=2) - np.sum(t2 * batch.dv_std, axis=2)
            - 0.5 * (np.sum(t1 * t1, axis=2) + np.sum(t2 * t2, axis=2)) * dt)
    logf = np.concatenate([np.zeros((batch.n_paths, 1)), np.cumsum(incr, axis=1)], axis=1)
    return np.exp(logf)


def mixture_theta(theta_a: ThetaPath, theta_b: ThetaPath, lam: float,
                  batch: PathBatch) -> ThetaPath:
    """Parameter generating the mixed density ``lam f_a + (1 - lam) f_b``.

    The result is pathwise (it depends on the whole past through the two
    densities) and aligned with ``batch``.
    """
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"mixture weight must lie in [0, 1], got {lam}")
    fa = density_path(theta_a, batch)[..., None]
    fb = density_path(theta_b, batch)[..., None]
    a1, a2 = theta_on_batch(theta_a, batch)
    b1, b2 = theta_on_batch(theta_b, batch)
    wa = lam * fa
    wb = (1.0 - lam) * fb
    total = wa + wb
    t1 = (wa * a1 + wb * b1) / total
    t2 = (wa * a2 + wb * b2) / total
    return ThetaPath(PATHWISE, theta_a.n, theta_a.m, t1, t2)


@dataclass(frozen=True)
class MomentCheck:
    estimate: float
    std_error: float
    lower_bound: float
    upper_bound: float

    def within(self, n_se: float) -> bool:
        return (self.lower_bound - n_se * self.std_error <= self.estimate
                <= self.upper_bound + n_se * self.std_error)


def girsanov_moment_check(phi_const: float, alpha: float, t: float,
                          n_paths: int, seed: int) -> MomentCheck:
    """Monte Carlo estimate of ``E exp(alpha * zeta_t)`` for a constant integrand.

    ``zeta_t = c W_t - c^2 t / 2``; the two-sided moment bound
    ``exp((alpha^2 - alpha) t c^2 / 2)`` is attained with equality here.
    """
    if not alpha > 1:
        raise ValueError("moment check needs alpha > 1")
    c = float(phi_const)
    w_t = np.random.default_rng(seed).standard_normal(n_paths) * np.sqrt(t)
    samples = np.exp(alpha * (c * w_t - 0.5 * c * c * t))
    bound = float(np.exp(0.5 * (alpha * alpha - alpha) * t * c * c))
    se = float(samples.std(ddof=1) / np.sqrt(n_paths)) if n_paths > 1 else float("inf")
    return MomentCheck(float(samples.mean()), se, bound, bound)
