"""Kalman-Bucy filter, Riccati solver and a discrete-time oracle.

The Riccati equation is deterministic, so it is integrated with classical
RK4 (coefficients frozen over each step).  The filter itself uses the same
Euler step as the simulator so that it is consistent with the increments
it consumes.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .errors import GridMismatch
from .model import ModelCoefficients, TimeGrid


@dataclass(frozen=True, eq=False)
class RiccatiSolution:
    P: np.ndarray      # (N+1, n, n)
    gain: np.ndarray   # P H^T R^{-1}, (N+1, n, m)


@dataclass(frozen=True, eq=False)
class FilterOutput:
    x_hat: np.ndarray                 # (N+1, n) or (K, N+1, n)
    P: RiccatiSolution
    innovation_increments: np.ndarray  # (N, m) or (K, N, m)


def r_inverse_products(model: ModelCoefficients):
    """``H^T R^{-1}`` and ``H^T R^{-1} H`` per grid point via Cholesky solves."""
    ht_rinv = np.empty((model.n_grid, model.n, model.m))
    for k in range(model.n_grid):
        c = cho_factor(model.R[k])
        ht_rinv[k] = cho_solve(c, model.H[k]).T
    return ht_rinv, ht_rinv @ model.H


def _check_grid(model: ModelCoefficients, grid: TimeGrid):
    if model.n_grid != grid.N + 1:
        raise GridMismatch(f"model has {model.n_grid} grid values, grid has {grid.N + 1}")


def riccati_solve(model: ModelCoefficients, grid: TimeGrid) -> RiccatiSolution:
    """Error covariance ``dP/dt = BP + PB^T - P H^T R^{-1} H P + Q``, ``P(0) = 0``."""
    _check_grid(model, grid)
    ht_rinv, s = r_inverse_products(model)
    dt = grid.dt
    n = model.n
    P = np.zeros((grid.N + 1, n, n))
    for k in range(grid.N):
        B, S, Q = model.B[k], s[k], model.Q[k]

        def rhs(p):
            return B @ p + p @ B.T - p @ S @ p + Q

        p = P[k]
        k1 = rhs(p)
        k2 = rhs(p + 0.5 * dt * k1)
        k3 = rhs(p + 0.5 * dt * k2)
        k4 = rhs(p + dt * k3)
        nxt = p + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
        P[k + 1] = 0.5 * (nxt + nxt.T)
    gain = P @ ht_rinv
    P.setflags(write=False)
    gain.setflags(write=False)
    return RiccatiSolution(P, gain)


def _as_batch(observations: np.ndarray, grid: TimeGrid, m: int):
    obs = np.asarray(observations, dtype=float)
    single = obs.ndim == 2
    if obs.ndim == 1 and m == 1:
        obs, single = obs[:, None], True
    if single:
        obs = obs[None]
    if obs.shape[1:] != (grid.N + 1, m):
        raise GridMismatch(f"observations have shape {obs.shape[1:]}, expected {(grid.N + 1, m)}")
    return obs, single


def innovation_filter(model: ModelCoefficients, grid: TimeGrid, observations: np.ndarray,
                      riccati: RiccatiSolution | None = None, theta=None) -> FilterOutput:
    """Euler integration of the (optionally drift-shifted) filter.

    ``dx = (B x + b - theta1) dt + K dI``, ``dI = dm - (H x + h - theta2) dt``
    with ``K = P H^T R^{-1}``.  ``theta`` must be observation-adapted
    (deterministic or observation feedback); ``None`` means no shift.
    """
    _check_grid(model, grid)
    obs, single = _as_batch(observations, grid, model.m)
    if riccati is None:
        riccati = riccati_solve(model, grid)
    K, N, n, m = obs.shape[0], grid.N, model.n, model.m
    dt = grid.dt
    times = grid.times
    x = np.empty((K, N + 1, n))
    dI = np.empty((K, N, m))
    x[:, 0] = model.x0
    zero1 = np.zeros((K, n))
    zero2 = np.zeros((K, m))
    for k in range(N):
        xk = x[:, k]
        if theta is None:
            t1, t2 = zero1, zero2
        else:
            t1, t2 = theta.at(k, times[k], xk, obs[:, k])
        dI[:, k] = obs[:, k + 1] - obs[:, k] - (xk @ model.H[k].T + model.h[k] - t2) * dt
        x[:, k + 1] = xk + (xk @ model.B[k].T + model.b[k] - t1) * dt + dI[:, k] @ riccati.gain[k].T
    if single:
        x, dI = x[0], dI[0]
    return FilterOutput(x, riccati, dI)


def classical_filter(model: ModelCoefficients, grid: TimeGrid, observations: np.ndarray,
                     riccati: RiccatiSolution | None = None) -> FilterOutput:
    """Kalman-Bucy estimate from an observation path (or a stack of paths)."""
    return innovation_filter(model, grid, observations, riccati)


def discrete_kalman_oracle(model: ModelCoefficients, grid: TimeGrid,
                           observations: np.ndarray) -> np.ndarray:
    """Textbook predict/update recursion on the Euler-discretized system.

    State ``x_{k+1} = (I + B dt) x_k + b dt + noise(Q dt)``; measurement
    ``y_k = m_{k+1} - m_k = (H x_k + h) dt + noise(R dt)``.  Returns the
    one-step predicted mean, i.e. the estimate of ``x_k`` from ``m`` up to
    ``t_k``, which is the quantity the continuous filter tracks.
    """
    _check_grid(model, grid)
    obs, single = _as_batch(observations, grid, model.m)
    Kp, N, n = obs.shape[0], grid.N, model.n
    dt = grid.dt
    eye = np.eye(n)
    mean = np.empty((Kp, N + 1, n))
    mean[:, 0] = model.x0
    cov = np.zeros((n, n))
    for k in range(N):
        Hd = model.H[k] * dt
        y = obs[:, k + 1] - obs[:, k]
        S = Hd @ cov @ Hd.T + model.R[k] * dt
        gain = np.linalg.solve(S, Hd @ cov).T
        upd = mean[:, k] + (y - mean[:, k] @ Hd.T - model.h[k] * dt) @ gain.T
        cov_upd = (eye - gain @ Hd) @ cov
        F = eye + model.B[k] * dt
        mean[:, k + 1] = upd @ F.T + model.b[k] * dt
        cov = F @ cov_upd @ F.T + model.Q[k] * dt
        cov = 0.5 * (cov + cov.T)
    return mean[0] if single else mean
