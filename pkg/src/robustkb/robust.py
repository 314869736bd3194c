"""Worst-case priors, the robust filter and saddle certification.

The robust problem at time ``t*`` is

    inf_zeta sup_theta  E_theta[(x(t*) - zeta)^2] + alpha_{0,t*}(theta).

Within the class of deterministic (hence observation-adapted) parameter
paths the error variance of the theta-shifted filter is the Riccati
solution, independent of theta, so

* the lower (sup-inf) value is ``P(t*) + max_theta alpha_{0,t*}(theta)``,
* the upper value for the estimator built from ``theta_ref`` is
  ``sup_theta P(t*) + |e(t*)|^2 + alpha_{0,t*}(theta)`` where ``e`` is the
  deterministic bias of that estimator under ``P^theta``.

The gap between the two is reported, never assumed to vanish.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.linalg import expm
from scipy.optimize import minimize_scalar

from .errors import DomainViolation, GridMismatch, NotAdapted, ParticleDegeneracy
from .gexp import USER, ConcaveDual, penalty_eval
from .kalman import FilterOutput, RiccatiSolution, _as_batch, innovation_filter, riccati_solve
from .model import ModelCoefficients, TimeGrid
from .sim import DETERMINISTIC, FEEDBACK_OBS, FEEDBACK_SIGNAL, ThetaPath

DETERMINISTIC_CLASS = "deterministic-piecewise-constant"
OBSERVATION_CLASS = "observation-feedback"
SIGNAL_CLASS = "signal-feedback"


@dataclass(frozen=True)
class ThetaClass:
    kind: str = DETERMINISTIC_CLASS
    dim: int = 2

    def __post_init__(self):
        if self.kind not in (DETERMINISTIC_CLASS, OBSERVATION_CLASS, SIGNAL_CLASS):
            raise ValueError(f"unknown theta class {self.kind!r}")

    @property
    def observation_adapted(self) -> bool:
        return self.kind != SIGNAL_CLASS

    def contains(self, theta: ThetaPath, mu: float) -> bool:
        tags = {DETERMINISTIC_CLASS: DETERMINISTIC, OBSERVATION_CLASS: FEEDBACK_OBS,
                SIGNAL_CLASS: FEEDBACK_SIGNAL}
        if theta.tag != tags[self.kind] or theta.n + theta.m != self.dim:
            return False
        if theta.is_deterministic:
            return bool(max(np.max(np.abs(theta.theta1)), np.max(np.abs(theta.theta2))) <= mu + 1e-12)
        return True


@dataclass(frozen=True, eq=False)
class RobustProblem:
    model: ModelCoefficients
    grid: TimeGrid
    G: ConcaveDual
    mu: float
    t_star: float

    def __post_init__(self):
        if self.model.n_grid != self.grid.N + 1:
            raise GridMismatch("model and grid lengths differ")
        self.grid.index(self.t_star)
        if self.mu < 0:
            raise ValueError("mu must be nonnegative")
        if self.G.kind != "zero" and self.mu > self.G.radius + 1e-15:
            raise DomainViolation(f"mu={self.mu} exceeds the dual-domain radius {self.G.radius}")
        if self.G.kind == "zero" and self.mu > 0:
            raise DomainViolation("the zero generator admits only mu = 0")
        object.__setattr__(self, "_riccati", riccati_solve(self.model, self.grid))

    @property
    def riccati(self) -> RiccatiSolution:
        return self._riccati

    @property
    def k_star(self) -> int:
        return self.grid.index(self.t_star)

    @property
    def variance(self) -> float:
        """``trace P(t*)``, the error variance of every theta-shifted filter."""
        return float(np.trace(self.riccati.P[self.k_star]))

    @property
    def theta_class(self) -> ThetaClass:
        return ThetaClass(DETERMINISTIC_CLASS, self.model.n + self.model.m)


@dataclass(frozen=True, eq=False)
class UpperValue:
    value: float
    theta: ThetaPath
    bias: np.ndarray          # e(t*) at the maximiser
    sweep_value: float        # multiplier-sweep route (nan when not used)
    gradient_value: float     # projected-gradient route


@dataclass(frozen=True, eq=False)
class SaddleReport:
    theta_star: ThetaPath
    lower_value: float
    upper_value: float
    gap: float
    upper_theta: ThetaPath
    estimator: FilterOutput | None = None


def _stack(theta: ThetaPath) -> np.ndarray:
    return np.concatenate([theta.theta1, theta.theta2], axis=1)


def _unstack(th: np.ndarray, n: int) -> ThetaPath:
    return ThetaPath.deterministic(th[:, :n], th[:, n:])


def inner_value(problem: RobustProblem, theta: ThetaPath) -> float:
    """``P(t*) + alpha_{0,t*}(theta)`` for a deterministic ``theta``."""
    if not theta.is_deterministic:
        raise NotAdapted("inner_value is exact only for deterministic theta")
    alpha = penalty_eval(theta, problem.G, problem.grid, problem.t_star).alpha
    return problem.variance + alpha


def _per_step_argmax(problem: RobustProblem, c: np.ndarray) -> np.ndarray:
    """Row-wise ``argmax G(theta_k) + <c_k, theta_k>`` over the box (steps before t*)."""
    G = problem.G
    if G.kind == USER:
        times = problem.grid.times
        return np.array([G.argmax_box(c[k], problem.mu, times[k]) for k in range(c.shape[0])])
    return G.argmax_box(c, problem.mu)


def worst_case_theta(problem: RobustProblem) -> ThetaPath:
    """Maximiser of the inner value: per step, the box argmax of ``G``.

    Flat maxima resolve to the minimal-norm point, then lexicographically.
    Values after ``t*`` do not enter the objective and are set to zero.
    """
    d = problem.model.n + problem.model.m
    N, ks = problem.grid.N, problem.k_star
    th = np.zeros((N + 1, d))
    th[:ks] = _per_step_argmax(problem, np.zeros((ks, d)))
    return _unstack(th, problem.model.n)


# --- bias of a shifted filter ---------------------------------------------

def _step_maps(model: ModelCoefficients, grid: TimeGrid, gain: np.ndarray):
    """Exact one-step maps of ``de = A_k e dt + u dt`` on each cell.

    Returns ``(Phi_k, Psi_k)`` with ``e_{k+1} = Phi_k e_k + Psi_k u_k`` where
    ``Phi_k = exp(A_k dt)`` and ``Psi_k = int_0^dt exp(A_k s) ds``.
    """
    n, N, dt = model.n, grid.N, grid.dt
    A = model.B[:N] - gain[:N] @ model.H[:N]
    if n == 1:
        a = A[:, 0, 0]
        phi = np.exp(a * dt)
        small = np.abs(a * dt) < 1e-8
        psi = np.where(small, dt * (1 + 0.5 * a * dt), np.expm1(a * dt) / np.where(small, 1.0, a))
        return phi[:, None, None], psi[:, None, None]
    Phi = np.empty((N, n, n))
    Psi = np.empty((N, n, n))
    aug = np.zeros((2 * n, 2 * n))
    for k in range(N):
        aug[:n, :n] = A[k] * dt
        aug[:n, n:] = np.eye(n) * dt
        E = expm(aug)
        Phi[k], Psi[k] = E[:n, :n], E[:n, n:]
    return Phi, Psi


def bias_ode(model: ModelCoefficients, grid: TimeGrid, theta: ThetaPath, theta_ref: ThetaPath,
             riccati: RiccatiSolution | None = None) -> np.ndarray:
    """Mean error ``e = E_theta[x - xhat_ref]`` of the ``theta_ref`` filter, shape ``(N+1, n)``.

    ``de = (B - K H) e dt + [(theta1_ref - theta1) - K (theta2_ref - theta2)] dt``,
    ``e(0) = 0``, integrated exactly for piecewise-constant coefficients.
    """
    if not (theta.is_deterministic and theta_ref.is_deterministic):
        raise NotAdapted("bias_ode needs deterministic theta paths")
    riccati = riccati if riccati is not None else riccati_solve(model, grid)
    Phi, Psi = _step_maps(model, grid, riccati.gain)
    K = riccati.gain
    u = (theta_ref.theta1 - theta.theta1) - np.einsum("kij,kj->ki", K, theta_ref.theta2 - theta.theta2)
    e = np.zeros((grid.N + 1, model.n))
    for k in range(grid.N):
        e[k + 1] = Phi[k] @ e[k] + Psi[k] @ u[k]
    return e


def bias_weights(problem: RobustProblem) -> np.ndarray:
    """``W_k`` with ``e(t*) = sum_k W_k (theta_k - theta_ref_k)``, shape ``(k*, n, n+m)``."""
    model, grid = problem.model, problem.grid
    ks, n = problem.k_star, model.n
    K = problem.riccati.gain
    Phi, Psi = _step_maps(model, grid, K)
    W = np.empty((ks, n, n + model.m))
    prop = np.eye(n)   # Phi(t*, t_{k+1})
    for k in range(ks - 1, -1, -1):
        M = prop @ Psi[k]
        W[k, :, :n] = -M
        W[k, :, n:] = M @ K[k]
        prop = prop @ Phi[k]
    return W


# --- upper value ----------------------------------------------------------

def _objective(problem, W, ref, th):
    """``|e|^2 + sum G dt`` on the first k* rows of stacked theta."""
    e = np.einsum("kij,kj->i", W, th - ref)
    G = problem.G
    if G.kind == USER:
        times = problem.grid.times
        g = np.array([G.stacked(th[k], times[k]) for k in range(th.shape[0])])
    else:
        g = G.stacked(th)
    return float(e @ e + np.sum(g) * problem.grid.dt), e


def _multiplier_sweep(problem, W, ref):
    """Scalar-signal route: maximise over the multiplier of the bias constraint.

    For multiplier ``nu`` each step solves ``max G(theta) + (nu/dt) <w_k, theta>``;
    the resulting bias traces every attainable target bias of the
    penalty-maximisation-under-linear-constraint problem, whose optimum
    value is concave in the bias.  The outer objective ``bias^2 + phi(bias)``
    is then maximised over ``nu`` by a sweep and a bounded refinement.
    """
    dt = problem.grid.dt
    w = W[:, 0, :]

    def solve(nu):
        th = _per_step_argmax(problem, (nu / dt) * w)
        return _objective(problem, W, ref, th)[0], th

    nus = np.concatenate([-np.logspace(4, -4, 81), [0.0], np.logspace(-4, 4, 81)])
    vals = np.array([solve(nu)[0] for nu in nus])
    i = int(np.argmax(vals))
    lo, hi = nus[max(i - 1, 0)], nus[min(i + 1, nus.size - 1)]
    best_nu, best_val = nus[i], vals[i]
    if hi > lo:
        res = minimize_scalar(lambda nu: -solve(nu)[0], bounds=(lo, hi), method="bounded",
                              options={"xatol": 1e-12 * max(1.0, abs(hi))})
        if -res.fun > best_val:
            best_nu, best_val = res.x, -res.fun
    val, th = solve(best_nu)
    return val, th


def _project(problem, th):
    th = np.clip(th, -problem.mu, problem.mu)
    G = problem.G
    if G.kind == "hyperbolic":
        # keep strictly inside the ball where the dual is finite
        r = np.linalg.norm(th, axis=1, keepdims=True)
        cap = G.kappa * (1 - 1e-9)
        th = np.where(r > cap, th * cap / np.maximum(r, 1e-300), th)
    return th


def _projected_gradient(problem, W, ref, starts, iters=300):
    dt = problem.grid.dt
    best_val, best_th = -np.inf, None
    for th in starts:
        th = _project(problem, th)
        val, e = _objective(problem, W, ref, th)
        step = 1.0
        for _ in range(iters):
            grad = 2 * np.einsum("i,kij->kj", e, W) + problem.G.grad(th) * dt
            scale = np.max(np.abs(grad))
            if scale == 0:
                break
            improved = False
            while step > 1e-14:
                cand = _project(problem, th + step * problem.mu * grad / scale)
                cval, ce = _objective(problem, W, ref, cand)
                if cval > val + 1e-15 * (1 + abs(val)):
                    th, val, e = cand, cval, ce
                    improved = True
                    step = min(1.0, 2 * step)
                    break
                step *= 0.5
            if not improved:
                break
        if val > best_val:
            best_val, best_th = val, th
    return best_val, best_th


def upper_value(problem: RobustProblem, theta_ref: ThetaPath, n_starts: int = 4,
                seed: int = 0) -> UpperValue:
    """``sup_theta P(t*) + |e(t*)|^2 + alpha_{0,t*}(theta)`` over the deterministic box.

    For a scalar signal the bias is a scalar linear functional of theta and
    the supremum is found by a sweep over the Lagrange multiplier of the
    bias constraint; multi-start projected gradient runs as a cross-check
    (and is the only route for vector signals).  The larger of the two
    primal values is returned, together with its maximiser.
    """
    model = problem.model
    n, d, ks, N = model.n, model.n + model.m, problem.k_star, problem.grid.N
    ref = _stack(theta_ref)[:ks]
    if problem.mu == 0.0 or ks == 0:
        zero = np.zeros((N + 1, d))
        val, e = _objective(problem, bias_weights(problem), ref, zero[:ks])
        return UpperValue(problem.variance + val, _unstack(zero, n), e, val, val)
    W = bias_weights(problem)
    sweep_val, sweep_th = -np.inf, None
    if n == 1:
        sweep_val, sweep_th = _multiplier_sweep(problem, W, ref)
    rng = np.random.default_rng(seed)
    starts = [np.zeros((ks, d))]
    if sweep_th is not None:
        starts.append(sweep_th)
    sign = np.sign(W[:, 0, :]) if n == 1 else np.sign(W.sum(axis=1))
    starts += [problem.mu * sign, -problem.mu * sign]
    starts += [rng.uniform(-problem.mu, problem.mu, (ks, d)) for _ in range(n_starts)]
    pg_val, pg_th = _projected_gradient(problem, W, ref, starts)
    if sweep_val >= pg_val:
        best_val, best_th = sweep_val, sweep_th
    else:
        best_val, best_th = pg_val, pg_th
    full = np.zeros((N + 1, d))
    full[:ks] = best_th
    e = np.einsum("kij,kj->i", W, best_th - ref)
    return UpperValue(problem.variance + best_val, _unstack(full, n), e,
                      float(sweep_val) if n == 1 else float("nan"), float(pg_val))


def certify_saddle(problem: RobustProblem, observations: np.ndarray | None = None,
                   seed: int = 0) -> SaddleReport:
    """Lower value at the worst-case theta, upper value of its filter, and the gap."""
    theta_star = worst_case_theta(problem)
    lower = inner_value(problem, theta_star)
    up = upper_value(problem, theta_star, seed=seed)
    estimator = None
    if observations is not None:
        estimator = robust_filter(problem.model, problem.grid, theta_star, observations,
                                  riccati=problem.riccati)
    return SaddleReport(theta_star, lower, up.value, up.value - lower, up.theta, estimator)


# --- filters --------------------------------------------------------------

def robust_filter(model: ModelCoefficients, grid: TimeGrid, theta_star: ThetaPath,
                  observations: np.ndarray, riccati: RiccatiSolution | None = None) -> FilterOutput:
    """Filter shifted by an observation-adapted ``theta_star``.

    ``dxhat = (B xhat + b - theta1) dt + K dI``, ``dI = dm - (H xhat + h - theta2) dt``.
    With ``theta_star = 0`` this is the classical filter, bit for bit.
    """
    if not theta_star.is_observation_adapted:
        raise NotAdapted(f"theta with tag {theta_star.tag!r} is not observation-adapted")
    shift = None if theta_star.is_zero() else theta_star
    return innovation_filter(model, grid, observations, riccati, shift)


def decomposition(model: ModelCoefficients, grid: TimeGrid, theta_star: ThetaPath,
                  classical: FilterOutput, method: str = "euler") -> np.ndarray:
    """``xhat(t) = xbar(t) + int_0^t A(t, s) (K theta2 - theta1)(s) ds``.

    ``method="euler"`` uses the propagator of the Euler scheme,
    ``A(t_k, t_{j+1}) = prod_{i=j+1}^{k-1} (I + (B - K H)_i dt)``, with the
    left-point rule, so it reproduces the Euler filter to rounding error.
    ``method="exact"`` uses ``exp(int (B - K H))`` and exact cell integrals of
    the piecewise-constant integrand; it differs from the Euler filter by
    ``O(dt)``.
    """
    if not theta_star.is_deterministic:
        raise NotAdapted("decomposition needs a deterministic theta")
    if method not in ("euler", "exact"):
        raise ValueError(f"unknown method {method!r}")
    K = classical.P.gain
    n, N, dt = model.n, grid.N, grid.dt
    src = np.einsum("kij,kj->ki", K, theta_star.theta2) - theta_star.theta1
    if method == "euler":
        Phi = np.eye(n) + (model.B[:N] - K[:N] @ model.H[:N]) * dt
        Psi = np.broadcast_to(np.eye(n) * dt, (N, n, n))
    else:
        Phi, Psi = _step_maps(model, grid, K)
    corr = np.zeros((N + 1, n))
    for k in range(N):
        corr[k + 1] = Phi[k] @ corr[k] + Psi[k] @ src[k]
    return classical.x_hat + corr


# --- particle approximation for signal feedback ----------------------------

@dataclass(frozen=True, eq=False)
class GeneralFilterOutput:
    x_hat: np.ndarray           # (N+1,) particle conditional mean (per observation path)
    x_hat_se: np.ndarray        # particle standard error of x_hat
    theta1_hat: np.ndarray
    theta2_hat: np.ndarray
    corr1: np.ndarray           # hat(x theta1) - xhat * hat(theta1)
    corr2: np.ndarray           # hat(x theta2) - xhat * hat(theta2)
    P_particle: np.ndarray      # conditional variance, averaged over observation paths
    P_particle_se: np.ndarray
    P_ode: np.ndarray           # variance equation driven by the particle moments
    ess: np.ndarray
    n_resamples: int


def _systematic(weights: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    n = weights.size
    positions = (rng.random() + np.arange(n)) / n
    cum = np.cumsum(weights)
    cum[-1] = 1.0
    return np.searchsorted(cum, positions)


def general_filter(model: ModelCoefficients, grid: TimeGrid, theta: ThetaPath,
                   n_particles: int, seed: int, observations: np.ndarray,
                   resample_threshold: float = 0.5, degeneracy_threshold: float = 0.05
                   ) -> GeneralFilterOutput:
    """Bootstrap particle filter for ``E_theta[x(t) | Z_t]`` with feedback ``theta``.

    Scalar signal and observation.  Particles follow the Euler dynamics
    under ``P^theta``; each observation increment reweights them by its
    Gaussian likelihood; systematic resampling runs when the effective
    sample size drops below ``resample_threshold * n_particles``.  The
    hatted correction terms and the conditional variance are read off the
    particle cloud, and the variance equation

        dP/dt = 2 B P - 2 c1 + Q - (H P - c2)^2 / R

    is integrated with the particle estimates of ``c1, c2`` averaged over the
    supplied observation paths.
    """
    if model.n != 1 or model.m != 1:
        raise ValueError("general_filter supports scalar models only")
    obs, single = _as_batch(observations, grid, 1)
    obs = obs[..., 0]
    n_obs, N, dt = obs.shape[0], grid.N, grid.dt
    times = grid.times
    B, H, b, h = model.B[:, 0, 0], model.H[:, 0, 0], model.b[:, 0], model.h[:, 0]
    Q, R = model.Q[:, 0, 0], model.R[:, 0, 0]
    rng = np.random.default_rng(seed)

    shape = (n_obs, N + 1)
    x_hat, x_se, t1h, t2h = (np.empty(shape) for _ in range(4))
    c1, c2, var, ess_out = (np.empty(shape) for _ in range(4))
    resamples = 0
    low_ess = 0
    for j in range(n_obs):
        x = np.full(n_particles, model.x0[0])
        logw = np.zeros(n_particles)
        for k in range(N + 1):
            t1, t2 = theta.at(k, times[k], x[:, None], np.full((n_particles, 1), obs[j, k]))
            t1, t2 = t1[:, 0], t2[:, 0]
            w = np.exp(logw - logw.max())
            w /= w.sum()
            ess = 1.0 / np.sum(w * w)
            mean = w @ x
            v = w @ (x - mean) ** 2
            x_hat[j, k], var[j, k], ess_out[j, k] = mean, v, ess
            x_se[j, k] = np.sqrt(v / ess)
            t1h[j, k], t2h[j, k] = w @ t1, w @ t2
            c1[j, k] = w @ (x * t1) - mean * t1h[j, k]
            c2[j, k] = w @ (x * t2) - mean * t2h[j, k]
            if k == N:
                break
            dm = obs[j, k + 1] - obs[j, k]
            pred = (H[k] * x + h[k] - t2) * dt
            logw = np.log(w) - (dm - pred) ** 2 / (2 * R[k] * dt)
            x = x + (B[k] * x + b[k] - t1) * dt + np.sqrt(Q[k] * dt) * rng.standard_normal(n_particles)
            w = np.exp(logw - logw.max())
            w /= w.sum()
            ess = 1.0 / np.sum(w * w)
            if ess < degeneracy_threshold * n_particles:
                low_ess += 1
            if ess < resample_threshold * n_particles:
                idx = _systematic(w, rng)
                x, logw = x[idx], np.zeros(n_particles)
                resamples += 1
    if low_ess:
        warnings.warn(f"effective sample size fell below {degeneracy_threshold:.0%} of the "
                      f"particles at {low_ess} step(s); resampled", ParticleDegeneracy, stacklevel=2)

    mc1, mc2 = c1.mean(axis=0), c2.mean(axis=0)
    P = np.zeros(N + 1)
    for k in range(N):
        P[k + 1] = P[k] + (2 * B[k] * P[k] - 2 * mc1[k] + Q[k] - (H[k] * P[k] - mc2[k]) ** 2 / R[k]) * dt
    ess_mean = ess_out.mean(axis=0)
    P_part = var.mean(axis=0)
    # a weighted variance estimate has relative error about sqrt(2 / ess);
    # spread across observation paths is added in quadrature
    P_se = np.sqrt(np.sum((var * np.sqrt(2.0 / ess_out)) ** 2, axis=0)) / n_obs
    if n_obs > 1:
        P_se = np.sqrt(P_se ** 2 + var.var(axis=0, ddof=1) / n_obs)

    def pick(a):
        return a[0] if single else a

    return GeneralFilterOutput(pick(x_hat), pick(x_se), pick(t1h), pick(t2h), pick(c1), pick(c2),
                               P_part, P_se, P, ess_mean, resamples)
