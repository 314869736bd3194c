"""Convex generators, their concave duals, penalties and g-expectations.

For a generator ``g(t, z1, z2)`` convex in ``z = (z1, z2)`` the concave dual
is ``G(t, theta) = inf_z [g(t, z) + <z, theta>]``.  It drives the penalty

    alpha_{0,t}(P^theta) = E_theta[ int_0^t G(s, theta_s) ds ]  (<= 0)

and the dual representation ``E_g[xi] = sup_theta E_theta[xi] + alpha``.

Built-in generators (``d = n + m`` stacked components):

* ``zero``:        g = 0, G = 0 at the origin and -inf elsewhere;
* ``scaled-norm``: g = kappa * ||z||_1, G = 0 on ||theta||_inf <= kappa;
* ``hyperbolic``:  g = kappa * (sqrt(1 + ||z||^2) - 1),
                   G = sqrt(kappa^2 - ||theta||^2) - kappa on ||theta|| <= kappa.

User generators get a numerical dual (grid minimisation in z).
"""
from __future__ import annotations

import itertools
import warnings
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import ConfigError, DomainViolation, RegressionRankDeficient
from .model import ModelCoefficients, TimeGrid
from .sim import PathBatch, ThetaPath, density_path, simulate_paths, theta_on_batch

ZERO = "zero"
SCALED_NORM = "scaled-norm"
HYPERBOLIC = "hyperbolic"
USER = "user"


@dataclass(frozen=True, eq=False)
class GeneratorSpec:
    """A standard convex generator.

    ``func`` (user kind only) maps ``(t, z1, z2)`` with shapes ``(..., n)``
    and ``(..., m)`` to ``(...)`` and must be convex, Lipschitz and vanish at
    the origin.  ``lipschitz`` is then required.
    """

    kind: str
    kappa: float = 0.0
    func: Callable | None = None
    lipschitz_const: float | None = None

    def __post_init__(self):
        if self.kind not in (ZERO, SCALED_NORM, HYPERBOLIC, USER):
            raise ConfigError(f"unknown generator kind {self.kind!r}")
        if self.kind in (SCALED_NORM, HYPERBOLIC) and not self.kappa > 0:
            raise ConfigError(f"{self.kind} generator needs kappa > 0, got {self.kappa!r}")
        if self.kind == USER and (self.func is None or self.lipschitz_const is None):
            raise ConfigError("user generator needs func and lipschitz_const")

    @classmethod
    def zero(cls):
        return cls(ZERO)

    @classmethod
    def scaled_norm(cls, kappa: float):
        return cls(SCALED_NORM, float(kappa))

    @classmethod
    def hyperbolic(cls, kappa: float):
        return cls(HYPERBOLIC, float(kappa))

    @classmethod
    def user(cls, func: Callable, lipschitz: float):
        return cls(USER, func=func, lipschitz_const=float(lipschitz))

    def __call__(self, t, z1, z2) -> np.ndarray:
        z1 = np.asarray(z1, dtype=float)
        z2 = np.asarray(z2, dtype=float)
        if self.kind == USER:
            return np.asarray(self.func(t, z1, z2), dtype=float)
        z = np.concatenate([z1, z2], axis=-1)
        if self.kind == ZERO:
            return np.zeros(z.shape[:-1])
        if self.kind == SCALED_NORM:
            return self.kappa * np.sum(np.abs(z), axis=-1)
        sq = np.sum(z * z, axis=-1)
        # sqrt(1+s)-1 written as s/(sqrt(1+s)+1) to keep precision near 0
        return self.kappa * sq / (np.sqrt(1.0 + sq) + 1.0)

    def lipschitz(self, n: int = 1, m: int = 1) -> float:
        """Constant K with |g(z) - g(z')| <= K (|z1 - z1'| + |z2 - z2'|)."""
        if self.kind == ZERO:
            return 0.0
        if self.kind == SCALED_NORM:
            return self.kappa * float(np.sqrt(max(n, m)))
        if self.kind == HYPERBOLIC:
            return self.kappa
        return self.lipschitz_const

    @property
    def domain_radius(self) -> float:
        """Largest mu such that every |theta_i| <= mu is in the dual domain per axis."""
        if self.kind == ZERO:
            return 0.0
        if self.kind in (SCALED_NORM, HYPERBOLIC):
            return self.kappa
        return self.lipschitz_const

    @property
    def is_sublinear(self) -> bool:
        return self.kind in (ZERO, SCALED_NORM)

    def label(self) -> str:
        if self.kind == ZERO:
            return "zero"
        if self.kind == SCALED_NORM:
            return f"norm:{self.kappa:g}"
        if self.kind == HYPERBOLIC:
            return f"hyperbolic:{self.kappa:g}"
        return "user"


def parse_generator(text: str) -> GeneratorSpec:
    """``zero``, ``norm:K`` or ``hyperbolic:K``."""
    head, _, arg = str(text).strip().partition(":")
    head = head.lower()
    if head == "zero" and not arg:
        return GeneratorSpec.zero()
    if head in ("norm", "scaled-norm", "hyperbolic") and arg:
        try:
            kappa = float(arg)
        except ValueError:
            raise ConfigError(f"bad generator parameter in {text!r}") from None
        return GeneratorSpec.hyperbolic(kappa) if head == "hyperbolic" else GeneratorSpec.scaled_norm(kappa)
    raise ConfigError(f"unknown generator {text!r}; expected zero, norm:K or hyperbolic:K")


@dataclass(frozen=True)
class GeneratorCheck:
    normalization: float
    lipschitz_violation: float
    convexity_violation: float

    def ok(self, tol: float = 1e-10) -> bool:
        return max(abs(self.normalization), self.lipschitz_violation, self.convexity_violation) <= tol


def check_generator(g: GeneratorSpec, n: int = 1, m: int = 1, n_pairs: int = 200,
                    seed: int = 0, scale: float = 3.0, t: float = 0.0) -> GeneratorCheck:
    """Spot-check normalisation, the Lipschitz bound and midpoint convexity."""
    rng = np.random.default_rng(seed)
    za = rng.normal(scale=scale, size=(n_pairs, n + m))
    zb = rng.normal(scale=scale, size=(n_pairs, n + m))
    ga, gb = g(t, za[:, :n], za[:, n:]), g(t, zb[:, :n], zb[:, n:])
    zero = float(g(t, np.zeros(n), np.zeros(m)))
    dist = (np.linalg.norm(za[:, :n] - zb[:, :n], axis=1)
            + np.linalg.norm(za[:, n:] - zb[:, n:], axis=1))
    lip = np.max(np.abs(ga - gb) - g.lipschitz(n, m) * dist)
    mid = 0.5 * (za + zb)
    conv = np.max(g(t, mid[:, :n], mid[:, n:]) - 0.5 * (ga + gb))
    tol = 1e-12 * (1.0 + np.max(np.abs(ga)))
    return GeneratorCheck(zero, max(0.0, float(lip) - tol), max(0.0, float(conv) - tol))


# --- concave dual -------------------------------------------------------

@dataclass(frozen=True, eq=False)
class ConcaveDual:
    """Concave dual ``G(t, theta1, theta2)`` of a generator on ``(n, m)`` dimensions."""

    generator: GeneratorSpec
    n: int = 1
    m: int = 1
    z_max: float = 50.0
    grid_resolution: int = 201
    divergence_threshold: float = 1e-6
    _cache: dict = field(default_factory=dict, repr=False)

    @property
    def kind(self) -> str:
        return self.generator.kind

    @property
    def kappa(self) -> float:
        return self.generator.kappa

    @property
    def radius(self) -> float:
        """Per-component effective-domain radius."""
        return self.generator.domain_radius

    @property
    def dim(self) -> int:
        return self.n + self.m

    def __call__(self, t, theta1, theta2) -> np.ndarray:
        th = np.concatenate([np.asarray(theta1, dtype=float), np.asarray(theta2, dtype=float)], axis=-1)
        return self.stacked(th, t)

    def stacked(self, theta: np.ndarray, t: float = 0.0) -> np.ndarray:
        """``G`` on stacked ``(..., n + m)`` parameters."""
        theta = np.asarray(theta, dtype=float)
        if self.kind == ZERO:
            return np.where(np.all(theta == 0.0, axis=-1), 0.0, -np.inf)
        if self.kind == SCALED_NORM:
            return np.where(np.max(np.abs(theta), axis=-1) <= self.kappa * (1 + 1e-12), 0.0, -np.inf)
        if self.kind == HYPERBOLIC:
            sq = np.sum(theta * theta, axis=-1)
            k2 = self.kappa ** 2
            inside = sq <= k2 * (1 + 1e-12)
            # sqrt(k^2 - s) - k = -s / (sqrt(k^2 - s) + k)
            root = np.sqrt(np.clip(k2 - sq, 0.0, None))
            return np.where(inside, -sq / (root + self.kappa), -np.inf)
        flat = theta.reshape(-1, self.dim)
        out = np.array([self._numeric(tuple(row), float(t)) for row in flat])
        return out.reshape(theta.shape[:-1])

    def grad(self, theta: np.ndarray) -> np.ndarray:
        """Gradient of ``G`` (supergradient 0 for the flat built-ins)."""
        theta = np.asarray(theta, dtype=float)
        if self.kind == HYPERBOLIC:
            root = np.sqrt(np.clip(self.kappa ** 2 - np.sum(theta * theta, axis=-1), 1e-300, None))
            return -theta / root[..., None]
        if self.kind in (ZERO, SCALED_NORM):
            return np.zeros_like(theta)
        h = 1e-6
        out = np.empty_like(theta)
        for i in range(theta.shape[-1]):
            e = np.zeros(theta.shape[-1])
            e[i] = h
            out[..., i] = (self.stacked(theta + e) - self.stacked(theta - e)) / (2 * h)
        return out

    def _numeric(self, theta: tuple, t: float) -> float:
        key = (theta, t)
        if key in self._cache:
            return self._cache[key]
        th = np.array(theta)
        g = self.generator
        n = self.n

        def objective(z):
            return g(t, z[..., :n], z[..., n:]) + z @ th

        res = self.grid_resolution if self.dim <= 2 else max(9, int(round(self.grid_resolution ** (2 / self.dim))))
        centre = np.zeros(self.dim)
        half = self.z_max
        best = np.inf
        for _ in range(3):
            axes = [np.linspace(c - half, c + half, res) for c in centre]
            pts = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, self.dim)
            pts = np.clip(pts, -self.z_max, self.z_max)
            vals = objective(pts)
            i = int(np.argmin(vals))
            best, centre = float(vals[i]), pts[i]
            half = 2.0 * half / (res - 1)
        if np.max(np.abs(centre)) >= self.z_max * (1 - 1e-9):
            # minimiser on the box boundary: compare with the half-size box
            inner = np.clip(centre, -0.5 * self.z_max, 0.5 * self.z_max)
            if objective(inner) - best > self.divergence_threshold * max(1.0, self.z_max):
                best = -np.inf
        self._cache[key] = best
        return best

    # -- per-step maximisation over the ambiguity box -------------------
    def argmax_box(self, c: np.ndarray, mu: float, t: float = 0.0) -> np.ndarray:
        """Maximise ``G(theta) + <c, theta>`` over ``|theta_i| <= mu``.

        ``c`` has shape ``(..., d)``.  Ties go to the minimal-norm point,
        then to the lexicographically smallest.
        """
        c = np.asarray(c, dtype=float)
        mu = float(min(mu, self.radius)) if self.kind != ZERO else 0.0
        if mu == 0.0:
            return np.zeros_like(c)
        if self.kind == SCALED_NORM:
            return mu * np.sign(c)
        if self.kind == HYPERBOLIC:
            return self._argmax_hyperbolic(c, mu)
        flat = c.reshape(-1, self.dim)
        out = np.array([self._argmax_numeric(row, mu, t) for row in flat])
        return out.reshape(c.shape)

    def _argmax_hyperbolic(self, c: np.ndarray, mu: float) -> np.ndarray:
        # enumerate faces of the box: each coordinate free, at +mu or at -mu;
        # on a face the free block is the closed-form stationary point of
        # sqrt(k_F^2 - |theta_F|^2) + <c_F, theta_F>
        d = c.shape[-1]
        best_val = np.full(c.shape[:-1], -np.inf)
        best = np.zeros(c.shape)
        k2 = self.kappa ** 2
        for face in itertools.product((0, 1, -1), repeat=d):
            face = np.array(face)
            free = face == 0
            clipped_sq = mu * mu * np.count_nonzero(~free)
            kf2 = k2 - clipped_sq
            if kf2 < -1e-15:
                continue
            kf = np.sqrt(max(kf2, 0.0))
            th = np.broadcast_to(mu * face.astype(float), c.shape).copy()
            if free.any():
                cf = c[..., free]
                th[..., free] = kf * cf / np.sqrt(1.0 + np.sum(cf * cf, axis=-1, keepdims=True))
            feasible = np.all(np.abs(th) <= mu * (1 + 1e-12), axis=-1)
            val = self.stacked(th) + np.sum(c * th, axis=-1)
            val = np.where(feasible, val, -np.inf)
            margin = 1e-15 * (1 + np.abs(np.where(np.isfinite(best_val), best_val, 0.0)))
            better = val > best_val + margin
            best_val = np.where(better, val, best_val)
            best = np.where(better[..., None], th, best)
        return best

    def _argmax_numeric(self, c: np.ndarray, mu: float, t: float) -> np.ndarray:
        axes = [np.linspace(-mu, mu, 21)] * self.dim
        pts = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, self.dim)
        vals = self.stacked(pts, t) + pts @ c
        top = np.max(vals)
        ties = pts[vals >= top - 1e-12]
        x = ties[np.lexsort(np.c_[ties[:, ::-1], np.linalg.norm(ties, axis=1)].T)[0]]
        step = 0.5 * mu
        for _ in range(60):
            cand = np.clip(x + step * (self.grad(x) + c), -mu, mu)
            if self.stacked(cand, t) + cand @ c > self.stacked(x, t) + x @ c + 1e-14:
                x = cand
            else:
                step *= 0.5
        return x


def concave_dual(g: GeneratorSpec, n: int = 1, m: int = 1, domain_radius: float | None = None,
                 grid_resolution: int = 201) -> ConcaveDual:
    """Concave dual of ``g``; analytic for the built-ins, numerical otherwise.

    ``domain_radius`` (the ambiguity bound mu) is checked against the dual's
    effective domain.
    """
    dual = ConcaveDual(g, n, m, grid_resolution=grid_resolution)
    if domain_radius is not None and domain_radius > dual.radius + 1e-15:
        raise DomainViolation(f"mu={domain_radius} exceeds the dual-domain radius {dual.radius}")
    return dual


# --- penalties ------------------------------------------------------------

@dataclass(frozen=True)
class PenaltyValue:
    alpha: float
    std_error: float = 0.0


def _grid_values(G: ConcaveDual, theta1, theta2, times) -> np.ndarray:
    th = np.concatenate([theta1, theta2], axis=-1)
    if G.kind == USER and np.ndim(th) == 2:
        return np.array([G.stacked(th[k], times[k]) for k in range(th.shape[0])])
    return G.stacked(th)


def penalty_eval(theta: ThetaPath, G: ConcaveDual, grid: TimeGrid, t: float,
                 batch: PathBatch | None = None, density: np.ndarray | None = None) -> PenaltyValue:
    """``alpha_{0,t}`` of the prior indexed by ``theta``.

    Deterministic ``theta``: the left-point sum ``sum_k G(theta_k) dt``.
    Random ``theta``: Monte Carlo on ``batch``.  If ``batch`` was simulated
    under ``theta`` itself the plain mean of ``int G`` is used; otherwise
    ``batch`` must be a reference batch and the integrand is weighted by the
    density, ``E_ref[sum_k f(t_k) G(theta_k) dt]`` (the tower property lets
    each term use the density at its own time).  ``density`` overrides the
    density path, e.g. with an exact mixture density.
    """
    kt = grid.index(t)
    times = grid.times
    if theta.is_deterministic:
        vals = _grid_values(G, theta.theta1[:kt], theta.theta2[:kt], times)
        if not np.all(np.isfinite(vals)):
            k = int(np.flatnonzero(~np.isfinite(vals))[0])
            raise DomainViolation(f"concave dual is -inf at grid index {k}")
        return PenaltyValue(float(np.sum(vals) * grid.dt), 0.0)
    if batch is None:
        raise ValueError("a path batch is needed for a random theta")
    t1, t2 = theta_on_batch(theta, batch)
    th = np.concatenate([t1[:, :kt], t2[:, :kt]], axis=-1)
    vals = G.stacked(th)
    if not np.all(np.isfinite(vals)):
        raise DomainViolation("concave dual is -inf on some path")
    if batch.theta is theta:
        samples = np.sum(vals, axis=1) * grid.dt
    else:
        f = density if density is not None else density_path(theta, batch)
        samples = np.sum(f[:, :kt] * vals, axis=1) * grid.dt
    se = float(samples.std(ddof=1) / np.sqrt(samples.size)) if samples.size > 1 else float("inf")
    return PenaltyValue(float(samples.mean()), se)


@dataclass(frozen=True)
class ConcavityReport:
    max_violation: float
    violations: np.ndarray   # signed: positive means the inequality failed
    std_errors: np.ndarray

    def passes(self, n_se: float = 3.0, tol: float = 1e-12) -> bool:
        return bool(np.all(self.violations <= n_se * self.std_errors + tol))


def _same_path(a: ThetaPath, b: ThetaPath) -> bool:
    return a is b or (np.array_equal(a.theta1, b.theta1) and np.array_equal(a.theta2, b.theta2))


def penalty_concavity_check(G: ConcaveDual, grid: TimeGrid, pairs, batch: PathBatch,
                            t: float | None = None) -> ConcavityReport:
    """Check ``alpha(lam P_a + (1-lam) P_b) >= lam alpha(P_a) + (1-lam) alpha(P_b)``.

    ``pairs`` holds ``(theta_a, theta_b, lam)`` with deterministic paths.
    The mixed prior is indexed by the pathwise mixture parameter; its
    penalty is estimated on the reference ``batch`` with the exact mixture
    density.  The right-hand side is exact.
    """
    from .sim import mixture_theta

    if not batch.is_reference():
        raise ValueError("concavity check needs a reference batch")
    t = grid.T if t is None else t
    viol, ses = [], []
    for theta_a, theta_b, lam in pairs:
        rhs = (lam * penalty_eval(theta_a, G, grid, t).alpha
               + (1 - lam) * penalty_eval(theta_b, G, grid, t).alpha)
        degenerate = _same_path(theta_a, theta_b) or lam in (0.0, 1.0)
        if degenerate:
            # the mixed prior is one of the two priors: no simulation needed
            single = theta_a if lam != 0.0 else theta_b
            viol.append(rhs - penalty_eval(single, G, grid, t).alpha)
            ses.append(0.0)
            continue
        mix = mixture_theta(theta_a, theta_b, lam, batch)
        f_mix = lam * density_path(theta_a, batch) + (1 - lam) * density_path(theta_b, batch)
        lhs = penalty_eval(mix, G, grid, t, batch=batch, density=f_mix)
        viol.append(rhs - lhs.alpha)
        ses.append(lhs.std_error)
    viol = np.array(viol)
    return ConcavityReport(float(np.max(viol)) if viol.size else 0.0, viol, np.array(ses))


# --- BSDE by least-squares Monte Carlo ------------------------------------

@dataclass(frozen=True)
class BsdeResult:
    y0: float
    std_error: float
    rank_reductions: tuple   # (step, full rank, used rank) for deficient steps
    n_paths: int


def _basis(x: np.ndarray, m: np.ndarray, degree: int) -> np.ndarray:
    s = np.concatenate([x, m], axis=1)
    cols = [np.ones(s.shape[0])]
    d = s.shape[1]
    for deg in range(1, degree + 1):
        for combo in itertools.combinations_with_replacement(range(d), deg):
            cols.append(np.prod(s[:, combo], axis=1))
    return np.column_stack(cols)


def _fit(A: np.ndarray, y: np.ndarray):
    """Least squares through a pivoted SVD; returns fitted values and rank."""
    # scale columns so that the rank decision is not driven by units
    scale = np.sqrt(np.mean(A * A, axis=0))
    scale[scale == 0] = 1.0
    As = A / scale
    coef, _, rank, _ = np.linalg.lstsq(As, y, rcond=1e-10)
    return As @ coef, int(rank)


def bsde_solve(g: GeneratorSpec, terminal: Callable, model: ModelCoefficients, grid: TimeGrid,
               n_paths: int, seed: int, degree: int = 2, n_boot: int = 200,
               threads: int = 1, batch: PathBatch | None = None) -> BsdeResult:
    """``Y(0) = E_g[xi]`` for ``xi = terminal(x(T), m(T))`` by least-squares Monte Carlo.

    Backward induction ``Y_k = E[Y_{k+1} | state_k] + g(Z_k) dt`` with the
    conditional expectation and ``Z_k = E[dY dW_k | state_k] / dt`` both
    regressed on polynomials in ``(x, m)``.  ``W`` are the standardised
    reference Brownian motions.  The standard error is a bootstrap over paths
    of the pathwise value ``xi + sum_k g(Z_k) dt``, whose mean equals Y(0)
    because every regression contains the constant.
    """
    if batch is None:
        batch = simulate_paths(model, grid, ThetaPath.zero(grid, model.n, model.m),
                               n_paths, seed, threads=threads)
    elif not batch.is_reference():
        raise ValueError("bsde_solve needs a reference batch")
    n, N, dt = model.n, grid.N, grid.dt
    times = grid.times
    xi = np.asarray(terminal(batch.x[:, N], batch.m_obs[:, N]), dtype=float).reshape(-1)
    y = xi.copy()
    drift_total = np.zeros_like(y)
    reductions = []
    noise = np.concatenate([batch.dw_std, batch.dv_std], axis=2)   # (K, N, n+m)
    for k in range(N - 1, -1, -1):
        if k == 0:
            # all paths share the initial state: the basis is the constant
            cond = np.full_like(y, y.mean())
            z = np.mean((y - cond)[:, None] * noise[:, 0], axis=0) / dt
            z = np.broadcast_to(z, noise[:, 0].shape)
        else:
            A = _basis(batch.x[:, k], batch.m_obs[:, k], degree)
            cond, rank = _fit(A, y)
            if rank < A.shape[1]:
                reductions.append((k, A.shape[1], rank))
            incr = (y - cond)[:, None] * noise[:, k] / dt
            z = np.column_stack([_fit(A, incr[:, j])[0] for j in range(incr.shape[1])])
        gz = g(times[k], z[:, :n], z[:, n:]) * dt
        drift_total += gz
        y = cond + gz
    if reductions:
        warnings.warn(f"regression basis reduced at {len(reductions)} step(s), first at "
                      f"step {reductions[0][0]} (rank {reductions[0][2]} of {reductions[0][1]})",
                      RegressionRankDeficient, stacklevel=2)
    pathwise = xi + drift_total
    y0 = float(y[0])
    rng = np.random.default_rng([seed, 1])
    K = pathwise.size
    if K > 1 and n_boot > 0:
        idx = rng.integers(0, K, size=(n_boot, K))
        se = float(np.std(pathwise[idx].mean(axis=1), ddof=1))
    else:
        se = float("inf")
    return BsdeResult(y0, se, tuple(reductions), K)


# --- dual representation ---------------------------------------------------

@dataclass(frozen=True)
class DualResult:
    value: float
    theta: ThetaPath
    std_error: float
    values: np.ndarray
    std_errors: np.ndarray


def dual_value(xi: Callable, G: ConcaveDual, model: ModelCoefficients, grid: TimeGrid,
               theta_family, n_paths: int, seed: int, threads: int = 1) -> DualResult:
    """``max_theta E_theta[xi] + alpha_{0,T}(theta)`` over a finite family.

    Each expectation is a direct simulation under ``P^theta``.  All members
    share ``seed`` (common random numbers), so differences between members
    carry little noise.  The result is a lower bound on ``E_g[xi]``.
    """
    family = list(theta_family)
    if not family:
        raise ValueError("empty theta family")
    values, ses = [], []
    for theta in family:
        alpha = penalty_eval(theta, G, grid, grid.T).alpha
        batch = simulate_paths(model, grid, theta, n_paths, seed, threads=threads)
        samples = np.asarray(xi(batch.x[:, grid.N], batch.m_obs[:, grid.N]), dtype=float).reshape(-1)
        values.append(samples.mean() + alpha)
        ses.append(samples.std(ddof=1) / np.sqrt(samples.size) if samples.size > 1 else np.inf)
    values = np.array(values)
    ses = np.array(ses)
    i = int(np.argmax(values))
    return DualResult(float(values[i]), family[i], float(ses[i]), values, ses)
