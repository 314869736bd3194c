"""Conditional MMSE under a convex operator on a finite probability space.

The operator is ``rho(xi) = max_i (E_{P_i}[xi] - alpha_i)`` with densities
``f_i = dP_i/dP`` with respect to a reference probability ``P`` and
penalties ``alpha_i >= 0``, ``min alpha = 0``.  Given a partition ``C`` of
the sample space, the estimator ``eta_hat`` is the block-constant minimiser of
``rho((xi - eta)^2)``.

Writing ``m_iB = E[f_i 1_B]``, ``s_iB = E[f_i xi 1_B]``, ``r_iB = E[f_i xi^2 1_B]``,

    q_i(eta) = sum_B (m_iB eta_B^2 - 2 s_iB eta_B + r_iB) - alpha_i,

and over mixtures ``lam`` of the densities the dual function is

    h(lam) = min_eta sum_i lam_i q_i(eta) = sum_i lam_i c_i - sum_B S_B^2 / M_B,

``c_i = E_i[xi^2] - alpha_i``, ``M_B = lam . m_B``, ``S_B = lam . s_B``.  It is
concave with gradient ``q_i(eta_lam)`` and the minimiser is the blockwise
conditional mean ``eta_lam = S_B / M_B`` under the mixture.
"""
from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linprog

from .errors import DimensionMismatch, NotProper, TooManyBlocks

_PROB_TOL = 1e-10


@dataclass(frozen=True, eq=False)
class FiniteSpace:
    reference_prob: np.ndarray

    def __post_init__(self):
        p = np.array(self.reference_prob, dtype=float).reshape(-1)
        if p.size == 0 or np.any(p <= 0) or abs(p.sum() - 1.0) > _PROB_TOL:
            raise ValueError("reference probabilities must be positive and sum to 1")
        p.setflags(write=False)
        object.__setattr__(self, "reference_prob", p)

    @property
    def size(self) -> int:
        return self.reference_prob.size

    @classmethod
    def uniform(cls, size: int) -> "FiniteSpace":
        return cls(np.full(size, 1.0 / size))


@dataclass(frozen=True, eq=False)
class Partition:
    blocks: tuple
    size: int

    def __post_init__(self):
        blocks = tuple(tuple(int(i) for i in b) for b in self.blocks)
        seen = [i for b in blocks for i in b]
        if any(len(b) == 0 for b in blocks):
            raise ValueError("partition blocks must be nonempty")
        if sorted(seen) != list(range(self.size)):
            raise ValueError("partition blocks must be disjoint and cover the space")
        object.__setattr__(self, "blocks", blocks)

    @classmethod
    def from_labels(cls, labels) -> "Partition":
        labels = np.asarray(labels)
        keys = list(dict.fromkeys(labels.tolist()))
        return cls(tuple(tuple(np.flatnonzero(labels == k)) for k in keys), labels.size)

    @classmethod
    def trivial(cls, size: int) -> "Partition":
        return cls((tuple(range(size)),), size)

    @property
    def labels(self) -> np.ndarray:
        out = np.empty(self.size, dtype=int)
        for j, b in enumerate(self.blocks):
            out[list(b)] = j
        return out

    @property
    def n_blocks(self) -> int:
        return len(self.blocks)

    def indicator(self) -> np.ndarray:
        """``(n_blocks, size)`` 0/1 matrix."""
        out = np.zeros((self.n_blocks, self.size))
        out[self.labels, np.arange(self.size)] = 1.0
        return out

    def expand(self, values) -> np.ndarray:
        """Block values to a vector on the space."""
        return np.asarray(values, dtype=float)[self.labels]


@dataclass(frozen=True, eq=False)
class FiniteConvexOperator:
    space: FiniteSpace
    densities: np.ndarray      # (k, size)
    penalties: np.ndarray      # (k,), the nonnegative convention
    p: float = 2.0

    def __post_init__(self):
        f = np.atleast_2d(np.array(self.densities, dtype=float))
        a = np.array(self.penalties, dtype=float).reshape(-1)
        if f.shape[1] != self.space.size or a.size != f.shape[0]:
            raise DimensionMismatch(f"densities {f.shape} and penalties {a.shape} do not fit a space of size {self.space.size}")
        if np.any(f < 0):
            raise ValueError("densities must be nonnegative")
        means = f @ self.space.reference_prob
        if np.max(np.abs(means - 1.0)) > 1e-9:
            raise ValueError(f"densities must integrate to 1 (got {means})")
        if np.any(a < 0) or abs(a.min()) > 1e-12:
            raise ValueError("penalties must be >= 0 with minimum 0 (normalised operator)")
        if not 1 < self.p <= 2:
            raise ValueError(f"exponent p must lie in (1, 2], got {self.p}")
        f.setflags(write=False)
        a.setflags(write=False)
        object.__setattr__(self, "densities", f)
        object.__setattr__(self, "penalties", a)

    @property
    def q(self) -> float:
        return self.p / (self.p - 1.0)

    @property
    def n_densities(self) -> int:
        return self.densities.shape[0]

    @property
    def proper(self) -> bool:
        return bool(np.all(self.densities > 0))

    @property
    def weighted(self) -> np.ndarray:
        """``f_i(w) P(w)``, shape ``(k, size)``."""
        return self.densities * self.space.reference_prob

    def to_dict(self, partition: Partition | None = None) -> dict:
        doc = {"prob": self.space.reference_prob.tolist(), "densities": self.densities.tolist(),
               "penalties": self.penalties.tolist(), "p": self.p}
        if partition is not None:
            doc["partition"] = [list(b) for b in partition.blocks]
        return doc


def load_space(text: str):
    """Parse a JSON space document into ``(operator, partition or None)``."""
    doc = json.loads(text)
    space = FiniteSpace(np.asarray(doc["prob"], dtype=float))
    op = FiniteConvexOperator(space, np.asarray(doc["densities"], dtype=float),
                              np.asarray(doc["penalties"], dtype=float), float(doc.get("p", 2.0)))
    part = Partition(doc["partition"], space.size) if "partition" in doc else None
    return op, part


def _check_xi(op: FiniteConvexOperator, xi) -> np.ndarray:
    xi = np.asarray(xi, dtype=float).reshape(-1)
    if xi.size != op.space.size:
        raise DimensionMismatch(f"xi has {xi.size} entries, the space has {op.space.size}")
    return xi


def rho_eval(op: FiniteConvexOperator, xi) -> float:
    """``max_i (E_{P_i}[xi] - alpha_i)``."""
    xi = _check_xi(op, xi)
    return float(np.max(op.weighted @ xi - op.penalties))


# --- the saddle problem ---------------------------------------------------

@dataclass(frozen=True, eq=False)
class _Moments:
    m: np.ndarray   # (k, nB)
    s: np.ndarray
    r: np.ndarray
    alpha: np.ndarray

    @classmethod
    def build(cls, op, xi, C):
        ind = C.indicator()
        w = op.weighted
        return cls(w @ ind.T, (w * xi) @ ind.T, (w * xi * xi) @ ind.T, op.penalties)

    def q(self, eta):
        """All ``q_i(eta)`` for block values ``eta`` (shape ``(nB,)`` or ``(..., nB)``)."""
        eta = np.asarray(eta, dtype=float)
        return (eta * eta) @ self.m.T - 2 * eta @ self.s.T + self.r.sum(axis=1) - self.alpha

    def eta(self, lam):
        return (lam @ self.s) / (lam @ self.m)

    def h(self, lam):
        return float(lam @ self.q(self.eta(lam)))

    def grad(self, lam):
        return self.q(self.eta(lam))

    def hess(self, lam):
        M = lam @ self.m
        eta = self.eta(lam)
        a = self.s - eta * self.m            # (k, nB)
        return -2.0 * (a / M) @ a.T


def project_simplex(v: np.ndarray) -> np.ndarray:
    """Euclidean projection onto the probability simplex."""
    u = np.sort(v)[::-1]
    css = np.cumsum(u) - 1.0
    idx = np.arange(1, v.size + 1)
    rho = np.nonzero(u - css / idx > 0)[0][-1]
    return np.maximum(v - css[rho] / (rho + 1.0), 0.0)


def _ascent(mom: _Moments, lam: np.ndarray, iters: int) -> np.ndarray:
    """Projected gradient ascent on the simplex with Armijo backtracking."""
    val = mom.h(lam)
    step = 1.0 / max(1e-12, np.max(np.abs(mom.grad(lam))))
    for _ in range(iters):
        g = mom.grad(lam)
        while step > 1e-16:
            cand = project_simplex(lam + step * g)
            cval = mom.h(cand)
            if cval >= val + 1e-4 * g @ (cand - lam):
                break
            step *= 0.5
        else:
            break
        if np.max(np.abs(cand - lam)) < 1e-15:
            break
        lam, val = cand, cval
        step *= 2.0
    return lam


def _newton_polish(mom: _Moments, lam: np.ndarray, rounds: int = 30) -> np.ndarray:
    """Newton steps on the active face, re-activating coordinates that violate KKT."""
    k = lam.size
    for _ in range(rounds):
        g = mom.grad(lam)
        active = lam > 1e-14
        # inactive coordinates whose gradient beats the active level join the face
        level = np.max(g[active])
        active |= g > level + 1e-14
        idx = np.flatnonzero(active)
        H = mom.hess(lam)[np.ix_(idx, idx)]
        kkt = np.zeros((idx.size + 1, idx.size + 1))
        kkt[:-1, :-1] = H
        kkt[:-1, -1] = 1.0
        kkt[-1, :-1] = 1.0
        rhs = np.concatenate([-g[idx], [0.0]])
        delta = (np.linalg.pinv(kkt) @ rhs)[:-1]
        full = np.zeros(k)
        full[idx] = delta
        val = mom.h(lam)
        t = 1.0
        neg = full < 0
        if np.any(neg):
            t = min(1.0, float(np.min(-lam[neg] / full[neg])))
        moved = False
        while t > 1e-12:
            cand = np.maximum(lam + t * full, 0.0)
            cand /= cand.sum()
            if mom.h(cand) >= val - 1e-15 * (1 + abs(val)):
                moved = np.max(np.abs(cand - lam)) > 0
                lam = cand
                break
            t *= 0.5
        if not moved:
            break
        if np.max(np.abs(t * full)) < 1e-15:
            break
    return lam


@dataclass(frozen=True, eq=False)
class MmseResult:
    eta_hat: np.ndarray       # on the space, block-constant
    block_values: np.ndarray
    value: float              # rho((xi - eta_hat)^2)
    lambda_star: np.ndarray
    saddle_gap: float         # value - h(lambda_star)
    dual_value: float


def _solve(mom: _Moments, starts, iters: int):
    best = None
    for j, lam0 in enumerate(starts):
        lam = _newton_polish(mom, _ascent(mom, project_simplex(np.asarray(lam0, dtype=float)), iters))
        eta = mom.eta(lam)
        value = float(np.max(mom.q(eta)))
        dual = mom.h(lam)
        key = (value, j)
        if best is None or key < best[0]:
            best = (key, lam, eta, value, dual)
    _, lam, eta, value, dual = best
    return lam, eta, value, dual


def _require_proper(op):
    if not op.proper:
        raise NotProper("every density must be strictly positive")


def conditional_mmse(op: FiniteConvexOperator, xi, C: Partition, n_starts: int = 10,
                     iters: int = 200, seed: int = 0, starts=None) -> MmseResult:
    """Minimise ``rho((xi - eta)^2)`` over block-constant ``eta``.

    Maximises the concave dual over the simplex (projected gradient with
    Armijo steps from several starts, then Newton on the active face) and
    reads ``eta_hat`` off as the blockwise conditional mean under the
    optimal mixture.  The best start is the one with the lowest value,
    ties going to the lowest start index.
    """
    _require_proper(op)
    xi = _check_xi(op, xi)
    if C.size != op.space.size:
        raise DimensionMismatch("partition and space sizes differ")
    mom = _Moments.build(op, xi, C)
    k = op.n_densities
    if starts is None:
        rng = np.random.default_rng(seed)
        starts = [np.full(k, 1.0 / k)] + [rng.dirichlet(np.ones(k)) for _ in range(n_starts - 1)]
    lam, eta, value, dual = _solve(mom, starts, iters)
    return MmseResult(C.expand(eta), eta, value, lam, value - dual, dual)


def dual_objective(op: FiniteConvexOperator, xi, C: Partition, lam) -> float:
    """``h(lam) = sum_i lam_i q_i(eta_lam)`` with ``eta_lam`` the mixture's conditional mean."""
    xi = _check_xi(op, xi)
    return _Moments.build(op, xi, C).h(np.asarray(lam, dtype=float))


@dataclass(frozen=True)
class BruteForceResult:
    eta: np.ndarray      # on the space
    block_values: np.ndarray
    value: float
    resolution: float    # final grid spacing (largest over blocks)


def brute_force_mmse(op: FiniteConvexOperator, xi, C: Partition, resolution: int = 41,
                     rounds: int = 2, margin: int = 3, max_moves: int = 100) -> BruteForceResult:
    """Exhaustive grid search over block values, with local refinement rounds.

    Block ``B`` is searched on ``[min_B xi, max_B xi]``, which contains every
    conditional mean of ``xi`` on ``B``.  Each refinement zooms to
    ``margin`` grid spacings around the incumbent; while the incumbent sits
    on the edge of a zoomed box the box is re-centred at the same size
    before the next zoom, so long narrow valleys are followed.
    """
    xi = _check_xi(op, xi)
    if C.n_blocks > 3:
        raise TooManyBlocks(f"brute force handles at most 3 blocks, got {C.n_blocks}")
    mom = _Moments.build(op, xi, C)
    floor = np.array([xi[list(b)].min() for b in C.blocks])
    ceil = np.array([xi[list(b)].max() for b in C.blocks])

    def search(lo, hi):
        axes = [np.linspace(a, b, resolution) for a, b in zip(lo, hi)]
        pts = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, lo.size)
        vals = np.max(mom.q(pts), axis=1)
        i = int(np.argmin(vals))
        return float(vals[i]), pts[i], (hi - lo) / (resolution - 1)

    best_val, best, spacing = search(floor, ceil)
    for _ in range(rounds):
        half = margin * spacing
        for _ in range(max_moves):
            lo, hi = np.maximum(best - half, floor), np.minimum(best + half, ceil)
            val, pt, spacing = search(lo, hi)
            if val <= best_val:
                best_val, best = val, pt
            edge = ((np.isclose(pt, lo, rtol=0, atol=1e-15) & (lo > floor))
                    | (np.isclose(pt, hi, rtol=0, atol=1e-15) & (hi < ceil)))
            if not edge.any():
                break
    return BruteForceResult(C.expand(best), best, best_val, float(np.max(spacing)))


@dataclass(frozen=True)
class SaddleViolations:
    vertex: float               # max_i q_i(eta_hat) - h(lambda*)
    eta_side: float             # max over sampled eta of value - L(eta, lambda*)
    conditional_mean: float     # |eta_hat - E_{P_lambda*}[xi | C]| blockwise
    perturbation_increase: float  # sup side at eta_hat + 0.01 minus value

    @property
    def max_violation(self) -> float:
        return max(self.vertex, self.eta_side, self.conditional_mean)


def saddle_check(op: FiniteConvexOperator, xi, C: Partition, result: MmseResult,
                 n_eta: int = 100, seed: int = 0) -> SaddleViolations:
    """Saddle inequalities ``q_i(eta_hat) <= value <= L(eta, lambda*)``."""
    xi = _check_xi(op, xi)
    mom = _Moments.build(op, xi, C)
    lam = result.lambda_star
    eta_hat = result.block_values
    value = float(np.max(mom.q(eta_hat)))
    vertex = max(0.0, value - mom.h(lam))
    rng = np.random.default_rng(seed)
    spread = max(1.0, float(np.ptp(xi)))
    etas = eta_hat + rng.normal(scale=spread, size=(n_eta, eta_hat.size))
    lagr = mom.q(etas) @ lam
    eta_side = max(0.0, float(np.max(value - lagr)))
    cond = float(np.max(np.abs(eta_hat - mom.eta(lam))))
    bumped = float(np.max(mom.q(eta_hat + 0.01)))
    return SaddleViolations(vertex, eta_side, cond, bumped - value)


# --- stability ------------------------------------------------------------

@dataclass(frozen=True)
class StabilityReport:
    stable: bool
    witnesses: tuple   # (density index, L1 residual of the best convex fit)


def conditional_ratio(op: FiniteConvexOperator, C: Partition) -> np.ndarray:
    """``f_i / E[f_i | C]`` for every density, shape ``(k, size)``."""
    ind = C.indicator()
    pB = ind @ op.space.reference_prob
    fC = ((op.weighted @ ind.T) / pB) @ ind
    return op.densities / fC


def check_stability(op: FiniteConvexOperator, C: Partition, tol: float = 1e-9) -> StabilityReport:
    """Is every ``f_i / f_{i,C}`` in the convex hull of the densities?  One LP per density."""
    _require_proper(op)
    F = op.densities.T                  # (size, k)
    size, k = F.shape
    ratios = conditional_ratio(op, C)
    # variables: lam (k), r_plus (size), r_minus (size); minimise sum of residuals
    c = np.concatenate([np.zeros(k), np.ones(2 * size)])
    A_eq = np.block([[F, np.eye(size), -np.eye(size)],
                     [np.ones((1, k)), np.zeros((1, 2 * size))]])
    witnesses = []
    for i, g in enumerate(ratios):
        res = linprog(c, A_eq=A_eq, b_eq=np.concatenate([g, [1.0]]), bounds=(0, None), method="highs")
        resid = float(res.fun) if res.success else float("inf")
        if resid > tol:
            witnesses.append((i, resid))
    return StabilityReport(not witnesses, tuple(witnesses))


def stabilize(op: FiniteConvexOperator, C: Partition, depth: int = 3) -> FiniteConvexOperator:
    """Add ``f / f_C`` for every density until closed (or ``depth`` rounds).

    A new density inherits the penalty of the density it came from.  For a
    single partition one round already closes the set, since the conditional
    mean of ``f / f_C`` is 1.
    """
    dens = [np.asarray(f) for f in op.densities]
    pens = list(op.penalties)
    for _ in range(depth):
        cur = FiniteConvexOperator(op.space, np.array(dens), np.array(pens), op.p)
        added = False
        for f_new, a in zip(conditional_ratio(cur, C), cur.penalties):
            if not any(np.allclose(f_new, f, rtol=0, atol=1e-12) for f in dens):
                dens.append(f_new)
                pens.append(a)
                added = True
        if not added:
            break
    return FiniteConvexOperator(op.space, np.array(dens), np.array(pens), op.p)


def uniqueness_probe(op: FiniteConvexOperator, xi, C: Partition, n_restarts: int = 20,
                     seed: int = 0) -> float:
    """Largest sup-distance between estimators from independent random starts."""
    _require_proper(op)
    rng = np.random.default_rng(seed)
    k = op.n_densities
    etas = [conditional_mmse(op, xi, C, starts=[rng.dirichlet(np.ones(k))]).block_values
            for _ in range(n_restarts)]
    return max((float(np.max(np.abs(a - b))) for a, b in itertools.combinations(etas, 2)), default=0.0)


# --- bounds ---------------------------------------------------------------

@dataclass(frozen=True)
class MomentBound:
    lhs: float            # max_i E_{P_i}|xi|^{gamma p / 2}
    rhs: float            # max_i ||f_i||_q ||xi||_{gamma p}^{gamma p / 2}
    rhs_gamma: float      # same with exponent gamma on the norm
    holds: bool


def moment_bound_check(op: FiniteConvexOperator, xi, gamma: float) -> MomentBound:
    """Hoelder bound ``E_P|xi|^{gp/2} <= ||f||_q ||xi||_{gp}^{gp/2}``.

    Hoelder gives ``||f||_q || |xi|^{gp/2} ||_p = ||f||_q ||xi||_{gp^2/2}^{gp/2}``
    and Lyapunov (``p <= 2``) bounds the norm by ``||xi||_{gp}``.  The variant
    with exponent ``gamma`` on the norm (``rhs_gamma``) is reported but is
    not a valid bound when ``p < 2`` and ``||xi||_{gp} < 1``.
    """
    if gamma < 2:
        raise ValueError("gamma must be >= 2")
    xi = _check_xi(op, xi)
    P = op.space.reference_prob
    a = gamma * op.p / 2.0
    ax = np.abs(xi)
    lhs = float(np.max(op.weighted @ (ax ** a)))
    fq = float(np.max((op.densities ** op.q) @ P) ** (1.0 / op.q))
    norm = float((P @ ax ** (gamma * op.p)) ** (1.0 / (gamma * op.p)))
    rhs = fq * norm ** a
    return MomentBound(lhs, rhs, fq * norm ** gamma, bool(lhs <= rhs * (1 + 1e-12) + 1e-300))


def restriction_bound(op: FiniteConvexOperator, xi, C: Partition) -> float:
    """A bound ``M`` with ``||eta_hat||_{L^{2p}(P)} <= M``.

    Blockwise Jensen gives ``||eta_lam||^{2p} <= E[(f_lam / f_lam,C) |xi|^{2p}]``;
    on each block ``f_lam / f_lam,C`` averages the ``f_i / f_i,C``, so the
    blockwise maximum over densities bounds it.  The larger of this and
    ``(max_i E_{P_i}|xi|^{2p})^{1/2p}`` (valid for stable sets) is returned.
    """
    xi = _check_xi(op, xi)
    P = op.space.reference_prob
    a = np.abs(xi) ** (2 * op.p)
    plain = float(np.max(op.weighted @ a))
    ratio = conditional_ratio(op, C) * P * a
    ind = C.indicator()
    blockwise = float(np.sum(np.max(ratio @ ind.T, axis=0)))
    return max(plain, blockwise) ** (1.0 / (2 * op.p))


def lp_norm(op: FiniteConvexOperator, v, r: float) -> float:
    return float((op.space.reference_prob @ np.abs(np.asarray(v, dtype=float)) ** r) ** (1.0 / r))


# --- property suite -------------------------------------------------------

@dataclass(frozen=True)
class IndependenceFixture:
    op: FiniteConvexOperator
    C: Partition
    xi: np.ndarray


def independence_fixture(rng: np.random.Generator, n_first: int = 2, n_second: int = 3,
                         n_densities: int = 3) -> IndependenceFixture:
    """Product space ``A x B``; ``C`` sees the first coordinate, ``xi`` the second.

    Every measure is ``mu_i x nu`` with one shared second marginal ``nu``, so
    ``xi`` is independent of ``C`` under every mixture as well.
    """
    nu = rng.dirichlet(np.ones(n_second) * 2)
    ref_first = rng.dirichlet(np.ones(n_first) * 2)
    P = np.outer(ref_first, nu).reshape(-1)
    dens = []
    for _ in range(n_densities):
        mu = rng.dirichlet(np.ones(n_first) * 2)
        dens.append(np.outer(mu / ref_first, np.ones(n_second)).reshape(-1))
    pens = rng.uniform(0, 0.5, n_densities)
    pens[0] = 0.0
    space = FiniteSpace(P / P.sum())
    op = FiniteConvexOperator(space, np.array(dens), pens)
    labels = np.repeat(np.arange(n_first), n_second)
    xi = np.tile(rng.normal(size=n_second), n_first)
    return IndependenceFixture(op, Partition.from_labels(labels), xi)


@dataclass(frozen=True)
class PropertyResult:
    passed: bool
    error: float


@dataclass(frozen=True)
class PropertyReport:
    bounds: PropertyResult          # (i)
    odd: PropertyResult             # (ii)
    translation: PropertyResult     # (iii)
    independence: PropertyResult    # (iv)

    @property
    def passed(self) -> bool:
        return all(r.passed for r in (self.bounds, self.odd, self.translation, self.independence))

    def as_dict(self) -> dict:
        return {name: {"passed": r.passed, "error": r.error}
                for name, r in zip(("bounds", "odd", "translation", "independence"),
                                   (self.bounds, self.odd, self.translation, self.independence))}


def property_suite(op: FiniteConvexOperator, C: Partition, seed: int = 0, tol: float = 1e-8,
                   xi=None, independence: IndependenceFixture | None = None) -> PropertyReport:
    """Basic properties of the conditional operator on a random ``xi``.

    (i) ``C1 <= xi <= C2`` implies ``C1 <= eta_hat <= C2``;
    (ii) ``eta_hat(-xi) = -eta_hat(xi)``;
    (iii) ``eta_hat(xi + eta0) = eta_hat(xi) + eta0`` for block-constant ``eta0``;
    (iv) on the independence fixture, ``eta_hat`` is constant across blocks.
    """
    _require_proper(op)
    rng = np.random.default_rng(seed)
    if xi is None:
        xi = rng.normal(size=op.space.size)
    xi = _check_xi(op, xi)
    base = conditional_mmse(op, xi, C, seed=seed)

    c1, c2 = float(xi.min()), float(xi.max())
    err1 = max(0.0, c1 - float(base.eta_hat.min()), float(base.eta_hat.max()) - c2)

    neg = conditional_mmse(op, -xi, C, seed=seed)
    err2 = float(np.max(np.abs(neg.eta_hat + base.eta_hat)))

    eta0 = C.expand(rng.normal(scale=2.0, size=C.n_blocks))
    shifted = conditional_mmse(op, xi + eta0, C, seed=seed)
    err3 = float(np.max(np.abs(shifted.eta_hat - base.eta_hat - eta0)))

    fix = independence if independence is not None else independence_fixture(rng)
    ind = conditional_mmse(fix.op, fix.xi, fix.C, seed=seed)
    err4 = float(np.ptp(ind.block_values))

    def res(e):
        return PropertyResult(bool(e <= tol), e)

    return PropertyReport(res(err1), res(err2), res(err3), res(err4))


def random_instance(rng: np.random.Generator, max_size: int = 8, max_densities: int = 4,
                    max_blocks: int = 3, p: float = 2.0):
    """Random proper operator, partition and ``xi`` at desk scale."""
    size = int(rng.integers(3, max_size + 1))
    k = int(rng.integers(1, max_densities + 1))
    n_blocks = int(rng.integers(1, min(max_blocks, size) + 1))
    P = rng.dirichlet(np.ones(size) * 2)
    P = np.maximum(P, 1e-3)
    P /= P.sum()
    raw = np.exp(rng.normal(scale=0.7, size=(k, size)))
    dens = raw / (raw @ P)[:, None]
    pens = rng.uniform(0, 0.3, k)
    pens -= pens.min()
    op = FiniteConvexOperator(FiniteSpace(P), dens, pens, p)
    labels = np.concatenate([np.arange(n_blocks), rng.integers(0, n_blocks, size - n_blocks)])
    rng.shuffle(labels)
    return op, Partition.from_labels(labels), rng.normal(size=size)
