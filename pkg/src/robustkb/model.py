"""System coefficients, time grid and run configuration.

Coefficients are piecewise constant on a uniform grid: the value stored at
``t_k`` applies on ``[t_k, t_{k+1})``.  Every coefficient is held as an array
with a leading grid axis of length ``N + 1`` so that time-varying and
constant models share one code path.

Configuration documents are JSON.  A coefficient entry is one of

* a number (only when every target dimension is 1),
* a nested row-major array of the target shape (constant in time),
* ``{"per_grid": [v_0, ..., v_N]}`` with one value per grid point.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DimensionMismatch, MissingKey, NotPositiveDefinite

DEFAULT_DELTA_R = 1e-10
DEFAULT_COEFFICIENT_BOUND = 1e6
_SYM_TOL = 1e-12


def _frozen(a):
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class TimeGrid:
    T: float
    N: int

    def __post_init__(self):
        if not (isinstance(self.N, (int, np.integer)) and self.N >= 2):
            raise ConfigError(f"grid needs N >= 2 steps, got N={self.N!r}")
        if not self.T > 0:
            raise ConfigError(f"horizon must be positive, got T={self.T!r}")
        object.__setattr__(self, "N", int(self.N))
        object.__setattr__(self, "T", float(self.T))

    @property
    def dt(self) -> float:
        return self.T / self.N

    @property
    def times(self) -> np.ndarray:
        return np.arange(self.N + 1) * self.dt

    def index(self, t: float, tol: float = 1e-9) -> int:
        """Grid index of time ``t``; raises if ``t`` is not a grid point."""
        k = int(round(t / self.dt))
        if not (0 <= k <= self.N) or abs(k * self.dt - t) > tol * max(1.0, self.T):
            raise ValueError(f"t={t} is not on the grid (T={self.T}, N={self.N})")
        return k


@dataclass(frozen=True, eq=False)
class ModelCoefficients:
    """Linear signal/observation system, one coefficient value per grid point.

    Shapes: ``B (N+1, n, n)``, ``H (N+1, m, n)``, ``b (N+1, n)``, ``h (N+1, m)``,
    ``Q (N+1, n, n)``, ``R (N+1, m, m)``, ``x0 (n,)``.
    """

    B: np.ndarray
    H: np.ndarray
    b: np.ndarray
    h: np.ndarray
    Q: np.ndarray
    R: np.ndarray
    x0: np.ndarray
    delta_R: float = DEFAULT_DELTA_R
    coefficient_bound: float = DEFAULT_COEFFICIENT_BOUND

    def __post_init__(self):
        for name in ("B", "H", "b", "h", "Q", "R", "x0"):
            object.__setattr__(self, name, _frozen(getattr(self, name)))
        n, m = self.n, self.m
        length = self.B.shape[0]
        expected = {
            "B": (length, n, n),
            "H": (length, m, n),
            "b": (length, n),
            "h": (length, m),
            "Q": (length, n, n),
            "R": (length, m, m),
            "x0": (n,),
        }
        for name, shape in expected.items():
            if getattr(self, name).shape != shape:
                raise DimensionMismatch(
                    f"{name} has shape {getattr(self, name).shape}, expected {shape}"
                )

    @property
    def n(self) -> int:
        return self.B.shape[1]

    @property
    def m(self) -> int:
        return self.H.shape[1]

    @property
    def n_grid(self) -> int:
        return self.B.shape[0]

    @classmethod
    def constant(cls, grid: TimeGrid, B, H, b, h, Q, R, x0, **kwargs) -> "ModelCoefficients":
        """Build a time-invariant model; arguments may be scalars for n = m = 1."""
        x0 = np.atleast_1d(np.asarray(x0, dtype=float))
        n = x0.shape[0]
        H = np.asarray(H, dtype=float)
        m = H.reshape(-1, n).shape[0] if H.ndim else 1

        def tile(v, shape):
            v = np.asarray(v, dtype=float).reshape(shape)
            return np.broadcast_to(v, (grid.N + 1,) + shape).copy()

        return cls(
            B=tile(B, (n, n)), H=tile(H, (m, n)), b=tile(b, (n,)), h=tile(h, (m,)),
            Q=tile(Q, (n, n)), R=tile(R, (m, m)), x0=x0, **kwargs,
        )

    def replace(self, **changes) -> "ModelCoefficients":
        fields_ = {k: getattr(self, k) for k in
                   ("B", "H", "b", "h", "Q", "R", "x0", "delta_R", "coefficient_bound")}
        fields_.update(changes)
        return ModelCoefficients(**fields_)

    def is_time_invariant(self, name: str) -> bool:
        a = getattr(self, name)
        return bool(np.all(a == a[0]))


@dataclass(frozen=True)
class AmbiguityBound:
    mu: float
    epsilon: float = 0.5

    def __post_init__(self):
        if not self.mu >= 0:
            raise ConfigError(f"ambiguity bound mu must be >= 0, got {self.mu!r}")
        if not 0 < self.epsilon < 1:
            raise ConfigError(f"epsilon must lie in (0, 1), got {self.epsilon!r}")


@dataclass(frozen=True)
class RunSettings:
    seed: int | None = None
    n_paths: int = 1000
    n_particles: int = 1000
    out_dir: str = "."
    threads: int = 1
    generator: str | None = None
    t_star: float | None = None
    tolerances: dict = field(default_factory=dict)

    def __post_init__(self):
        for key, tol in self.tolerances.items():
            if not tol > 0:
                raise ConfigError(f"tolerance {key!r} must be positive, got {tol!r}")
        if self.n_paths < 1 or self.n_particles < 1 or self.threads < 1:
            raise ConfigError("n_paths, n_particles and threads must be >= 1")

    def require_seed(self) -> int:
        if self.seed is None:
            raise ConfigError("a seed is required for stochastic subcommands")
        return self.seed


@dataclass(frozen=True)
class Violation:
    """One failed invariant: which coefficient, where it first fails, how badly."""

    name: str
    kind: str
    index: int
    value: float
    count: int = 1

    def __str__(self):
        return (f"{self.name}: {self.kind} at grid index {self.index} "
                f"(value {self.value:.6g}, {self.count} grid point(s))")


def validate(model: ModelCoefficients, grid: TimeGrid) -> list[Violation]:
    """Check every model invariant; never raises."""
    out: list[Violation] = []
    if model.n_grid != grid.N + 1:
        out.append(Violation("grid", "length mismatch", 0, float(model.n_grid), 1))
        return out

    def report(name, kind, bad, values):
        idx = np.flatnonzero(bad)
        if idx.size:
            worst = idx[np.argmax(np.abs(values[idx]))]
            out.append(Violation(name, kind, int(idx[0]), float(values[worst]), int(idx.size)))

    for name in ("Q", "R"):
        a = getattr(model, name)
        asym = np.max(np.abs(a - np.swapaxes(a, 1, 2)), axis=(1, 2))
        report(name, "asymmetric", asym > _SYM_TOL * np.maximum(1.0, np.max(np.abs(a), axis=(1, 2))), asym)
    q_eig = np.linalg.eigvalsh(0.5 * (model.Q + np.swapaxes(model.Q, 1, 2)))[:, 0]
    report("Q", "negative eigenvalue", q_eig < -_SYM_TOL, q_eig)
    r_eig = np.linalg.eigvalsh(0.5 * (model.R + np.swapaxes(model.R, 1, 2)))[:, 0]
    report("R", "not uniformly positive definite", r_eig < model.delta_R, r_eig)

    for name in ("B", "H", "b", "h", "Q", "R"):
        a = getattr(model, name)
        norms = np.max(np.abs(a.reshape(a.shape[0], -1)), axis=1)
        report(name, "exceeds coefficient bound", ~(norms <= model.coefficient_bound), norms)
    if not np.all(np.isfinite(model.x0)):
        out.append(Violation("x0", "not finite", 0, float("nan")))
    return out


# --- config documents ---------------------------------------------------

_REQUIRED = ("n", "m", "B", "H", "b", "h", "Q", "R", "x0", "T", "N", "mu")


def _coefficient(doc, name, shape, n_grid):
    value = doc[name]
    if isinstance(value, dict):
        if "per_grid" not in value:
            raise MissingKey(f"{name}: object form needs a 'per_grid' key")
        arr = np.asarray(value["per_grid"], dtype=float)
        if arr.shape[0] != n_grid:
            raise DimensionMismatch(f"{name}: per_grid has {arr.shape[0]} entries, grid has {n_grid}")
        try:
            return arr.reshape((n_grid,) + shape)
        except ValueError:
            raise DimensionMismatch(f"{name}: per_grid values have shape {arr.shape[1:]}, expected {shape}") from None
    arr = np.asarray(value, dtype=float)
    if arr.ndim == 0:
        if any(s != 1 for s in shape):
            raise DimensionMismatch(f"{name}: scalar given but shape {shape} required")
        arr = arr.reshape(shape)
    if arr.shape != shape:
        raise DimensionMismatch(f"{name}: shape {arr.shape}, expected {shape}")
    return np.broadcast_to(arr, (n_grid,) + shape).copy()


def parse_config(doc: dict):
    """Turn a parsed config mapping into validated objects."""
    missing = [k for k in _REQUIRED if k not in doc]
    if missing:
        raise MissingKey(f"missing required key(s): {', '.join(missing)}")
    grid = TimeGrid(T=float(doc["T"]), N=doc["N"])
    n, m = int(doc["n"]), int(doc["m"])
    n_grid = grid.N + 1
    x0 = np.asarray(doc["x0"], dtype=float).reshape(-1)
    if x0.shape != (n,):
        raise DimensionMismatch(f"x0: length {x0.shape[0]}, expected {n}")
    model = ModelCoefficients(
        B=_coefficient(doc, "B", (n, n), n_grid),
        H=_coefficient(doc, "H", (m, n), n_grid),
        b=_coefficient(doc, "b", (n,), n_grid),
        h=_coefficient(doc, "h", (m,), n_grid),
        Q=_coefficient(doc, "Q", (n, n), n_grid),
        R=_coefficient(doc, "R", (m, m), n_grid),
        x0=x0,
        delta_R=float(doc.get("delta_R", DEFAULT_DELTA_R)),
        coefficient_bound=float(doc.get("coefficient_bound", DEFAULT_COEFFICIENT_BOUND)),
    )
    violations = validate(model, grid)
    for v in violations:
        if v.name == "R" and v.kind.startswith("not uniformly"):
            raise NotPositiveDefinite("R", v.index, v.value)
    if violations:
        err = ConfigError("invalid model: " + "; ".join(map(str, violations)))
        err.violations = violations
        raise err

    ambiguity = AmbiguityBound(mu=float(doc["mu"]), epsilon=float(doc.get("epsilon", 0.5)))
    run = dict(doc.get("run", {}))
    settings = RunSettings(
        seed=run.get("seed"),
        n_paths=int(run.get("n_paths", 1000)),
        n_particles=int(run.get("n_particles", 1000)),
        out_dir=str(run.get("out_dir", ".")),
        threads=int(run.get("threads", 1)),
        generator=run.get("generator"),
        t_star=run.get("t_star"),
        tolerances=dict(run.get("tolerances", {})),
    )
    if settings.generator is not None:
        from .gexp import parse_generator
        check_ambiguity(parse_generator(settings.generator), ambiguity.mu)
    return model, grid, ambiguity, settings


def check_ambiguity(generator, mu: float) -> None:
    """Reject an ambiguity bound larger than the generator's dual domain."""
    radius = generator.domain_radius
    if mu > radius + 1e-15:
        raise ConfigError(
            f"mu={mu} exceeds the dual-domain radius {radius} of generator {generator.kind!r}"
        )


def load_config(text: str):
    """Parse a JSON config document into ``(model, grid, ambiguity, settings)``."""
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config does not parse: {exc}") from None
    if not isinstance(doc, dict):
        raise ConfigError("config document must be a JSON object")
    return parse_config(doc)


def _encode(model: ModelCoefficients, name: str):
    a = getattr(model, name)
    if model.is_time_invariant(name):
        return a[0].tolist()
    return {"per_grid": a.tolist()}


def serialize(model: ModelCoefficients, grid: TimeGrid, ambiguity: AmbiguityBound,
              settings: RunSettings | None = None) -> str:
    doc = {
        "n": model.n, "m": model.m, "T": grid.T, "N": grid.N,
        "mu": ambiguity.mu, "epsilon": ambiguity.epsilon,
        "x0": model.x0.tolist(),
        "delta_R": model.delta_R, "coefficient_bound": model.coefficient_bound,
    }
    for name in ("B", "H", "b", "h", "Q", "R"):
        doc[name] = _encode(model, name)
    if settings is not None:
        doc["run"] = {
            "seed": settings.seed, "n_paths": settings.n_paths,
            "n_particles": settings.n_particles, "out_dir": settings.out_dir,
            "threads": settings.threads, "generator": settings.generator,
            "t_star": settings.t_star, "tolerances": dict(settings.tolerances),
        }
    return json.dumps(doc, indent=2, sort_keys=True)


def models_equal(a: ModelCoefficients, b: ModelCoefficients) -> bool:
    names = ("B", "H", "b", "h", "Q", "R", "x0")
    return (all(np.array_equal(getattr(a, k), getattr(b, k)) for k in names)
            and a.delta_R == b.delta_R and a.coefficient_bound == b.coefficient_bound)


def scalar_model(grid: TimeGrid, B=0.0, H=1.0, b=0.0, h=0.0, Q=1.0, R=1.0, x0=0.0):
    """Reference one-dimensional model used throughout the tests and scripts."""
    return ModelCoefficients.constant(grid, B=B, H=H, b=b, h=h, Q=Q, R=R, x0=x0)
