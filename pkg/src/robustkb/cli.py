"""Command-line entry point: ``python3 -m robustkb <subcommand> ...``.

Exit codes: 0 success, 1 invalid input or configuration, 2 a numerical
check failed.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import math
import os
import sys
from importlib import resources
from pathlib import Path

import numpy as np

from .errors import ConfigError, RobustKBError, UnknownSubcommand
from .model import RunSettings, check_ambiguity, load_config

OUT_DIR_ENV = "ROBUSTKB_OUT_DIR"
SUBCOMMANDS = ("simulate", "filter", "robust-filter", "dual-check", "mmse-finite", "selfcheck")
DEFAULT_GAP_TOL = 1e-8


class CheckFailed(Exception):
    """A numerical check did not pass (exit code 2)."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UnknownSubcommand(message) if "invalid choice" in message else ConfigError(message)


# --- reports ------------------------------------------------------------------

def _clean(value):
    if isinstance(value, dict):
        return {str(k): _clean(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_clean(v) for v in value]
    if isinstance(value, np.ndarray):
        return _clean(value.tolist())
    if isinstance(value, (bool, np.bool_)):
        return bool(value)
    if isinstance(value, (int, np.integer)):
        return int(value)
    if isinstance(value, (float, np.floating)):
        v = float(value)
        if not math.isfinite(v):
            return None
        return float(f"{v:.12g}")
    return value


def emit_report(results: dict, path: str | os.PathLike | None = None) -> str:
    """JSON report with sorted keys and floats rounded to 12 significant digits."""
    text = json.dumps(_clean(results), indent=2, sort_keys=True) + "\n"
    if path is not None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(text)
    return text


def _write_csv(path, header, rows):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([f"{v:.12g}" if isinstance(v, (float, np.floating)) else v for v in row])


def _names(prefix, k):
    return [prefix] if k == 1 else [f"{prefix}{i + 1}" for i in range(k)]


# --- shared plumbing ----------------------------------------------------------

def _config_text(path):
    if path is None:
        return resources.files("robustkb").joinpath("data/scalar.json").read_text()
    try:
        return Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None


def _setup(args):
    model, grid, ambiguity, settings = load_config(_config_text(args.config))
    seed = args.seed if args.seed is not None else settings.seed
    out_dir = args.out_dir or os.environ.get(OUT_DIR_ENV) or settings.out_dir
    threads = args.threads if args.threads is not None else settings.threads
    settings = RunSettings(seed=seed, n_paths=settings.n_paths, n_particles=settings.n_particles,
                           out_dir=out_dir, threads=threads, generator=settings.generator,
                           t_star=settings.t_star, tolerances=settings.tolerances)
    return model, grid, ambiguity, settings


def _out(settings, given, default):
    if given:
        return Path(given) if os.path.isabs(given) or os.path.dirname(given) else Path(settings.out_dir) / given
    return Path(settings.out_dir) / default


def _parse_theta(spec, grid, n, m):
    from .sim import ThetaPath

    if spec in (None, "zero"):
        return ThetaPath.zero(grid, n, m)
    kind, _, arg = spec.partition(":")
    if kind == "const":
        vals = [float(v) for v in arg.split(",") if v.strip()]
        if len(vals) != n + m:
            raise ConfigError(f"const theta needs {n + m} comma-separated values, got {len(vals)}")
        return ThetaPath.constant(grid, vals[:n], vals[n:])
    if kind == "file":
        data = np.genfromtxt(arg, delimiter=",", names=True)
        cols = data.dtype.names
        t1 = np.column_stack([data[c] for c in cols if c.startswith("theta1")])
        t2 = np.column_stack([data[c] for c in cols if c.startswith("theta2")])
        if t1.shape != (grid.N + 1, n) or t2.shape != (grid.N + 1, m):
            raise ConfigError(f"theta file must hold {grid.N + 1} rows of theta1 ({n}) and theta2 ({m}) columns")
        return ThetaPath.deterministic(t1, t2)
    raise ConfigError(f"unknown theta spec {spec!r}; expected zero, const:... or file:PATH")


def _read_observations(path, grid, m, path_id):
    try:
        data = np.genfromtxt(path, delimiter=",", names=True)
    except OSError as exc:
        raise ConfigError(f"cannot read observations {path}: {exc}") from None
    data = np.atleast_1d(data)
    cols = data.dtype.names
    if "path_id" in cols:
        data = data[data["path_id"] == path_id]
    names = _names("m", m)
    missing = [c for c in names if c not in cols]
    if missing:
        raise ConfigError(f"observation file lacks column(s) {missing}")
    obs = np.column_stack([data[c] for c in names])
    if obs.shape[0] != grid.N + 1:
        raise ConfigError(f"observation file has {obs.shape[0]} rows, grid needs {grid.N + 1}")
    return obs


def _observations(args, model, grid, settings):
    from .sim import ThetaPath, simulate_paths

    if args.obs:
        return _read_observations(args.obs, grid, model.m, args.path_id), None
    seed = settings.require_seed()
    theta = _parse_theta(getattr(args, "data_theta", None), grid, model.n, model.m)
    batch = simulate_paths(model, grid, theta, 1, seed)
    return batch.m_obs[0], batch


# --- subcommands --------------------------------------------------------------

def cmd_simulate(args):
    from .sim import simulate_paths

    model, grid, ambiguity, settings = _setup(args)
    seed = settings.require_seed()
    theta = _parse_theta(args.theta, grid, model.n, model.m)
    n_paths = args.paths or settings.n_paths
    batch = simulate_paths(model, grid, theta, n_paths, seed, mu=ambiguity.mu, threads=settings.threads)
    out = _out(settings, args.out, "paths.csv")
    header = ["path_id", "t"] + _names("x", model.n) + _names("m", model.m) + ["f_theta"]
    times = grid.times

    def rows():
        for i in range(n_paths):
            for k in range(grid.N + 1):
                yield [i, times[k], *batch.x[i, k], *batch.m_obs[i, k], batch.f_theta[i, k]]

    _write_csv(out, header, rows())
    xT = batch.x[:, grid.N]
    print(f"wrote {n_paths} paths to {out}; mean x(T) = {np.mean(xT, axis=0)}")
    return 0


def cmd_filter(args):
    from .kalman import classical_filter

    model, grid, _, settings = _setup(args)
    obs, _ = _observations(args, model, grid, settings)
    res = classical_filter(model, grid, obs)
    out = _out(settings, args.out, "filter.csv")
    n = model.n
    header = ["t"] + _names("x_hat", n) + [f"P{i + 1}{j + 1}" if n > 1 else "P"
                                          for i in range(n) for j in range(n)]
    times = grid.times
    _write_csv(out, header, ([times[k], *res.x_hat[k], *res.P.P[k].reshape(-1)]
                             for k in range(grid.N + 1)))
    print(f"wrote filter output to {out}")
    return 0


def _theta_summary(theta):
    t1, t2 = theta.theta1, theta.theta2
    if np.all(t1 == t1[0]) and np.all(t2 == t2[0]):
        return {"constant": True, "theta1": t1[0], "theta2": t2[0]}
    return {"constant": False, "theta1": t1, "theta2": t2}


def cmd_robust_filter(args):
    from .gexp import concave_dual, parse_generator
    from .kalman import classical_filter
    from .robust import RobustProblem, certify_saddle

    model, grid, ambiguity, settings = _setup(args)
    gen = parse_generator(args.generator or settings.generator or "zero")
    mu = ambiguity.mu if args.mu is None else args.mu
    check_ambiguity(gen, mu)
    t_star = args.t_star if args.t_star is not None else (settings.t_star or grid.T)
    tol = settings.tolerances.get("gap", DEFAULT_GAP_TOL)
    problem = RobustProblem(model, grid, concave_dual(gen, model.n, model.m), mu, t_star)
    obs, _ = _observations(args, model, grid, settings)
    report = certify_saddle(problem, obs)
    classical = classical_filter(model, grid, obs, problem.riccati)
    est = report.estimator
    out = _out(settings, args.out, "robust_filter.csv")
    header = ["t"] + _names("x_hat", model.n) + _names("x_bar", model.n)
    times = grid.times
    _write_csv(out, header, ([times[k], *est.x_hat[k], *classical.x_hat[k]] for k in range(grid.N + 1)))
    results = {
        "generator": gen.label(), "mu": mu, "t_star": t_star, "seed": settings.seed,
        "tolerances": {"gap": tol},
        "lower_value": report.lower_value, "upper_value": report.upper_value, "gap": report.gap,
        "theta_star": _theta_summary(report.theta_star),
        "max_abs_diff_classical": float(np.max(np.abs(est.x_hat - classical.x_hat))),
        "identical_to_classical": bool(np.array_equal(est.x_hat, classical.x_hat)),
        "n_steps": grid.N, "T": grid.T,
    }
    text = emit_report(results, _out(settings, args.report, "robust_report.json"))
    print(text, end="")
    if report.gap < -tol:
        raise CheckFailed(f"saddle gap {report.gap:.3e} below -{tol:g}")
    return 0


_TERMINALS = {
    "x": lambda x, m: x[:, 0],
    "x2": lambda x, m: x[:, 0] ** 2,
    "abs_x": lambda x, m: np.abs(x[:, 0]),
    "m": lambda x, m: m[:, 0],
}


def cmd_dual_check(args):
    from .gexp import bsde_solve, concave_dual, dual_value, parse_generator
    from .sim import ThetaPath

    model, grid, ambiguity, settings = _setup(args)
    seed = settings.require_seed()
    gen = parse_generator(args.generator or settings.generator or "zero")
    G = concave_dual(gen, model.n, model.m)
    xi = _TERMINALS[args.terminal]
    n_paths = args.paths or settings.n_paths
    bsde = bsde_solve(gen, xi, model, grid, n_paths, seed, threads=settings.threads)
    r = G.radius
    levels = np.linspace(-r, r, args.family_size) if r > 0 else np.zeros(1)
    family = [ThetaPath.constant(grid, [a] * model.n, [c] * model.m) for a in levels for c in levels
              if np.isfinite(G.stacked(np.array([a] * model.n + [c] * model.m)))]
    dual = dual_value(xi, G, model, grid, family, n_paths, seed + 1, threads=settings.threads)
    combined = math.hypot(bsde.std_error, dual.std_error)
    gap = bsde.y0 - dual.value
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["bsde_value", "bsde_se", "dual_value", "dual_se", "gap", "combined_se", "seed"])
    w.writerow([f"{bsde.y0:.12g}", f"{bsde.std_error:.12g}", f"{dual.value:.12g}",
                f"{dual.std_error:.12g}", f"{gap:.12g}", f"{combined:.12g}", seed])
    print(buf.getvalue(), end="")
    if args.out:
        out = _out(settings, args.out, "dual_check.csv")
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(buf.getvalue())
    if dual.value > bsde.y0 + 4 * combined:
        raise CheckFailed("dual lower bound exceeds the BSDE value by more than 4 standard errors")
    return 0


def cmd_mmse_finite(args):
    from .finite import (Partition, check_stability, conditional_mmse, load_space, property_suite,
                         rho_eval, saddle_check)

    if not args.space:
        raise ConfigError("mmse-finite needs --space JSON")
    try:
        op, part = load_space(Path(args.space).read_text())
    except (OSError, KeyError, ValueError) as exc:
        raise ConfigError(f"bad space document: {exc}") from None
    if part is None:
        part = Partition.trivial(op.space.size)
    if args.xi:
        xi = np.loadtxt(args.xi, delimiter=",", ndmin=1).reshape(-1)
    else:
        raise ConfigError("mmse-finite needs --xi CSV")
    seed = args.seed if args.seed is not None else 0
    res = conditional_mmse(op, xi, part, seed=seed)
    sc = saddle_check(op, xi, part, res, seed=seed)
    props = property_suite(op, part, seed=seed, xi=xi)
    stab = check_stability(op, part)
    tol = 1e-8
    results = {
        "eta_hat": res.eta_hat, "block_values": res.block_values, "value": res.value,
        "lambda_star": res.lambda_star, "gap": res.saddle_gap,
        "rho_of_squared_error": rho_eval(op, (xi - res.eta_hat) ** 2),
        "saddle_violation": sc.max_violation, "properties": props.as_dict(),
        "stable": stab.stable, "stability_witnesses": [list(w) for w in stab.witnesses],
        "seed": seed, "tolerances": {"saddle": tol, "gap": 1e-10},
    }
    out = Path(args.out) if args.out else Path(args.out_dir or os.environ.get(OUT_DIR_ENV) or ".") / "mmse.json"
    print(emit_report(results, out), end="")
    if res.saddle_gap < -1e-10 or sc.max_violation > tol or not props.passed:
        raise CheckFailed("finite MMSE checks failed")
    return 0


def cmd_selfcheck(args):
    from .finite import brute_force_mmse, conditional_mmse, random_instance
    from .gexp import concave_dual, parse_generator
    from .kalman import classical_filter, riccati_solve
    from .model import TimeGrid, scalar_model
    from .robust import RobustProblem, certify_saddle, robust_filter
    from .sim import ThetaPath, girsanov_moment_check, simulate_paths

    model, grid, ambiguity, settings = _setup(args)
    seed = settings.require_seed()
    checks = []

    g1 = TimeGrid(1.0, 1000)
    P = riccati_solve(scalar_model(g1), g1).P[-1, 0, 0]
    checks.append(("riccati tanh(1)", abs(P - math.tanh(1.0)) <= 1e-6, abs(P - math.tanh(1.0))))

    batch = simulate_paths(model, grid, ThetaPath.zero(grid, model.n, model.m), 4, seed)
    cl = classical_filter(model, grid, batch.m_obs)
    rb = robust_filter(model, grid, ThetaPath.zero(grid, model.n, model.m), batch.m_obs)
    checks.append(("zero-theta robust filter is classical", np.array_equal(cl.x_hat, rb.x_hat), 0.0))

    gen = parse_generator(settings.generator or "hyperbolic:1")
    mu = min(ambiguity.mu, gen.domain_radius)
    problem = RobustProblem(model, grid, concave_dual(gen, model.n, model.m), mu,
                            settings.t_star or grid.T)
    rep = certify_saddle(problem)
    checks.append(("saddle gap >= -1e-8", rep.gap >= -DEFAULT_GAP_TOL, rep.gap))

    mc = girsanov_moment_check(1.0, 2.0, 1.0, 200_000, seed)
    checks.append(("girsanov moment bound", mc.within(4.0), (mc.estimate - mc.upper_bound) / mc.std_error))

    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(5):
        op, C, xi = random_instance(rng)
        r = conditional_mmse(op, xi, C)
        bf = brute_force_mmse(op, xi, C)
        worst = max(worst, float(np.max(np.abs(r.block_values - bf.block_values))) - 10 * bf.resolution)
    checks.append(("finite MMSE vs brute force", worst <= 1e-12, worst))

    for name, ok, val in checks:
        print(f"{'PASS' if ok else 'FAIL'}  {name}  ({val:.3g})")
    failed = [c for c in checks if not c[1]]
    print(f"{len(checks) - len(failed)}/{len(checks)} checks passed")
    if failed:
        raise CheckFailed(", ".join(c[0] for c in failed))
    return 0


_COMMANDS = {
    "simulate": cmd_simulate,
    "filter": cmd_filter,
    "robust-filter": cmd_robust_filter,
    "dual-check": cmd_dual_check,
    "mmse-finite": cmd_mmse_finite,
    "selfcheck": cmd_selfcheck,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config (default: bundled scalar model)")
    common.add_argument("--seed", type=int)
    common.add_argument("--threads", type=int)
    common.add_argument("--out-dir", help=f"output directory (env {OUT_DIR_ENV})")

    parser = _Parser(prog="robustkb", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("simulate", parents=[common], help="simulate signal/observation paths")
    p.add_argument("--theta", default="zero", help="zero | const:a,b,... | file:PATH")
    p.add_argument("--paths", type=int)
    p.add_argument("--out")

    for name, helptext in (("filter", "classical filter"), ("robust-filter", "robust filter and saddle report")):
        p = sub.add_parser(name, parents=[common], help=helptext)
        p.add_argument("--obs", help="observation CSV (columns t, m...; optional path_id)")
        p.add_argument("--path-id", type=int, default=0)
        p.add_argument("--data-theta", default="zero", help="prior for simulated data when --obs is absent")
        p.add_argument("--out")
        if name == "robust-filter":
            p.add_argument("--generator", help="zero | norm:K | hyperbolic:K")
            p.add_argument("--mu", type=float)
            p.add_argument("--t-star", type=float)
            p.add_argument("--report")

    p = sub.add_parser("dual-check", parents=[common], help="BSDE value against the dual lower bound")
    p.add_argument("--generator")
    p.add_argument("--terminal", choices=sorted(_TERMINALS), default="x")
    p.add_argument("--paths", type=int)
    p.add_argument("--family-size", type=int, default=9)
    p.add_argument("--out")

    p = sub.add_parser("mmse-finite", parents=[common], help="finite-space conditional MMSE")
    p.add_argument("--space")
    p.add_argument("--xi")
    p.add_argument("--out")

    sub.add_parser("selfcheck", parents=[common], help="run the invariant suite")
    return parser


def run(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = build_parser().parse_args(argv)
        return _COMMANDS[args.command](args)
    except CheckFailed as exc:
        print(f"check failed: {exc}", file=sys.stderr)
        return 2
    except (RobustKBError, ValueError) as exc:
        violations = getattr(exc, "violations", None)
        print(f"error: {exc}", file=sys.stderr)
        for v in violations or ():
            print(f"  - {v}", file=sys.stderr)
        return 1


def main():
    sys.exit(run())
