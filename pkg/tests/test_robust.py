import warnings

import numpy as np
import pytest
from scipy.integrate import solve_ivp
from scipy.optimize import minimize_scalar

from robustkb.errors import DomainViolation, NotAdapted
from robustkb.gexp import GeneratorSpec, concave_dual
from robustkb.kalman import classical_filter, riccati_solve
from robustkb.model import TimeGrid, scalar_model
from robustkb.robust import (RobustProblem, ThetaClass, bias_ode, bias_weights, certify_saddle,
                             decomposition, general_filter, inner_value, robust_filter, upper_value,
                             worst_case_theta)
from robustkb.sim import ThetaPath, simulate_paths

HYP = concave_dual(GeneratorSpec.hyperbolic(1.0))


def problem(N=200, mu=0.5, G=HYP, t_star=1.0, **kw):
    g = TimeGrid(1.0, N)
    return RobustProblem(scalar_model(g, **kw), g, G, mu, t_star)


def test_inner_value_examples():
    p = problem(N=1000)
    assert inner_value(p, ThetaPath.zero(p.grid)) == pytest.approx(np.tanh(1.0), abs=1e-6)
    th = ThetaPath.constant(p.grid, 0.0, 0.6)
    assert inner_value(p, th) == pytest.approx(np.tanh(1.0) - 0.2, abs=1e-6)
    assert inner_value(p, th) == pytest.approx(0.561594, abs=1e-6)


def test_inner_value_depends_only_on_penalty():
    p = problem()
    rng = np.random.default_rng(1)
    for _ in range(10):
        th = ThetaPath.deterministic(*rng.uniform(-0.5, 0.5, (2, p.grid.N + 1)))
        alpha = inner_value(p, th) - p.variance
        assert inner_value(p, th) - alpha == pytest.approx(p.variance, abs=1e-15)
    a = ThetaPath.constant(p.grid, 0.3, 0.0)
    b = ThetaPath.constant(p.grid, 0.0, -0.3)
    assert inner_value(p, a) == inner_value(p, b)


def test_problem_rejects_mu_outside_domain():
    with pytest.raises(DomainViolation):
        problem(mu=1.2)
    with pytest.raises(DomainViolation):
        problem(G=concave_dual(GeneratorSpec.zero()), mu=0.1)


def test_worst_case_theta_is_zero_for_builtins():
    for G, mu in ((HYP, 0.5), (concave_dual(GeneratorSpec.scaled_norm(0.5)), 0.5)):
        th = worst_case_theta(problem(G=G, mu=mu))
        assert np.all(th.theta1 == 0) and np.all(th.theta2 == 0)


def test_worst_case_theta_grid_oracle_user_generator():
    # a linear tilt shifts the dual: G(theta) = G_hyp(theta + a), peak at theta = -a
    a = np.array([-0.2, 0.1])

    def tilted(t, z1, z2):
        z1, z2 = np.asarray(z1)[..., 0], np.asarray(z2)[..., 0]
        return np.sqrt(1 + z1 ** 2 + z2 ** 2) - 1 + a[0] * z1 + a[1] * z2
    G = concave_dual(GeneratorSpec.user(tilted, 1.3))
    p = problem(N=4, G=G, mu=0.5)
    th = worst_case_theta(p)
    ax = np.linspace(-0.5, 0.5, 101)
    pts = np.stack(np.meshgrid(ax, ax), axis=-1).reshape(-1, 2)
    per_step = np.max(HYP.stacked(pts + a))
    oracle = p.variance + p.grid.N * per_step * p.grid.dt
    assert abs(inner_value(p, th) - oracle) <= 1e-6
    assert np.allclose(th.theta1[:4, 0], 0.2, atol=1e-4)
    assert np.allclose(th.theta2[:4, 0], -0.1, atol=1e-4)


def test_worst_case_theta_grid_oracle_builtin():
    p = problem(N=100, mu=0.5)
    th = worst_case_theta(p)
    ax = np.linspace(-0.5, 0.5, 101)
    pts = np.stack(np.meshgrid(ax, ax), axis=-1).reshape(-1, 2)
    oracle = p.variance + p.k_star * np.max(HYP.stacked(pts)) * p.grid.dt
    assert abs(inner_value(p, th) - oracle) <= 1e-8


def test_bias_zero_for_reference_theta():
    p = problem()
    th = ThetaPath.constant(p.grid, 0.2, -0.1)
    assert np.all(bias_ode(p.model, p.grid, th, th) == 0)


def test_bias_matches_ode_quadrature():
    g = TimeGrid(1.0, 1000)
    model = scalar_model(g)
    ric = riccati_solve(model, g)
    K = ric.gain[:, 0, 0]
    th = ThetaPath.constant(g, 0.3, -0.4)
    e = bias_ode(model, g, th, ThetaPath.zero(g), ric)[:, 0]

    def rhs(t, y):
        k = min(int(t / g.dt + 1e-9), g.N - 1)
        return [-K[k] * y[0] - 0.3 + K[k] * (-0.4)]
    sol = solve_ivp(rhs, (0, 1), [0.0], t_eval=g.times, rtol=1e-11, atol=1e-13, max_step=g.dt / 2)
    assert np.max(np.abs(sol.y[0] - e)) < 1e-6
    # continuum limit: e(t) = (-theta1 sinh t + theta2 (cosh t - 1)) / cosh t
    t = g.times
    ex = (-0.3 * np.sinh(t) - 0.4 * (np.cosh(t) - 1)) / np.cosh(t)
    assert np.max(np.abs(e - ex)) < 2 * g.dt


def test_bias_weights_reproduce_bias():
    p = problem(N=50, t_star=0.6, B=-0.4, H=0.8)
    rng = np.random.default_rng(4)
    a = ThetaPath.deterministic(*rng.uniform(-0.5, 0.5, (2, 51)))
    ref = ThetaPath.deterministic(*rng.uniform(-0.5, 0.5, (2, 51)))
    W = bias_weights(p)
    d = np.concatenate([a.theta1 - ref.theta1, a.theta2 - ref.theta2], axis=1)[:p.k_star]
    e_lin = np.einsum("kij,kj->i", W, d)
    e = bias_ode(p.model, p.grid, a, ref)[p.k_star]
    assert np.allclose(e_lin, e, atol=1e-14)


def test_bias_matches_simulation():
    g = TimeGrid(1.0, 200)
    model = scalar_model(g)
    th = ThetaPath.constant(g, 0.4, -0.3)
    batch = simulate_paths(model, g, th, 10_000, 17)
    err = batch.x[:, :, 0] - classical_filter(model, g, batch.m_obs).x_hat[:, :, 0]
    e = bias_ode(model, g, th, ThetaPath.zero(g))[:, 0]
    for k in range(20, 201, 20):
        se = err[:, k].std() / np.sqrt(err.shape[0])
        assert abs(err[:, k].mean() - e[k]) <= 4 * se


def test_upper_value_zero_mu():
    p = problem(mu=0.0)
    up = upper_value(p, ThetaPath.zero(p.grid))
    assert up.value == p.variance == inner_value(p, ThetaPath.zero(p.grid))


def test_weak_duality_on_random_thetas():
    p = problem(N=100)
    ref = worst_case_theta(p)
    up = upper_value(p, ref).value
    rng = np.random.default_rng(7)
    for _ in range(100):
        th = ThetaPath.deterministic(*rng.uniform(-0.5, 0.5, (2, 101)))
        assert up >= inner_value(p, th) - 1e-12


def _fenchel_grid_oracle(p, ref, n_points=41):
    # sup_theta e^2 + alpha = sup_nu [ -nu^2 + sum_k max_theta_k (G dt + 2 nu <W_k, theta_k - ref_k>) ]
    W = bias_weights(p)[:, 0, :]
    ks = p.k_star
    refs = np.concatenate([ref.theta1, ref.theta2], axis=1)[:ks]
    ax = np.linspace(-p.mu, p.mu, n_points)
    pts = np.stack(np.meshgrid(ax, ax), axis=-1).reshape(-1, 2)
    gvals = p.G.stacked(pts) * p.grid.dt

    def value(nu):
        lin = 2 * nu * (W @ pts.T - np.sum(W * refs, axis=1)[:, None])
        return -nu ** 2 + np.sum(np.max(gvals[None] + lin, axis=1))

    nus = np.linspace(-2, 2, 2001)
    vals = np.array([value(v) for v in nus])
    i = int(np.argmax(vals))
    best = minimize_scalar(lambda v: -value(v), bounds=(nus[max(i - 1, 0)], nus[min(i + 1, 2000)]),
                           method="bounded", options={"xatol": 1e-12})
    return p.variance + max(vals[i], -best.fun)


@pytest.mark.parametrize("G", [HYP, concave_dual(GeneratorSpec.scaled_norm(0.5))])
def test_upper_value_matches_grid_oracle(G):
    p = problem(N=16, G=G, mu=0.5)
    for ref in (worst_case_theta(p), ThetaPath.constant(p.grid, 0.25, -0.125)):
        up = upper_value(p, ref).value
        oracle = _fenchel_grid_oracle(p, ref)
        assert up >= oracle - 1e-10
        assert up - oracle <= 1e-4


def test_saddle_gap_zero_at_zero_mu():
    rep = certify_saddle(problem(mu=0.0))
    assert rep.gap == 0.0 and rep.lower_value == rep.upper_value


def test_saddle_gap_decreases_with_mu():
    gaps = [certify_saddle(problem(N=200, mu=mu)).gap for mu in (0.3, 0.1, 0.03)]
    assert all(gap >= -1e-8 for gap in gaps)
    assert gaps[0] >= gaps[1] >= gaps[2]


def test_saddle_gap_stable_under_refinement():
    a = certify_saddle(problem(N=500, mu=0.3)).gap
    b = certify_saddle(problem(N=1000, mu=0.3)).gap
    assert abs(a - b) <= 1e-3


def test_saddle_upper_argmax_consistency():
    rep = certify_saddle(problem(N=100, mu=0.3))
    p = problem(N=100, mu=0.3)
    assert inner_value(p, rep.upper_theta) <= rep.lower_value + rep.gap + 1e-12


def test_robust_filter_reduces_to_classical(grid200, scalar200):
    batch = simulate_paths(scalar200, grid200, ThetaPath.zero(grid200), 5, 1)
    a = robust_filter(scalar200, grid200, ThetaPath.zero(grid200), batch.m_obs).x_hat
    b = classical_filter(scalar200, grid200, batch.m_obs).x_hat
    assert np.array_equal(a, b)


def test_robust_filter_rejects_signal_feedback(grid200, scalar200):
    fb = ThetaPath.signal_feedback(lambda t, x: (0 * x, 0 * x))
    with pytest.raises(NotAdapted):
        robust_filter(scalar200, grid200, fb, np.zeros((201, 1)))


def test_decomposition_matches_robust_filter():
    g = TimeGrid(1.0, 1000)
    model = scalar_model(g, B=-0.3)
    th = ThetaPath.constant(g, 0.3, -0.2)
    batch = simulate_paths(model, g, th, 5, 2)
    classical = classical_filter(model, g, batch.m_obs)
    rob = robust_filter(model, g, th, batch.m_obs).x_hat
    assert np.max(np.abs(decomposition(model, g, th, classical) - rob)) < 1e-6
    exact = decomposition(model, g, th, classical, method="exact")
    assert np.max(np.abs(exact - rob)) < 2 * g.dt


def test_decomposition_zero_and_linearity(grid200, scalar200):
    batch = simulate_paths(scalar200, grid200, ThetaPath.zero(grid200), 3, 1)
    c = classical_filter(scalar200, grid200, batch.m_obs)
    assert np.array_equal(decomposition(scalar200, grid200, ThetaPath.zero(grid200), c), c.x_hat)
    th = ThetaPath.deterministic(0.2 * np.sin(grid200.times), 0.1 * grid200.times)
    one = decomposition(scalar200, grid200, th, c) - c.x_hat
    two = decomposition(scalar200, grid200, th.scaled(2.0), c) - c.x_hat
    assert np.allclose(two, 2 * one, rtol=0, atol=1e-15)


def test_theta_class_membership(grid200):
    cls = ThetaClass("deterministic-piecewise-constant", 2)
    assert cls.contains(ThetaPath.constant(grid200, 0.3, 0.1), 0.5)
    assert not cls.contains(ThetaPath.constant(grid200, 0.6, 0.1), 0.5)
    assert not cls.contains(ThetaPath.signal_feedback(lambda t, x: (x, x)), 0.5)


def test_general_filter_constant_feedback_matches_robust_filter():
    g = TimeGrid(1.0, 100)
    model = scalar_model(g)
    th = ThetaPath.constant(g, 0.3, -0.2)
    batch = simulate_paths(model, g, th, 2, 3)
    rob = robust_filter(model, g, th, batch.m_obs).x_hat[:, :, 0]
    out = general_filter(model, g, th, 4000, 9, batch.m_obs)
    assert np.max(np.abs(out.corr1)) < 1e-12 and np.max(np.abs(out.corr2)) < 1e-12
    assert np.all(np.abs(out.x_hat - rob) <= 4 * out.x_hat_se + 1e-12)
    assert np.all(np.abs(out.P_particle - out.P_ode) <= 4 * out.P_particle_se + 1e-12)


def test_general_filter_clipped_feedback_self_convergence():
    g = TimeGrid(1.0, 50)
    model = scalar_model(g)
    mu = 0.5
    psi = ThetaPath.signal_feedback(lambda t, x: (mu * np.clip(x, -1, 1), mu * np.clip(x, -1, 1)))
    obs = simulate_paths(model, g, psi, 1, 4).m_obs[0]
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        small = general_filter(model, g, psi, 3000, 1, obs)
        big = general_filter(model, g, psi, 100_000, 2, obs)
    ks = np.linspace(5, 50, 10).astype(int)
    se = np.hypot(small.x_hat_se[ks], big.x_hat_se[ks])
    assert np.all(np.abs(small.x_hat[ks] - big.x_hat[ks]) <= 4 * se)


def test_general_filter_requires_scalar():
    from robustkb.model import ModelCoefficients
    g = TimeGrid(1.0, 10)
    m = ModelCoefficients.constant(g, B=np.zeros((2, 2)), H=[[1, 0]], b=[0, 0], h=[0],
                                   Q=np.eye(2), R=[[1]], x0=[0, 0])
    with pytest.raises(ValueError):
        general_filter(m, g, ThetaPath.zero(g, 2, 1), 10, 0, np.zeros((11, 1)))
