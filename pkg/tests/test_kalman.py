import numpy as np
import pytest
from hypothesis import given, strategies as st

from robustkb.errors import GridMismatch
from robustkb.kalman import classical_filter, discrete_kalman_oracle, riccati_solve
from robustkb.model import ModelCoefficients, TimeGrid, scalar_model
from robustkb.sim import ThetaPath, simulate_paths


def test_unit_scalar_riccati_is_tanh():
    g = TimeGrid(1.0, 1000)
    P = riccati_solve(scalar_model(g), g).P[:, 0, 0]
    assert np.max(np.abs(P - np.tanh(g.times))) < 1e-10


@given(B=st.floats(-1, 1), R=st.floats(0.2, 3))
def test_no_signal_noise_means_zero_covariance(B, R):
    g = TimeGrid(1.0, 50)
    assert np.all(riccati_solve(scalar_model(g, B=B, Q=0.0, R=R), g).P == 0)


@given(Q=st.floats(0, 3))
def test_uninformative_observation_integrates_q(Q):
    g = TimeGrid(2.0, 40)
    P = riccati_solve(scalar_model(g, H=0.0, Q=Q), g).P[:, 0, 0]
    assert np.allclose(P, Q * g.times, rtol=1e-12, atol=1e-14)


def test_uninformative_filter_follows_prior_mean():
    g = TimeGrid(1.0, 100)
    model = scalar_model(g, H=0.0, b=0.3, x0=1.0)
    b = simulate_paths(model, g, ThetaPath.zero(g), 3, 1)
    out = classical_filter(model, g, b.m_obs)
    assert np.allclose(out.x_hat[:, :, 0], 1.0 + 0.3 * g.times, atol=1e-12)


def test_riccati_nonnegative_and_symmetric():
    g = TimeGrid(1.0, 200)
    model = ModelCoefficients.constant(
        g, B=[[-0.5, 1.0], [0.0, -0.2]], H=[[1.0, 0.5]], b=[0, 0], h=[0],
        Q=[[1.0, 0.2], [0.2, 0.5]], R=[[0.7]], x0=[0, 0])
    P = riccati_solve(model, g).P
    assert np.allclose(P, np.transpose(P, (0, 2, 1)))
    assert np.min(np.linalg.eigvalsh(P)) > -1e-12


def test_riccati_monotone_in_q():
    g = TimeGrid(1.0, 200)
    lo = riccati_solve(scalar_model(g, Q=0.5), g).P[:, 0, 0]
    hi = riccati_solve(scalar_model(g, Q=1.5), g).P[:, 0, 0]
    assert np.all(hi >= lo)


def test_error_variance_matches_riccati_by_simulation():
    g = TimeGrid(1.0, 200)
    model = scalar_model(g, B=-0.5)
    batch = simulate_paths(model, g, ThetaPath.zero(g), 20_000, 2)
    out = classical_filter(model, g, batch.m_obs)
    err = batch.x[:, :, 0] - out.x_hat[:, :, 0]
    P = out.P.P[:, 0, 0]
    for k in (50, 100, 200):
        e2 = err[:, k] ** 2
        assert abs(e2.mean() - P[k]) <= 4 * e2.std() / np.sqrt(e2.size) + 2 * g.dt
    assert abs(err[:, -1].mean()) <= 4 * err[:, -1].std() / np.sqrt(err.shape[0])


def test_discrete_oracle_agrees_to_first_order():
    diffs = []
    for N in (100, 400, 1600):
        g = TimeGrid(1.0, N)
        model = scalar_model(g, B=-0.3, x0=0.5)
        batch = simulate_paths(model, g, ThetaPath.zero(g), 20, 3)
        out = classical_filter(model, g, batch.m_obs).x_hat
        diffs.append(np.max(np.abs(out - discrete_kalman_oracle(model, g, batch.m_obs))))
    assert diffs[0] > diffs[1] > diffs[2]
    assert diffs[2] < 0.01


def test_single_and_batch_inputs_agree(grid200, scalar200):
    batch = simulate_paths(scalar200, grid200, ThetaPath.zero(grid200), 4, 1)
    stack = classical_filter(scalar200, grid200, batch.m_obs).x_hat
    one = classical_filter(scalar200, grid200, batch.m_obs[2]).x_hat
    assert np.array_equal(stack[2], one)


def test_grid_mismatch(grid200, scalar200):
    with pytest.raises(GridMismatch):
        classical_filter(scalar200, grid200, np.zeros((100, 1)))
    with pytest.raises(GridMismatch):
        riccati_solve(scalar200, TimeGrid(1.0, 100))
