import json

import numpy as np
import pytest
from hypothesis import given, strategies as st

from robustkb.errors import DimensionMismatch, NotProper, TooManyBlocks
from robustkb.finite import (FiniteConvexOperator, FiniteSpace, Partition, brute_force_mmse,
                             check_stability, conditional_mmse, dual_objective, independence_fixture,
                             load_space, lp_norm, moment_bound_check, project_simplex,
                             property_suite, random_instance, restriction_bound, rho_eval,
                             saddle_check, stabilize, uniqueness_probe)


def two_point():
    space = FiniteSpace(np.array([0.5, 0.5]))
    return FiniteConvexOperator(space, np.array([[1.0, 1.0], [1.5, 0.5]]), np.array([0.0, 0.1]))


def single(size=5, seed=0):
    rng = np.random.default_rng(seed)
    P = rng.dirichlet(np.ones(size))
    return FiniteConvexOperator(FiniteSpace(P), np.ones((1, size)), np.zeros(1))


def test_rho_two_point_example():
    assert rho_eval(two_point(), [1.0, 0.0]) == pytest.approx(0.65, abs=1e-15)


def test_rho_constants_and_reference():
    op = two_point()
    assert rho_eval(op, [2.5, 2.5]) == pytest.approx(2.5, abs=1e-15)
    s = single()
    xi = np.arange(5.0)
    assert rho_eval(s, xi) == pytest.approx(s.space.reference_prob @ xi)
    with pytest.raises(DimensionMismatch):
        rho_eval(op, [1.0, 2.0, 3.0])


def test_operator_invariants():
    space = FiniteSpace.uniform(2)
    with pytest.raises(ValueError):
        FiniteConvexOperator(space, np.array([[1.0, 0.9]]), np.zeros(1))
    with pytest.raises(ValueError):
        FiniteConvexOperator(space, np.ones((1, 2)), np.array([0.2]))
    with pytest.raises(ValueError):
        FiniteConvexOperator(space, np.ones((1, 2)), np.zeros(1), p=2.5)
    with pytest.raises(ValueError):
        Partition([[0], [0, 1]], 2)


def test_single_density_gives_conditional_expectation():
    s = single(6)
    C = Partition.from_labels([0, 0, 1, 1, 1, 2])
    xi = np.array([1.0, -2.0, 0.5, 3.0, 1.0, 4.0])
    r = conditional_mmse(s, xi, C)
    P = s.space.reference_prob
    for b in C.blocks:
        b = list(b)
        assert r.eta_hat[b] == pytest.approx(np.full(len(b), P[b] @ xi[b] / P[b].sum()), abs=1e-12)
    bf = brute_force_mmse(s, xi, C)
    assert np.max(np.abs(bf.eta - r.eta_hat)) <= 10 * bf.resolution + 1e-12
    assert uniqueness_probe(s, xi, C) == 0.0
    assert saddle_check(s, xi, C, r).max_violation < 1e-12


def test_block_constant_xi_is_estimated_exactly():
    rng = np.random.default_rng(2)
    op, C, _ = random_instance(rng)
    xi = C.expand(rng.normal(size=C.n_blocks))
    r = conditional_mmse(op, xi, C)
    assert np.allclose(r.eta_hat, xi, atol=1e-12)
    assert r.value == pytest.approx(0.0, abs=1e-12)


def test_two_point_against_brute_force():
    op = two_point()
    xi = np.array([1.0, 0.0])
    C = Partition.trivial(2)
    r = conditional_mmse(op, xi, C)
    bf = brute_force_mmse(op, xi, C, resolution=201, rounds=6)
    assert np.max(np.abs(r.eta_hat - bf.eta)) <= 1e-8
    assert r.value == pytest.approx(rho_eval(op, (xi - r.eta_hat) ** 2), abs=1e-14)
    v = saddle_check(op, xi, C, r)
    assert v.max_violation <= 1e-8
    assert v.perturbation_increase > 0


def test_brute_force_refinement_is_monotone():
    rng = np.random.default_rng(3)
    op, C, xi = random_instance(rng)
    vals = [brute_force_mmse(op, xi, C, rounds=r).value for r in (0, 1, 2, 3)]
    assert all(a >= b for a, b in zip(vals, vals[1:]))


def test_brute_force_block_limit():
    op = single(4)
    with pytest.raises(TooManyBlocks):
        brute_force_mmse(op, np.arange(4.0), Partition.from_labels([0, 1, 2, 3]))


def test_not_proper_refused():
    space = FiniteSpace.uniform(3)
    op = FiniteConvexOperator(space, np.array([[1.0, 1.0, 1.0], [1.5, 1.5, 0.0]]), np.zeros(2))
    assert not op.proper
    with pytest.raises(NotProper):
        uniqueness_probe(op, np.arange(3.0), Partition.trivial(3))
    with pytest.raises(NotProper):
        conditional_mmse(op, np.arange(3.0), Partition.trivial(3))


def test_random_instances_solver_contract():
    rng = np.random.default_rng(11)
    for _ in range(10):
        op, C, xi = random_instance(rng)
        r = conditional_mmse(op, xi, C)
        assert r.saddle_gap >= -1e-10
        assert r.value == pytest.approx(rho_eval(op, (xi - r.eta_hat) ** 2), abs=1e-8)
        assert lp_norm(op, r.eta_hat, 2 * op.p) <= restriction_bound(op, xi, C) * (1 + 1e-12)
        # eta_hat is the conditional mean under the recovered mixture
        f = r.lambda_star @ op.densities
        for b in C.blocks:
            b = list(b)
            w = f[b] * op.space.reference_prob[b]
            assert r.eta_hat[b[0]] == pytest.approx(w @ xi[b] / w.sum(), abs=1e-8)


def test_dual_objective_concave_on_random_pairs():
    rng = np.random.default_rng(5)
    for _ in range(20):
        op, C, xi = random_instance(rng)
        a, b = rng.dirichlet(np.ones(op.n_densities), 2)
        mid = dual_objective(op, xi, C, 0.5 * (a + b))
        assert mid >= 0.5 * (dual_objective(op, xi, C, a) + dual_objective(op, xi, C, b)) - 1e-10


@given(v=st.lists(st.floats(-5, 5), min_size=1, max_size=6))
def test_simplex_projection(v):
    x = project_simplex(np.array(v))
    assert np.all(x >= 0) and x.sum() == pytest.approx(1.0)


def test_stability_examples():
    s = single(4)
    C = Partition.from_labels([0, 0, 1, 1])
    assert check_stability(s, C).stable
    space = FiniteSpace.uniform(4)
    op = FiniteConvexOperator(space, np.array([[1.0, 1.0, 1.0, 1.0], [1.6, 0.8, 1.0, 0.6]]), np.zeros(2))
    rep = check_stability(op, C)
    assert not rep.stable and rep.witnesses[0][0] == 1 and rep.witnesses[0][1] > 0
    closed = stabilize(op, C)
    assert check_stability(closed, C).stable
    assert closed.n_densities == 3


def test_generic_random_sets_are_usually_unstable():
    rng = np.random.default_rng(8)
    flags = []
    for _ in range(20):
        op, C, _ = random_instance(rng, max_densities=2)
        if op.n_densities == 2 and C.n_blocks > 1:
            flags.append(check_stability(op, C).stable)
    assert flags and sum(flags) < len(flags) / 2


def test_uniqueness_on_proper_instances():
    rng = np.random.default_rng(9)
    for _ in range(5):
        op, C, xi = random_instance(rng)
        assert uniqueness_probe(op, xi, C) <= 1e-6


def test_property_suite_examples():
    rng = np.random.default_rng(1)
    op, C, _ = random_instance(rng)
    rep = property_suite(op, C, xi=np.zeros(op.space.size))
    assert rep.passed
    base = conditional_mmse(op, np.zeros(op.space.size), C)
    assert np.all(base.eta_hat == 0)
    xi = rng.normal(size=op.space.size)
    shift = 2.5 * (C.labels == 0)
    a = conditional_mmse(op, xi, C).eta_hat
    b = conditional_mmse(op, xi + shift, C).eta_hat
    assert np.max(np.abs(b - a - shift)) <= 1e-8


def test_independence_fixture_constant_estimate():
    fix = independence_fixture(np.random.default_rng(4))
    r = conditional_mmse(fix.op, fix.xi, fix.C)
    assert np.ptp(r.block_values) <= 1e-8


def test_property_suite_random():
    rng = np.random.default_rng(12)
    for i in range(10):
        op, C, _ = random_instance(rng)
        assert property_suite(op, C, seed=i).passed


def test_moment_bound_constant_one():
    s = single(4)
    r = moment_bound_check(s, np.ones(4), 2.0)
    assert r.lhs == pytest.approx(1.0) and r.rhs == pytest.approx(1.0) and r.holds
    op = two_point()
    r = moment_bound_check(op, np.ones(2), 3.0)
    assert r.lhs >= 1 - 1e-12 and r.rhs >= 1 - 1e-12 and r.holds


def test_moment_bound_homogeneity_and_random():
    rng = np.random.default_rng(6)
    for _ in range(30):
        p = float(rng.uniform(1.1, 2.0))
        op, C, xi = random_instance(rng, p=p)
        gamma = float(rng.uniform(2, 4))
        base = moment_bound_check(op, xi, gamma)
        assert base.holds
        c = float(rng.uniform(0.2, 3))
        scaled = moment_bound_check(op, c * xi, gamma)
        k = gamma * p / 2
        assert scaled.lhs == pytest.approx(c ** k * base.lhs, rel=1e-10)
        assert scaled.rhs == pytest.approx(c ** k * base.rhs, rel=1e-10)
        assert scaled.holds
    with pytest.raises(ValueError):
        moment_bound_check(op, xi, 1.5)


@given(seed=st.integers(0, 10_000))
def test_rho_monotone_and_convex(seed):
    rng = np.random.default_rng(seed)
    op, _, xi = random_instance(rng)
    bump = np.abs(rng.normal(size=xi.size))
    assert rho_eval(op, xi + bump) >= rho_eval(op, xi)
    other = rng.normal(size=xi.size)
    mid = rho_eval(op, 0.5 * (xi + other))
    assert mid <= 0.5 * (rho_eval(op, xi) + rho_eval(op, other)) + 1e-14


def test_space_document_roundtrip():
    op = two_point()
    C = Partition.trivial(2)
    op2, C2 = load_space(json.dumps(op.to_dict(C)))
    assert np.array_equal(op2.densities, op.densities)
    assert C2.blocks == C.blocks
