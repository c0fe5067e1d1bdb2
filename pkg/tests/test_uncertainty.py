import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rcpo.cmdp import Kernel, Signal, StochasticPolicy, TabularCMDP, evaluate_policy, make_random_cmdp, random_policy
from rcpo.envs import make_env
from rcpo.uncertainty import (
    Divergence,
    UncertaintySet,
    kernel_value_gradient,
    parse_schedule,
    project_kernel,
    robust_bellman_operator,
    robust_policy_evaluation,
    robust_value_iteration,
    support_min,
    worst_kernel_pgd,
)

from .conftest import random_pair
from .oracles import finite_difference_gradient, grid_support_min, kl_rows, simplex_grid, tv_rows, tv_vertex_robust_return


@pytest.mark.parametrize("div", ["KL", "TV"])
def test_support_radius_zero_is_nominal(div):
    v, p0 = np.array([0.3, 2.0, -1.0]), np.array([0.2, 0.5, 0.3])
    value, q = support_min(v, p0, 0.0, div)
    assert value == pytest.approx(p0 @ v, abs=1e-12)
    np.testing.assert_allclose(q, p0, atol=1e-12)


@pytest.mark.parametrize("div", ["KL", "TV"])
def test_support_of_constant_vector(div):
    value, q = support_min(np.full(4, 2.5), np.array([0.1, 0.2, 0.3, 0.4]), 0.3, div)
    assert value == pytest.approx(2.5, abs=1e-12)
    assert abs(q.sum() - 1) < 1e-12


def test_tv_support_two_states_grid():
    v, p0 = np.array([0.0, 1.0]), np.array([0.5, 0.5])
    value, q = support_min(v, p0, 0.2, "TV")
    grid = np.linspace(0, 1, 10_001)
    pts = np.stack([grid, 1 - grid], axis=1)
    oracle = np.min((pts @ v)[tv_rows(pts, p0) <= 0.2 + 1e-12])
    assert value == pytest.approx(oracle, abs=1e-3)
    assert value == pytest.approx(0.3, abs=1e-12)


@pytest.mark.parametrize("div", ["KL", "TV"])
def test_support_matches_grid_oracle(div):
    rng = np.random.default_rng(8)
    for _ in range(20):
        v, p0, radius = rng.uniform(0, 1, 3), rng.dirichlet(np.ones(3)), rng.uniform(0, 0.5)
        value, q = support_min(v, p0, radius, div)
        oracle = grid_support_min(v, p0, radius, div)
        assert value <= oracle + 1e-12
        assert oracle - value <= 1e-3
        membership = kl_rows(q, p0) if div == "KL" else tv_rows(q, p0)
        assert membership <= radius + 1e-9
        assert value <= p0 @ v + 1e-12


def test_support_rejects_bad_input():
    with pytest.raises(ValueError):
        support_min(np.array([0.0, np.nan]), np.array([0.5, 0.5]), 0.1, "KL")
    with pytest.raises(ValueError):
        support_min(np.array([0.0, 1.0]), np.array([0.7, 0.5]), 0.1, "TV")


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000), div=st.sampled_from(["KL", "TV"]))
def test_support_convex_nonincreasing_in_radius(seed, div):
    rng = np.random.default_rng(seed)
    v, p0 = rng.uniform(0, 1, 4), rng.dirichlet(np.ones(4))
    radii = np.linspace(0, 0.6, 13)
    vals = np.array([support_min(v, p0, r, div)[0] for r in radii])
    assert np.all(np.diff(vals) <= 1e-12)
    # the optimal value of a convex program is convex in its constraint level
    assert np.all(vals[1:-1] <= 0.5 * (vals[:-2] + vals[2:]) + 1e-9)


def test_robust_eval_radius_zero_equals_nominal():
    cmdp, pi, _ = random_pair(2, 5, 3)
    for div in Divergence:
        res = robust_policy_evaluation(cmdp, UncertaintySet(div, 0.0, cmdp.nominal_kernel), pi, Signal.REWARD)
        nominal = evaluate_policy(cmdp, pi, cmdp.nominal_kernel, Signal.REWARD)
        np.testing.assert_allclose(res.v_robust, nominal.v, atol=1e-8)


def test_robust_eval_zero_signal():
    cmdp, pi, _ = random_pair(4, 4, 2)
    zero = TabularCMDP(cmdp.nominal_kernel, np.zeros((4, 2)), np.zeros((4, 2)), cmdp.gamma, cmdp.rho)
    res = robust_policy_evaluation(zero, UncertaintySet("KL", 0.3, zero.nominal_kernel), pi, Signal.REWARD)
    assert np.all(res.v_robust == 0)


def test_robust_eval_matches_tv_vertex_enumeration():
    cmdp, pi, _ = random_pair(17, 3, 2)
    u = UncertaintySet("TV", 0.1, cmdp.nominal_kernel)
    res = robust_policy_evaluation(cmdp, u, pi, Signal.REWARD)
    assert res.scalar_return == pytest.approx(tv_vertex_robust_return(cmdp, pi, 0.1), abs=1e-6)


@pytest.mark.parametrize("method", ["policy_iteration", "value_iteration"])
def test_robust_eval_methods_and_certificate(method):
    cmdp, pi, _ = random_pair(9, 5, 3)
    for div in Divergence:
        u = UncertaintySet(div, 0.15, cmdp.nominal_kernel)
        res = robust_policy_evaluation(cmdp, u, pi, Signal.UTILITY, method=method)
        assert u.contains(res.worst_kernel)
        again = evaluate_policy(cmdp, pi, res.worst_kernel, Signal.UTILITY).v
        np.testing.assert_allclose(again, res.v_robust, atol=1e-8)
        nominal = evaluate_policy(cmdp, pi, cmdp.nominal_kernel, Signal.UTILITY).v
        assert np.all(res.v_robust <= nominal + 1e-9)


def test_robust_bellman_contraction():
    cmdp, pi, _ = random_pair(31, 5, 3)
    u = UncertaintySet("KL", 0.2, cmdp.nominal_kernel)
    rng = np.random.default_rng(0)
    v, w = rng.uniform(0, 5, 5), rng.uniform(0, 5, 5)
    for _ in range(20):
        tv, _ = robust_bellman_operator(cmdp, u, pi, Signal.REWARD, v)
        tw, _ = robust_bellman_operator(cmdp, u, pi, Signal.REWARD, w)
        assert np.max(np.abs(tv - tw)) <= (cmdp.gamma + 1e-9) * np.max(np.abs(v - w)) + 1e-12
        v, w = tv, tw


def _classical_vi(cmdp):
    v = np.zeros(cmdp.n_states)
    while True:
        new = (cmdp.reward + cmdp.gamma * cmdp.nominal_kernel.probs @ v).max(axis=1)
        if np.max(np.abs(new - v)) < 1e-12:
            return new
        v = new


def test_rvi_radius_zero_is_classical_vi():
    cmdp = make_random_cmdp(5, 5, 3)
    v, greedy = robust_value_iteration(cmdp, UncertaintySet("KL", 0.0, cmdp.nominal_kernel))
    np.testing.assert_allclose(v, _classical_vi(cmdp), atol=1e-8)
    assert np.all(greedy.probs.max(axis=1) == 1.0)


def test_rvi_one_action_equals_policy_evaluation():
    cmdp = make_random_cmdp(6, 4, 1)
    u = UncertaintySet("KL", 0.2, cmdp.nominal_kernel)
    v, pi = robust_value_iteration(cmdp, u)
    np.testing.assert_allclose(v, robust_policy_evaluation(cmdp, u, pi, Signal.REWARD).v_robust, atol=1e-8)


def test_rvi_gambler_monotone_in_radius():
    returns = []
    for radius in (0.0, 0.05, 0.1):
        cmdp, u = make_env("gambler", {"radius": radius})
        v, _ = robust_value_iteration(cmdp, u)
        returns.append(cmdp.rho @ v)
    assert returns[0] >= returns[1] >= returns[2]


def test_gradient_zero_signal_and_unreachable_state():
    cmdp, pi, _ = random_pair(3, 4, 2)
    zero = TabularCMDP(cmdp.nominal_kernel, np.zeros((4, 2)), np.zeros((4, 2)), cmdp.gamma, cmdp.rho)
    assert np.all(kernel_value_gradient(zero, pi, zero.nominal_kernel, Signal.REWARD) == 0)
    # state 3 is never entered and has no initial mass
    probs = np.array(cmdp.nominal_kernel.probs)
    probs[:, :, 3] = 0.0
    probs /= probs.sum(axis=2, keepdims=True)
    rho = np.array([0.5, 0.5, 0.0, 0.0])
    iso = TabularCMDP(Kernel(probs), cmdp.reward, cmdp.utility, cmdp.gamma, rho)
    grad = kernel_value_gradient(iso, pi, iso.nominal_kernel, Signal.REWARD)
    assert np.all(grad[3] == 0)


def test_gradient_matches_finite_differences():
    for seed in range(10):
        cmdp, pi, _ = random_pair(100 + seed, 4, 2)
        g = kernel_value_gradient(cmdp, pi, cmdp.nominal_kernel, Signal.REWARD)
        fd = finite_difference_gradient(cmdp, pi, cmdp.nominal_kernel, Signal.REWARD)
        assert np.linalg.norm(g - fd) <= 1e-4 * np.linalg.norm(fd)


@pytest.mark.parametrize("div", ["KL", "TV"])
def test_project_kernel_keeps_interior_and_covers_simplex(div):
    cmdp = make_random_cmdp(12, 3, 2)
    u = UncertaintySet(div, 0.1, cmdp.nominal_kernel)
    assert np.array_equal(project_kernel(cmdp.nominal_kernel, u).probs, cmdp.nominal_kernel.probs)
    other = make_random_cmdp(13, 3, 2).nominal_kernel
    big = UncertaintySet(div, 1e6, cmdp.nominal_kernel)
    np.testing.assert_allclose(project_kernel(other, big).probs, other.probs, atol=1e-15)


def test_tv_projection_matches_grid():
    p0 = np.array([0.5, 0.3, 0.2])
    row = np.array([0.1, 0.2, 0.7])
    u = UncertaintySet("TV", 0.1, Kernel(p0[None, None, :].repeat(3, axis=0)))
    proj = project_kernel(np.tile(row, (3, 1, 1)), u).probs[0, 0]
    assert tv_rows(proj, p0) <= 0.1 + 1e-8
    grid = simplex_grid(1e-3)
    grid = grid[tv_rows(grid, p0) <= 0.1 + 1e-12]
    best = np.min(np.linalg.norm(grid - row, axis=1))
    assert np.linalg.norm(proj - row) <= best + 2e-3


def test_kl_projection_lands_on_boundary():
    cmdp = make_random_cmdp(14, 4, 3)
    u = UncertaintySet("KL", 0.05, cmdp.nominal_kernel)
    far = make_random_cmdp(15, 4, 3).nominal_kernel
    proj = project_kernel(far, u)
    div = u.row_divergences(proj)
    outside = u.row_divergences(far) > 0.05
    assert np.all(div <= 0.05 + 1e-9)
    np.testing.assert_allclose(div[outside], 0.05, atol=1e-8)


def test_pgd_trivial_cases():
    cmdp, pi, _ = random_pair(1, 4, 2)
    res = worst_kernel_pgd(cmdp, pi, UncertaintySet("KL", 0.0, cmdp.nominal_kernel), Signal.REWARD, 10)
    assert res.kernel is cmdp.nominal_kernel
    one = make_random_cmdp(2, 1, 2)
    res = worst_kernel_pgd(one, StochasticPolicy.uniform(1, 2), UncertaintySet("KL", 0.3, one.nominal_kernel), Signal.REWARD, 10)
    assert np.array_equal(res.kernel.probs, one.nominal_kernel.probs)
    with pytest.raises(ValueError):
        worst_kernel_pgd(cmdp, pi, UncertaintySet("KL", 0.1, cmdp.nominal_kernel), Signal.REWARD, 0)


@pytest.mark.parametrize("schedule", ["constant:0.1", "constant:1.0"])
def test_pgd_gambler_matches_robust_evaluation(schedule):
    cmdp, u = make_env("gambler", {"radius": 0.1})
    pi = StochasticPolicy.uniform(cmdp.n_states, cmdp.n_actions)
    for signal in Signal:
        res = worst_kernel_pgd(cmdp, pi, u, signal, 200, parse_schedule(schedule))
        oracle = robust_policy_evaluation(cmdp, u, pi, signal).scalar_return
        assert u.contains(res.kernel)
        assert res.scalar_return >= oracle - 1e-9
        assert res.scalar_return - oracle <= 1e-3


@pytest.mark.parametrize("normalize", ["global", "none"])
def test_pgd_other_normalizations_descend(normalize):
    cmdp, pi, _ = random_pair(40, 4, 2)
    u = UncertaintySet("TV", 0.1, cmdp.nominal_kernel)
    res = worst_kernel_pgd(cmdp, pi, u, Signal.REWARD, 50, parse_schedule("constant:0.1"), normalize=normalize)
    nominal = evaluate_policy(cmdp, pi, cmdp.nominal_kernel, Signal.REWARD).scalar_return
    oracle = robust_policy_evaluation(cmdp, u, pi, Signal.REWARD).scalar_return
    assert oracle - 1e-9 <= res.scalar_return <= nominal
    assert u.contains(res.kernel)


def test_schedule_parsing():
    assert parse_schedule("constant:0.5")(7) == 0.5
    assert parse_schedule("decay:0.1:50")(50) == pytest.approx(0.05)
    for bad in ("linear:1", "constant", "decay:a:b"):
        with pytest.raises(ValueError):
            parse_schedule(bad)
