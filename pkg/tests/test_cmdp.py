import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rcpo.cmdp import (
    Kernel,
    Signal,
    StochasticPolicy,
    TabularCMDP,
    evaluate_policy,
    make_random_cmdp,
    occupancy,
    policy_kl,
    random_policy,
)

from .conftest import random_pair


def one_state(r=0.5, gamma=0.5):
    return TabularCMDP(Kernel([[[1.0]]]), reward=[[r]], utility=[[0.0]], gamma=gamma, rho=[1.0])


def test_one_state_geometric_series():
    cmdp = one_state()
    b = evaluate_policy(cmdp, StochasticPolicy([[1.0]]), cmdp.nominal_kernel, Signal.REWARD)
    np.testing.assert_allclose(b.v, [1.0])
    np.testing.assert_allclose(b.q, [[1.0]])
    np.testing.assert_allclose(b.advantage, [[0.0]])
    assert b.scalar_return == pytest.approx(1.0)


def test_zero_signal_gives_zero_values(small_cmdp):
    pi = StochasticPolicy.uniform(small_cmdp.n_states, small_cmdp.n_actions)
    zero = TabularCMDP(small_cmdp.nominal_kernel, np.zeros((4, 3)), np.zeros((4, 3)), small_cmdp.gamma, small_cmdp.rho)
    b = evaluate_policy(zero, pi, zero.nominal_kernel, Signal.UTILITY)
    assert np.all(b.v == 0) and np.all(b.q == 0)


def _monte_carlo(cmdp, pi, n_paths, horizon, rng):
    """Discounted reward of truncated rollouts; returns (mean, standard error)."""
    S, A = cmdp.n_states, cmdp.n_actions
    cum_rho = np.cumsum(cmdp.rho)
    cum_pi = np.cumsum(pi.probs, axis=1)
    cum_p = np.cumsum(cmdp.nominal_kernel.probs, axis=2)
    s = np.minimum(np.searchsorted(cum_rho, rng.random(n_paths)), S - 1)
    total = np.zeros(n_paths)
    disc = 1.0
    for _ in range(horizon):
        a = np.minimum((rng.random(n_paths)[:, None] > cum_pi[s]).sum(axis=1), A - 1)
        total += disc * cmdp.reward[s, a]
        s = np.minimum((rng.random(n_paths)[:, None] > cum_p[s, a]).sum(axis=1), S - 1)
        disc *= cmdp.gamma
    return total.mean(), total.std(ddof=1) / math.sqrt(n_paths)


def test_value_matches_monte_carlo():
    base = make_random_cmdp(11, 4, 2)
    # a smaller discount keeps the truncation bias negligible at a short horizon
    cmdp = TabularCMDP(base.nominal_kernel, base.reward, base.utility, 0.8, base.rho)
    pi = random_policy(np.random.default_rng(5), 4, 2)
    exact = evaluate_policy(cmdp, pi, cmdp.nominal_kernel, Signal.REWARD).scalar_return
    mean, se = _monte_carlo(cmdp, pi, 1_000_000, 120, np.random.default_rng(0))
    assert abs(mean - exact) <= 3 * se


def test_occupancy_tiny_gamma_is_rho(small_cmdp):
    cmdp = TabularCMDP(small_cmdp.nominal_kernel, small_cmdp.reward, small_cmdp.utility, 1e-12, small_cmdp.rho)
    pi = StochasticPolicy.uniform(4, 3)
    np.testing.assert_allclose(occupancy(cmdp, pi, cmdp.nominal_kernel), cmdp.rho, atol=1e-10)


def test_occupancy_one_state():
    cmdp = one_state()
    np.testing.assert_allclose(occupancy(cmdp, StochasticPolicy([[1.0]]), cmdp.nominal_kernel), [1.0])


def test_occupancy_matches_truncated_sum():
    cmdp, pi, _ = random_pair(21, 5, 3)
    p_pi = np.einsum("sa,sat->st", pi.probs, cmdp.nominal_kernel.probs)
    horizon = int(math.ceil(math.log(1e-13) / math.log(cmdp.gamma)))
    dist, oracle = cmdp.rho.copy(), np.zeros(5)
    for t in range(max(horizon, 200)):
        oracle += (1 - cmdp.gamma) * cmdp.gamma**t * dist
        dist = dist @ p_pi
    np.testing.assert_allclose(occupancy(cmdp, pi, cmdp.nominal_kernel), oracle, atol=1e-8)


def test_policy_kl_cases():
    p = StochasticPolicy([[0.3, 0.7], [0.5, 0.5]])
    assert policy_kl(p, p, np.array([0.5, 0.5])) == 0.0
    assert policy_kl(StochasticPolicy([[1.0, 0.0]]), StochasticPolicy([[0.5, 0.5]]), np.array([1.0])) == pytest.approx(math.log(2))
    assert policy_kl(StochasticPolicy([[0.5, 0.5]]), StochasticPolicy([[1.0, 0.0]]), np.array([1.0])) == math.inf


def test_policy_kl_matches_direct_summation():
    rng = np.random.default_rng(3)
    p, q = random_policy(rng, 3, 4), random_policy(rng, 3, 4)
    w = rng.dirichlet(np.ones(3))
    oracle = sum(w[s] * p.probs[s, a] * math.log(p.probs[s, a] / q.probs[s, a]) for s in range(3) for a in range(4))
    assert policy_kl(p, q, w) == pytest.approx(oracle, abs=1e-12)


def test_random_cmdp_determinism_and_shapes():
    a, b = make_random_cmdp(0, 5, 3), make_random_cmdp(0, 5, 3)
    assert np.array_equal(a.nominal_kernel.probs, b.nominal_kernel.probs)
    assert np.array_equal(a.reward, b.reward) and a.gamma == b.gamma
    assert np.array_equal(make_random_cmdp(4, 1, 1).nominal_kernel.probs, [[[1.0]]])
    c = make_random_cmdp(7, 4, 3)
    assert np.max(np.abs(c.nominal_kernel.probs.sum(axis=2) - 1)) <= 1e-12
    assert 0.8 <= c.gamma <= 0.99 and c.threshold_d == 0.0


def test_constructor_rejects_bad_inputs(small_cmdp):
    with pytest.raises(ValueError):
        TabularCMDP(small_cmdp.nominal_kernel, small_cmdp.reward * 2, small_cmdp.utility, 0.9, small_cmdp.rho)
    with pytest.raises(ValueError):
        TabularCMDP(small_cmdp.nominal_kernel, small_cmdp.reward, small_cmdp.utility, 1.0, small_cmdp.rho)
    with pytest.raises(ValueError):
        Kernel(np.full((2, 1, 2), 0.6))
    with pytest.raises(ValueError):
        evaluate_policy(small_cmdp, StochasticPolicy.uniform(3, 3), small_cmdp.nominal_kernel, Signal.REWARD)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10_000), n_states=st.integers(1, 6), n_actions=st.integers(1, 4))
def test_advantage_is_zero_mean_and_bounded(seed, n_states, n_actions):
    cmdp, pi, _ = random_pair(seed, n_states, n_actions)
    for signal in Signal:
        b = evaluate_policy(cmdp, pi, cmdp.nominal_kernel, signal)
        assert np.max(np.abs(np.einsum("sa,sa->s", pi.probs, b.advantage))) <= 1e-9
        assert np.all(b.v >= -1e-12) and np.all(b.v <= 1 / (1 - cmdp.gamma) + 1e-9)
        assert b.residual <= 1e-9 * n_states


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10_000), n_states=st.integers(1, 6), n_actions=st.integers(1, 4))
def test_performance_difference_identity(seed, n_states, n_actions):
    cmdp, pi, rng = random_pair(seed, n_states, n_actions)
    pi2 = random_policy(rng, n_states, n_actions)
    p = cmdp.nominal_kernel
    old, new = evaluate_policy(cmdp, pi, p, Signal.REWARD), evaluate_policy(cmdp, pi2, p, Signal.REWARD)
    d_new = occupancy(cmdp, pi2, p)
    rhs = d_new @ np.einsum("sa,sa->s", pi2.probs, old.advantage) / (1 - cmdp.gamma)
    assert new.scalar_return - old.scalar_return == pytest.approx(rhs, abs=1e-8)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10_000), n_states=st.integers(1, 6), n_actions=st.integers(1, 4))
def test_return_equals_occupancy_average(seed, n_states, n_actions):
    cmdp, pi, _ = random_pair(seed, n_states, n_actions)
    d = occupancy(cmdp, pi, cmdp.nominal_kernel)
    assert np.all(d >= 0) and abs(d.sum() - 1) <= 1e-9
    ret = evaluate_policy(cmdp, pi, cmdp.nominal_kernel, Signal.UTILITY).scalar_return
    assert ret == pytest.approx(d @ np.einsum("sa,sa->s", pi.probs, cmdp.utility) / (1 - cmdp.gamma), abs=1e-8)
