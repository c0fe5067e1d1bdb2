import numpy as np
import pytest

from rcpo.cmdp import Signal, StochasticPolicy, evaluate_policy
from rcpo.envs import (
    ENV_DEFAULTS,
    EnvSpec,
    absorbing_states,
    frozenlake_holes,
    gambler_utility_table,
    make_env,
    make_frozenlake,
    make_gambler,
    make_nchain,
)
from rcpo.uncertainty import robust_policy_evaluation

ENVS = sorted(ENV_DEFAULTS)


def _nominal(cmdp, policy, signal):
    return evaluate_policy(cmdp, policy, cmdp.nominal_kernel, signal).scalar_return


@pytest.mark.parametrize("name", ENVS)
def test_signals_normalized_and_absorbing_rows_fixed(name):
    cmdp, u = make_env(name)
    assert cmdp.reward.max() == 1.0 and cmdp.utility.max() == 1.0
    assert cmdp.reward.min() >= 0 and cmdp.utility.min() >= 0
    probs = cmdp.nominal_kernel.probs
    for s in absorbing_states(cmdp):
        assert np.all(probs[s, :, s] == 1.0)
    assert u.radius == ENV_DEFAULTS[name]["radius"]


@pytest.mark.parametrize("name", ENVS)
def test_rescaling_invariance(name):
    cmdp, _ = make_env(name)
    rng = np.random.default_rng(0)
    pi = StochasticPolicy(rng.dirichlet(np.ones(cmdp.n_actions), size=cmdp.n_states))
    r_raw = cmdp.reward * cmdp.reward_scale
    v = evaluate_policy(cmdp, pi, cmdp.nominal_kernel, Signal.REWARD).v
    direct = np.linalg.solve(np.eye(cmdp.n_states) - cmdp.gamma * np.einsum("sa,sat->st", pi.probs, cmdp.nominal_kernel.probs), np.einsum("sa,sa->s", pi.probs, r_raw))
    np.testing.assert_allclose(v * cmdp.reward_scale, direct, atol=1e-9)


@pytest.mark.parametrize("name", ENVS)
def test_robust_not_above_nominal(name):
    cmdp, u = make_env(name)
    pi = StochasticPolicy.uniform(cmdp.n_states, cmdp.n_actions)
    for signal in Signal:
        assert robust_policy_evaluation(cmdp, u, pi, signal).scalar_return <= _nominal(cmdp, pi, signal) + 1e-12


def test_unknown_override_and_env_rejected():
    with pytest.raises(ValueError):
        make_env("gambler", {"colour": 1})
    with pytest.raises(ValueError):
        EnvSpec("mountaincar")
    with pytest.raises(ValueError):
        make_frozenlake({"utility_cells": [5]})


def test_gambler_transition_row():
    cmdp, _ = make_gambler()
    row = cmdp.nominal_kernel.probs[8, 3]
    assert row[12] == pytest.approx(0.6) and row[4] == pytest.approx(0.4)
    assert row.sum() == pytest.approx(1.0)


def test_gambler_certain_win():
    cmdp, _ = make_gambler({"p_head": 1.0, "radius": 0.0})
    bet_max = StochasticPolicy.deterministic(np.full(cmdp.n_states, 7), cmdp.n_actions)
    # balance 8 stakes 8 and hits 16 after one toss
    assert _nominal(cmdp, bet_max, Signal.REWARD) * cmdp.reward_scale == pytest.approx(10 * cmdp.gamma)


def test_gambler_utility_tables():
    bold = gambler_utility_table("bold_bets")
    assert bold[8, 3] == 2.0 and bold[8, 2] == 0.0 and bold[2, 7] == 0.0
    frac = gambler_utility_table("stake_fraction")
    assert frac[8, 7] == 1.0 and frac[3, 7] == pytest.approx(3 / 8)
    with pytest.raises(ValueError):
        gambler_utility_table("other")


def test_nchain_transition_row():
    cmdp, _ = make_nchain()
    row = cmdp.nominal_kernel.probs[10, 1]
    assert row[11] == pytest.approx(0.9) and row[9] == pytest.approx(0.1)


def test_nchain_always_right_utility():
    cmdp, _ = make_nchain({"slip": 0.0, "rho_mix": 0.0})
    right = StochasticPolicy.deterministic(np.ones(cmdp.n_states, dtype=int), 2)
    # right pays utility 2 on every step, including the reflecting last node
    expected = 2.0 / (1.0 - cmdp.gamma)
    assert _nominal(cmdp, right, Signal.UTILITY) * cmdp.utility_scale == pytest.approx(expected, abs=1e-9)
    reward = _nominal(cmdp, right, Signal.REWARD) * cmdp.reward_scale
    assert reward == pytest.approx(10 * cmdp.gamma ** 39 / (1 - cmdp.gamma), abs=1e-9)


def test_nchain_always_left_has_no_utility():
    cmdp, _ = make_nchain({"rho_mix": 0.0, "slip": 0.0})
    left = StochasticPolicy.deterministic(np.zeros(cmdp.n_states, dtype=int), 2)
    assert _nominal(cmdp, left, Signal.UTILITY) == 0.0


def test_frozenlake_shortest_path():
    cmdp, _ = make_frozenlake({"slip": 0.0, "radius": 0.0})
    down, right = 1, 2
    actions = np.zeros(cmdp.n_states, dtype=int)
    for cell, a in {0: down, 4: down, 8: right, 9: down, 13: right, 14: right}.items():
        actions[cell] = a
    pi = StochasticPolicy.deterministic(actions, 4)
    assert _nominal(cmdp, pi, Signal.REWARD) * cmdp.reward_scale == pytest.approx(200 * cmdp.gamma ** 6)


def test_frozenlake_holes_absorb_with_zero_signals():
    cmdp, _ = make_frozenlake()
    for h in frozenlake_holes():
        assert np.all(cmdp.nominal_kernel.probs[h, :, h] == 1.0)
        assert np.all(cmdp.reward[h] == 0) and np.all(cmdp.utility[h] == 0)


def test_frozenlake_slip_row():
    cmdp, _ = make_frozenlake()
    row = cmdp.nominal_kernel.probs[9, 2]
    # right from cell 9: intended 10, perpendicular 5 (up) and 13 (down)
    assert row[10] == pytest.approx(0.8) and row[5] == pytest.approx(0.1) and row[13] == pytest.approx(0.1)


def test_frozenlake_uniform_policy_robust_utility_strictly_lower():
    cmdp, u = make_frozenlake()
    pi = StochasticPolicy.uniform(cmdp.n_states, 4)
    robust = robust_policy_evaluation(cmdp, u, pi, Signal.UTILITY).scalar_return
    assert robust < _nominal(cmdp, pi, Signal.UTILITY) - 1e-6


@pytest.mark.parametrize("name", ENVS)
def test_uniform_initial_policy_is_well_defined(name):
    cmdp, u = make_env(name)
    pi = StochasticPolicy.uniform(cmdp.n_states, cmdp.n_actions)
    assert np.isfinite(robust_policy_evaluation(cmdp, u, pi, Signal.UTILITY).scalar_return)
