"""Non-robust baselines: CPO and PCPO under the nominal kernel, and robust value iteration.

All three produce traces with the same :class:`~rcpo.solver.IterationRecord`
schema as RCPO, with robust returns measured by the same robust evaluation.
"""

from __future__ import annotations

import math
from enum import Enum

import numpy as np

from .cmdp import Signal, StochasticPolicy, TabularCMDP, evaluate_policy, occupancy
from .solver import (
    IterationRecord,
    Proposal,
    RcpoConfig,
    Update,
    _trust_region_tilt,
    improvement_step,
    linearized_constraint,
    projection_step,
    rcpo_train,
    recovery_step,
    run_updates,
)
from .uncertainty import UncertaintySet, robust_policy_evaluation, robust_value_sweeps


class BaselineKind(str, Enum):
    CPO = "CPO"
    PCPO = "PCPO"
    RVI = "RVI"


def cpo_update(
    cmdp: TabularCMDP,
    pi_k: StochasticPolicy,
    delta: float,
    tol: float = 1e-10,
    unscaled_constraint: bool = False,
    threshold: float | None = None,
) -> Update:
    """One CPO step under the nominal kernel.

    Maximizes the occupancy-weighted reward advantage subject to both the
    averaged-KL trust region and the linearized utility constraint. For a
    utility multiplier nu the KL-constrained optimum is the trust-region tilt of
    ``A_r + nu * w * A_c``; nu is found by bisection so the utility constraint is
    active. When even nu -> inf (pure utility ascent inside the trust region)
    misses the constraint, that ascent step is returned and flagged.
    """
    if not delta > 0:
        raise ValueError("delta must be > 0")
    nominal = cmdp.nominal_kernel
    adv_r = evaluate_policy(cmdp, pi_k, nominal, Signal.REWARD).advantage
    d = occupancy(cmdp, pi_k, nominal)
    con = linearized_constraint(cmdp, pi_k, nominal, unscaled_constraint, threshold)
    # objective and KL share the occupancy, so the utility weight is the constant scale
    w_adv_c = con.scale * con.advantage

    def policy_at(nu: float) -> np.ndarray:
        rows, _, _ = _trust_region_tilt(pi_k.probs, adv_r + nu * w_adv_c, d, delta, tol)
        return rows

    free = policy_at(0.0)
    if con(free) >= con.threshold:
        return Update(StochasticPolicy(free), 0.0, ())
    ascent = recovery_step(pi_k, d, con, delta, tol)
    if con(ascent) < con.threshold:
        return Update(StochasticPolicy(ascent), math.inf, ("cpo_infeasible",))
    lo, hi = 0.0, 1.0
    for _ in range(200):
        if con(policy_at(hi)) >= con.threshold:
            break
        lo, hi = hi, hi * 2.0
    else:
        return Update(StochasticPolicy(ascent), math.inf, ("cpo_infeasible",))
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        slack = con(policy_at(mid)) - con.threshold
        if slack >= 0:
            hi = mid
            if slack <= tol:
                break
        else:
            lo = mid
        if hi - lo <= 1e-15 * hi:
            break
    return Update(StochasticPolicy(policy_at(hi)), hi, ())


def pcpo_update(
    cmdp: TabularCMDP,
    pi_k: StochasticPolicy,
    delta: float,
    tol: float = 1e-10,
    unscaled_constraint: bool = False,
) -> Update:
    """Improvement step then KL projection, both under the nominal kernel."""
    nominal = cmdp.nominal_kernel
    half = improvement_step(cmdp, None, pi_k, nominal, delta, tol)
    proj = projection_step(cmdp, None, pi_k, half.policy, nominal, nominal, tol, unscaled_constraint, recovery_delta=delta)
    return Update(proj.policy, proj.multiplier, half.flags + proj.flags)


def cpo_train(
    cmdp: TabularCMDP,
    u: UncertaintySet,
    config: RcpoConfig,
    pi_0: StochasticPolicy | None = None,
    eval_every: int = 1,
) -> tuple[StochasticPolicy, list[IterationRecord]]:
    nominal = cmdp.nominal_kernel

    def propose(pi: StochasticPolicy) -> Proposal:
        step = cpo_update(cmdp, pi, config.delta, config.dual_bisection_tol, config.unscaled_constraint)
        return Proposal(step.policy, step.policy, nominal, nominal, step.flags)

    return run_updates(cmdp, u, config, propose, pi_0, eval_every, check_eps=False)


def pcpo_train(
    cmdp: TabularCMDP,
    u: UncertaintySet,
    config: RcpoConfig,
    pi_0: StochasticPolicy | None = None,
    eval_every: int = 1,
) -> tuple[StochasticPolicy, list[IterationRecord]]:
    return rcpo_train(cmdp, u, config, pi_0, kernels="nominal", eval_every=eval_every)


def rvi_train(
    cmdp: TabularCMDP,
    u: UncertaintySet,
    config: RcpoConfig,
    pi_0: StochasticPolicy | None = None,
    eval_every: int = 1,
) -> tuple[StochasticPolicy, list[IterationRecord]]:
    """Robust value iteration on the reward; iteration k records the greedy policy after sweep k.

    The trust-region and theorem diagnostics do not apply and are NaN. ``pi_0``
    is accepted for interface symmetry and ignored.
    """
    if eval_every < 1:
        raise ValueError("eval_every must be >= 1")
    trace: list[IterationRecord] = []
    policy = StochasticPolicy.uniform(cmdp.n_states, cmdp.n_actions)
    sweeps = robust_value_sweeps(cmdp, u, Signal.REWARD)
    nan = math.nan
    prev_c = robust_policy_evaluation(cmdp, u, policy, Signal.UTILITY).scalar_return
    for k in range(1, config.max_iterations + 1):
        _, greedy, _ = next(sweeps)
        if k % eval_every and k != config.max_iterations:
            continue
        policy = StochasticPolicy.deterministic(greedy, cmdp.n_actions)
        rob_r = robust_policy_evaluation(cmdp, u, policy, Signal.REWARD).scalar_return
        rob_c = robust_policy_evaluation(cmdp, u, policy, Signal.UTILITY).scalar_return
        trace.append(
            IterationRecord(
                iteration=k,
                robust_reward_return=rob_r,
                robust_utility_return=rob_c,
                nominal_reward_return=evaluate_policy(cmdp, policy, u.nominal, Signal.REWARD).scalar_return,
                nominal_utility_return=evaluate_policy(cmdp, policy, u.nominal, Signal.UTILITY).scalar_return,
                b=cmdp.threshold_d - prev_c,
                realized_kl_step=nan,
                eps_reward=nan,
                eps_utility=nan,
                m_estimate=nan,
                theorem_reward_rhs=nan,
                theorem_utility_rhs=nan,
                bounds_hold=(True, True),
                kl_lemma_ok=True,
                flags=("not_applicable",),
            )
        )
        prev_c = rob_c
    return policy, trace


TRAINERS = {
    "RCPO": rcpo_train,
    BaselineKind.CPO.value: cpo_train,
    BaselineKind.PCPO.value: pcpo_train,
    BaselineKind.RVI.value: rvi_train,
}


__all__ = [
    "BaselineKind",
    "TRAINERS",
    "cpo_train",
    "cpo_update",
    "pcpo_train",
    "pcpo_update",
    "rvi_train",
]
