"""Robust constrained policy optimization on tabular CMDPs.

One iteration estimates the reward and utility worst-case kernels of the
current policy by projected gradient descent, takes a KL trust-region step on
the reward advantage, and KL-projects the result onto the linearized robust
utility constraint. ``mode="practical_parametric"`` replaces the two exact
subproblems with the closed-form natural-gradient update over softmax logits.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, fields
from typing import NamedTuple

import numpy as np

from .cmdp import (
    Kernel,
    Signal,
    StochasticPolicy,
    TabularCMDP,
    evaluate_policy,
    occupancy,
    policy_kl,
    policy_kl_per_state,
)
from .uncertainty import (
    DEFAULT_SCHEDULE,
    RobustEvalResult,
    UncertaintySet,
    parse_schedule,
    robust_policy_evaluation,
    worst_kernel_pgd,
)

log = logging.getLogger(__name__)

MODES = ("exact_tabular", "practical_parametric")
TIE_TOL = 1e-12


@dataclass(frozen=True)
class RcpoConfig:
    delta: float = 0.01
    pgd_steps: int = 200
    pgd_schedule: str = DEFAULT_SCHEDULE
    max_iterations: int = 100
    eps_tol: float = 1e-3
    mode: str = "exact_tabular"
    dual_bisection_tol: float = 1e-10
    # drop the 1/(1-gamma) factor from the linearized utility constraint
    unscaled_constraint: bool = False
    hessian_reg: float = 1e-6
    # optional per-seed perturbation of the uniform initial policy logits
    init_noise: float = 0.0

    def __post_init__(self):
        if not self.delta > 0:
            raise ValueError("delta must be > 0")
        if not self.eps_tol > 0:
            raise ValueError("eps_tol must be > 0")
        if self.max_iterations < 0:
            raise ValueError("max_iterations must be >= 0")
        if self.pgd_steps < 1:
            raise ValueError("pgd_steps must be >= 1")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if not self.dual_bisection_tol > 0:
            raise ValueError("dual_bisection_tol must be > 0")
        parse_schedule(self.pgd_schedule)

    @property
    def schedule(self):
        return parse_schedule(self.pgd_schedule)


@dataclass
class IterationRecord:
    """Diagnostics for the update pi_{k-1} -> pi_k (``iteration`` = k, 1-based).

    Returns are those of the updated policy; ``b`` is the slack of the policy
    that was updated.
    """

    iteration: int
    robust_reward_return: float
    robust_utility_return: float
    nominal_reward_return: float
    nominal_utility_return: float
    b: float
    realized_kl_step: float
    eps_reward: float
    eps_utility: float
    m_estimate: float
    theorem_reward_rhs: float
    theorem_utility_rhs: float
    bounds_hold: tuple[bool, bool]
    kl_lemma_ok: bool = True
    alpha_kl: float = math.nan
    m_prime: float = math.nan
    flags: tuple[str, ...] = field(default_factory=tuple)

    @property
    def previous_feasible(self) -> bool:
        return self.b <= 0


class Update(NamedTuple):
    policy: StochasticPolicy
    multiplier: float
    flags: tuple[str, ...]


# --------------------------------------------------------------------------- tilts


def _normalize_rows(w: np.ndarray) -> np.ndarray:
    w = np.clip(w, 0.0, None)
    return w / w.sum(axis=1, keepdims=True)


def _tilt(base: np.ndarray, scores: np.ndarray, inv_temp: float) -> np.ndarray:
    """Rows proportional to base * exp(inv_temp * scores), restricted to the support of base."""
    support = base > 0
    logits = np.where(support, inv_temp * scores, -np.inf)
    logits = logits - logits.max(axis=1, keepdims=True)
    return _normalize_rows(np.where(support, base * np.exp(logits), 0.0))


def _argmax_rows(base: np.ndarray, scores: np.ndarray) -> np.ndarray:
    """Zero-temperature tilt: base restricted to the best-scoring actions in its support."""
    support = base > 0
    masked = np.where(support, scores, -np.inf)
    best = masked.max(axis=1, keepdims=True)
    top = support & (masked >= best - TIE_TOL * np.maximum(1.0, np.abs(best)))
    return _normalize_rows(np.where(top, base, 0.0))


def _weighted_kl(p: np.ndarray, q: np.ndarray, weights: np.ndarray) -> float:
    per_state = policy_kl_per_state(p, q)
    mask = weights > 0
    return float(weights[mask] @ per_state[mask])


def _trust_region_tilt(
    base: np.ndarray, scores: np.ndarray, weights: np.ndarray, delta: float, tol: float
) -> tuple[np.ndarray, float, tuple[str, ...]]:
    """argmax sum_s w(s) pi(.|s).scores(s) s.t. sum_s w(s) KL(pi || base)(s) <= delta.

    Returns (policy rows, inverse temperature, flags). Rows with zero weight are
    returned unchanged. The inverse temperature is ``inf`` for the argmax limit.
    """
    active = weights > 0
    out = base.copy()
    if not np.any(active):
        return out, 0.0, ("zero_occupancy",)
    b, sc, w = base[active], scores[active], weights[active]
    spread = np.where(b > 0, sc, -np.inf).max(axis=1) - np.where(b > 0, sc, np.inf).min(axis=1)
    if np.all(spread <= TIE_TOL):
        return out, 0.0, ("no_improvement_direction",)

    def kl_at(beta):
        return float(w @ policy_kl_per_state(_tilt(b, sc, beta), b))

    limit = _argmax_rows(b, sc)
    if float(w @ policy_kl_per_state(limit, b)) <= delta:
        out[active] = limit
        return out, math.inf, ()

    lo, hi = 0.0, 1.0 / max(float(spread.max()), 1e-300)
    while kl_at(hi) <= delta:
        lo, hi = hi, hi * 2.0
    # kl_at increases with the inverse temperature; keep lo feasible
    for _ in range(300):
        mid = 0.5 * (lo + hi)
        val = kl_at(mid)
        if val <= delta:
            lo = mid
            if delta - val <= tol:
                break
        else:
            hi = mid
        if hi - lo <= 1e-15 * hi:
            break
    out[active] = _tilt(b, sc, lo)
    return out, lo, ()


# --------------------------------------------------------------------------- exact two-step update


def improvement_step(
    cmdp: TabularCMDP,
    u: UncertaintySet | None,
    pi_k: StochasticPolicy,
    worst_r: Kernel,
    delta: float,
    tol: float = 1e-10,
) -> Update:
    """Maximize the occupancy-weighted reward advantage inside the averaged-KL trust region.

    The optimum is the per-state exponential tilt pi_k * exp(A / eta), with eta
    set by bisection so the averaged KL equals ``delta``.
    """
    if not delta > 0:
        raise ValueError("delta must be > 0")
    adv = evaluate_policy(cmdp, pi_k, worst_r, Signal.REWARD).advantage
    d = occupancy(cmdp, pi_k, worst_r)
    rows, beta, flags = _trust_region_tilt(pi_k.probs, adv, d, delta, tol)
    return Update(StochasticPolicy(rows), beta, flags)


@dataclass(frozen=True)
class LinearizedConstraint:
    """V_c(pi_k) + scale * sum_s d_c(s) sum_a pi(a|s) A_c(s, a) >= threshold."""

    value: float
    advantage: np.ndarray
    occupancy: np.ndarray
    scale: float
    threshold: float

    def __call__(self, policy: np.ndarray | StochasticPolicy) -> float:
        probs = policy.probs if isinstance(policy, StochasticPolicy) else policy
        return self.value + self.scale * float(self.occupancy @ np.einsum("sa,sa->s", probs, self.advantage))

    def slack(self, policy) -> float:
        return self(policy) - self.threshold


def linearized_constraint(
    cmdp: TabularCMDP, pi_k: StochasticPolicy, worst_c: Kernel, unscaled_constraint: bool = False, threshold: float | None = None
) -> LinearizedConstraint:
    bundle = evaluate_policy(cmdp, pi_k, worst_c, Signal.UTILITY)
    return LinearizedConstraint(
        value=bundle.scalar_return,
        advantage=bundle.advantage,
        occupancy=occupancy(cmdp, pi_k, worst_c),
        scale=1.0 if unscaled_constraint else 1.0 / (1.0 - cmdp.gamma),
        threshold=cmdp.threshold_d if threshold is None else threshold,
    )


def _kl_projection(
    base: np.ndarray, kl_weights: np.ndarray, con: LinearizedConstraint, tol: float
) -> tuple[np.ndarray, float, tuple[str, ...]]:
    """argmin sum_s kl_weights(s) KL(pi || base)(s) s.t. con(pi) >= threshold."""
    if con(base) >= con.threshold:
        return base.copy(), 0.0, ()
    dc, dr = con.occupancy, kl_weights
    tilted_states = (dc > 0) & (dr > 0)
    free_states = (dc > 0) & (dr <= 0)
    with np.errstate(divide="ignore", invalid="ignore"):
        w = np.where(tilted_states, con.scale * dc / np.where(dr > 0, dr, 1.0), 0.0)
    scores = w[:, None] * con.advantage

    def policy_at(nu):
        out = base.copy()
        if math.isinf(nu):
            out[dc > 0] = _argmax_rows(base[dc > 0], con.advantage[dc > 0])
            return out
        if np.any(tilted_states):
            out[tilted_states] = _tilt(base[tilted_states], scores[tilted_states], nu)
        if nu > 0 and np.any(free_states):
            out[free_states] = _argmax_rows(base[free_states], con.advantage[free_states])
        return out

    limit = policy_at(math.inf)
    if con(limit) < con.threshold:
        return limit, math.inf, ("projection_infeasible",)
    lo, hi = 0.0, 1.0
    while con(policy_at(hi)) < con.threshold:
        lo, hi = hi, hi * 2.0
    # con(policy_at(nu)) is non-decreasing in nu; keep hi feasible
    for _ in range(300):
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
    return policy_at(hi), hi, ()


def projection_step(
    cmdp: TabularCMDP,
    u: UncertaintySet | None,
    pi_k: StochasticPolicy,
    pi_half: StochasticPolicy,
    worst_r: Kernel,
    worst_c: Kernel,
    tol: float = 1e-10,
    unscaled_constraint: bool = False,
    threshold: float | None = None,
    recovery_delta: float | None = None,
) -> Update:
    """KL-project ``pi_half`` onto the utility constraint linearized at ``pi_k`` under ``worst_c``.

    KL is weighted by the occupancy of ``pi_k`` under ``worst_r``. When even the
    zero-temperature tilt toward the utility advantage cannot satisfy the
    constraint, the iteration is flagged ``projection_infeasible`` and that tilt
    is returned, or, when ``recovery_delta`` is given, the utility-ascent step of
    :func:`recovery_step` taken from ``pi_k``.
    """
    con = linearized_constraint(cmdp, pi_k, worst_c, unscaled_constraint, threshold)
    d_r = occupancy(cmdp, pi_k, worst_r)
    rows, nu, flags = _kl_projection(pi_half.probs, d_r, con, tol)
    if flags and recovery_delta is not None:
        rows = recovery_step(pi_k, d_r, con, recovery_delta, tol)
        nu = math.inf
    return Update(StochasticPolicy(rows), nu, flags)


def recovery_step(pi_k: StochasticPolicy, d_r: np.ndarray, con: LinearizedConstraint, delta: float, tol: float = 1e-10) -> np.ndarray:
    """Largest linearized-utility ascent from ``pi_k`` inside the averaged-KL ball of radius ``delta``."""
    with np.errstate(divide="ignore", invalid="ignore"):
        w = np.where(d_r > 0, con.occupancy / np.where(d_r > 0, d_r, 1.0), 0.0)
    rows, _, _ = _trust_region_tilt(pi_k.probs, w[:, None] * con.advantage, d_r, delta, tol)
    return rows


# --------------------------------------------------------------------------- practical update


def softmax_logits(policy: StochasticPolicy) -> np.ndarray:
    """Logits reproducing ``policy``; zero-probability actions get a large negative logit."""
    with np.errstate(divide="ignore"):
        logits = np.log(policy.probs)
    return np.where(np.isfinite(logits), logits, -745.0)


def fisher_matrix(policy: StochasticPolicy, weights: np.ndarray, reg: float = 0.0) -> np.ndarray:
    """Hessian of sum_s w(s) KL(pi_theta || pi_k)(s) at theta_k for softmax logits."""
    S, A = policy.probs.shape
    H = np.zeros((S * A, S * A))
    for s in range(S):
        p = policy.probs[s]
        H[s * A:(s + 1) * A, s * A:(s + 1) * A] = weights[s] * (np.diag(p) - np.outer(p, p))
    return H + reg * np.eye(S * A)


@dataclass(frozen=True)
class PracticalTerms:
    g: np.ndarray
    h: np.ndarray  # gradient of the negated (cost-form) linearized utility
    H: np.ndarray
    b: float
    Hinv_g: np.ndarray
    Hinv_h: np.ndarray
    gHg: float
    hHh: float

    @property
    def alpha_kl(self) -> float:
        return 1.0 / (2.0 * self.hHh) if self.hHh > 0 else math.inf


def practical_terms(
    cmdp: TabularCMDP,
    pi_k: StochasticPolicy,
    worst_r: Kernel,
    worst_c: Kernel,
    reg: float = 1e-6,
    unscaled_constraint: bool = False,
) -> PracticalTerms:
    adv_r = evaluate_policy(cmdp, pi_k, worst_r, Signal.REWARD).advantage
    d_r = occupancy(cmdp, pi_k, worst_r)
    con = linearized_constraint(cmdp, pi_k, worst_c, unscaled_constraint)
    g = (d_r[:, None] * pi_k.probs * adv_r).ravel()
    # constraint h^T (theta - theta_k) + b <= 0 with b = d - V_c(pi_k)
    h = -(con.scale * con.occupancy[:, None] * pi_k.probs * con.advantage).ravel()
    H = fisher_matrix(pi_k, d_r, reg)
    factor = np.linalg.cholesky(H)

    def solve(x):
        return np.linalg.solve(factor.T, np.linalg.solve(factor, x))

    Hinv_g, Hinv_h = solve(g), solve(h)
    return PracticalTerms(g, h, H, con.threshold - con.value, Hinv_g, Hinv_h, float(g @ Hinv_g), float(h @ Hinv_h))


def practical_update(
    cmdp: TabularCMDP,
    u: UncertaintySet,
    theta_k: np.ndarray,
    delta: float,
    worst_r: Kernel | None = None,
    worst_c: Kernel | None = None,
    config: RcpoConfig | None = None,
) -> tuple[np.ndarray, tuple[str, ...]]:
    """Closed-form trust-region step on softmax logits followed by the linear projection.

    theta_{k+1} = theta_k + s H^-1 g - max((s h^T H^-1 g + b) / (h^T H^-1 h), 0) H^-1 h
    with s = sqrt(2 delta / g^T H^-1 g).
    """
    config = config or RcpoConfig(delta=delta)
    theta_k = np.asarray(theta_k, dtype=float)
    S, A = cmdp.n_states, cmdp.n_actions
    pi_k = StochasticPolicy.from_logits(theta_k.reshape(S, A))
    if worst_r is None:
        worst_r = worst_kernel_pgd(cmdp, pi_k, u, Signal.REWARD, config.pgd_steps, config.schedule).kernel
    if worst_c is None:
        worst_c = worst_kernel_pgd(cmdp, pi_k, u, Signal.UTILITY, config.pgd_steps, config.schedule).kernel
    terms = practical_terms(cmdp, pi_k, worst_r, worst_c, config.hessian_reg, config.unscaled_constraint)
    return _practical_step(theta_k, delta, terms)


def _practical_step(theta_k: np.ndarray, delta: float, terms: PracticalTerms) -> tuple[np.ndarray, tuple[str, ...]]:
    flags: list[str] = []
    if terms.gHg <= 1e-12:
        flags.append("stationary")
        step = np.zeros_like(theta_k)
        scale = 0.0
    else:
        scale = math.sqrt(2.0 * delta / terms.gHg)
        step = scale * terms.Hinv_g
    if terms.hHh <= 1e-12:
        if terms.b > 0:
            flags.append("projection_infeasible")
        return theta_k + step, tuple(flags)
    correction = max((scale * float(terms.h @ terms.Hinv_g) + terms.b) / terms.hHh, 0.0)
    return theta_k + step - correction * terms.Hinv_h, tuple(flags)


# --------------------------------------------------------------------------- diagnostics


def lipschitz_constant(cmdp: TabularCMDP) -> float:
    return math.sqrt(cmdp.n_actions) / (1.0 - cmdp.gamma) ** 2


def occupancy_ratio_bound(occupancies: list[np.ndarray]) -> float:
    """max over ordered pairs of max_s d_p(s) / d_p'(s); 0/0 is ignored, x/0 is inf."""
    best = 1.0
    for i, d1 in enumerate(occupancies):
        for j, d2 in enumerate(occupancies):
            if i == j:
                continue
            if np.any((d1 > 0) & (d2 <= 0)):
                return math.inf
            mask = d2 > 0
            if np.any(mask):
                best = max(best, float(np.max(d1[mask] / d2[mask])))
    return best


def advantage_mismatch(cmdp: TabularCMDP, pi_k: StochasticPolicy, pi_next: StochasticPolicy, kernel: Kernel, signal) -> float:
    """max_s |E_{a ~ pi_next} A^{pi_k}_{kernel}(s, a)|."""
    adv = evaluate_policy(cmdp, pi_k, kernel, signal).advantage
    return float(np.max(np.abs(np.einsum("sa,sa->s", pi_next.probs, adv))))


@dataclass(frozen=True)
class IterationContext:
    """Everything materialized while updating pi_k, passed to the diagnostics."""

    pi_k: StochasticPolicy
    pi_next: StochasticPolicy
    pgd_r: Kernel
    pgd_c: Kernel
    robust_r_k: RobustEvalResult
    robust_c_k: RobustEvalResult
    robust_r_next: RobustEvalResult
    robust_c_next: RobustEvalResult
    alpha_kl: float
    m_prime: float = math.nan


def bound_diagnostics(cmdp: TabularCMDP, u: UncertaintySet, ctx: IterationContext, config: RcpoConfig) -> dict:
    """Per-iteration improvement and constraint bounds evaluated on realized quantities.

    M is estimated over the kernels materialized this iteration, so it
    lower-bounds the true supremum and the checks are necessary conditions.
    """
    gamma, delta = cmdp.gamma, config.delta
    pi_k, pi_next = ctx.pi_k, ctx.pi_next
    L = lipschitz_constant(cmdp)
    v_r_k, v_c_k = ctx.robust_r_k.scalar_return, ctx.robust_c_k.scalar_return
    v_r_next, v_c_next = ctx.robust_r_next.scalar_return, ctx.robust_c_next.scalar_return
    b = cmdp.threshold_d - v_c_k

    eps_reward = abs(evaluate_policy(cmdp, pi_k, ctx.pgd_r, Signal.REWARD).scalar_return - v_r_k)
    eps_utility = abs(evaluate_policy(cmdp, pi_k, ctx.pgd_c, Signal.UTILITY).scalar_return - v_c_k)
    eps = max(eps_reward, eps_utility)
    eps_r_next = advantage_mismatch(cmdp, pi_k, pi_next, ctx.robust_r_next.worst_kernel, Signal.REWARD)
    eps_c_next = advantage_mismatch(cmdp, pi_k, pi_next, ctx.robust_c_next.worst_kernel, Signal.UTILITY)

    kernels = [u.nominal, ctx.pgd_r, ctx.pgd_c, ctx.robust_r_next.worst_kernel, ctx.robust_c_next.worst_kernel]
    m_est = occupancy_ratio_bound([occupancy(cmdp, pi_k, p) for p in kernels])

    d_r = occupancy(cmdp, pi_k, ctx.pgd_r)
    realized_kl = policy_kl(pi_next, pi_k, d_r)
    feasible = b <= 0
    radius = delta if feasible else delta + b * b * ctx.alpha_kl
    root = math.sqrt(radius / 2.0) if math.isfinite(radius) else math.inf

    def rhs(const, eps_next):
        coeff = m_est * (const * L + 2.0 * gamma * eps_next / (1.0 - gamma)) / (1.0 - gamma)
        return -math.inf if math.isinf(coeff) or math.isinf(root) else -coeff * root

    reward_rhs = rhs(2.0, eps_r_next)
    utility_rhs = cmdp.threshold_d - eps + rhs(3.0, eps_c_next)
    slack = 1e-6
    if feasible:
        kl_ok = realized_kl <= delta + slack
    else:
        # heuristic: M' replaced by the measured max log-ratio
        extra = b * b * ctx.alpha_kl + b * ctx.m_prime * math.sqrt(ctx.alpha_kl / 2.0)
        kl_ok = bool(realized_kl <= delta + extra + slack) if math.isfinite(extra) else True
    return dict(
        b=b,
        realized_kl_step=realized_kl,
        eps_reward=eps_reward,
        eps_utility=eps_utility,
        m_estimate=m_est,
        theorem_reward_rhs=reward_rhs,
        theorem_utility_rhs=utility_rhs,
        bounds_hold=(bool(v_r_next - v_r_k >= reward_rhs - slack), bool(v_c_next >= utility_rhs - slack)),
        kl_lemma_ok=bool(kl_ok),
        alpha_kl=ctx.alpha_kl,
        m_prime=ctx.m_prime,
    )


# --------------------------------------------------------------------------- training loop


def initial_policy(cmdp: TabularCMDP, config: RcpoConfig, seed: int = 0) -> StochasticPolicy:
    if config.init_noise <= 0:
        return StochasticPolicy.uniform(cmdp.n_states, cmdp.n_actions)
    rng = np.random.default_rng(seed)
    return StochasticPolicy.from_logits(config.init_noise * rng.standard_normal((cmdp.n_states, cmdp.n_actions)))


class _Evaluator:
    """Caches robust evaluations of the few most recent policies."""

    def __init__(self, cmdp: TabularCMDP, u: UncertaintySet):
        self.cmdp, self.u = cmdp, u
        self._cache: dict[tuple[int, Signal], tuple[StochasticPolicy, RobustEvalResult]] = {}

    def robust(self, policy: StochasticPolicy, signal: Signal) -> RobustEvalResult:
        key = (id(policy), signal)
        hit = self._cache.get(key)
        # holding the policy keeps its id from being reused while cached
        if hit is None or hit[0] is not policy:
            if len(self._cache) > 8:
                self._cache.clear()
            hit = (policy, robust_policy_evaluation(self.cmdp, self.u, policy, signal))
            self._cache[key] = hit
        return hit[1]


def _m_prime(cmdp, pi_k, pi_half, worst_r, worst_c, config) -> float:
    """max_s ||log(pi^l / pi_k)||_inf over occupied states, pi^l the projection onto {lin >= V_c(pi_k)}."""
    con = linearized_constraint(cmdp, pi_k, worst_c, config.unscaled_constraint)
    d_r = occupancy(cmdp, pi_k, worst_r)
    pi_l, _, _ = _kl_projection(pi_half.probs, d_r, LinearizedConstraint(con.value, con.advantage, con.occupancy, con.scale, con.value), config.dual_bisection_tol)
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(pi_l > 0, np.abs(np.log(pi_l) - np.log(pi_k.probs)), 0.0)
    mask = d_r > 0
    return float(ratio[mask].max()) if np.any(mask) else 0.0


@dataclass(frozen=True)
class Proposal:
    """One update pi_k -> pi_next together with the kernels it was computed under."""

    pi_next: StochasticPolicy
    pi_half: StochasticPolicy
    worst_r: Kernel
    worst_c: Kernel
    flags: tuple[str, ...] = ()
    terms: PracticalTerms | None = None


def run_updates(
    cmdp: TabularCMDP,
    u: UncertaintySet,
    config: RcpoConfig,
    propose,
    pi_0: StochasticPolicy | None = None,
    eval_every: int = 1,
    check_eps: bool = True,
) -> tuple[StochasticPolicy, list[IterationRecord]]:
    """Drive ``propose(pi_k) -> Proposal`` for ``config.max_iterations`` steps and log diagnostics.

    A record is written every ``eval_every`` iterations and always for the last one.
    """
    if eval_every < 1:
        raise ValueError("eval_every must be >= 1")
    pi = pi_0 or StochasticPolicy.uniform(cmdp.n_states, cmdp.n_actions)
    evaluator = _Evaluator(cmdp, u)
    trace: list[IterationRecord] = []
    for k in range(1, config.max_iterations + 1):
        step = propose(pi)
        if k % eval_every and k != config.max_iterations:
            pi = step.pi_next
            continue
        flags = list(step.flags)
        rob_r_k, rob_c_k = evaluator.robust(pi, Signal.REWARD), evaluator.robust(pi, Signal.UTILITY)
        rob_r_n, rob_c_n = evaluator.robust(step.pi_next, Signal.REWARD), evaluator.robust(step.pi_next, Signal.UTILITY)
        b = cmdp.threshold_d - rob_c_k.scalar_return
        alpha_kl, m_prime = math.nan, math.nan
        if b > 0:
            terms = step.terms or practical_terms(cmdp, pi, step.worst_r, step.worst_c, config.hessian_reg, config.unscaled_constraint)
            alpha_kl = terms.alpha_kl
            m_prime = _m_prime(cmdp, pi, step.pi_half, step.worst_r, step.worst_c, config)
        ctx = IterationContext(pi, step.pi_next, step.worst_r, step.worst_c, rob_r_k, rob_c_k, rob_r_n, rob_c_n, alpha_kl, m_prime)
        diag = bound_diagnostics(cmdp, u, ctx, config)
        if check_eps and max(diag["eps_reward"], diag["eps_utility"]) > config.eps_tol:
            flags.append("eps_tol_exceeded")
            log.warning("iteration %d: worst-kernel gap %.3g exceeds eps_tol", k, max(diag["eps_reward"], diag["eps_utility"]))
        trace.append(
            IterationRecord(
                iteration=k,
                robust_reward_return=rob_r_n.scalar_return,
                robust_utility_return=rob_c_n.scalar_return,
                nominal_reward_return=evaluate_policy(cmdp, step.pi_next, u.nominal, Signal.REWARD).scalar_return,
                nominal_utility_return=evaluate_policy(cmdp, step.pi_next, u.nominal, Signal.UTILITY).scalar_return,
                flags=tuple(dict.fromkeys(flags)),
                **diag,
            )
        )
        pi = step.pi_next
    return pi, trace


def rcpo_proposer(cmdp: TabularCMDP, u: UncertaintySet, config: RcpoConfig, kernels: str = "worst_case"):
    """The two-step RCPO update rule; ``kernels="nominal"`` gives the PCPO baseline."""
    if kernels not in ("worst_case", "nominal"):
        raise ValueError("kernels must be 'worst_case' or 'nominal'")
    tol = config.dual_bisection_tol
    shape = (cmdp.n_states, cmdp.n_actions)
    state = {}

    def propose(pi: StochasticPolicy) -> Proposal:
        if kernels == "nominal":
            p_r = p_c = u.nominal
        else:
            p_r = worst_kernel_pgd(cmdp, pi, u, Signal.REWARD, config.pgd_steps, config.schedule).kernel
            p_c = worst_kernel_pgd(cmdp, pi, u, Signal.UTILITY, config.pgd_steps, config.schedule).kernel
        if config.mode == "exact_tabular":
            half = improvement_step(cmdp, u, pi, p_r, config.delta, tol)
            proj = projection_step(cmdp, u, pi, half.policy, p_r, p_c, tol, config.unscaled_constraint, recovery_delta=config.delta)
            return Proposal(proj.policy, half.policy, p_r, p_c, half.flags + proj.flags)
        # practical mode keeps its own logits so repeated softmax round trips do not drift
        theta = state.get("theta")
        if theta is None or state.get("policy") is not pi:
            theta = softmax_logits(pi).ravel()
        terms = practical_terms(cmdp, pi, p_r, p_c, config.hessian_reg, config.unscaled_constraint)
        theta_next, flags = _practical_step(theta, config.delta, terms)
        half_step = math.sqrt(2 * config.delta / terms.gHg) * terms.Hinv_g if terms.gHg > 1e-12 else 0.0
        pi_next = StochasticPolicy.from_logits(theta_next.reshape(shape))
        state.update(theta=theta_next, policy=pi_next)
        return Proposal(pi_next, StochasticPolicy.from_logits((theta + half_step).reshape(shape)), p_r, p_c, flags, terms)

    return propose


def rcpo_train(
    cmdp: TabularCMDP,
    u: UncertaintySet,
    config: RcpoConfig,
    pi_0: StochasticPolicy | None = None,
    kernels: str = "worst_case",
    eval_every: int = 1,
) -> tuple[StochasticPolicy, list[IterationRecord]]:
    """Run ``config.max_iterations`` updates from ``pi_0`` (uniform by default).

    ``kernels="nominal"`` replaces both estimated worst-case kernels by the
    nominal kernel, which turns the loop into the non-robust PCPO baseline.
    """
    propose = rcpo_proposer(cmdp, u, config, kernels)
    return run_updates(cmdp, u, config, propose, pi_0, eval_every, check_eps=kernels == "worst_case")


def record_fields() -> list[str]:
    return [f.name for f in fields(IterationRecord)]
