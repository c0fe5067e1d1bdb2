"""Finite constrained MDPs: kernels, policies, exact evaluation by linear solves."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from enum import Enum

import numpy as np
import scipy.linalg

SIMPLEX_TOL = 1e-12


class Signal(str, Enum):
    REWARD = "reward"
    UTILITY = "utility"


def _check_simplex_rows(arr: np.ndarray, name: str, tol: float = SIMPLEX_TOL) -> None:
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} has non-finite entries")
    if np.any(arr < 0):
        raise ValueError(f"{name} has negative entries")
    sums = arr.sum(axis=-1)
    if np.max(np.abs(sums - 1.0)) > tol:
        raise ValueError(f"{name} rows must sum to 1 (max error {np.max(np.abs(sums - 1.0)):.3e})")


def _frozen(arr) -> np.ndarray:
    out = np.array(arr, dtype=float)
    out.setflags(write=False)
    return out


@dataclass(frozen=True, eq=False)
class Kernel:
    """Transition kernel ``probs[s, a, s']``."""

    probs: np.ndarray

    def __post_init__(self):
        probs = _frozen(self.probs)
        if probs.ndim != 3 or probs.shape[0] != probs.shape[2]:
            raise ValueError(f"kernel must have shape (S, A, S), got {probs.shape}")
        _check_simplex_rows(probs, "kernel")
        object.__setattr__(self, "probs", probs)

    @property
    def n_states(self) -> int:
        return self.probs.shape[0]

    @property
    def n_actions(self) -> int:
        return self.probs.shape[1]


@dataclass(frozen=True, eq=False)
class StochasticPolicy:
    """Per-state action distributions ``probs[s, a]``."""

    probs: np.ndarray

    def __post_init__(self):
        probs = _frozen(self.probs)
        if probs.ndim != 2:
            raise ValueError(f"policy must have shape (S, A), got {probs.shape}")
        _check_simplex_rows(probs, "policy")
        object.__setattr__(self, "probs", probs)

    @classmethod
    def uniform(cls, n_states: int, n_actions: int) -> "StochasticPolicy":
        return cls(np.full((n_states, n_actions), 1.0 / n_actions))

    @classmethod
    def from_logits(cls, logits: np.ndarray) -> "StochasticPolicy":
        z = logits - logits.max(axis=1, keepdims=True)
        e = np.exp(z)
        p = e / e.sum(axis=1, keepdims=True)
        return cls(p / p.sum(axis=1, keepdims=True))

    @classmethod
    def deterministic(cls, actions, n_actions: int) -> "StochasticPolicy":
        actions = np.asarray(actions, dtype=int)
        probs = np.zeros((len(actions), n_actions))
        probs[np.arange(len(actions)), actions] = 1.0
        return cls(probs)


@dataclass(frozen=True, eq=False)
class TabularCMDP:
    nominal_kernel: Kernel
    reward: np.ndarray
    utility: np.ndarray
    gamma: float
    rho: np.ndarray
    threshold_d: float = 0.0
    # multiply a normalized return by these to get the environment's raw scale
    reward_scale: float = 1.0
    utility_scale: float = 1.0
    name: str = "cmdp"

    def __post_init__(self):
        reward = _frozen(self.reward)
        utility = _frozen(self.utility)
        rho = _frozen(self.rho)
        shape = (self.nominal_kernel.n_states, self.nominal_kernel.n_actions)
        for arr, label in ((reward, "reward"), (utility, "utility")):
            if arr.shape != shape:
                raise ValueError(f"{label} must have shape {shape}, got {arr.shape}")
            if np.any(arr < 0) or np.any(arr > 1) or not np.all(np.isfinite(arr)):
                raise ValueError(f"{label} entries must lie in [0, 1]")
        if rho.shape != (shape[0],):
            raise ValueError(f"rho must have shape ({shape[0]},)")
        _check_simplex_rows(rho, "rho")
        if not 0.0 < self.gamma < 1.0:
            raise ValueError("gamma must lie strictly inside (0, 1)")
        if self.threshold_d < 0:
            raise ValueError("threshold_d must be >= 0")
        object.__setattr__(self, "reward", reward)
        object.__setattr__(self, "utility", utility)
        object.__setattr__(self, "rho", rho)
        object.__setattr__(self, "gamma", float(self.gamma))
        object.__setattr__(self, "threshold_d", float(self.threshold_d))

    @property
    def n_states(self) -> int:
        return self.nominal_kernel.n_states

    @property
    def n_actions(self) -> int:
        return self.nominal_kernel.n_actions

    def signal(self, signal: Signal | str) -> np.ndarray:
        return self.reward if Signal(signal) is Signal.REWARD else self.utility

    def scale(self, signal: Signal | str) -> float:
        return self.reward_scale if Signal(signal) is Signal.REWARD else self.utility_scale

    def with_threshold(self, d: float) -> "TabularCMDP":
        return _replace(self, threshold_d=d)

    def with_rho(self, rho: np.ndarray) -> "TabularCMDP":
        return _replace(self, rho=rho)


def _replace(cmdp: TabularCMDP, **changes) -> TabularCMDP:
    return dataclasses.replace(cmdp, **changes)


@dataclass(frozen=True, eq=False)
class ValueBundle:
    signal: Signal
    v: np.ndarray
    q: np.ndarray
    advantage: np.ndarray
    scalar_return: float
    residual: float = field(default=0.0)


def _check_dims(cmdp: TabularCMDP, policy: StochasticPolicy | None = None, kernel: Kernel | None = None):
    shape = (cmdp.n_states, cmdp.n_actions)
    if policy is not None and policy.probs.shape != shape:
        raise ValueError(f"policy shape {policy.probs.shape} does not match CMDP {shape}")
    if kernel is not None and kernel.probs.shape != (shape[0], shape[1], shape[0]):
        raise ValueError(f"kernel shape {kernel.probs.shape} does not match CMDP")


def state_transition_matrix(policy: StochasticPolicy, kernel: Kernel) -> np.ndarray:
    """P_pi[s, s'] = sum_a pi(a|s) p(s'|s, a)."""
    return np.einsum("sa,sat->st", policy.probs, kernel.probs)


def evaluate_policy(
    cmdp: TabularCMDP, policy: StochasticPolicy, kernel: Kernel, signal: Signal | str
) -> ValueBundle:
    """Solve ``(I - gamma P_pi) v = r_pi`` and derive Q and the advantage."""
    _check_dims(cmdp, policy, kernel)
    signal = Signal(signal)
    sig = cmdp.signal(signal)
    p_pi = state_transition_matrix(policy, kernel)
    r_pi = np.einsum("sa,sa->s", policy.probs, sig)
    system = np.eye(cmdp.n_states) - cmdp.gamma * p_pi
    v = scipy.linalg.lu_solve(scipy.linalg.lu_factor(system), r_pi)
    residual = float(np.max(np.abs(system @ v - r_pi)))
    q = sig + cmdp.gamma * kernel.probs @ v
    advantage = q - v[:, None]
    return ValueBundle(signal, v, q, advantage, float(cmdp.rho @ v), residual)


def occupancy(cmdp: TabularCMDP, policy: StochasticPolicy, kernel: Kernel) -> np.ndarray:
    """Normalized discounted state occupancy d = (1-gamma) rho^T (I - gamma P_pi)^-1."""
    _check_dims(cmdp, policy, kernel)
    p_pi = state_transition_matrix(policy, kernel)
    system = np.eye(cmdp.n_states) - cmdp.gamma * p_pi.T
    d = scipy.linalg.lu_solve(scipy.linalg.lu_factor(system), (1.0 - cmdp.gamma) * cmdp.rho)
    # clip round-off negatives; the exact solution is non-negative
    d = np.clip(d, 0.0, None)
    return d / d.sum()


def policy_kl_per_state(p: StochasticPolicy | np.ndarray, q: StochasticPolicy | np.ndarray) -> np.ndarray:
    """KL(p(.|s) || q(.|s)) for every state, with 0 log 0 = 0 and +inf on support mismatch."""
    pp = p.probs if isinstance(p, StochasticPolicy) else np.asarray(p, dtype=float)
    qq = q.probs if isinstance(q, StochasticPolicy) else np.asarray(q, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(pp > 0, pp * (np.log(pp) - np.log(qq)), 0.0)
    return terms.sum(axis=-1)


def policy_kl(p: StochasticPolicy, q: StochasticPolicy, weights: np.ndarray) -> float:
    """Occupancy-weighted policy KL; ``inf`` when p puts mass where q has none."""
    per_state = policy_kl_per_state(p, q)
    weights = np.asarray(weights, dtype=float)
    mask = weights > 0
    if np.any(np.isinf(per_state[mask])):
        return float("inf")
    return max(float(weights[mask] @ per_state[mask]), 0.0)


def make_random_cmdp(seed: int, n_states: int, n_actions: int) -> TabularCMDP:
    if n_states < 1 or n_actions < 1:
        raise ValueError("n_states and n_actions must be >= 1")
    rng = np.random.default_rng(seed)
    probs = rng.dirichlet(np.ones(n_states), size=(n_states, n_actions))
    probs /= probs.sum(axis=-1, keepdims=True)
    rho = rng.dirichlet(np.ones(n_states))
    rho /= rho.sum()
    return TabularCMDP(
        nominal_kernel=Kernel(probs),
        reward=rng.uniform(0.0, 1.0, size=(n_states, n_actions)),
        utility=rng.uniform(0.0, 1.0, size=(n_states, n_actions)),
        gamma=float(rng.uniform(0.8, 0.99)),
        rho=rho,
        threshold_d=0.0,
        name=f"random-{seed}",
    )


def random_policy(rng: np.random.Generator, n_states: int, n_actions: int, concentration: float = 1.0) -> StochasticPolicy:
    probs = rng.dirichlet(np.full(n_actions, concentration), size=n_states)
    probs = np.clip(probs, 1e-12, None)
    return StochasticPolicy(probs / probs.sum(axis=1, keepdims=True))
