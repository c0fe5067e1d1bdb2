"""Tabular benchmark CMDPs: gambler, N-chain and 4x4 Frozen-Lake.

Every constructor returns ``(cmdp, uncertainty_set)``. Rewards and utilities are
divided by their raw maxima so they lie in [0, 1]; the threshold is divided by
the same utility factor. ``cmdp.reward_scale`` / ``cmdp.utility_scale`` convert
normalized returns back to the raw scale.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any

import numpy as np

from .cmdp import Kernel, TabularCMDP
from .uncertainty import Divergence, UncertaintySet

DEFAULT_GAMMA = 0.95

# documented knobs per environment, with defaults
GAMBLER_DEFAULTS: dict[str, Any] = {
    "gamma": DEFAULT_GAMMA,
    "radius": 0.1,
    "threshold": 2.5,
    "p_head": 0.6,
    "goal": 16,
    "max_stake": 8,
    "start": 8,
    "utility_table": "bold_bets",
    "rho_mix": 0.0,
    "divergence": "KL",
}
NCHAIN_DEFAULTS: dict[str, Any] = {
    "gamma": DEFAULT_GAMMA,
    "radius": 0.15,
    "threshold": 6.0,
    "slip": 0.1,
    "n": 40,
    "bonus": 10.0,
    "start": 0,
    "rho_mix": 1.0,
    "divergence": "KL",
}
FROZENLAKE_DEFAULTS: dict[str, Any] = {
    "gamma": DEFAULT_GAMMA,
    "radius": 0.1,
    "threshold": 0.7,
    "slip": 0.2,
    "goal_reward": 200.0,
    "utility_cells": [1, 3],
    "start": 0,
    "rho_mix": 0.0,
    "divergence": "KL",
}
ENV_DEFAULTS = {"gambler": GAMBLER_DEFAULTS, "nchain": NCHAIN_DEFAULTS, "frozenlake": FROZENLAKE_DEFAULTS}

FROZENLAKE_MAP = ("SFFF", "FHFH", "FFFH", "HFFG")


@dataclass(frozen=True)
class EnvSpec:
    name: str
    overrides: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if self.name not in ENV_DEFAULTS:
            raise ValueError(f"unknown environment {self.name!r}; expected one of {sorted(ENV_DEFAULTS)}")
        unknown = set(self.overrides) - set(ENV_DEFAULTS[self.name])
        if unknown:
            raise ValueError(f"unknown {self.name} override(s): {sorted(unknown)}")
        if self.overrides.get("radius", 0.0) < 0:
            raise ValueError("radius must be >= 0")

    def resolved(self) -> dict[str, Any]:
        return {**ENV_DEFAULTS[self.name], **self.overrides}

    def build(self) -> tuple[TabularCMDP, UncertaintySet]:
        return MAKERS[self.name](self.overrides)


def _resolve(defaults: dict[str, Any], overrides: dict[str, Any] | None, name: str) -> dict[str, Any]:
    overrides = dict(overrides or {})
    unknown = set(overrides) - set(defaults)
    if unknown:
        raise ValueError(f"unknown {name} override(s): {sorted(unknown)}")
    return {**defaults, **overrides}


def _initial(n_states: int, start: int, mix: float, absorbing: list[int]) -> np.ndarray:
    rho = np.zeros(n_states)
    rho[start] = 1.0
    if mix > 0:
        # full-support variant for bound checks (M is finite only when supp(rho) = S)
        rho = (1.0 - mix) * rho + mix / n_states
    return rho / rho.sum()


def gambler_utility_table(kind: str = "bold_bets", goal: int = 16, max_stake: int = 8) -> np.ndarray:
    """Raw utility c(s, a) by stake; zero at the terminal balances and the sink.

    ``"bold_bets"``: 2 for a stake of at least 4, else 0.
    ``"stake_fraction"``: clipped stake / max_stake.
    """
    n_states = goal + 2
    table = np.zeros((n_states, max_stake))
    for s in range(1, goal):
        for a in range(max_stake):
            stake = min(a + 1, s, goal - s)
            if kind == "bold_bets":
                table[s, a] = 2.0 if stake >= 4 else 0.0
            elif kind == "stake_fraction":
                table[s, a] = stake / max_stake
            else:
                raise ValueError(f"unknown gambler utility table {kind!r}; use 'bold_bets', 'stake_fraction' or an explicit array")
    return table


def make_gambler(overrides: dict[str, Any] | None = None) -> tuple[TabularCMDP, UncertaintySet]:
    """Balances 0..goal plus a terminal sink; action a stakes min(a+1, s, goal-s).

    Reaching ``goal`` pays the reward on the next step and then moves to the
    sink, so a trajectory hitting the goal at time t earns ``10 * gamma**t``.
    Balance 0 and the sink are absorbing with zero signals.
    """
    cfg = _resolve(GAMBLER_DEFAULTS, overrides, "gambler")
    goal, n_actions, ph = int(cfg["goal"]), int(cfg["max_stake"]), float(cfg["p_head"])
    sink = goal + 1
    n_states = goal + 2
    probs = np.zeros((n_states, n_actions, n_states))
    for s in range(1, goal):
        for a in range(n_actions):
            stake = min(a + 1, s, goal - s)
            probs[s, a, s + stake] += ph
            probs[s, a, s - stake] += 1.0 - ph
    probs[0, :, 0] = 1.0
    probs[goal, :, sink] = 1.0
    probs[sink, :, sink] = 1.0

    reward = np.zeros((n_states, n_actions))
    reward[goal, :] = 1.0
    table = cfg["utility_table"]
    raw_utility = gambler_utility_table(table, goal, n_actions) if isinstance(table, str) else np.asarray(table, dtype=float)
    if raw_utility.shape != (n_states, n_actions):
        raise ValueError(f"utility_table must have shape {(n_states, n_actions)}")
    u_scale = float(raw_utility.max()) or 1.0
    cmdp = TabularCMDP(
        nominal_kernel=Kernel(probs),
        reward=reward,
        utility=raw_utility / u_scale,
        gamma=cfg["gamma"],
        rho=_initial(n_states, int(cfg["start"]), float(cfg["rho_mix"]), [0, sink]),
        threshold_d=float(cfg["threshold"]) / u_scale,
        reward_scale=10.0,
        utility_scale=u_scale,
        name="gambler",
    )
    return cmdp, UncertaintySet(Divergence(cfg["divergence"]), cfg["radius"], cmdp.nominal_kernel)


def make_nchain(overrides: dict[str, Any] | None = None) -> tuple[TabularCMDP, UncertaintySet]:
    """Chain of ``n`` nodes, actions left (0) / right (1) that slip with probability ``slip``.

    Left pays (reward, utility) = (1, 0), right pays (0, 2); every step spent at
    the last node adds the bonus reward. Walls reflect into the same node.
    """
    cfg = _resolve(NCHAIN_DEFAULTS, overrides, "nchain")
    n, slip, bonus = int(cfg["n"]), float(cfg["slip"]), float(cfg["bonus"])
    probs = np.zeros((n, 2, n))
    for s in range(n):
        left, right = max(s - 1, 0), min(s + 1, n - 1)
        probs[s, 0, left] += 1.0 - slip
        probs[s, 0, right] += slip
        probs[s, 1, right] += 1.0 - slip
        probs[s, 1, left] += slip
    raw_reward = np.zeros((n, 2))
    raw_reward[:, 0] = 1.0
    raw_reward[n - 1, :] += bonus
    raw_utility = np.zeros((n, 2))
    raw_utility[:, 1] = 2.0
    r_scale = float(raw_reward.max())
    u_scale = float(raw_utility.max())
    cmdp = TabularCMDP(
        nominal_kernel=Kernel(probs),
        reward=raw_reward / r_scale,
        utility=raw_utility / u_scale,
        gamma=cfg["gamma"],
        rho=_initial(n, int(cfg["start"]), float(cfg["rho_mix"]), []),
        threshold_d=float(cfg["threshold"]) / u_scale,
        reward_scale=r_scale,
        utility_scale=u_scale,
        name="nchain",
    )
    return cmdp, UncertaintySet(Divergence(cfg["divergence"]), cfg["radius"], cmdp.nominal_kernel)


# left, down, right, up
_MOVES = ((0, -1), (1, 0), (0, 1), (-1, 0))


def frozenlake_holes(grid=FROZENLAKE_MAP) -> list[int]:
    return [r * len(row) + c for r, row in enumerate(grid) for c, ch in enumerate(row) if ch == "H"]


def make_frozenlake(overrides: dict[str, Any] | None = None) -> tuple[TabularCMDP, UncertaintySet]:
    """4x4 lake plus a terminal sink. Holes trap with zero signals; the goal pays once then exits."""
    cfg = _resolve(FROZENLAKE_DEFAULTS, overrides, "frozenlake")
    grid = FROZENLAKE_MAP
    n_rows, n_cols = len(grid), len(grid[0])
    n_cells = n_rows * n_cols
    sink = n_cells
    n_states = n_cells + 1
    holes = frozenlake_holes(grid)
    goal = next(r * n_cols + c for r, row in enumerate(grid) for c, ch in enumerate(row) if ch == "G")
    slip = float(cfg["slip"])

    def step(cell, move):
        r, c = divmod(cell, n_cols)
        dr, dc = _MOVES[move]
        r2, c2 = min(max(r + dr, 0), n_rows - 1), min(max(c + dc, 0), n_cols - 1)
        return r2 * n_cols + c2

    probs = np.zeros((n_states, 4, n_states))
    for cell in range(n_cells):
        for a in range(4):
            if cell in holes:
                probs[cell, a, cell] = 1.0
            elif cell == goal:
                probs[cell, a, sink] = 1.0
            else:
                probs[cell, a, step(cell, a)] += 1.0 - slip
                probs[cell, a, step(cell, (a - 1) % 4)] += slip / 2
                probs[cell, a, step(cell, (a + 1) % 4)] += slip / 2
    probs[sink, :, sink] = 1.0

    reward = np.zeros((n_states, 4))
    reward[goal, :] = 1.0
    cells = list(cfg["utility_cells"])
    utility = np.zeros((n_states, 4))
    for cell in cells:
        if cell in holes or cell == goal or not 0 <= cell < n_cells:
            raise ValueError(f"utility cell {cell} must be a frozen, non-goal cell")
        utility[cell, :] = 1.0
    cmdp = TabularCMDP(
        nominal_kernel=Kernel(probs),
        reward=reward,
        utility=utility,
        gamma=cfg["gamma"],
        rho=_initial(n_states, int(cfg["start"]), float(cfg["rho_mix"]), holes + [sink]),
        threshold_d=float(cfg["threshold"]),
        reward_scale=float(cfg["goal_reward"]),
        utility_scale=1.0,
        name="frozenlake",
    )
    return cmdp, UncertaintySet(Divergence(cfg["divergence"]), cfg["radius"], cmdp.nominal_kernel)


def top_rows_utility_cells() -> list[int]:
    """Every frozen cell of the top two rows: a permissive alternative placement."""
    return [cell for cell in range(8) if cell not in frozenlake_holes()]


MAKERS = {"gambler": make_gambler, "nchain": make_nchain, "frozenlake": make_frozenlake}


def make_env(name: str, overrides: dict[str, Any] | None = None) -> tuple[TabularCMDP, UncertaintySet]:
    return EnvSpec(name, dict(overrides or {})).build()


def absorbing_states(cmdp: TabularCMDP) -> list[int]:
    probs = cmdp.nominal_kernel.probs
    return [s for s in range(cmdp.n_states) if np.all(probs[s, :, s] == 1.0)]
