"""(s,a)-rectangular divergence balls, their support oracles, and robust evaluation.

The ball around a nominal row ``p0`` is ``{q : D(q || p0) <= R}`` where ``D`` is
either KL or total variation ``0.5 * ||q - p0||_1``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from enum import Enum
from typing import Callable

import numpy as np

from .cmdp import (
    Kernel,
    Signal,
    StochasticPolicy,
    TabularCMDP,
    _check_dims,
    evaluate_policy,
    occupancy,
)

log = logging.getLogger(__name__)


class Divergence(str, Enum):
    KL = "KL"
    TV = "TV"


@dataclass(frozen=True, eq=False)
class UncertaintySet:
    divergence: Divergence
    radius: float
    nominal: Kernel

    def __post_init__(self):
        object.__setattr__(self, "divergence", Divergence(self.divergence))
        if not self.radius >= 0:
            raise ValueError("radius must be >= 0")
        object.__setattr__(self, "radius", float(self.radius))

    def row_divergences(self, kernel: Kernel) -> np.ndarray:
        return row_divergence(kernel.probs, self.nominal.probs, self.divergence)

    def contains(self, kernel: Kernel, tol: float = 1e-9) -> bool:
        return bool(np.all(self.row_divergences(kernel) <= self.radius + tol))


@dataclass(frozen=True, eq=False)
class RobustEvalResult:
    v_robust: np.ndarray
    worst_kernel: Kernel
    scalar_return: float
    residual: float
    iterations: int = 0


def row_divergence(q: np.ndarray, p0: np.ndarray, divergence: Divergence | str) -> np.ndarray:
    """D(q || p0) along the last axis."""
    q = np.asarray(q, dtype=float)
    p0 = np.asarray(p0, dtype=float)
    if Divergence(divergence) is Divergence.TV:
        return 0.5 * np.abs(q - p0).sum(axis=-1)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(q > 0, q * (np.log(q) - np.log(p0)), 0.0)
    return np.maximum(terms.sum(axis=-1), 0.0)


def _validate_rows(v: np.ndarray, rows: np.ndarray) -> None:
    if not np.all(np.isfinite(v)):
        raise ValueError("value vector has non-finite entries")
    if np.any(rows < 0) or np.max(np.abs(rows.sum(axis=-1) - 1.0)) > 1e-9:
        raise ValueError("nominal rows must be probability vectors")


# --------------------------------------------------------------------------- support oracles


def kl_dual_objective(v: np.ndarray, nominal_row: np.ndarray, radius: float, lam: float) -> float:
    """-lam * log E_p0[exp(-v/lam)] - lam * R; its max over lam > 0 is the KL support value."""
    mask = nominal_row > 0
    vv = v[mask]
    shift = vv.min()
    z = np.log(np.sum(nominal_row[mask] * np.exp(-(vv - shift) / lam)))
    return float(shift - lam * z - lam * radius)


def _kl_support_rows(v: np.ndarray, rows: np.ndarray, radius: float, tol: float = 1e-12):
    """Exponential-tilt minimizers; ``v`` is a vector shared by all rows or one vector per row."""
    v = np.broadcast_to(v, rows.shape)
    support = rows > 0
    vmin = np.where(support, v, np.inf).min(axis=1)
    vmax = np.where(support, v, -np.inf).max(axis=1)
    span = vmax - vmin
    q = rows.copy()

    if radius <= 0:
        return q
    # spans at round-off level carry no usable ordering; treat such rows as constant
    span = np.where(span > 1e-14 * np.maximum(1.0, np.abs(vmax)), span, 0.0)

    gap = np.where(support, v - vmin[:, None], 0.0)
    at_min = support & (gap <= 0)
    mass_min = np.where(at_min, rows, 0.0).sum(axis=1)
    # adversary can put everything on the argmin set
    corner = (span > 0) & (-np.log(mass_min) <= radius)
    if np.any(corner):
        qc = np.where(at_min[corner], rows[corner], 0.0)
        q[corner] = qc / qc.sum(axis=1, keepdims=True)

    active = (span > 0) & ~corner
    if not np.any(active):
        return q

    g = gap[active]
    p = rows[active]
    sp = span[active]

    def tilt(lam):
        w = p * np.exp(-g / lam[:, None])
        z = w.sum(axis=1)
        qq = w / z[:, None]
        # KL(q_lam || p0) = -E_q[g]/lam - log Z
        kl = -(qq * g).sum(axis=1) / lam - np.log(z)
        return qq, kl

    lo = np.full(sp.shape, 1e-8) * np.maximum(sp, 1e-300)
    hi = sp / radius + 1.0
    _, kl_hi = tilt(hi)
    for _ in range(200):
        bad = kl_hi > radius
        if not np.any(bad):
            break
        hi = np.where(bad, hi * 2.0, hi)
        _, kl_hi = tilt(hi)
    # KL(q_lam) decreases in lam; keep hi on the feasible side
    for _ in range(200):
        mid = np.sqrt(lo * hi)
        _, kl_mid = tilt(mid)
        feasible = kl_mid <= radius
        hi = np.where(feasible, mid, hi)
        lo = np.where(feasible, lo, mid)
        if np.all(hi / lo - 1.0 < tol):
            break
    q[active] = tilt(hi)[0]
    return q


def _tv_support_rows(v: np.ndarray, rows: np.ndarray, radius: float):
    if radius <= 0:
        return rows.copy()
    n = v.shape[0]
    target = int(np.argmin(v))
    # donors sorted by decreasing value, target excluded
    order = [s for s in np.argsort(-v, kind="stable") if s != target]
    budget = np.minimum(radius, 1.0 - rows[:, target])
    donors = rows[:, order]
    before = np.cumsum(donors, axis=1) - donors
    removed = np.clip(budget[:, None] - before, 0.0, donors)
    q = rows.copy()
    q[:, order] = donors - removed
    q[:, target] = rows[:, target] + removed.sum(axis=1)
    q = np.clip(q, 0.0, None)
    return q / q.sum(axis=1, keepdims=True)


def support_rows(v: np.ndarray, rows: np.ndarray, radius: float, divergence: Divergence | str):
    """Vectorized ``support_min`` over a stack of nominal rows; returns (values, minimizers)."""
    v = np.asarray(v, dtype=float)
    rows = np.asarray(rows, dtype=float)
    _validate_rows(v, rows)
    if radius < 0:
        raise ValueError("radius must be >= 0")
    if Divergence(divergence) is Divergence.KL:
        idx, valid = _support_columns(rows)
        if idx.shape[1] < rows.shape[1]:
            compact = _kl_support_rows(
                np.where(valid, v[idx], 0.0), np.where(valid, np.take_along_axis(rows, idx, axis=1), 0.0), radius
            )
            q = np.zeros_like(rows)
            np.put_along_axis(q, idx, np.where(valid, compact, 0.0), axis=1)
        else:
            q = _kl_support_rows(v, rows, radius)
    else:
        q = _tv_support_rows(v, rows, radius)
    return q @ v, q


def support_min(v, nominal_row, radius: float, divergence: Divergence | str):
    """min_{q in ball} q . v for a single row; returns (value, minimizer_row)."""
    values, q = support_rows(np.asarray(v, dtype=float), np.asarray(nominal_row, dtype=float)[None, :], radius, divergence)
    return float(values[0]), q[0]


# --------------------------------------------------------------------------- robust evaluation


def _worst_rows(cmdp: TabularCMDP, u: UncertaintySet, v: np.ndarray):
    S, A = cmdp.n_states, cmdp.n_actions
    values, q = support_rows(v, u.nominal.probs.reshape(S * A, S), u.radius, u.divergence)
    return values.reshape(S, A), q.reshape(S, A, S)


def robust_bellman_operator(
    cmdp: TabularCMDP, u: UncertaintySet, policy: StochasticPolicy, signal: Signal | str, v: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """One sweep of the fixed-policy robust Bellman operator; returns (T v, minimizing rows)."""
    sig = cmdp.signal(signal)
    sigma, q = _worst_rows(cmdp, u, v)
    return np.einsum("sa,sa->s", policy.probs, sig + cmdp.gamma * sigma), q


def _kernel_from_rows(q: np.ndarray) -> Kernel:
    q = np.clip(q, 0.0, None)
    return Kernel(q / q.sum(axis=-1, keepdims=True))


def robust_policy_evaluation(
    cmdp: TabularCMDP,
    u: UncertaintySet,
    policy: StochasticPolicy,
    signal: Signal | str,
    tol: float = 1e-9,
    method: str = "policy_iteration",
    max_iter: int | None = None,
) -> RobustEvalResult:
    """Fixed point of the robust Bellman operator for a fixed policy.

    ``method="value_iteration"`` iterates the operator directly.
    ``method="policy_iteration"`` alternates the per-row minimization with an
    exact linear solve under the minimizing kernel; both stop once the
    Bellman residual is below ``tol`` and reach the same fixed point.
    """
    _check_dims(cmdp, policy, u.nominal)
    signal = Signal(signal)
    if method == "value_iteration":
        cap = max_iter or int(np.ceil(np.log(tol * (1 - cmdp.gamma) / 2) / np.log(cmdp.gamma))) + 1000
        v = np.zeros(cmdp.n_states)
        for it in range(1, cap + 1):
            tv, q = robust_bellman_operator(cmdp, u, policy, signal, v)
            gap = float(np.max(np.abs(tv - v)))
            v = tv
            if gap <= tol:
                kernel = _kernel_from_rows(q)
                exact = evaluate_policy(cmdp, policy, kernel, signal).v
                residual = float(np.max(np.abs(exact - v)))
                return RobustEvalResult(v, kernel, float(cmdp.rho @ v), residual, it)
        raise RuntimeError("robust policy evaluation did not converge (operator is a contraction; this is a bug)")
    if method != "policy_iteration":
        raise ValueError(f"unknown method {method!r}")

    cap = max_iter or 500
    kernel = u.nominal
    v = evaluate_policy(cmdp, policy, kernel, signal).v
    for it in range(1, cap + 1):
        tv, q = robust_bellman_operator(cmdp, u, policy, signal, v)
        residual = float(np.max(np.abs(tv - v)))
        if residual <= tol:
            return RobustEvalResult(v, kernel, float(cmdp.rho @ v), residual, it)
        kernel = _kernel_from_rows(q)
        v_next = evaluate_policy(cmdp, policy, kernel, signal).v
        if np.max(np.abs(v_next - v)) <= 1e-15 and residual <= 1e3 * tol:
            # round-off floor of the minimizer
            return RobustEvalResult(v_next, kernel, float(cmdp.rho @ v_next), residual, it)
        v = v_next
    raise RuntimeError("robust policy evaluation did not converge (operator is a contraction; this is a bug)")


def robust_value_sweeps(cmdp: TabularCMDP, u: UncertaintySet, signal: Signal | str, v0: np.ndarray | None = None):
    """Yield (v, greedy_actions, sup-norm change) after every robust optimality sweep."""
    sig = cmdp.signal(signal)
    v = np.zeros(cmdp.n_states) if v0 is None else np.asarray(v0, dtype=float)
    while True:
        sigma, _ = _worst_rows(cmdp, u, v)
        qv = sig + cmdp.gamma * sigma
        # argmax picks the lowest index among ties
        greedy = np.argmax(qv, axis=1)
        v_new = qv.max(axis=1)
        gap = float(np.max(np.abs(v_new - v)))
        v = v_new
        yield v, greedy, gap


def robust_value_iteration(
    cmdp: TabularCMDP, u: UncertaintySet, signal: Signal | str = Signal.REWARD, tol: float = 1e-9, max_iter: int = 100_000
) -> tuple[np.ndarray, StochasticPolicy]:
    for it, (v, greedy, gap) in enumerate(robust_value_sweeps(cmdp, u, signal), start=1):
        if gap <= tol:
            # greedy w.r.t. the converged values
            sigma, _ = _worst_rows(cmdp, u, v)
            qv = cmdp.signal(signal) + cmdp.gamma * sigma
            greedy = _argmax_ties_low(qv)
            return v, StochasticPolicy.deterministic(greedy, cmdp.n_actions)
        if it >= max_iter:
            raise RuntimeError("robust value iteration exceeded its iteration cap")
    raise AssertionError("unreachable")


def _argmax_ties_low(qv: np.ndarray, tol: float = 1e-12) -> np.ndarray:
    best = qv.max(axis=1, keepdims=True)
    return np.argmax(qv >= best - tol, axis=1)


# --------------------------------------------------------------------------- kernel-space descent


def kernel_value_gradient(
    cmdp: TabularCMDP, policy: StochasticPolicy, kernel: Kernel, signal: Signal | str
) -> np.ndarray:
    """dV(rho)/dp(s'|s,a) = d(s) pi(a|s) gamma V(s') / (1 - gamma), rows left unnormalized."""
    _check_dims(cmdp, policy, kernel)
    d = occupancy(cmdp, policy, kernel)
    v = evaluate_policy(cmdp, policy, kernel, signal).v
    weight = d[:, None] * policy.probs * cmdp.gamma / (1.0 - cmdp.gamma)
    return weight[:, :, None] * v[None, None, :]


def project_simplex(x: np.ndarray) -> np.ndarray:
    """Euclidean projection of every row of ``x`` onto the probability simplex."""
    x = np.asarray(x, dtype=float)
    n = x.shape[-1]
    u = -np.sort(-x, axis=-1)
    css = np.cumsum(u, axis=-1) - 1.0
    idx = np.arange(1, n + 1)
    cond = u - css / idx > 0
    rho = n - 1 - np.argmax(cond[..., ::-1], axis=-1)
    theta = np.take_along_axis(css, rho[..., None], axis=-1) / (rho[..., None] + 1.0)
    return np.maximum(x - theta, 0.0)


def _project_l1_ball(x: np.ndarray, radius: float) -> np.ndarray:
    """Euclidean projection of every row onto {y : ||y||_1 <= radius}."""
    absx = np.abs(x)
    inside = absx.sum(axis=-1) <= radius
    proj = np.sign(x) * project_simplex(absx / radius) * radius if radius > 0 else np.zeros_like(x)
    return np.where(inside[..., None], x, proj)


def _project_tv_rows(rows: np.ndarray, p0: np.ndarray, radius: float, tol: float = 1e-8, max_iter: int = 20_000):
    """Dykstra alternation between the simplex and the l1 ball ||q - p0||_1 <= 2R."""
    x = rows.copy()
    y = x.copy()
    p_inc = np.zeros_like(x)
    q_inc = np.zeros_like(x)
    for _ in range(max_iter):
        y = project_simplex(x + p_inc)
        p_inc = x + p_inc - y
        x_new = p0 + _project_l1_ball(y + q_inc - p0, 2.0 * radius)
        q_inc = y + q_inc - x_new
        done = np.max(np.abs(x_new - x)) < tol * 1e-2 and np.max(np.abs(x_new - y)) < tol
        x = x_new
        if done:
            break
    q = project_simplex(x)
    dist = np.abs(q - p0).sum(axis=-1)
    over = dist > 2.0 * radius
    if np.any(over):
        # pull back along the chord to p0; stays in the simplex by convexity
        shrink = np.where(over, 2.0 * radius / np.maximum(dist, 1e-300), 1.0)
        q = p0 + shrink[:, None] * (q - p0)
    return q


def _support_columns(p0: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Column indices of each row's support, padded to the widest row, and the validity mask."""
    support = p0 > 0
    width = max(int(support.sum(axis=1).max()), 1)
    idx = np.argsort(~support, axis=1, kind="stable")[:, :width]
    return idx, np.take_along_axis(support, idx, axis=1)


def _project_kl_rows(rows: np.ndarray, p0: np.ndarray, radius: float, tol: float = 1e-10, floor: float = 1e-10):
    """Move each out-of-ball row along the geometric path nominal^(1-t) row^t / Z onto KL = R."""
    # the path never leaves the nominal support, so work on the support columns only
    idx, valid = _support_columns(p0)
    if idx.shape[1] < p0.shape[1]:
        q = _project_kl_compact(
            np.take_along_axis(rows, idx, axis=1), np.where(valid, np.take_along_axis(p0, idx, axis=1), 0.0), radius, tol, floor
        )
        out = np.zeros_like(rows)
        np.put_along_axis(out, idx, np.where(valid, q, 0.0), axis=1)
        return out
    return _project_kl_compact(rows, p0, radius, tol, floor)


def _project_kl_compact(rows: np.ndarray, p0: np.ndarray, radius: float, tol: float, floor: float):
    support = p0 > 0
    # zeros inside the nominal support make the path discontinuous at t = 0
    x = np.where(support, (1.0 - floor) * rows + floor * p0, 0.0)
    safe = np.where(support, x, 1.0) / np.where(support, p0, 1.0)
    ell = np.where(support, np.log(safe), 0.0)

    def path(t):
        logits = np.where(support, t[:, None] * ell, -np.inf)
        top = logits.max(axis=1)
        w = np.where(support, p0 * np.exp(logits - top[:, None]), 0.0)
        z = w.sum(axis=1)
        qq = w / z[:, None]
        mean = (qq * ell).sum(axis=1)
        var = (qq * (ell - mean[:, None]) ** 2).sum(axis=1)
        # KL(q_t || p0) = t E_t[ell] - log Z(t), with derivative t Var_t[ell]
        kl = t * mean - (np.log(z) + top)
        return qq, kl, t * var

    lo = np.zeros(rows.shape[0])
    hi = np.ones(rows.shape[0])
    # KL along the path is usually convex in t, so Newton from t = 1 approaches the root monotonically
    t = np.ones(rows.shape[0])
    for _ in range(100):
        _, kl, slope = path(t)
        ok = kl <= radius
        lo = np.where(ok, t, lo)
        hi = np.where(ok, hi, t)
        # a round-off overshoot of at most tol is accepted; membership allows that slack
        done = np.abs(kl - radius) <= tol
        if np.all(done | (hi - lo < 1e-15)):
            return path(np.where(done, t, lo))[0]
        with np.errstate(divide="ignore", invalid="ignore"):
            newton = t - (kl - radius) / slope
        inside = np.isfinite(newton) & (newton > lo) & (newton < hi)
        t = np.where(inside, newton, 0.5 * (lo + hi))
    return path(lo)[0]


def project_kernel(kernel: Kernel | np.ndarray, u: UncertaintySet) -> Kernel:
    """Per-row projection onto the uncertainty set; in-ball rows are returned unchanged."""
    probs = kernel.probs if isinstance(kernel, Kernel) else np.asarray(kernel, dtype=float)
    S, A, _ = probs.shape
    p0 = u.nominal.probs.reshape(S * A, S)
    rows = probs.reshape(S * A, S)
    if np.any(rows < 0) or np.max(np.abs(rows.sum(axis=1) - 1.0)) > 1e-12:
        rows = project_simplex(rows)
    out = rows.copy()
    div = row_divergence(rows, p0, u.divergence)
    outside = div > u.radius
    if np.any(outside):
        if u.divergence is Divergence.KL:
            out[outside] = _project_kl_rows(rows[outside], p0[outside], u.radius)
        else:
            out[outside] = _project_tv_rows(rows[outside], p0[outside], u.radius)
    out = np.clip(out, 0.0, None)
    return Kernel((out / out.sum(axis=1, keepdims=True)).reshape(S, A, S))


Schedule = Callable[[int], float]


def constant_schedule(beta: float) -> Schedule:
    return lambda t: beta


def decaying_schedule(beta0: float, horizon: float) -> Schedule:
    """beta_t = beta0 / (1 + t / horizon)."""
    return lambda t: beta0 / (1.0 + t / horizon)


def parse_schedule(text: str) -> Schedule:
    """``"constant:B"`` or ``"decay:B0:H"``."""
    parts = text.split(":")
    try:
        if parts[0] == "constant" and len(parts) == 2:
            return constant_schedule(float(parts[1]))
        if parts[0] == "decay" and len(parts) == 3:
            return decaying_schedule(float(parts[1]), float(parts[2]))
    except ValueError:
        pass
    raise ValueError(f"bad step-size schedule {text!r}; use 'constant:B' or 'decay:B0:H'")


DEFAULT_SCHEDULE = "constant:1.0"
default_schedule = parse_schedule(DEFAULT_SCHEDULE)


@dataclass(frozen=True, eq=False)
class PgdResult:
    kernel: Kernel
    scalar_return: float
    steps_run: int


def _descent_step(p: np.ndarray, grad: np.ndarray, beta: float, geometry: str) -> np.ndarray:
    if geometry == "euclidean":
        return p - beta * grad
    # exponentiated-gradient step; keeps the support of p
    logits = np.where(p > 0, -beta * grad, -np.inf)
    logits -= logits.max(axis=-1, keepdims=True)
    w = p * np.exp(logits)
    return w / w.sum(axis=-1, keepdims=True)


def worst_kernel_pgd(
    cmdp: TabularCMDP,
    policy: StochasticPolicy,
    u: UncertaintySet,
    signal: Signal | str,
    steps: int = 200,
    step_size_schedule: Schedule = default_schedule,
    geometry: str | None = None,
    normalize: str = "row",
    tol: float = 1e-9,
) -> PgdResult:
    """Projected gradient descent on V(rho) over the kernel, starting at the nominal kernel.

    ``geometry`` picks the step taken before projection: ``"euclidean"``
    (p - beta * grad) or ``"mirror"`` (p * exp(-beta * grad), renormalized).
    Default is mirror for KL sets and euclidean for TV sets.

    ``normalize`` scales the gradient before the step: ``"none"``, ``"global"``
    (divide by the largest entry) or ``"row"`` (divide each (s, a) row by its
    own largest entry). Every row's gradient is a non-negative multiple of
    V(.), so under ``"row"`` rows with zero occupancy weight step along V
    itself, the direction that lowers every state value. Stops early
    once an iterate moves less than ``tol``; returns the iterate with the
    lowest return seen.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    if normalize not in ("row", "global", "none"):
        raise ValueError(f"unknown normalize mode {normalize!r}")
    signal = Signal(signal)
    if geometry is None:
        geometry = "mirror" if u.divergence is Divergence.KL else "euclidean"
    if geometry not in ("mirror", "euclidean"):
        raise ValueError(f"unknown geometry {geometry!r}")
    p = u.nominal
    bundle = evaluate_policy(cmdp, policy, p, signal)
    best = PgdResult(p, bundle.scalar_return, 0)
    if u.radius == 0:
        return best
    support = u.nominal.probs > 0
    for t in range(steps):
        if normalize == "row":
            # every row's gradient is a non-negative multiple of V, so the
            # row-normalized direction needs only the current value vector
            v = bundle.v
            hi = np.where(support, v, -np.inf).max(axis=-1, keepdims=True)
            lo = np.where(support, v, np.inf).min(axis=-1, keepdims=True)
            span = hi - lo
            if not np.any(span > 0):
                break
            with np.errstate(invalid="ignore", divide="ignore"):
                direction = np.where(span > 0, (v[None, None, :] - lo) / span, 0.0)
        else:
            grad = kernel_value_gradient(cmdp, policy, p, signal)
            if normalize == "global":
                scale = float(np.max(np.abs(grad)))
                if scale <= 0:
                    break
                direction = grad / scale
            else:
                direction = grad
        p_next = project_kernel(_descent_step(p.probs, direction, step_size_schedule(t), geometry), u)
        bundle = evaluate_policy(cmdp, policy, p_next, signal)
        moved = float(np.max(np.abs(p_next.probs - p.probs)))
        p = p_next
        if bundle.scalar_return < best.scalar_return:
            best = PgdResult(p, bundle.scalar_return, t + 1)
        if moved <= tol:
            break
    return best
