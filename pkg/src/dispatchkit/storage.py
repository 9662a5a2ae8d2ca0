"""Storage dynamics with conversion losses and the real-time imbalance
dispatchers: the myopic closed form and an optional lookahead planner."""

from dataclasses import dataclass

import numpy as np

from . import solver
from .core import StorageSpec, ValidationError, split_directions


class LookaheadSolveError(RuntimeError):
    """The lookahead optimization did not converge; fall back to the myopic
    dispatcher."""


@dataclass(frozen=True)
class StorageState:
    """Stored energy together with the specification it lives under."""

    e: float
    spec: StorageSpec
    dt: float = 1.0

    def __post_init__(self):
        if not (self.spec.e_min - 1e-9 <= self.e <= self.spec.e_max + 1e-9):
            raise ValidationError("stored energy outside the specification bounds")
        if not self.dt > 0:
            raise ValidationError("time step must be positive")


@dataclass(frozen=True)
class DispatchOutcome:
    """Result of one real-time dispatch step."""

    p_s: float
    dp_g: float
    e_next: float


def feasible_power_interval(state: StorageState) -> tuple[float, float]:
    """Storage powers sustainable for one step: converter limits intersected
    with the charge/discharge headroom left by the energy bounds."""
    spec = state.spec
    charge_headroom = (spec.e_max - state.e) / ((1.0 - spec.mu) * state.dt)
    discharge_headroom = (spec.e_min - state.e) / ((1.0 + spec.mu) * state.dt)
    p_hi = min(spec.p_max, charge_headroom)
    p_lo = max(spec.p_min, discharge_headroom)
    # roundoff can leave a sliver on the wrong side of zero at the bounds
    return min(p_lo, 0.0), max(p_hi, 0.0)


def step_dynamics(state: StorageState, p_s: float) -> float:
    """Stored energy after one step at net storage power p_s, with the
    conversion loss applied on the respective direction."""
    p_plus, p_minus = split_directions(p_s)
    spec = state.spec
    return state.e + ((1.0 - spec.mu) * p_plus + (1.0 + spec.mu) * p_minus) * state.dt


def dispatch_second_stage(pg_star: float, p_l: float, state: StorageState) -> DispatchOutcome:
    """Myopic imbalance-minimizing dispatch once the inflexible power is known.

    The storage tries to cover pg_star - p_l; whatever the feasible power
    interval cuts off becomes the grid imbalance. The clamp realizes the
    minimal |dp_g| over all feasible choices.
    """
    desired = pg_star - p_l
    p_lo, p_hi = feasible_power_interval(state)
    p_s = min(max(desired, p_lo), p_hi)
    e_next = step_dynamics(state, p_s)
    e_next = min(max(e_next, state.spec.e_min), state.spec.e_max)
    return DispatchOutcome(p_s=p_s, dp_g=p_s - desired, e_next=e_next)


def dispatch_lookahead(pg_star_window, p_l_forecast, state: StorageState,
                       h: int = 3) -> DispatchOutcome:
    """Plan imbalances over h steps against a deterministic forecast and
    return the first step's outcome.

    Minimizes the total absolute imbalance subject to storage feasibility;
    ties are broken toward smaller imbalances at earlier steps. For h = 1
    this reduces to dispatch_second_stage.
    """
    if h < 1:
        raise ValueError("lookahead horizon must be at least 1")
    pg = np.asarray(pg_star_window, dtype=float)[:h]
    pl = np.asarray(p_l_forecast, dtype=float)[:h]
    if pg.size < h or pl.size < h:
        raise ValueError("windows shorter than the lookahead horizon")
    if h == 1:
        return dispatch_second_stage(float(pg[0]), float(pl[0]), state)

    spec = state.spec
    dt = state.dt
    desired = pg - pl
    bound = float(np.max(np.abs(desired))) + (spec.p_max - spec.p_min) + 1.0

    # layout: [dp_plus (h), dp_minus (h), ps_plus (h), ps_minus (h)]
    def views(x):
        return x[0:h], x[h:2 * h], x[2 * h:3 * h], x[3 * h:4 * h]

    weights = 1.0 + 1e-6 * (np.arange(h)[::-1] / max(h - 1, 1))

    def objective(x):
        dpp, dpm, _, _ = views(x)
        return float(np.sum(weights * (dpp - dpm)))

    def gradient(x):
        g = np.zeros(4 * h)
        g[0:h] = weights
        g[h:2 * h] = -weights
        return g

    def soc(psp, psm):
        flows = ((1.0 - spec.mu) * psp + (1.0 + spec.mu) * psm) * dt
        return state.e + np.cumsum(flows)

    def cons(x):
        dpp, dpm, psp, psm = views(x)
        bal = psp + psm - dpp - dpm - desired
        e = soc(psp, psm)
        return np.concatenate([bal, -bal, spec.e_min - e, e - spec.e_max])

    def cons_vjp(x, u):
        u_bal = u[0:h] - u[h:2 * h]
        u_e = u[3 * h:4 * h] - u[2 * h:3 * h]
        # d e_j / d ps_i = loss-side slope * dt for i <= j
        rev = np.cumsum(u_e[::-1])[::-1]
        out = np.zeros(4 * h)
        out[0:h] = -u_bal
        out[h:2 * h] = -u_bal
        out[2 * h:3 * h] = u_bal + (1.0 - spec.mu) * dt * rev
        out[3 * h:4 * h] = u_bal + (1.0 + spec.mu) * dt * rev
        return out

    lower = np.concatenate([np.zeros(h), -bound * np.ones(h),
                            np.zeros(h), spec.p_min * np.ones(h)])
    upper = np.concatenate([bound * np.ones(h), np.zeros(h),
                            spec.p_max * np.ones(h), np.zeros(h)])
    x0 = np.zeros(4 * h)
    psp0, psm0 = split_directions(np.clip(desired, spec.p_min, spec.p_max))
    x0[2 * h:3 * h] = psp0
    x0[3 * h:4 * h] = psm0
    dp0 = np.clip(desired, spec.p_min, spec.p_max) - desired
    x0[0:h], x0[h:2 * h] = split_directions(dp0)

    pairs = [(i, h + i) for i in range(h)] + [(2 * h + i, 3 * h + i) for i in range(h)]
    problem = solver.NlpProblem(
        n=4 * h, objective=objective, gradient=gradient, x0=x0,
        lower=lower, upper=upper, cons=cons, cons_vjp=cons_vjp, pairs=pairs,
    )
    sol = solver.relax_verify_repair(problem, tol=1e-6)
    if not sol.converged:
        raise LookaheadSolveError(f"lookahead dispatch failed: {sol.status}")

    dpp, dpm, psp, psm = views(sol.x)
    p_s = float(psp[0] + psm[0])
    e_next = step_dynamics(state, p_s)
    e_next = min(max(e_next, spec.e_min), spec.e_max)
    return DispatchOutcome(p_s=p_s, dp_g=float(dpp[0] + dpm[0]), e_next=e_next)
