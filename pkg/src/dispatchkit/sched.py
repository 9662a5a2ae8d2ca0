"""Day-ahead schedule optimization.

Three first-stage formulations over the extended horizon:

  * DFS  - deterministic: track the median forecast, storage box limits on
    the expected trajectory.
  * PFS  - probabilistic: robust power band from the forecast support
    interval plus a per-step chance constraint on the stored energy,
    expressed through the fitted CDF of the cumulative energy deviation
    and softened with a penalized slack.
  * PFS-interval - the older percentile variant with hard interval bounds
    instead of the CDF constraint (kept for comparison; it can be
    infeasible, which is its documented limitation).
  * SFS  - scenario-based: minimizes schedule cost plus the expected
    imbalance cost over a weighted scenario set, with per-scenario
    second-stage imbalance plans.

All formulations share the storage model: direction-split powers with
conversion losses, handled by the solver's relax-verify-repair pass.
"""

from dataclasses import dataclass

import numpy as np

from . import solver
from .core import (
    DispatchSchedule,
    StorageSpec,
    TariffSpec,
    TimeGrid,
    ValidationError,
    split_directions,
)
from .forecast import ForecastProduct, ScenarioSet, eval_cdf
from .storage import StorageState, dispatch_second_stage


class ScheduleSolveError(RuntimeError):
    """The underlying optimization did not converge."""


class InfeasibleScheduleError(RuntimeError):
    """The formulation has an empty feasible set."""


class RobustPowerInfeasibleError(InfeasibleScheduleError):
    """The power support interval is wider than the storage power range."""


@dataclass
class PfsInputs:
    """Inputs of the probabilistic (and deterministic) schedulers.

    e0 is the expected stored energy at the start of the horizon; de_g0 the
    predicted grid-side energy deviation accumulated between the
    computation time and the horizon start, which shifts the CDF argument.
    security is the target probability (1 - eps_E) of meeting the schedule,
    pi_p the coverage mass of the robust power band, alpha the softening
    penalty weight.
    """

    grid: TimeGrid
    spec: StorageSpec
    tariff: TariffSpec
    forecast: ForecastProduct
    e0: float
    security: float = 0.6
    pi_p: float = 0.98
    alpha: float = 1000.0
    de_g0: float = 0.0

    def __post_init__(self):
        if not 0.0 < self.security < 1.0:
            raise ValidationError("security level must lie in (0, 1)")
        if not 0.0 < self.pi_p < 1.0:
            raise ValidationError("power coverage mass must lie in (0, 1)")
        if not self.alpha > 0:
            raise ValidationError("softening penalty weight must be positive")
        if not (self.spec.e_min - 1e-9 <= self.e0 <= self.spec.e_max + 1e-9):
            raise ValidationError("initial stored energy outside the storage bounds")
        if self.forecast.horizon != self.grid.horizon:
            raise ValidationError("forecast horizon does not match the time grid")


@dataclass
class SfsInputs:
    """Inputs of the scenario scheduler."""

    grid: TimeGrid
    spec: StorageSpec
    tariff: TariffSpec
    scenarios: ScenarioSet
    e0: float

    def __post_init__(self):
        if self.scenarios.horizon != self.grid.horizon:
            raise ValidationError("scenario length must equal the extended horizon")
        if not (self.spec.e_min - 1e-9 <= self.e0 <= self.spec.e_max + 1e-9):
            raise ValidationError("initial stored energy outside the storage bounds")


@dataclass
class SfsSolution:
    """Scenario schedule plus the per-scenario second-stage plans."""

    schedule: DispatchSchedule
    dp_plus: np.ndarray      # (ns, T)
    dp_minus: np.ndarray     # (ns, T)
    storage_energy: np.ndarray  # (ns, T+1)

    @property
    def dp(self) -> np.ndarray:
        return self.dp_plus + self.dp_minus


def _coef_arrays(tariff: TariffSpec, t: int):
    return (
        np.broadcast_to(np.asarray(tariff.c1_plus, dtype=float), (t,)).copy(),
        np.broadcast_to(np.asarray(tariff.c1_minus, dtype=float), (t,)).copy(),
        np.broadcast_to(np.asarray(tariff.c2_plus, dtype=float), (t,)).copy(),
        np.broadcast_to(np.asarray(tariff.c2_minus, dtype=float), (t,)).copy(),
    )


def chance_mass(forecast: ForecastProduct, spec: StorageSpec, e_states, de_g0: float):
    """Probability of the stored energy staying inside its bounds at every
    interval boundary, given the fitted deviation CDFs. Boundaries whose
    deviation collapsed to a point mass count as deterministic."""
    e_states = np.asarray(e_states, dtype=float)
    mass = np.ones(e_states.size)
    for j, model in enumerate(forecast.cdf_models[: e_states.size]):
        if model is None:
            med = float(np.interp(0.5, forecast.levels, forecast.de_quantiles[j]))
            inside = spec.e_min <= e_states[j] + de_g0 - med <= spec.e_max
            mass[j] = 1.0 if inside else 0.0
        else:
            hi = eval_cdf(model, e_states[j] + de_g0 - spec.e_min)
            lo = eval_cdf(model, e_states[j] + de_g0 - spec.e_max)
            mass[j] = hi - lo
    return mass


def _build_profile_problem(grid, spec, tariff, median, e0, *, support=None,
                           cdf_states=None, de_medians=None, de_quantile_bounds=None,
                           de_g0=0.0, security=None, alpha=None, x_init=None):
    """Shared constructor for DFS / PFS / PFS-interval.

    Decision layout: [pg+ (T), pg- (T), ps+ (T), ps- (T)] and, when
    cdf_states is given, a softening slack per interval boundary 1..T.
    support adds the robust power band, de_quantile_bounds the hard
    interval rows of the percentile variant. Boundaries whose deviation
    collapsed to a point mass (CDF slot None) get hard deterministic rows
    at the median deviation instead of a chance row.
    """
    t = grid.horizon
    dt = grid.dt
    median = np.asarray(median, dtype=float)
    c1p, c1m, c2p, c2m = _coef_arrays(tariff, t)
    has_eps = cdf_states is not None
    n = 5 * t if has_eps else 4 * t

    if support is not None:
        sup_lo, sup_hi = support
        lo_room = sup_lo + spec.p_max   # pg <= this
        hi_room = sup_hi + spec.p_min   # pg >= this
        bad = hi_room - lo_room > 1e-9
        if np.any(bad):
            steps = np.flatnonzero(bad)
            raise RobustPowerInfeasibleError(
                f"power support wider than the storage power range at steps {steps.tolist()}"
            )

    if de_quantile_bounds is not None:
        de_lo, de_hi = de_quantile_bounds  # per boundary 0..T
        floor = spec.e_min + de_hi - de_g0
        ceil = spec.e_max + de_lo - de_g0
        eff_lo = np.maximum(floor, spec.e_min)
        eff_hi = np.minimum(ceil, spec.e_max)
        if np.any(eff_lo > eff_hi + 1e-9):
            steps = np.flatnonzero(eff_lo > eff_hi + 1e-9)
            raise InfeasibleScheduleError(
                f"energy-deviation interval exceeds the usable capacity at boundaries {steps.tolist()}"
            )

    if has_eps:
        models = [cdf_states[j] for j in range(1, t + 1)]
        active = np.array([j for j, m in enumerate(models) if m is not None], dtype=int)
        det_idx = np.array([j for j, m in enumerate(models) if m is None], dtype=int)
        # stacked parameters for one vectorized evaluation over all states
        par = np.array([[m.a1, m.a2, m.a3, m.a4, m.a5, m.a6]
                        for m in models if m is not None]).reshape(-1, 6)
        if de_medians is None:
            de_med = np.zeros(t + 1)
        else:
            de_med = np.asarray(de_medians, dtype=float)

        def mass_and_density(e_active):
            zlo = e_active + de_g0 - spec.e_min
            zhi = e_active + de_g0 - spec.e_max
            from scipy.special import expit
            s1l = expit(par[:, 1] * (zlo - par[:, 2]))
            s2l = expit(par[:, 4] * (zlo - par[:, 5]))
            s1h = expit(par[:, 1] * (zhi - par[:, 2]))
            s2h = expit(par[:, 4] * (zhi - par[:, 5]))
            mass = par[:, 0] * (s1l - s1h) + par[:, 3] * (s2l - s2h)
            dens = (par[:, 0] * par[:, 1] * (s1l * (1 - s1l) - s1h * (1 - s1h))
                    + par[:, 3] * par[:, 4] * (s2l * (1 - s2l) - s2h * (1 - s2h)))
            return mass, dens
    else:
        active = det_idx = np.zeros(0, dtype=int)
        de_med = None

    def views(x):
        out = [x[0:t], x[t:2 * t], x[2 * t:3 * t], x[3 * t:4 * t]]
        out.append(x[4 * t:5 * t] if has_eps else None)
        return out

    def soc(psp, psm):
        return e0 + np.cumsum(((1.0 - spec.mu) * psp + (1.0 + spec.mu) * psm) * dt)

    # a large softening weight makes the landscape needlessly stiff for the
    # quasi-Newton inner loop; scaling the whole objective leaves the
    # minimizer unchanged
    scale = max(1.0, alpha / 25.0) if has_eps else 1.0
    # bilinear complementarity penalty: zero value and zero projected
    # gradient at complementary points, but it removes the flat split
    # directions and the energy-dumping basins from the relaxation
    comp_w = 2.0

    def objective(x):
        pgp, pgm, psp, psm, eps = views(x)
        val = float(np.sum(c1p * pgp**2 + c2p * pgp + c1m * pgm**2 + c2m * pgm))
        if has_eps:
            val += alpha * float(np.sum(eps))
        val /= scale
        val += comp_w * float(np.sum(pgp * (-pgm)) + np.sum(psp * (-psm)))
        return val

    def gradient(x):
        pgp, pgm, psp, psm, _ = views(x)
        g = np.zeros(n)
        g[0:t] = 2.0 * c1p * pgp + c2p
        g[t:2 * t] = 2.0 * c1m * pgm + c2m
        if has_eps:
            g[4 * t:5 * t] = alpha
        g /= scale
        g[0:t] += comp_w * (-pgm)
        g[t:2 * t] += comp_w * (-pgp)
        g[2 * t:3 * t] += comp_w * (-psm)
        g[3 * t:4 * t] += comp_w * (-psp)
        return g

    cache = {"key": None, "soc": None, "mass": None, "dens": None}

    def _states(x):
        key = x.tobytes()
        if cache["key"] != key:
            psp, psm = x[2 * t:3 * t], x[3 * t:4 * t]
            e = soc(psp, psm)
            if has_eps and active.size:
                mass, dens = mass_and_density(e[active])
            else:
                mass = dens = None
            cache.update(key=key, soc=e, mass=mass, dens=dens)
        return cache["soc"], cache["mass"], cache["dens"]

    def cons(x):
        pgp, pgm, psp, psm, eps = views(x)
        pg = pgp + pgm
        bal = psp + psm - pg + median
        e, mass, _ = _states(x)
        blocks = [bal, -bal, spec.e_min - e, e - spec.e_max]
        if support is not None:
            blocks.append(hi_room - pg)
            blocks.append(pg - lo_room)
        if de_quantile_bounds is not None:
            blocks.append(floor[1:] - e)
            blocks.append(e - ceil[1:])
        if has_eps:
            if active.size:
                blocks.append((security - eps[active]) - mass)
            if det_idx.size:
                req = de_med[det_idx + 1] - de_g0
                blocks.append((spec.e_min + req) - e[det_idx])
                blocks.append(e[det_idx] - (spec.e_max + req))
        return np.concatenate(blocks)

    def cons_vjp(x, u):
        e, _, dens = _states(x)
        pos = 0
        u_bal = u[pos:pos + t] - u[pos + t:pos + 2 * t]
        pos += 2 * t
        w_e = u[pos + t:pos + 2 * t] - u[pos:pos + t]  # e_hi minus e_lo rows
        pos += 2 * t
        u_pg = np.zeros(t)
        if support is not None:
            u_pg += u[pos + t:pos + 2 * t] - u[pos:pos + t]
            pos += 2 * t
        if de_quantile_bounds is not None:
            w_e += u[pos + t:pos + 2 * t] - u[pos:pos + t]
            pos += 2 * t
        grad_eps = None
        if has_eps:
            grad_eps = np.zeros(t)
            if active.size:
                u_cdf = u[pos:pos + active.size]
                pos += active.size
                w_e[active] -= u_cdf * dens
                grad_eps[active] = -u_cdf
            if det_idx.size:
                nd_ = det_idx.size
                w_e[det_idx] += u[pos + nd_:pos + 2 * nd_] - u[pos:pos + nd_]
                pos += 2 * nd_
        rev = np.cumsum(w_e[::-1])[::-1]
        out = np.zeros(n)
        out[0:t] = -u_bal + u_pg
        out[t:2 * t] = -u_bal + u_pg
        out[2 * t:3 * t] = u_bal + (1.0 - spec.mu) * dt * rev
        out[3 * t:4 * t] = u_bal + (1.0 + spec.mu) * dt * rev
        if has_eps:
            out[4 * t:5 * t] = grad_eps
        return out

    big = float(np.max(np.abs(median))) + (spec.p_max - spec.p_min) + spec.capacity / dt + 10.0
    lower = np.concatenate([np.zeros(t), -big * np.ones(t),
                            np.zeros(t), spec.p_min * np.ones(t)])
    upper = np.concatenate([big * np.ones(t), np.zeros(t),
                            spec.p_max * np.ones(t), np.zeros(t)])
    if has_eps:
        lower = np.concatenate([lower, np.zeros(t)])
        upper = np.concatenate([upper, np.ones(t)])

    if x_init is None:
        x_init = np.zeros(n)
        x_init[0:t] = np.maximum(median, 0.0)
        x_init[t:2 * t] = np.minimum(median, 0.0)
    x_init = np.minimum(np.maximum(x_init, lower), upper)
    if has_eps and active.size:
        # start the slacks at the exact shortfall of the warm-start trajectory
        e_init = soc(x_init[2 * t:3 * t], x_init[3 * t:4 * t])
        mass0, _ = mass_and_density(e_init[active])
        eps0 = np.zeros(t)
        eps0[active] = np.maximum(security - mass0, 0.0)
        x_init[4 * t:5 * t] = np.minimum(eps0, 1.0)

    pairs = [(i, t + i) for i in range(t)] + [(2 * t + i, 3 * t + i) for i in range(t)]
    return solver.NlpProblem(
        n=n, objective=objective, gradient=gradient, x0=x_init,
        lower=lower, upper=upper, cons=cons, cons_vjp=cons_vjp, pairs=pairs,
    )


def _solution_to_schedule(sol, grid: TimeGrid, spec: StorageSpec, e0: float,
                          slack0: float = 0.0) -> DispatchSchedule:
    t = grid.horizon
    pgp = np.maximum(sol.x[0:t], 0.0)
    pgm = np.minimum(sol.x[t:2 * t], 0.0)
    psp = sol.x[2 * t:3 * t]
    psm = sol.x[3 * t:4 * t]
    soc = np.concatenate(
        [[e0], e0 + np.cumsum(((1 - spec.mu) * psp + (1 + spec.mu) * psm) * grid.dt)]
    )
    if sol.x.size >= 5 * t:
        slack = np.concatenate([[slack0], np.maximum(sol.x[4 * t:5 * t], 0.0)])
    else:
        slack = np.zeros(t + 1)
    return DispatchSchedule(
        pg_star=pgp + pgm, pg_plus=pgp, pg_minus=pgm,
        expected_soc=soc, slack=slack, nd=grid.nd,
    )


def _run(problem, tol, max_iter, lam0=None):
    sol = solver.relax_verify_repair(problem, tol=tol, max_iter=max_iter, lam0=lam0)
    if not sol.converged:
        raise ScheduleSolveError(f"schedule optimization failed: {sol.status}")
    return sol


def build_and_solve_dfs(inputs: PfsInputs, tol: float = 1e-6,
                        max_iter: int = 120) -> DispatchSchedule:
    """Deterministic schedule against the median forecast; equivalent to the
    probabilistic problem with all deviation variables pinned at zero."""
    problem = _build_profile_problem(
        inputs.grid, inputs.spec, inputs.tariff,
        inputs.forecast.median_power, inputs.e0,
    )
    sol = _run(problem, tol, max_iter)
    return _solution_to_schedule(sol, inputs.grid, inputs.spec, inputs.e0)


def _dfs_warm_start(inputs: PfsInputs, tol, max_iter, n_target):
    base = _build_profile_problem(
        inputs.grid, inputs.spec, inputs.tariff,
        inputs.forecast.median_power, inputs.e0,
    )
    sol = solver.relax_verify_repair(base, tol=tol, max_iter=max_iter)
    x = np.zeros(n_target)
    if sol.converged:
        x[: base.n] = sol.x
    else:
        t = inputs.grid.horizon
        med = inputs.forecast.median_power
        x[0:t] = np.maximum(med, 0.0)
        x[t:2 * t] = np.minimum(med, 0.0)
    return x


def build_and_solve_pfs(inputs: PfsInputs, tol: float = 1e-6,
                        max_iter: int = 120) -> DispatchSchedule:
    """Chance-constrained schedule with CDF softening.

    The robust power band keeps the schedule coverable for (approximately)
    the whole support of the inflexible power; the stored-energy chance
    constraint is enforced through the fitted deviation CDFs with a
    penalized slack, so capacity shortfalls soften instead of failing.
    """
    grid = inputs.grid
    t = grid.horizon
    support = inputs.forecast.support(inputs.pi_p)
    x0 = _dfs_warm_start(inputs, tol, max_iter, 5 * t)
    de_med = np.array([np.interp(0.5, inputs.forecast.levels, row)
                       for row in inputs.forecast.de_quantiles])
    problem = _build_profile_problem(
        grid, inputs.spec, inputs.tariff, inputs.forecast.median_power, inputs.e0,
        support=support, cdf_states=inputs.forecast.cdf_models, de_medians=de_med,
        de_g0=inputs.de_g0, security=inputs.security, alpha=inputs.alpha,
        x_init=x0,
    )
    sol = _run(problem, tol, max_iter)
    mass0 = chance_mass(inputs.forecast, inputs.spec, [inputs.e0], inputs.de_g0)[0]
    slack0 = max(0.0, inputs.security - mass0)
    return _solution_to_schedule(sol, grid, inputs.spec, inputs.e0, slack0=slack0)


def build_and_solve_pfs_interval(inputs: PfsInputs, tol: float = 1e-6,
                                 max_iter: int = 120) -> DispatchSchedule:
    """Percentile variant: hard interval bounds on the expected trajectory
    instead of the CDF constraint. Raises InfeasibleScheduleError when the
    central deviation interval outgrows the usable capacity."""
    grid = inputs.grid
    support = inputs.forecast.support(inputs.pi_p)
    de_lo, de_hi = inputs.forecast.de_interval(inputs.security)
    x0 = _dfs_warm_start(inputs, tol, max_iter, 4 * grid.horizon)
    problem = _build_profile_problem(
        grid, inputs.spec, inputs.tariff, inputs.forecast.median_power, inputs.e0,
        support=support, de_quantile_bounds=(de_lo, de_hi), de_g0=inputs.de_g0,
        x_init=x0,
    )
    sol = _run(problem, tol, max_iter)
    return _solution_to_schedule(sol, grid, inputs.spec, inputs.e0)


SFS_ABS_SMOOTHING = 1e-3  # kW; |dp| is smoothed as sqrt(dp^2+d^2)-d in the solve


def build_and_solve_sfs(inputs: SfsInputs, tol: float = 1e-6,
                        max_iter: int = 120) -> SfsSolution:
    """Scenario schedule minimizing schedule cost plus expected imbalance
    cost, with an imbalance plan and storage trajectory per scenario.

    The per-scenario balance is eliminated analytically: the imbalance is
    the affine residual dp = ps - pg + p_l, so the decision variables are
    just the schedule split and the per-scenario storage splits, and the
    only constraint rows left are the stored-energy bounds. The |dp| term
    of the settlement is smoothed at a sub-Watt scale to keep the solve
    differentiable.
    """
    grid = inputs.grid
    spec = inputs.spec
    t = grid.horizon
    dt = grid.dt
    ns = inputs.scenarios.n
    pl = inputs.scenarios.scenarios          # (ns, t)
    w = inputs.scenarios.weights
    m = inputs.tariff.dev_multiplier
    c1p, c1m, c2p, c2m = _coef_arrays(inputs.tariff, t)
    e0 = inputs.e0
    delta = SFS_ABS_SMOOTHING

    blk = ns * t
    n = 2 * t + 2 * blk
    o_psp, o_psm = 2 * t, 2 * t + blk

    def views(x):
        return (
            x[0:t], x[t:2 * t],
            x[o_psp:o_psp + blk].reshape(ns, t),
            x[o_psm:o_psm + blk].reshape(ns, t),
        )

    def soc(psp, psm):
        return e0 + np.cumsum(((1 - spec.mu) * psp + (1 + spec.mu) * psm) * dt, axis=1)

    # bilinear complementarity penalty, exactly as in the profile builder:
    # vanishes at complementary points, removes the energy-dumping basins
    comp_w = 2.0

    def dp_of(pgp, pgm, psp, psm):
        return psp + psm - (pgp + pgm)[None, :] + pl

    def objective(x):
        pgp, pgm, psp, psm = views(x)
        val = float(np.sum(c1p * pgp**2 + c2p * pgp + c1m * pgm**2 + c2m * pgm))
        dp = dp_of(pgp, pgm, psp, psm)
        smooth_abs = np.sqrt(dp**2 + delta**2) - delta
        dev = m * (c1p * dp**2 + c2p * smooth_abs)
        val += float(np.sum(w[:, None] * dev))
        val += comp_w * (float(np.sum(pgp * (-pgm))) + float(np.sum(psp * (-psm))))
        return val

    def gradient(x):
        pgp, pgm, psp, psm = views(x)
        dp = dp_of(pgp, pgm, psp, psm)
        ddev = w[:, None] * m * (2.0 * c1p * dp + c2p * dp / np.sqrt(dp**2 + delta**2))
        g = np.zeros(n)
        s = ddev.sum(axis=0)
        g[0:t] = 2 * c1p * pgp + c2p + comp_w * (-pgm) - s
        g[t:2 * t] = 2 * c1m * pgm + c2m + comp_w * (-pgp) - s
        g[o_psp:o_psp + blk] = (ddev + comp_w * (-psm)).ravel()
        g[o_psm:o_psm + blk] = (ddev + comp_w * (-psp)).ravel()
        return g

    g_buf = np.empty(2 * blk)
    cache = {"key": None}

    def cons(x):
        key = x.tobytes()
        if cache["key"] == key:
            return g_buf
        _, _, psp, psm = views(x)
        e = soc(psp, psm)
        g_buf[0:blk] = (spec.e_min - e).ravel()
        g_buf[blk:2 * blk] = (e - spec.e_max).ravel()
        cache["key"] = key
        return g_buf

    def cons_vjp(x, u):
        w_e = (u[blk:2 * blk] - u[0:blk]).reshape(ns, t)
        rev = np.cumsum(w_e[:, ::-1], axis=1)[:, ::-1]
        out = np.zeros(n)
        out[o_psp:o_psp + blk] = ((1 - spec.mu) * dt * rev).ravel()
        out[o_psm:o_psm + blk] = ((1 + spec.mu) * dt * rev).ravel()
        return out

    big = float(np.max(np.abs(pl))) + (spec.p_max - spec.p_min) + spec.capacity / dt + 10.0
    lower = np.concatenate([
        np.zeros(t), -big * np.ones(t),
        np.zeros(blk), spec.p_min * np.ones(blk),
    ])
    upper = np.concatenate([
        big * np.ones(t), np.zeros(t),
        spec.p_max * np.ones(blk), np.zeros(blk),
    ])

    # warm start: deterministic schedule on the weighted-mean scenario, each
    # scenario's storage plan from the feasible second-stage clamp chain
    mean_pl = w @ pl
    dfs_like = PfsInputs(
        grid=grid, spec=spec, tariff=inputs.tariff,
        forecast=_median_only_product(mean_pl), e0=e0, security=0.5,
    )
    x0 = np.zeros(n)
    x0_dfs = _dfs_warm_start(dfs_like, tol, max_iter, 4 * t)
    x0[0:2 * t] = x0_dfs[0:2 * t]
    pg0 = x0[0:t] + x0[t:2 * t]
    ps0 = np.empty((ns, t))
    for i in range(ns):
        e_cur = e0
        for k in range(t):
            out = dispatch_second_stage(pg0[k], pl[i, k],
                                        StorageState(e=e_cur, spec=spec, dt=dt))
            ps0[i, k] = out.p_s
            e_cur = out.e_next
    x0[o_psp:o_psp + blk] = np.maximum(ps0, 0.0).ravel()
    x0[o_psm:o_psm + blk] = np.minimum(ps0, 0.0).ravel()

    pairs = [(i, t + i) for i in range(t)]
    pairs += [(o_psp + i, o_psm + i) for i in range(blk)]
    problem = solver.NlpProblem(
        n=n, objective=objective, gradient=gradient, x0=x0,
        lower=lower, upper=upper, cons=cons, cons_vjp=cons_vjp, pairs=pairs,
    )
    sol = _run(problem, tol, max_iter)

    pgp, pgm, psp, psm = views(sol.x)
    pgp = np.maximum(pgp, 0.0)
    pgm = np.minimum(pgm, 0.0)
    dp = dp_of(pgp, pgm, psp, psm)
    e = np.concatenate([np.full((ns, 1), e0), soc(psp, psm)], axis=1)
    expected_soc = np.concatenate([[e0], (w[:, None] * soc(psp, psm)).sum(axis=0)])
    schedule = DispatchSchedule(
        pg_star=pgp + pgm, pg_plus=pgp, pg_minus=pgm,
        expected_soc=expected_soc, slack=np.zeros(t + 1), nd=grid.nd,
    )
    dpp, dpm = split_directions(dp)
    return SfsSolution(
        schedule=schedule, dp_plus=dpp, dp_minus=dpm, storage_energy=e.copy(),
    )


def _median_only_product(median) -> ForecastProduct:
    """Degenerate forecast wrapping a point prediction (used for warm
    starts and for deterministic runs driven by a bare median)."""
    median = np.asarray(median, dtype=float)
    t = median.size
    levels = np.array([0.25, 0.5, 0.75])
    q = np.repeat(median[:, None], 3, axis=1)
    return ForecastProduct(
        levels=levels, power_quantiles=q, median_power=median,
        de_quantiles=np.zeros((t + 1, 3)), cdf_models=[None] * (t + 1),
    )


def median_only_product(median) -> ForecastProduct:
    return _median_only_product(median)


def verify_schedule(schedule: DispatchSchedule, inputs: PfsInputs,
                    kind: str = "pfs") -> dict:
    """Re-check a returned schedule against its own constraint set with an
    independent evaluator (no solver bookkeeping involved).

    Returns the worst violation per constraint family; the balance residual
    is reconstructed from the schedule itself via the expected dynamics.
    """
    grid, spec = inputs.grid, inputs.spec
    t = grid.horizon
    med = inputs.forecast.median_power
    ps = schedule.pg_star - med
    psp = np.maximum(ps, 0.0)
    psm = np.minimum(ps, 0.0)
    soc = np.concatenate(
        [[inputs.e0],
         inputs.e0 + np.cumsum(((1 - spec.mu) * psp + (1 + spec.mu) * psm) * grid.dt)]
    )
    out = {
        "soc_mismatch": float(np.max(np.abs(soc - schedule.expected_soc))),
        "energy_box": float(np.max(np.maximum(
            np.maximum(spec.e_min - soc, soc - spec.e_max), 0.0))),
        "complementarity": float(np.max(schedule.pg_plus * np.abs(schedule.pg_minus))),
    }
    if kind in ("pfs", "pfs-interval"):
        sup_lo, sup_hi = inputs.forecast.support(inputs.pi_p)
        out["robust_power"] = float(np.max(np.maximum(
            np.maximum((sup_hi + spec.p_min) - schedule.pg_star,
                       schedule.pg_star - (sup_lo + spec.p_max)), 0.0)))
    if kind == "pfs":
        mass = chance_mass(inputs.forecast, spec, soc, inputs.de_g0)
        out["chance"] = float(np.max(np.maximum(
            inputs.security - schedule.slack - mass, 0.0)))
    if kind == "pfs-interval":
        de_lo, de_hi = inputs.forecast.de_interval(inputs.security)
        lo_req = spec.e_min + de_hi - inputs.de_g0
        hi_req = spec.e_max + de_lo - inputs.de_g0
        out["interval"] = float(np.max(np.maximum(
            np.maximum(lo_req - soc, soc - hi_req), 0.0)))
    return out


def verify_sfs(solution: SfsSolution, inputs: SfsInputs) -> dict:
    """Independent re-check of the scenario solution: per-scenario power
    balance, storage feasibility, and direction complementarity."""
    spec = inputs.spec
    pl = inputs.scenarios.scenarios
    sched = solution.schedule
    ps = np.diff(solution.storage_energy, axis=1)
    # invert the lossy dynamics per direction
    dp = solution.dp
    psum = sched.pg_star[None, :] + dp - pl
    psp = np.maximum(psum, 0.0)
    psm = np.minimum(psum, 0.0)
    flows = ((1 - spec.mu) * psp + (1 + spec.mu) * psm) * inputs.grid.dt
    out = {
        "balance": float(np.max(np.abs(ps - flows))),
        "energy_box": float(np.max(np.maximum(
            np.maximum(spec.e_min - solution.storage_energy,
                       solution.storage_energy - spec.e_max), 0.0))),
        "power_box": float(np.max(np.maximum(
            np.maximum(spec.p_min - psum, psum - spec.p_max), 0.0))),
        "complementarity": max(
            float(np.max(sched.pg_plus * np.abs(sched.pg_minus))),
            float(np.max(solution.dp_plus * np.abs(solution.dp_minus))),
        ),
    }
    return out


def sfs_objective_value(pg_star, dp, inputs: SfsInputs) -> float:
    """Scenario-program objective for an arbitrary (schedule, imbalance
    plan) pair; used to compare schedules under the same scenario set."""
    t = inputs.grid.horizon
    c1p, c1m, c2p, c2m = _coef_arrays(inputs.tariff, t)
    pgp = np.maximum(pg_star, 0.0)
    pgm = np.minimum(pg_star, 0.0)
    val = float(np.sum(c1p * pgp**2 + c2p * pgp + c1m * pgm**2 + c2m * pgm))
    m = inputs.tariff.dev_multiplier
    dev = m * (c1p * dp**2 + c2p * np.abs(dp))
    val += float(np.sum(inputs.scenarios.weights[:, None] * dev))
    return val
