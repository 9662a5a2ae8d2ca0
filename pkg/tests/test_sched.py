import numpy as np
import pytest
from scipy.stats import norm

from dispatchkit import solver
from dispatchkit.core import (
    StorageSpec,
    TariffSpec,
    TimeGrid,
    reference_storage,
    schedule_cost,
    split_directions,
    tariff_c1,
    tariff_c2,
)
from dispatchkit.forecast import ForecastProduct, ScenarioSet, fit_cdf
from dispatchkit.sched import (
    InfeasibleScheduleError,
    PfsInputs,
    RobustPowerInfeasibleError,
    SfsInputs,
    build_and_solve_dfs,
    build_and_solve_pfs,
    build_and_solve_pfs_interval,
    build_and_solve_sfs,
    chance_mass,
    median_only_product,
    sfs_objective_value,
    verify_schedule,
    verify_sfs,
)
from dispatchkit.storage import StorageState, dispatch_second_stage

LEVELS = np.round(np.concatenate([[0.01], np.arange(0.05, 0.951, 0.05), [0.99]]), 2)
GRID = TimeGrid(k0=0, ks=12, nd=24, nf=12)


def gaussian_product(grid=GRID, power_sd_scale=1.0, de_sd_scale=0.8, seed_hour=0):
    """Forecast product with Gaussian quantiles: a PV-shaped median and a
    deviation spread growing with the boundary index."""
    t = grid.horizon
    h = (np.arange(t) + seed_hour) % 24
    med = (0.6 + 0.4 * np.exp(-((h - 8.0) ** 2) / 8) + 0.7 * np.exp(-((h - 19) ** 2) / 12)
           - 3.0 * np.exp(-((h - 12.5) ** 2) / 12))
    p_sd = power_sd_scale * (0.15 + 0.55 * np.exp(-((h - 12.5) ** 2) / 12))
    z = norm.ppf(LEVELS)
    power_q = med[:, None] + p_sd[:, None] * z[None, :]
    de_sd = de_sd_scale * np.sqrt(grid.gap + np.arange(t + 1))
    de_q = de_sd[:, None] * z[None, :]
    cdfs = [fit_cdf(list(zip(LEVELS, row))) for row in de_q]
    return ForecastProduct(levels=LEVELS, power_quantiles=power_q, median_power=med,
                           de_quantiles=de_q, cdf_models=cdfs, dt=grid.dt, gap=grid.gap)


def degenerate_product(median, grid):
    """Zero-uncertainty product: point support and point-mass deviations."""
    t = grid.horizon
    q = np.repeat(np.asarray(median, dtype=float)[:, None], LEVELS.size, axis=1)
    return ForecastProduct(levels=LEVELS, power_quantiles=q, median_power=np.asarray(median),
                           de_quantiles=np.zeros((t + 1, LEVELS.size)),
                           cdf_models=[None] * (t + 1), dt=grid.dt, gap=grid.gap)


def pfs_inputs(product, security=0.54, spec=None, tariff=None, e0=6.75, **kw):
    return PfsInputs(grid=GRID, spec=spec or reference_storage(),
                     tariff=tariff or tariff_c1(), forecast=product,
                     e0=e0, security=security, **kw)


class TestDfs:
    def test_zero_load_zero_cost(self):
        tariff = TariffSpec(c1_plus=0.3, c2_plus=0.05, c1_minus=0.0, c2_minus=0.0)
        product = median_only_product(np.zeros(GRID.horizon))
        sched = build_and_solve_dfs(pfs_inputs(product, tariff=tariff))
        assert schedule_cost(sched, tariff) == pytest.approx(0.0, abs=1e-9)
        assert np.max(np.abs(sched.pg_star)) <= 1e-7

    def test_single_step_empty_storage(self):
        # one-step instance: with the storage empty the only way to serve
        # the load is to buy it outright
        grid = TimeGrid(k0=0, ks=12, nd=1, nf=0)
        tariff = TariffSpec(c1_plus=0.3, c2_plus=0.05, c1_minus=0.0, c2_minus=0.0)
        inputs = PfsInputs(grid=grid, spec=reference_storage(), tariff=tariff,
                           forecast=median_only_product(np.array([1.0])),
                           e0=0.0, security=0.5)
        sched = build_and_solve_dfs(inputs)
        assert sched.pg_star[0] == pytest.approx(1.0, abs=1e-6)

    def test_quadratic_cost_spreads_purchases(self):
        # over a long horizon the quadratic import cost makes it cheaper to
        # buy early at low power and discharge at the load spike
        med = np.zeros(GRID.horizon)
        med[5] = 1.0
        tariff = TariffSpec(c1_plus=0.3, c2_plus=0.05, c1_minus=0.0, c2_minus=0.0)
        sched = build_and_solve_dfs(pfs_inputs(median_only_product(med), tariff=tariff, e0=0.0))
        spike = schedule_cost(
            build_and_solve_dfs(PfsInputs(
                grid=TimeGrid(k0=0, ks=12, nd=1, nf=0), spec=reference_storage(),
                tariff=tariff, forecast=median_only_product(np.array([1.0])),
                e0=0.0, security=0.5)), tariff)
        assert schedule_cost(sched, tariff) < spike

    def test_flat_load_flat_schedule(self):
        # empty storage: charging to discharge later always loses with flat
        # prices, so the schedule tracks the load one-to-one
        med = np.ones(GRID.horizon)
        sched = build_and_solve_dfs(pfs_inputs(median_only_product(med), e0=0.0))
        assert np.max(np.abs(sched.pg_star - 1.0)) <= 1e-5

    def test_flat_load_beats_random_feasible_alternatives(self):
        rng = np.random.default_rng(44)
        spec = reference_storage()
        med = np.ones(GRID.horizon)
        sched = build_and_solve_dfs(pfs_inputs(median_only_product(med), e0=0.0))
        best = schedule_cost(sched, tariff_c1())
        t = GRID.horizon
        for _ in range(100):
            # random feasible storage action from empty: scaled-down charge
            # and discharge moves that keep the energy chain inside bounds
            ps = rng.normal(0, 0.5, t)
            e = 0.0
            for k in range(t):
                lo = max(spec.p_min, (spec.e_min - e) / ((1 + spec.mu) * GRID.dt))
                hi = min(spec.p_max, (spec.e_max - e) / ((1 - spec.mu) * GRID.dt))
                ps[k] = min(max(ps[k], lo), hi)
                plus, minus = split_directions(ps[k])
                e += ((1 - spec.mu) * plus + (1 + spec.mu) * minus) * GRID.dt
            pg = med + ps
            pgp, pgm = split_directions(pg)
            cost = float(np.sum(0.3 * pgp[:24]**2 + 0.05 * pgp[:24]
                                + 0.15 * pgm[:24]**2 + 0.05 * pgm[:24]))
            assert best <= cost + 1e-9


class TestPfs:
    def test_collapse_to_dfs_on_degenerate_forecast(self):
        med = gaussian_product().median_power
        product = degenerate_product(med, GRID)
        dfs = build_and_solve_dfs(pfs_inputs(product))
        pfs = build_and_solve_pfs(pfs_inputs(product))
        assert np.max(np.abs(pfs.pg_star - dfs.pg_star)) <= 1e-4
        assert np.max(pfs.slack) == 0.0

    def test_tiny_security_is_vacuous(self):
        product = gaussian_product()
        pfs = build_and_solve_pfs(pfs_inputs(product, security=1e-3))
        # robust-power DFS: same instance with the deviation CDFs stripped
        stripped = ForecastProduct(
            levels=product.levels, power_quantiles=product.power_quantiles,
            median_power=product.median_power,
            de_quantiles=np.zeros_like(product.de_quantiles),
            cdf_models=[None] * (GRID.horizon + 1), dt=product.dt, gap=product.gap,
        )
        robust_dfs = build_and_solve_pfs(pfs_inputs(stripped, security=1e-3))
        assert np.max(pfs.slack) <= 1e-9
        assert schedule_cost(pfs, tariff_c1()) == pytest.approx(
            schedule_cost(robust_dfs, tariff_c1()), abs=1e-4)

    def test_softening_with_oversized_uncertainty(self):
        # capacity at 10% of the reference: the deviation spread dwarfs the
        # storage, slack must absorb the shortfall exactly
        spec = StorageSpec(p_min=-5.0, p_max=5.0, e_min=0.0, e_max=1.35, mu=0.05)
        product = gaussian_product()
        inputs = pfs_inputs(product, security=0.9, spec=spec, e0=0.675)
        sched = build_and_solve_pfs(inputs)
        assert np.max(sched.slack[1:]) > 0.0
        mass = chance_mass(product, spec, sched.expected_soc, 0.0)
        active = sched.slack > 1e-9
        achieved = mass[active] + sched.slack[active]
        assert np.max(np.abs(achieved - 0.9)) <= 1e-6

    def test_cost_monotone_in_security(self):
        product = gaussian_product()
        costs = []
        for sec in np.arange(0.42, 0.721, 0.06):
            sched = build_and_solve_pfs(pfs_inputs(product, security=float(sec)))
            costs.append(schedule_cost(sched, tariff_c1()))
        assert np.all(np.diff(costs) >= -1e-6)

    def test_robust_power_band_protects_interval(self):
        rng = np.random.default_rng(5)
        product = gaussian_product()
        inputs = pfs_inputs(product, security=0.54)
        sched = build_and_solve_pfs(inputs)
        lo, hi = product.support(inputs.pi_p)
        spec = inputs.spec
        for k in range(GRID.horizon):
            for pl in rng.uniform(lo[k], hi[k], 10):
                ps_required = sched.pg_star[k] - pl
                assert spec.p_min - 1e-7 <= ps_required <= spec.p_max + 1e-7

    def test_robust_power_infeasible_raises(self):
        product = gaussian_product(power_sd_scale=12.0)  # support wider than 10 kW
        with pytest.raises(RobustPowerInfeasibleError):
            build_and_solve_pfs(pfs_inputs(product))

    def test_independent_verification(self):
        product = gaussian_product()
        inputs = pfs_inputs(product, security=0.66)
        sched = build_and_solve_pfs(inputs)
        residuals = verify_schedule(sched, inputs, "pfs")
        assert max(residuals.values()) <= 1e-5

    def test_complementarity_after_repair(self):
        product = gaussian_product()
        sched = build_and_solve_pfs(pfs_inputs(product, security=0.72))
        assert np.max(sched.pg_plus * np.abs(sched.pg_minus)) <= 1e-8


class TestPfsInterval:
    def test_zero_width_interval_collapses(self):
        med = gaussian_product().median_power
        product = degenerate_product(med, GRID)
        dfs = build_and_solve_dfs(pfs_inputs(product))
        ivl = build_and_solve_pfs_interval(pfs_inputs(product))
        assert np.max(np.abs(ivl.pg_star - dfs.pg_star)) <= 1e-4

    def test_interval_equal_to_capacity_pins_trajectory(self):
        # symmetric interval exactly as wide as the usable capacity leaves a
        # single feasible stored-energy value per boundary
        grid = TimeGrid(k0=0, ks=12, nd=4, nf=0)
        t = grid.horizon
        spec = StorageSpec(p_min=-5, p_max=5, e_min=0.0, e_max=4.0, mu=0.0)
        z = norm.ppf(LEVELS)
        half = 2.0 / norm.ppf(1.0 - (1.0 - 0.9) / 2.0)
        de_q = np.tile(half * z, (t + 1, 1))
        med = np.zeros(t)
        product = ForecastProduct(
            levels=LEVELS, power_quantiles=np.repeat(med[:, None], LEVELS.size, axis=1),
            median_power=med, de_quantiles=de_q,
            cdf_models=[fit_cdf(list(zip(LEVELS, half * z)))] * (t + 1),
            dt=1.0, gap=grid.gap,
        )
        inputs = PfsInputs(grid=grid, spec=spec, tariff=tariff_c1(),
                           forecast=product, e0=2.0, security=0.9)
        sched = build_and_solve_pfs_interval(inputs, tol=1e-7)
        # required: e >= e_min + hi = 2.0 and e <= e_max + lo = 2.0
        assert np.max(np.abs(sched.expected_soc - 2.0)) <= 1e-5

    def test_interval_wider_than_capacity_raises(self):
        spec = StorageSpec(p_min=-5.0, p_max=5.0, e_min=0.0, e_max=1.35, mu=0.05)
        product = gaussian_product()
        with pytest.raises(InfeasibleScheduleError):
            build_and_solve_pfs_interval(pfs_inputs(product, security=0.9, spec=spec, e0=0.675))


def ar_scenarios(med, n, seed, sd_scale=1.0):
    rng = np.random.default_rng(seed)
    t = med.size
    h = np.arange(t) % 24
    sd = sd_scale * (0.15 + 0.55 * np.exp(-((h - 12.5) ** 2) / 12))
    scen = np.empty((n, t))
    for i in range(n):
        z = np.empty(t)
        zp = rng.normal()
        for k in range(t):
            zp = 0.8 * zp + 0.6 * rng.normal()
            z[k] = zp
        scen[i] = med + sd * z
    return ScenarioSet(scen, np.full(n, 1.0 / n))


class TestSfs:
    def test_single_median_scenario_tracks_dfs(self):
        med = gaussian_product().median_power
        scen = ScenarioSet(med[None, :], np.array([1.0]))
        tariff = TariffSpec(dev_multiplier=200.0)  # imbalances dominate
        inputs = SfsInputs(grid=GRID, spec=reference_storage(), tariff=tariff,
                           scenarios=scen, e0=6.75)
        sol = build_and_solve_sfs(inputs)
        assert np.max(np.abs(sol.dp)) <= 1e-4
        dfs = build_and_solve_dfs(pfs_inputs(median_only_product(med), tariff=tariff))
        assert np.max(np.abs(sol.schedule.pg_star - dfs.pg_star)) <= 1e-3

    def test_mirror_scenarios_symmetric(self):
        # +-delta around a zero median with symmetric costs and a converter
        # too small to absorb the swing: the schedule stays at the median and
        # each scenario carries the clipped residual as its imbalance
        grid = TimeGrid(k0=0, ks=12, nd=4, nf=0)
        spec = StorageSpec(p_min=-0.2, p_max=0.2, e_min=0.0, e_max=10.0, mu=0.0)
        tariff = TariffSpec(c1_plus=0.3, c1_minus=0.3, c2_plus=0.0, c2_minus=0.0,
                            dev_multiplier=2.0)
        delta = 1.0
        scen = ScenarioSet(np.vstack([np.full(4, delta), np.full(4, -delta)]),
                           np.array([0.5, 0.5]))
        inputs = SfsInputs(grid=grid, spec=spec, tariff=tariff, scenarios=scen, e0=5.0)
        sol = build_and_solve_sfs(inputs)
        assert np.max(np.abs(sol.schedule.pg_star)) <= 1e-4
        assert np.allclose(sol.dp[0], 0.8, atol=1e-4)
        assert np.allclose(sol.dp[1], -0.8, atol=1e-4)

    def test_dominates_clamped_dfs_plan(self):
        med = gaussian_product().median_power
        scen = ar_scenarios(med, 8, seed=9)
        spec = reference_storage()
        inputs = SfsInputs(grid=GRID, spec=spec, tariff=tariff_c1(),
                           scenarios=scen, e0=6.75)
        sol = build_and_solve_sfs(inputs)
        sfs_obj = sfs_objective_value(sol.schedule.pg_star, sol.dp, inputs)

        dfs = build_and_solve_dfs(pfs_inputs(median_only_product(med)))
        dp_dfs = np.empty_like(scen.scenarios)
        for i in range(scen.n):
            e = 6.75
            for k in range(GRID.horizon):
                out = dispatch_second_stage(dfs.pg_star[k], scen.scenarios[i, k],
                                            StorageState(e=e, spec=spec))
                dp_dfs[i, k] = out.dp_g
                e = out.e_next
        dfs_obj = sfs_objective_value(dfs.pg_star, dp_dfs, inputs)
        assert sfs_obj <= dfs_obj + 1e-6

    def test_per_scenario_feasibility_and_balance(self):
        med = gaussian_product().median_power
        scen = ar_scenarios(med, 10, seed=3)
        inputs = SfsInputs(grid=GRID, spec=reference_storage(), tariff=tariff_c2(),
                           scenarios=scen, e0=6.75)
        sol = build_and_solve_sfs(inputs)
        residuals = verify_sfs(sol, inputs)
        assert residuals["balance"] <= 1e-5
        assert residuals["energy_box"] <= 1e-5
        assert residuals["power_box"] <= 1e-5
        assert residuals["complementarity"] <= 1e-8


class TestKktOnSolves:
    def test_converged_solves_pass_independent_kkt(self):
        solver.kkt_log = []
        try:
            product = gaussian_product()
            build_and_solve_dfs(pfs_inputs(product))
            build_and_solve_pfs(pfs_inputs(product, security=0.66))
            med = product.median_power
            scen = ar_scenarios(med, 5, seed=2)
            build_and_solve_sfs(SfsInputs(grid=GRID, spec=reference_storage(),
                                          tariff=tariff_c1(), scenarios=scen, e0=6.75))
            assert len(solver.kkt_log) >= 3
            for kkt in solver.kkt_log:
                assert kkt["violation"] <= 1e-5
                assert kkt["stationarity"] <= 1e-5
                assert kkt["complementarity"] <= 1e-4
        finally:
            solver.kkt_log = None
