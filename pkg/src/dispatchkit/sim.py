"""Closed-loop rolling-horizon simulation and its metrics.

Each simulated day: commit the next day's schedule at noon from forecasts
conditioned on data before noon, then dispatch hour by hour against the
realized inflexible power, carrying the storage state across days. The
synthetic household generator is fully Gaussian (AR(1) noise with a
deterministic diurnal/weekly shape), so its exact conditional quantiles
are available to drive the schedulers with true-model forecasts in
oracle mode.
"""

from dataclasses import dataclass, field, replace
import json

import numpy as np
import pandas as pd
from scipy.stats import norm

from . import forecast as fc
from . import sched as sd
from .core import (
    DispatchSchedule,
    NetLoadSeries,
    StorageSpec,
    TariffSpec,
    TimeGrid,
    ValidationError,
    reference_storage,
    schedule_cost,
    tariff_c1,
)
from .storage import (
    LookaheadSolveError,
    StorageState,
    dispatch_lookahead,
    dispatch_second_stage,
)


class DataGapError(ValueError):
    """The series does not cover the requested simulation window."""


def tracking_ratio(schedule: DispatchSchedule, realized_pg, delta: float = 1e-4) -> float:
    """Fraction of dispatch intervals where the realized exchange matches
    the committed schedule within delta (inclusive)."""
    realized = np.asarray(realized_pg, dtype=float)
    if realized.size != schedule.nd:
        raise ValueError("realized trace must cover exactly the dispatch horizon")
    return float(np.mean(np.abs(realized - schedule.pg_star[: schedule.nd]) <= delta))


def imbalance_cost(dp_g, tariff: TariffSpec) -> float:
    """Imbalance settlement: both excess and shortage priced as purchases,
    scaled by the policy multiplier."""
    dp = np.asarray(dp_g, dtype=float)
    c1 = np.broadcast_to(np.asarray(tariff.c1_plus, dtype=float), dp.shape)
    c2 = np.broadcast_to(np.asarray(tariff.c2_plus, dtype=float), dp.shape)
    return float(tariff.dev_multiplier * np.sum(c1 * dp**2 + c2 * np.abs(dp)))


@dataclass(frozen=True)
class SynthHousehold:
    """Closed-form net-load generator: deterministic diurnal load and PV
    shapes with weekly/seasonal modulation plus AR(1) Gaussian noise whose
    scale follows the deterministic parts. p_l(t) = mean(t) + sigma(t)*z(t)
    with z(t) = phi*z(t-1) + sqrt(1-phi^2)*w(t)."""

    load_scale: float = 1.0
    pv_scale: float = 4.0
    phi: float = 0.8
    load_noise: float = 0.07
    pv_noise: float = 0.10
    start: str = "2021-01-04"  # a Monday at midnight

    def _base_load(self, hour):
        h = np.asarray(hour, dtype=float)
        morning = np.exp(-((h - 8.0) ** 2) / (2 * 2.5**2))
        evening = np.exp(-((h - 19.0) ** 2) / (2 * 3.0**2))
        return 0.35 + 0.25 * morning + 0.45 * evening

    def _pv_bell(self, hour):
        h = np.asarray(hour, dtype=float)
        return np.exp(-((h - 12.5) ** 2) / (2 * 2.6**2))

    def components(self, t):
        """Deterministic mean and noise scale at absolute hour indices t."""
        t = np.asarray(t, dtype=float)
        h = t % 24.0
        weekly = 1.0 + 0.18 * np.sin(2 * np.pi * t / (24 * 7) + 0.7)
        seasonal = 1.0 + 0.25 * np.sin(2 * np.pi * t / (24 * 28) + 2.0)
        load = self.load_scale * self._base_load(h) * weekly
        pv_pot = self.pv_scale * self._pv_bell(h) * seasonal
        mean = load - 0.75 * pv_pot
        sigma = self.load_noise * load + self.pv_noise * pv_pot
        return mean, sigma

    def series(self, days: int, seed: int = 0) -> NetLoadSeries:
        if days < 1:
            raise ValueError("need at least one day")
        n = 24 * days
        t = np.arange(n)
        mean, sigma = self.components(t)
        rng = np.random.default_rng(seed)
        z = np.empty(n)
        zp = rng.normal()
        c = np.sqrt(1.0 - self.phi**2)
        for i in range(n):
            zp = self.phi * zp + c * rng.normal()
            z[i] = zp
        ts = pd.date_range(self.start, periods=n, freq="h")
        return NetLoadSeries(ts, mean + sigma * z)

    def latent_state(self, series: NetLoadSeries, idx: int) -> float:
        mean, sigma = self.components([idx])
        return float((series.p_l[idx] - mean[0]) / sigma[0])

    def conditional_power(self, series: NetLoadSeries, origin: int, leads):
        """Exact conditional mean/sd of p_l at origin-1+lead given data
        through origin-1."""
        z0 = self.latent_state(series, origin - 1)
        leads = np.asarray(leads, dtype=int)
        t = origin - 1 + leads
        mean, sigma = self.components(t)
        cond_mean = mean + sigma * self.phi**leads * z0
        cond_sd = sigma * np.sqrt(1.0 - self.phi ** (2 * leads))
        return cond_mean, cond_sd

    def deviation_sd(self, origin: int, max_lead: int) -> np.ndarray:
        """Exact sd of the cumulative deviation of p_l from its conditional
        mean, accumulated over leads 1..L, for every L up to max_lead."""
        leads = np.arange(1, max_lead + 1)
        t = origin - 1 + leads
        _, sigma = self.components(t)
        a = leads[:, None]
        b = leads[None, :]
        corr = self.phi ** np.abs(a - b) - self.phi ** (a + b)
        cov = sigma[:, None] * sigma[None, :] * corr
        cum = np.cumsum(np.cumsum(cov, axis=0), axis=1)
        return np.sqrt(np.maximum(np.diag(cum), 0.0))

    def oracle_product(self, series: NetLoadSeries, origin: int, grid: TimeGrid,
                       levels=fc.DEFAULT_LEVELS) -> fc.ForecastProduct:
        """True-model forecast: Gaussian quantiles for power and cumulative
        deviation, with the deviation CDFs fitted per boundary."""
        levels = np.asarray(levels, dtype=float)
        zq = norm.ppf(levels)
        t_hor = grid.horizon
        gap = grid.gap
        leads_p = gap + 1 + np.arange(t_hor)
        mean_p, sd_p = self.conditional_power(series, origin, leads_p)
        power_q = mean_p[:, None] + sd_p[:, None] * zq[None, :]
        dev_sd = self.deviation_sd(origin, gap + t_hor)
        sd_states = np.concatenate([[dev_sd[gap - 1]] if gap >= 1 else [0.0],
                                    dev_sd[gap: gap + t_hor]]) * grid.dt
        de_q = sd_states[:, None] * zq[None, :]
        cdfs = []
        for row in de_q:
            try:
                cdfs.append(fc.fit_cdf(list(zip(levels, row))))
            except fc.DegenerateDistributionError:
                cdfs.append(None)
        return fc.ForecastProduct(
            levels=levels, power_quantiles=power_q, median_power=mean_p,
            de_quantiles=de_q, cdf_models=cdfs, dt=grid.dt, gap=gap,
        )

    def gap_median(self, series: NetLoadSeries, origin: int, gap: int) -> np.ndarray:
        mean, _ = self.conditional_power(series, origin, np.arange(1, gap + 1))
        return mean

    def sample_paths(self, series: NetLoadSeries, origin: int, length: int,
                     count: int, seed: int = 0) -> np.ndarray:
        """Conditional trajectories of p_l over leads 1..length."""
        z0 = self.latent_state(series, origin - 1)
        t = origin - 1 + np.arange(1, length + 1)
        mean, sigma = self.components(t)
        rng = np.random.default_rng(seed)
        c = np.sqrt(1.0 - self.phi**2)
        paths = np.empty((count, length))
        for i in range(count):
            zp = z0
            for j in range(length):
                zp = self.phi * zp + c * rng.normal()
                paths[i, j] = mean[j] + sigma[j] * zp
        return paths


def synth_household(days: int, seed: int = 0, pv_scale: float = 4.0,
                    load_scale: float = 1.0) -> NetLoadSeries:
    """Hourly synthetic net load (consumption minus PV) for the given number
    of days; deterministic per seed."""
    return SynthHousehold(pv_scale=pv_scale, load_scale=load_scale).series(days, seed)


@dataclass
class SimConfig:
    """Everything run_rolling needs besides the data itself."""

    scheduler: str = "dfs"              # dfs | pfs | pfs-interval | sfs
    security: float = 0.6
    pi_p: float = 0.98
    alpha: float = 1000.0
    nd: int = 24
    nf: int = 12
    gap: int = 12
    dt: float = 1.0
    spec: StorageSpec = field(default_factory=reference_storage)
    tariff: TariffSpec = field(default_factory=tariff_c1)
    dispatcher: str = "myopic"          # myopic | lookahead
    lookahead_h: int = 3
    lookahead_forecast: str = "persistence"   # persistence | perfect
    delta: float = 1e-4
    days: int = 7
    seed: int = 0
    forecast_mode: str = "oracle"       # oracle | knn
    scenario_pool: int = 200
    ns: int = 30
    knn_k: int = 20
    knn_lags: int = 2
    levels: np.ndarray = field(default_factory=lambda: fc.DEFAULT_LEVELS.copy())
    e0: float | None = None

    def grid(self, k0: int = 0) -> TimeGrid:
        return TimeGrid(k0=k0, ks=k0 + self.gap, nd=self.nd, nf=self.nf, dt=self.dt)


@dataclass
class DayResult:
    day: int
    tracking_ratio: float
    balancing_energy: float
    schedule_cost: float
    imbalance_cost_c1: float
    imbalance_cost_c2: float
    failed: bool = False

    @property
    def total_c1(self):
        return self.schedule_cost + self.imbalance_cost_c1

    @property
    def total_c2(self):
        return self.schedule_cost + self.imbalance_cost_c2


@dataclass
class SimulationReport:
    days: list
    trace: pd.DataFrame
    delta: float

    @property
    def n_days(self) -> int:
        return len(self.days)

    def aggregate(self) -> dict:
        ok = [d for d in self.days if not d.failed]
        dp = self.trace["dp_g"].to_numpy()
        out = {
            "days": self.n_days,
            "failed_days": sum(d.failed for d in self.days),
            "tracking_ratio": float(np.mean([d.tracking_ratio for d in self.days])),
            "step_no_imbalance_freq": float(np.mean(np.abs(dp) <= self.delta)),
            "balancing_energy_per_day": float(np.mean([d.balancing_energy for d in self.days])),
            "schedule_cost_per_day": float(np.mean([d.schedule_cost for d in ok])) if ok else float("nan"),
            "imbalance_cost_c1_per_day": float(np.mean([d.imbalance_cost_c1 for d in self.days])),
            "imbalance_cost_c2_per_day": float(np.mean([d.imbalance_cost_c2 for d in self.days])),
        }
        out["total_c1_per_day"] = out["schedule_cost_per_day"] + out["imbalance_cost_c1_per_day"]
        out["total_c2_per_day"] = out["schedule_cost_per_day"] + out["imbalance_cost_c2_per_day"]
        return out

    def to_json(self, path=None):
        payload = {
            "aggregate": self.aggregate(),
            "per_day": [
                {
                    "day": d.day, "tracking_ratio": d.tracking_ratio,
                    "balancing_energy": d.balancing_energy,
                    "schedule_cost": d.schedule_cost,
                    "imbalance_cost_c1": d.imbalance_cost_c1,
                    "imbalance_cost_c2": d.imbalance_cost_c2,
                    "total_c1": d.total_c1, "total_c2": d.total_c2,
                    "failed": d.failed,
                }
                for d in self.days
            ],
        }
        if path is None:
            return json.dumps(payload, indent=2)
        with open(path, "w") as fh:
            json.dump(payload, fh, indent=2)
        return None

    def trace_to_csv(self, path):
        self.trace.to_csv(path, index=False)

    def long_format(self) -> pd.DataFrame:
        """Plot-ready long format: series,k,value over the whole run."""
        rows = []
        for name in ("pg_star", "p_g", "p_l", "dp_g", "e_s"):
            rows.append(pd.DataFrame({
                "series": name, "k": self.trace["k"], "value": self.trace[name],
            }))
        return pd.concat(rows, ignore_index=True)


class _OracleForecaster:
    def __init__(self, model: SynthHousehold, series: NetLoadSeries, cfg: SimConfig):
        self.model = model
        self.series = series
        self.cfg = cfg

    def product(self, origin, grid):
        return self.model.oracle_product(self.series, origin, grid, self.cfg.levels)

    def gap_median(self, origin):
        return self.model.gap_median(self.series, origin, self.cfg.gap)

    def scenarios(self, origin, grid, seed):
        length = self.cfg.gap + grid.horizon
        paths = self.model.sample_paths(self.series, origin, length,
                                        self.cfg.scenario_pool, seed)
        pool = fc.ScenarioSet(paths[:, self.cfg.gap:],
                              np.full(self.cfg.scenario_pool, 1.0 / self.cfg.scenario_pool))
        return fc.reduce_scenarios(pool, self.cfg.ns)


class _KnnForecaster:
    """Data-driven forecasts fitted once on the pre-simulation history."""

    def __init__(self, series: NetLoadSeries, fit_until: int, cfg: SimConfig):
        self.series = series
        self.cfg = cfg
        max_lead = cfg.gap + cfg.nd + cfg.nf
        history = NetLoadSeries(series.timestamps[:fit_until], series.p_l[:fit_until])
        self.power = fc.fit_quantile_model(
            history, "power", k=cfg.knn_k, levels=cfg.levels, max_lead=max_lead,
            lags=cfg.knn_lags, dt=cfg.dt,
        )
        self.energy = fc.fit_quantile_model(
            history, "energy-deviation", k=cfg.knn_k, levels=cfg.levels,
            max_lead=max_lead, lags=cfg.knn_lags, power_model=self.power, dt=cfg.dt,
        )

    def product(self, origin, grid):
        return fc.build_forecast_product(self.power, self.energy, self.series,
                                         origin, grid)

    def gap_median(self, origin):
        cfg = self.cfg
        last = origin - 1
        lag_vals = self.series.p_l[last - cfg.knn_lags + 1: last + 1]
        hour0 = int(self.series.timestamps[last].hour)
        med = np.empty(cfg.gap)
        for lead in range(1, cfg.gap + 1):
            sin_h, cos_h = fc.hour_features((hour0 + lead) % 24)
            ctx = np.concatenate([[sin_h, cos_h], lag_vals])
            med[lead - 1] = np.interp(0.5, cfg.levels,
                                      fc.predict(self.power, ctx, lead))
        return med

    def scenarios(self, origin, grid, seed):
        cfg = self.cfg
        last = origin - 1
        ctx = fc.ChainContext(
            lag_values=tuple(self.series.p_l[last - cfg.knn_lags + 1: last + 1]),
            start_hour=int((self.series.timestamps[last].hour + 1) % 24),
        )
        pool = fc.generate_scenarios(self.power, ctx, cfg.gap + grid.horizon,
                                     cfg.scenario_pool, seed=seed)
        trimmed = fc.ScenarioSet(pool.scenarios[:, cfg.gap:], pool.weights)
        return fc.reduce_scenarios(trimmed, cfg.ns)


def _solve_day(cfg: SimConfig, forecaster, origin, grid, e0, de_g0, seed):
    if cfg.scheduler == "sfs":
        scen = forecaster.scenarios(origin, grid, seed)
        inputs = sd.SfsInputs(grid=grid, spec=cfg.spec, tariff=cfg.tariff,
                              scenarios=scen, e0=e0)
        return sd.build_and_solve_sfs(inputs).schedule
    product = forecaster.product(origin, grid)
    inputs = sd.PfsInputs(grid=grid, spec=cfg.spec, tariff=cfg.tariff,
                          forecast=product, e0=e0, security=cfg.security,
                          pi_p=cfg.pi_p, alpha=cfg.alpha, de_g0=de_g0)
    if cfg.scheduler == "dfs":
        return sd.build_and_solve_dfs(inputs)
    if cfg.scheduler == "pfs":
        return sd.build_and_solve_pfs(inputs)
    if cfg.scheduler == "pfs-interval":
        return sd.build_and_solve_pfs_interval(inputs)
    raise ValueError(f"unknown scheduler {cfg.scheduler!r}")


def _fallback_schedule(previous: DispatchSchedule, cfg: SimConfig, e0, median):
    """Reuse yesterday's committed profile, re-anchoring the expected
    trajectory at the current stored energy."""
    spec = cfg.spec
    e = e0
    soc = [e0]
    for k in range(previous.horizon):
        out = dispatch_second_stage(previous.pg_star[k], median[k],
                                    StorageState(e=e, spec=spec, dt=cfg.dt))
        e = out.e_next
        soc.append(e)
    return DispatchSchedule(
        pg_star=previous.pg_star.copy(), pg_plus=previous.pg_plus.copy(),
        pg_minus=previous.pg_minus.copy(), expected_soc=np.asarray(soc),
        slack=np.zeros(previous.horizon + 1), nd=previous.nd,
    )


def run_rolling(data: NetLoadSeries, cfg: SimConfig,
                synth: SynthHousehold | None = None) -> SimulationReport:
    """Closed-loop simulation of the last cfg.days full days of the series.

    Oracle mode requires the generator that produced the data. Scheduling
    for each day happens at the preceding noon; the storage state carries
    over; failed daily solves fall back to the previous day's profile and
    are marked in the report.
    """
    if cfg.forecast_mode == "oracle" and synth is None:
        raise ValueError("oracle forecasts need the generating model")
    n = len(data)
    sim_hours = 24 * cfg.days
    s0 = n - sim_hours
    if s0 < cfg.gap + 48:
        raise DataGapError("series too short for the requested simulation")
    if int(data.timestamps[s0].hour) != 0:
        raise DataGapError("simulation window must start at midnight")

    if cfg.forecast_mode == "oracle":
        forecaster = _OracleForecaster(synth, data, cfg)
    elif cfg.forecast_mode == "knn":
        forecaster = _KnnForecaster(data, s0 - cfg.gap, cfg)
    else:
        raise ValueError(f"unknown forecast mode {cfg.forecast_mode!r}")

    spec = cfg.spec
    e = cfg.e0 if cfg.e0 is not None else 0.5 * (spec.e_min + spec.e_max)
    grid = cfg.grid()

    # commit day 1 at the noon before the window; the storage idles until
    # midnight, so the expected start state is the current one
    origin = s0 - cfg.gap
    schedule = _solve_day(cfg, forecaster, origin, grid, e, 0.0, cfg.seed)
    schedules = {0: schedule}

    day_results = []
    rows = []
    for d in range(cfg.days):
        day_sched = schedules[d]
        failed = getattr(day_sched, "_failed", False)
        start = s0 + 24 * d
        dp_day = np.empty(24)
        pg_day = np.empty(24)
        for k in range(24):
            t = start + k
            # noon: commit tomorrow's schedule from information up to now
            if k == 24 - cfg.gap and d + 1 < cfg.days:
                o_next = t
                med_gap = forecaster.gap_median(o_next)
                e_hat, de_pred = e, 0.0
                for j in range(cfg.gap):
                    out = dispatch_second_stage(
                        day_sched.pg_star[24 - cfg.gap + j], med_gap[j],
                        StorageState(e=e_hat, spec=spec, dt=cfg.dt))
                    e_hat = out.e_next
                    de_pred += out.dp_g * cfg.dt
                e_hat = min(max(e_hat, spec.e_min), spec.e_max)
                try:
                    nxt = _solve_day(cfg, forecaster, o_next, grid, e_hat,
                                     de_pred, cfg.seed + 977 * (d + 1))
                except (sd.ScheduleSolveError, sd.InfeasibleScheduleError):
                    persist = np.full(grid.horizon, float(data.p_l[o_next - 1]))
                    nxt = _fallback_schedule(day_sched, cfg, e_hat, persist)
                    nxt._failed = True
                schedules[d + 1] = nxt

            state = StorageState(e=e, spec=spec, dt=cfg.dt)
            pg_k = float(day_sched.pg_star[k])
            if cfg.dispatcher == "lookahead":
                # planning window: the rest of today's dispatch day plus the
                # already-committed part of tomorrow
                window_pg = day_sched.pg_star[k:24]
                if d + 1 in schedules:
                    window_pg = np.concatenate(
                        [window_pg, schedules[d + 1].pg_star[:24]])
                h_eff = min(cfg.lookahead_h, window_pg.size,
                            len(data) - t)
                if cfg.lookahead_forecast == "perfect":
                    window_pl = data.p_l[t: t + h_eff]
                else:
                    window_pl = np.full(h_eff, data.p_l[t])
                try:
                    out = dispatch_lookahead(window_pg[:h_eff], window_pl,
                                             state, h=h_eff)
                except LookaheadSolveError:
                    out = dispatch_second_stage(pg_k, float(data.p_l[t]), state)
            else:
                out = dispatch_second_stage(pg_k, float(data.p_l[t]), state)
            e = out.e_next
            dp_day[k] = out.dp_g
            pg_day[k] = pg_k + out.dp_g
            rows.append({
                "day": d, "k": t, "pg_star": pg_k, "p_l": float(data.p_l[t]),
                "p_s": out.p_s, "dp_g": out.dp_g, "p_g": pg_day[k], "e_s": e,
            })

        day_results.append(DayResult(
            day=d,
            tracking_ratio=tracking_ratio(day_sched, pg_day, cfg.delta),
            balancing_energy=float(np.sum(np.abs(dp_day)) * cfg.dt),
            schedule_cost=schedule_cost(day_sched, cfg.tariff),
            imbalance_cost_c1=imbalance_cost(dp_day, replace(cfg.tariff, dev_multiplier=2.0)),
            imbalance_cost_c2=imbalance_cost(dp_day, replace(cfg.tariff, dev_multiplier=10.0)),
            failed=failed,
        ))

    trace = pd.DataFrame(rows)
    return SimulationReport(days=day_results, trace=trace, delta=cfg.delta)
