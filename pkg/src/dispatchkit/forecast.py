"""Data-driven probabilistic forecasting.

k-nearest-neighbor quantile regression predicts, per lead time, the
quantiles of the inflexible power and of the cumulative energy deviation
against the median power forecast. The energy-deviation quantiles are
condensed into a two-component logistic CDF per horizon step, which the
probabilistic scheduler consumes. Scenario trajectories are produced by
chaining one-step-ahead quantile draws and thinned by fast-forward
reduction under the Kantorovich distance.
"""

from dataclasses import dataclass, field
import json

import numpy as np
from scipy.optimize import least_squares
from scipy.spatial.distance import cdist
from scipy.special import expit

from .core import NetLoadSeries, TimeGrid, ValidationError

DEFAULT_LEVELS = np.round(np.concatenate([[0.01], np.arange(0.05, 0.951, 0.05), [0.99]]), 2)
DEFAULT_K = 20
DEFAULT_LAGS = 2


class InsufficientHistoryError(ValueError):
    pass


class DegenerateFeatureError(ValueError):
    pass


class DegenerateDistributionError(ValueError):
    """All quantile values coincide; a finite-slope CDF cannot be fitted."""


class CdfFitError(RuntimeError):
    pass


class LevelsInsufficientError(ValueError):
    pass


def hour_features(hour):
    h = np.asarray(hour, dtype=float)
    angle = 2.0 * np.pi * h / 24.0
    return np.sin(angle), np.cos(angle)


@dataclass
class QuantileModel:
    """Per-lead kNN quantile regressor.

    features[l-1]/targets[l-1] hold the training pairs for lead l. Power
    models target the raw power; energy models target the cumulative
    deviation of realized power from the median power forecast, with the
    integrated median appended to the feature vector.
    """

    kind: str                      # "power" or "energy-deviation"
    k: int
    levels: np.ndarray
    lags: int
    dt: float
    features: list = field(repr=False, default_factory=list)
    targets: list = field(repr=False, default_factory=list)

    def __post_init__(self):
        self.levels = np.asarray(self.levels, dtype=float)
        if self.levels.ndim != 1 or np.any(np.diff(self.levels) <= 0):
            raise ValidationError("quantile levels must be strictly increasing")
        if np.any(self.levels <= 0) or np.any(self.levels >= 1):
            raise ValidationError("quantile levels must lie in (0, 1)")
        if self.k < 1:
            raise ValidationError("neighbor count must be at least 1")

    @property
    def max_lead(self) -> int:
        return len(self.targets)


def predict(model: QuantileModel, context, horizon_step: int) -> np.ndarray:
    """Empirical quantiles of the k nearest training targets for the given
    lead. Neighbor ties are broken by ascending training index."""
    if not 1 <= horizon_step <= model.max_lead:
        raise ValueError(f"lead {horizon_step} outside the trained range")
    x = np.asarray(context, dtype=float)
    feats = model.features[horizon_step - 1]
    if x.size != feats.shape[1]:
        raise ValueError("context dimensionality does not match training")
    dist = np.sqrt(np.sum((feats - x) ** 2, axis=1))
    order = np.argsort(dist, kind="stable")[: model.k]
    neigh = model.targets[horizon_step - 1][order]
    return np.quantile(neigh, model.levels)


def _batch_median(model: QuantileModel, queries: np.ndarray, lead: int) -> np.ndarray:
    """Median forecast for many query rows at once (training helper)."""
    feats = model.features[lead - 1]
    dist = cdist(queries, feats)
    k = min(model.k, feats.shape[0])
    idx = np.argpartition(dist, k - 1, axis=1)[:, :k]
    rows = model.targets[lead - 1][idx]
    return np.median(rows, axis=1)


def _origin_features(series: NetLoadSeries, origins: np.ndarray, lead: int, lags: int):
    """Feature rows for forecast origins: cyclic target hour plus the most
    recent observed powers. origins index the last observed sample."""
    hours = (series.hour_of_day()[origins] + lead) % 24
    sin_h, cos_h = hour_features(hours)
    cols = [sin_h, cos_h]
    for lag in range(lags - 1, -1, -1):
        cols.append(series.p_l[origins - lag])
    return np.column_stack(cols)


def fit_quantile_model(history: NetLoadSeries, target: str = "power",
                       k: int = DEFAULT_K, levels=DEFAULT_LEVELS,
                       max_lead: int = 48, lags: int = DEFAULT_LAGS,
                       power_model: QuantileModel | None = None,
                       dt: float = 1.0) -> QuantileModel:
    """Build the per-lead kNN training pairs from an hourly history.

    target="power" predicts the raw power at each lead. With
    target="energy-deviation" the targets are realized cumulative
    deviations sum_j (p_l - median_forecast)*dt up to each lead, computed
    against the supplied power model, and the integrated median is an
    additional feature.
    """
    if target not in ("power", "energy-deviation"):
        raise ValueError(f"unknown target {target!r}")
    if target == "energy-deviation" and power_model is None:
        raise ValueError("energy-deviation models need a fitted power model")
    n = len(history)
    first = lags - 1
    last = n - 1 - max_lead
    if last < first:
        raise InsufficientHistoryError("history shorter than lags plus horizon")
    origins = np.arange(first, last + 1)
    if origins.size < k:
        raise InsufficientHistoryError(
            f"only {origins.size} training origins for k={k} neighbors"
        )

    model = QuantileModel(kind=target, k=k, levels=levels, lags=lags, dt=dt)

    if target == "power":
        for lead in range(1, max_lead + 1):
            feats = _origin_features(history, origins, lead, lags)
            if np.all(feats == feats[0]):
                raise DegenerateFeatureError("all training features identical")
            model.features.append(feats)
            model.targets.append(history.p_l[origins + lead])
        return model

    # energy-deviation: medians of the power model for every origin and lead
    medians = np.empty((origins.size, max_lead))
    for lead in range(1, max_lead + 1):
        queries = _origin_features(history, origins, lead, power_model.lags)
        medians[:, lead - 1] = _batch_median(power_model, queries, lead)
    realized = np.column_stack(
        [history.p_l[origins + lead] for lead in range(1, max_lead + 1)]
    )
    dev = np.cumsum((realized - medians) * dt, axis=1)
    int_median = np.cumsum(medians * dt, axis=1)
    for lead in range(1, max_lead + 1):
        base = _origin_features(history, origins, lead, lags)
        feats = np.column_stack([base, int_median[:, lead - 1]])
        if np.all(feats == feats[0]):
            raise DegenerateFeatureError("all training features identical")
        model.features.append(feats)
        model.targets.append(dev[:, lead - 1])
    return model


def pinball_loss(y_true, y_pred, level: float) -> float:
    err = np.asarray(y_true, dtype=float) - np.asarray(y_pred, dtype=float)
    return float(np.mean(np.maximum(level * err, (level - 1.0) * err)))


def support_interval(levels, values, pi_p: float) -> tuple[float, float]:
    """Central interval covering probability mass pi_p, interpolated
    linearly between the available quantile levels."""
    if not 0.0 < pi_p < 1.0:
        raise ValueError("coverage mass must lie in (0, 1)")
    levels = np.asarray(levels, dtype=float)
    values = np.asarray(values, dtype=float)
    lo_level = (1.0 - pi_p) / 2.0
    hi_level = 1.0 - lo_level
    if levels[0] > lo_level + 1e-12 or levels[-1] < hi_level - 1e-12:
        raise LevelsInsufficientError(
            f"levels [{levels[0]}, {levels[-1]}] cannot bracket mass {pi_p}"
        )
    return float(np.interp(lo_level, levels, values)), float(np.interp(hi_level, levels, values))


@dataclass
class CdfModel:
    """Two-component logistic CDF: F(x) = a1*s(a2(x-a3)) + a4*s(a5(x-a6))."""

    a1: float
    a2: float
    a3: float
    a4: float
    a5: float
    a6: float
    rmse: float = float("nan")

    def __post_init__(self):
        if self.a1 < -1e-9 or self.a4 < -1e-9:
            raise ValidationError("mixture masses must be nonnegative")
        if abs(self.a1 + self.a4 - 1.0) > 1e-6:
            raise ValidationError("mixture masses must sum to one")
        if self.a2 <= 0 or self.a5 <= 0:
            raise ValidationError("slopes must be positive")


def eval_cdf(model: CdfModel, x):
    x = np.asarray(x, dtype=float)
    val = model.a1 * expit(model.a2 * (x - model.a3)) + model.a4 * expit(
        model.a5 * (x - model.a6)
    )
    return float(val) if val.ndim == 0 else val


def eval_cdf_density(model: CdfModel, x):
    """Analytic derivative of eval_cdf; used by the scheduler gradients."""
    x = np.asarray(x, dtype=float)
    s1 = expit(model.a2 * (x - model.a3))
    s2 = expit(model.a5 * (x - model.a6))
    val = model.a1 * model.a2 * s1 * (1.0 - s1) + model.a4 * model.a5 * s2 * (1.0 - s2)
    return float(val) if val.ndim == 0 else val


def cdf_quantile(model: CdfModel, level: float, tol: float = 1e-12) -> float:
    """Invert the fitted CDF by bisection."""
    lo, hi = -1.0, 1.0
    while eval_cdf(model, lo) > level:
        lo *= 2.0
    while eval_cdf(model, hi) < level:
        hi *= 2.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if eval_cdf(model, mid) < level:
            lo = mid
        else:
            hi = mid
        if hi - lo < tol:
            break
    return 0.5 * (lo + hi)


def fit_cdf(pairs, max_nfev: int = 200) -> CdfModel:
    """Constrained least-squares fit of the two-component logistic CDF to
    (level, value) quantile pairs."""
    pairs = sorted((float(l), float(v)) for l, v in pairs)
    levels = np.array([p[0] for p in pairs])
    values = np.array([p[1] for p in pairs])
    if len({(round(l, 12), round(v, 12)) for l, v in pairs}) < 6:
        raise ValidationError("need at least six distinct quantile pairs")
    if np.any(np.diff(values) < -1e-9):
        raise ValidationError("quantile values must be nondecreasing in level")
    span = values[-1] - values[0]
    if span <= 1e-12:
        raise DegenerateDistributionError("point-mass quantiles cannot be fitted")

    q25 = float(np.interp(0.25, levels, values))
    q75 = float(np.interp(0.75, levels, values))
    iqr = max(q75 - q25, 0.05 * span, 1e-9)
    slope0 = 2.2 / iqr
    theta0 = np.array([0.5, slope0, q25, slope0, q75])
    lower = np.array([0.0, 1e-8, -np.inf, 1e-8, -np.inf])
    upper = np.array([1.0, 1e8, np.inf, 1e8, np.inf])

    def unpack(theta):
        a1, a2, a3, a5, a6 = theta
        return a1, a2, a3, 1.0 - a1, a5, a6

    def residuals(theta):
        a1, a2, a3, a4, a5, a6 = unpack(theta)
        return a1 * expit(a2 * (values - a3)) + a4 * expit(a5 * (values - a6)) - levels

    def jac(theta):
        a1, a2, a3, a4, a5, a6 = unpack(theta)
        s1 = expit(a2 * (values - a3))
        s2 = expit(a5 * (values - a6))
        d1 = s1 * (1.0 - s1)
        d2 = s2 * (1.0 - s2)
        cols = [
            s1 - s2,                      # d/da1 (a4 = 1 - a1)
            a1 * d1 * (values - a3),      # d/da2
            -a1 * a2 * d1,                # d/da3
            a4 * d2 * (values - a6),      # d/da5
            -a4 * a5 * d2,                # d/da6
        ]
        return np.column_stack(cols)

    res = least_squares(residuals, theta0, jac=jac, bounds=(lower, upper),
                        method="trf", max_nfev=max_nfev)
    if res.status <= 0:
        raise CdfFitError("CDF fit did not converge within the iteration budget")
    a1, a2, a3, a4, a5, a6 = unpack(res.x)
    rmse = float(np.sqrt(np.mean(res.fun**2)))
    return CdfModel(a1=a1, a2=a2, a3=a3, a4=a4, a5=a5, a6=a6, rmse=rmse)


@dataclass
class ScenarioSet:
    """Weighted trajectories of the inflexible power over the extended
    horizon."""

    scenarios: np.ndarray   # (n, horizon)
    weights: np.ndarray     # (n,)

    def __post_init__(self):
        self.scenarios = np.atleast_2d(np.asarray(self.scenarios, dtype=float))
        self.weights = np.asarray(self.weights, dtype=float)
        if self.scenarios.shape[0] != self.weights.size:
            raise ValidationError("one weight per scenario required")
        if np.any(self.weights < -1e-12):
            raise ValidationError("weights must be nonnegative")
        if abs(self.weights.sum() - 1.0) > 1e-9:
            raise ValidationError("weights must sum to one")

    @property
    def n(self) -> int:
        return self.scenarios.shape[0]

    @property
    def horizon(self) -> int:
        return self.scenarios.shape[1]


@dataclass(frozen=True)
class ChainContext:
    """State needed to chain one-step forecasts: the most recent observed
    powers (oldest first) and the hour of day of the first target step."""

    lag_values: tuple
    start_hour: int


def generate_scenarios(one_step_model: QuantileModel, context: ChainContext,
                       horizon: int, count: int, seed: int = 0) -> ScenarioSet:
    """Build trajectories by repeatedly drawing a quantile level uniformly
    at random, evaluating the one-step forecast, and feeding the value back
    as the most recent lag."""
    if one_step_model.max_lead < 1:
        raise ValueError("one-step model has no lead-1 training data")
    lags = np.asarray(context.lag_values, dtype=float)
    if lags.size != one_step_model.lags:
        raise ValueError("context lag count does not match the model")
    n_levels = one_step_model.levels.size
    children = np.random.SeedSequence(seed).spawn(count)
    trajs = np.empty((count, horizon))
    for i in range(count):
        rng = np.random.default_rng(children[i])
        cur = lags.copy()
        for j in range(horizon):
            hour = (context.start_hour + j) % 24
            sin_h, cos_h = hour_features(hour)
            x = np.concatenate([[sin_h, cos_h], cur])
            quantiles = predict(one_step_model, x, 1)
            trajs[i, j] = quantiles[rng.integers(n_levels)]
            cur = np.append(cur[1:], trajs[i, j])
    return ScenarioSet(trajs, np.full(count, 1.0 / count))


def kantorovich_objective(dist: np.ndarray, weights: np.ndarray, selected) -> float:
    """Probability-weighted distance of all scenarios to the selected set."""
    selected = list(selected)
    rest = [j for j in range(weights.size) if j not in selected]
    if not rest:
        return 0.0
    return float(np.sum(weights[rest] * dist[np.ix_(rest, selected)].min(axis=1)))


def reduce_scenarios(scenario_set: ScenarioSet, ns: int) -> ScenarioSet:
    """Fast-forward selection under the Kantorovich distance with the
    Euclidean trajectory metric; dropped scenarios hand their weight to the
    nearest kept one."""
    n = scenario_set.n
    if ns > n:
        raise ValueError("cannot select more scenarios than available")
    if ns == n:
        return ScenarioSet(scenario_set.scenarios.copy(), scenario_set.weights.copy())
    dist = cdist(scenario_set.scenarios, scenario_set.scenarios)
    w = scenario_set.weights
    selected: list[int] = []
    remaining = list(range(n))
    # distance of each scenario to the currently selected set; selected
    # scenarios have zero distance, so they drop out of the sums below
    c_min = np.full(n, np.inf)
    c_min_capped = np.full(n, np.finfo(float).max)
    for _ in range(ns):
        rem = np.asarray(remaining)
        # candidate u's objective: sum_j w_j min(c_min_j, d(j,u)); the j=u
        # term vanishes through d(u,u)=0 and selected j through c_min_j=0
        vals = w @ np.minimum(c_min_capped[:, None], dist[:, rem])
        best_u = int(rem[np.argmin(vals)])
        selected.append(best_u)
        remaining.remove(best_u)
        c_min = np.minimum(c_min, dist[:, best_u])
        c_min_capped = np.minimum(c_min_capped, dist[:, best_u])

    selected = sorted(selected)
    out_w = np.zeros(len(selected))
    sel_arr = np.array(selected)
    for j in range(n):
        if j in selected:
            out_w[selected.index(j)] += w[j]
        else:
            nearest = int(np.argmin(dist[j, sel_arr]))
            out_w[nearest] += w[j]
    return ScenarioSet(scenario_set.scenarios[sel_arr], out_w)


@dataclass
class ForecastProduct:
    """Per-step probabilistic forecasts over the extended horizon.

    power_quantiles has one row per interval (gap+1 .. gap+T leads from the
    last observation); de_quantiles and cdf_models cover the interval
    boundaries, where entry j describes the energy deviation accumulated
    from the computation time through boundary j.
    """

    levels: np.ndarray
    power_quantiles: np.ndarray     # (T, L)
    median_power: np.ndarray        # (T,)
    de_quantiles: np.ndarray        # (T+1, L)
    cdf_models: list                # length T+1, entries may be None
    dt: float = 1.0
    gap: int = 0

    def __post_init__(self):
        self.levels = np.asarray(self.levels, dtype=float)
        self.power_quantiles = np.atleast_2d(np.asarray(self.power_quantiles, dtype=float))
        self.median_power = np.asarray(self.median_power, dtype=float)
        self.de_quantiles = np.atleast_2d(np.asarray(self.de_quantiles, dtype=float))
        t = self.power_quantiles.shape[0]
        if self.median_power.size != t or self.de_quantiles.shape[0] != t + 1:
            raise ValidationError("forecast arrays have inconsistent horizon lengths")
        if len(self.cdf_models) != t + 1:
            raise ValidationError("need one CDF slot per interval boundary")
        if np.any(np.diff(self.power_quantiles, axis=1) < -1e-9):
            raise ValidationError("power quantiles must be nondecreasing in level")
        if np.any(np.diff(self.de_quantiles, axis=1) < -1e-9):
            raise ValidationError("energy quantiles must be nondecreasing in level")

    @property
    def horizon(self) -> int:
        return self.power_quantiles.shape[0]

    def support(self, pi_p: float):
        """Per-interval central power interval at mass pi_p."""
        lo = np.empty(self.horizon)
        hi = np.empty(self.horizon)
        for k in range(self.horizon):
            lo[k], hi[k] = support_interval(self.levels, self.power_quantiles[k], pi_p)
        return lo, hi

    def de_interval(self, mass: float):
        """Per-boundary central energy-deviation interval at the given mass."""
        lo = np.empty(self.horizon + 1)
        hi = np.empty(self.horizon + 1)
        for j in range(self.horizon + 1):
            lo[j], hi[j] = support_interval(self.levels, self.de_quantiles[j], mass)
        return lo, hi

    def to_json(self, path=None):
        payload = {
            "levels": self.levels.tolist(),
            "power_quantiles": self.power_quantiles.tolist(),
            "median_power": self.median_power.tolist(),
            "de_quantiles": self.de_quantiles.tolist(),
            "cdf_models": [
                None if m is None else
                {"a1": m.a1, "a2": m.a2, "a3": m.a3, "a4": m.a4, "a5": m.a5,
                 "a6": m.a6, "rmse": m.rmse}
                for m in self.cdf_models
            ],
            "dt": self.dt,
            "gap": self.gap,
        }
        if path is None:
            return json.dumps(payload, indent=2)
        with open(path, "w") as fh:
            json.dump(payload, fh, indent=2)
        return None


def product_from_json(source) -> ForecastProduct:
    if isinstance(source, dict):
        payload = source
    elif isinstance(source, (str, bytes)) and str(source).lstrip().startswith("{"):
        payload = json.loads(source)
    else:
        with open(source) as fh:
            payload = json.load(fh)
    models = [
        None if m is None else CdfModel(**m)
        for m in payload["cdf_models"]
    ]
    return ForecastProduct(
        levels=np.asarray(payload["levels"]),
        power_quantiles=np.asarray(payload["power_quantiles"]),
        median_power=np.asarray(payload["median_power"]),
        de_quantiles=np.asarray(payload["de_quantiles"]),
        cdf_models=models,
        dt=float(payload["dt"]),
        gap=int(payload["gap"]),
    )


def build_forecast_product(power_model: QuantileModel, energy_model: QuantileModel,
                           series: NetLoadSeries, origin: int, grid: TimeGrid) -> ForecastProduct:
    """Assemble the scheduler-facing forecast for a computation time.

    origin is the index of the computation time; observations strictly
    before it are available. Interval k of the horizon is gap+k+1 leads
    after the last observation, boundary j accumulates gap+j leads.
    """
    if origin < power_model.lags:
        raise InsufficientHistoryError("origin leaves no room for lag features")
    t_horizon = grid.horizon
    gap = grid.gap
    need = gap + t_horizon
    if power_model.max_lead < need or energy_model.max_lead < need:
        raise ValueError("models were not trained out to the required lead")

    last_obs = origin - 1
    lag_vals = series.p_l[last_obs - power_model.lags + 1: last_obs + 1]
    base_hour = int(series.timestamps[last_obs].hour)
    levels = power_model.levels

    def power_ctx(lead):
        sin_h, cos_h = hour_features((base_hour + lead) % 24)
        return np.concatenate([[sin_h, cos_h], lag_vals])

    power_q = np.empty((t_horizon, levels.size))
    for k in range(t_horizon):
        power_q[k] = predict(power_model, power_ctx(gap + k + 1), gap + k + 1)
    median = np.array([np.interp(0.5, levels, power_q[k]) for k in range(t_horizon)])

    # integrated median over leads 1..need for the energy features
    med_per_lead = np.array(
        [np.interp(0.5, levels, predict(power_model, power_ctx(lead), lead))
         for lead in range(1, need + 1)]
    )
    int_median = np.cumsum(med_per_lead * power_model.dt)

    de_q = np.empty((t_horizon + 1, levels.size))
    cdf_models = []
    for j in range(t_horizon + 1):
        lead = gap + j
        if lead == 0:
            de_q[j] = 0.0
            cdf_models.append(None)
            continue
        ctx = np.concatenate([power_ctx(lead), [int_median[lead - 1]]])
        de_q[j] = predict(energy_model, ctx, lead)
        try:
            cdf_models.append(fit_cdf(list(zip(levels, de_q[j]))))
        except DegenerateDistributionError:
            cdf_models.append(None)
    return ForecastProduct(
        levels=levels, power_quantiles=power_q, median_power=median,
        de_quantiles=de_q, cdf_models=cdf_models, dt=power_model.dt, gap=gap,
    )
