"""Shared domain types: time grid, storage and tariff specifications, net-load
series, and the committed dispatch schedule with its cost evaluation.

Sign conventions used throughout the package:
  * grid power pg > 0 means import (purchase), pg < 0 means export,
  * storage power ps > 0 means charging, ps < 0 means discharging,
  * net inflexible power p_l > 0 means consumption, p_l < 0 means generation.
"""

from dataclasses import dataclass, field
import json

import numpy as np
import pandas as pd

COMPLEMENTARITY_TOL = 1e-8

# Reference coefficients of the quadratic exchange cost (EUR*h/kW^2, EUR*h/kW).
DEFAULT_C1_PLUS = 0.3
DEFAULT_C1_MINUS = 0.15
DEFAULT_C2_PLUS = 0.05
DEFAULT_C2_MINUS = 0.05


class ValidationError(ValueError):
    """A domain object violates one of its invariants."""


@dataclass(frozen=True)
class TimeGrid:
    """Discrete hourly planning grid.

    k0 is the index of the computation time, ks the first interval of the
    scheduling horizon. The horizon has nd dispatch intervals followed by
    nf extension intervals, each of duration dt hours.
    """

    k0: int
    ks: int
    nd: int
    nf: int = 0
    dt: float = 1.0

    def __post_init__(self):
        if self.ks <= self.k0:
            raise ValidationError("scheduling start ks must come after computation time k0")
        if self.nd < 1:
            raise ValidationError("need at least one dispatch interval")
        if self.nf < 0:
            raise ValidationError("extension interval count cannot be negative")
        if not self.dt > 0:
            raise ValidationError("interval duration must be positive")

    @property
    def gap(self) -> int:
        """Intervals between computation time and the start of the horizon."""
        return self.ks - self.k0

    @property
    def horizon(self) -> int:
        """Total optimization intervals (dispatch plus extension)."""
        return self.nd + self.nf


@dataclass(frozen=True)
class StorageSpec:
    """Power and energy limits of the storage plus its conversion-loss level."""

    p_min: float
    p_max: float
    e_min: float
    e_max: float
    mu: float = 0.0

    def __post_init__(self):
        if not (self.p_min <= 0.0 <= self.p_max):
            raise ValidationError("power bounds must straddle zero")
        if not self.e_min < self.e_max:
            raise ValidationError("energy bounds must satisfy e_min < e_max")
        if not (0.0 <= self.mu < 1.0):
            raise ValidationError("loss coefficient must lie in [0, 1)")

    @property
    def capacity(self) -> float:
        return self.e_max - self.e_min


def reference_storage() -> StorageSpec:
    """Usable-capacity parameters of a common residential battery."""
    return StorageSpec(p_min=-5.0, p_max=5.0, e_min=0.0, e_max=13.5, mu=0.05)


@dataclass(frozen=True)
class TariffSpec:
    """Quadratic/linear exchange cost coefficients plus the imbalance multiplier.

    Coefficients may be scalars (time-invariant) or per-step arrays.
    dev_multiplier scales the purchase-side coefficients when pricing
    imbalances (2 for the moderate policy, 10 for the punitive one).
    """

    c1_plus: float | np.ndarray = DEFAULT_C1_PLUS
    c1_minus: float | np.ndarray = DEFAULT_C1_MINUS
    c2_plus: float | np.ndarray = DEFAULT_C2_PLUS
    c2_minus: float | np.ndarray = DEFAULT_C2_MINUS
    dev_multiplier: float = 2.0

    def __post_init__(self):
        if np.any(np.asarray(self.c1_plus) < 0) or np.any(np.asarray(self.c1_minus) < 0):
            raise ValidationError("quadratic coefficients must be nonnegative")
        if not self.dev_multiplier > 0:
            raise ValidationError("imbalance multiplier must be positive")


def tariff_c1() -> TariffSpec:
    """Reference coefficients with the imbalance tariff twice the schedule's."""
    return TariffSpec(dev_multiplier=2.0)


def tariff_c2() -> TariffSpec:
    """Reference coefficients with the imbalance tariff ten times the schedule's."""
    return TariffSpec(dev_multiplier=10.0)


def split_directions(p):
    """Split a power value into its nonnegative and nonpositive parts.

    Returns the unique complementary pair (p_plus, p_minus) with
    p_plus + p_minus = p, p_plus >= 0 and p_minus <= 0. Works on scalars
    and arrays.
    """
    arr = np.asarray(p, dtype=float)
    p_plus = np.maximum(arr, 0.0)
    p_minus = np.minimum(arr, 0.0)
    if arr.ndim == 0:
        return float(p_plus), float(p_minus)
    return p_plus, p_minus


@dataclass
class DispatchSchedule:
    """Committed grid-exchange profile over the extended horizon.

    pg_star/pg_plus/pg_minus have one entry per interval (nd + nf values);
    expected_soc holds the interval-boundary states (one more entry);
    slack holds the per-state softening mass of the probabilistic scheduler
    (all zeros for the other schedulers). nd records how many leading
    intervals form the dispatch day for cost reporting.
    """

    pg_star: np.ndarray
    pg_plus: np.ndarray
    pg_minus: np.ndarray
    expected_soc: np.ndarray
    slack: np.ndarray
    nd: int

    def __post_init__(self):
        self.pg_star = np.asarray(self.pg_star, dtype=float)
        self.pg_plus = np.asarray(self.pg_plus, dtype=float)
        self.pg_minus = np.asarray(self.pg_minus, dtype=float)
        self.expected_soc = np.asarray(self.expected_soc, dtype=float)
        self.slack = np.asarray(self.slack, dtype=float)
        t = self.pg_star.size
        if self.pg_plus.size != t or self.pg_minus.size != t:
            raise ValidationError("direction splits must match the schedule length")
        if self.expected_soc.size != t + 1 or self.slack.size != t + 1:
            raise ValidationError("state sequences must have one more entry than intervals")
        if not 1 <= self.nd <= t:
            raise ValidationError("dispatch-interval count out of range")
        if np.any(self.pg_plus < -1e-9) or np.any(self.pg_minus > 1e-9):
            raise ValidationError("direction splits have the wrong sign")
        if np.any(np.abs(self.pg_plus + self.pg_minus - self.pg_star) > 1e-9):
            raise ValidationError("direction splits do not sum to the schedule")
        if np.any(self.pg_plus * np.abs(self.pg_minus) > COMPLEMENTARITY_TOL):
            raise ValidationError("simultaneous import/export in the schedule")
        if np.any(self.slack < -1e-9):
            raise ValidationError("softening slack cannot be negative")

    @property
    def horizon(self) -> int:
        return self.pg_star.size

    def to_frame(self) -> pd.DataFrame:
        """Tabular form: one row per interval boundary, power columns empty
        on the terminal row."""
        t = self.horizon
        pg = np.append(self.pg_star, np.nan)
        pgp = np.append(self.pg_plus, np.nan)
        pgm = np.append(self.pg_minus, np.nan)
        return pd.DataFrame(
            {
                "k": np.arange(t + 1),
                "pg_star": pg,
                "pg_plus": pgp,
                "pg_minus": pgm,
                "expected_soc": self.expected_soc,
                "slack": self.slack,
            }
        )

    def to_csv(self, path):
        self.to_frame().to_csv(path, index=False)

    def to_json(self, path=None):
        payload = {
            "nd": int(self.nd),
            "pg_star": self.pg_star.tolist(),
            "pg_plus": self.pg_plus.tolist(),
            "pg_minus": self.pg_minus.tolist(),
            "expected_soc": self.expected_soc.tolist(),
            "slack": self.slack.tolist(),
        }
        if path is None:
            return json.dumps(payload, indent=2)
        with open(path, "w") as fh:
            json.dump(payload, fh, indent=2)
        return None


def schedule_from_csv(path, nd: int | None = None) -> DispatchSchedule:
    df = pd.read_csv(path)
    soc = df["expected_soc"].to_numpy(dtype=float)
    slack = df["slack"].to_numpy(dtype=float)
    pg = df["pg_star"].to_numpy(dtype=float)[:-1]
    pgp = df["pg_plus"].to_numpy(dtype=float)[:-1]
    pgm = df["pg_minus"].to_numpy(dtype=float)[:-1]
    return DispatchSchedule(pg, pgp, pgm, soc, slack, nd=nd if nd is not None else pg.size)


def schedule_from_json(source) -> DispatchSchedule:
    if isinstance(source, (str, bytes)) and not str(source).lstrip().startswith("{"):
        with open(source) as fh:
            payload = json.load(fh)
    elif isinstance(source, dict):
        payload = source
    else:
        payload = json.loads(source)
    return DispatchSchedule(
        np.asarray(payload["pg_star"]),
        np.asarray(payload["pg_plus"]),
        np.asarray(payload["pg_minus"]),
        np.asarray(payload["expected_soc"]),
        np.asarray(payload["slack"]),
        nd=int(payload["nd"]),
    )


def schedule_cost(schedule: DispatchSchedule, tariff: TariffSpec) -> float:
    """Quadratic exchange cost of the committed schedule over the dispatch
    day only (the extension intervals enter the optimization but not the
    reported cost)."""
    nd = schedule.nd
    pgp = schedule.pg_plus[:nd]
    pgm = schedule.pg_minus[:nd]
    c1p = np.broadcast_to(np.asarray(tariff.c1_plus, dtype=float), (nd,))
    c1m = np.broadcast_to(np.asarray(tariff.c1_minus, dtype=float), (nd,))
    c2p = np.broadcast_to(np.asarray(tariff.c2_plus, dtype=float), (nd,))
    c2m = np.broadcast_to(np.asarray(tariff.c2_minus, dtype=float), (nd,))
    return float(np.sum(c1p * pgp**2 + c2p * pgp + c1m * pgm**2 + c2m * pgm))


def exchange_cost_terms(pg_plus, pg_minus, tariff: TariffSpec):
    """Per-step schedule cost terms; used by the schedulers' objectives."""
    pgp = np.asarray(pg_plus, dtype=float)
    pgm = np.asarray(pg_minus, dtype=float)
    return (
        tariff.c1_plus * pgp**2
        + tariff.c2_plus * pgp
        + tariff.c1_minus * pgm**2
        + tariff.c2_minus * pgm
    )


@dataclass
class NetLoadSeries:
    """Hourly net inflexible power (consumption minus generation, kW)."""

    timestamps: pd.DatetimeIndex
    p_l: np.ndarray = field(repr=False)

    def __post_init__(self):
        self.timestamps = pd.DatetimeIndex(self.timestamps)
        self.p_l = np.asarray(self.p_l, dtype=float)
        if len(self.timestamps) != self.p_l.size:
            raise ValidationError("timestamps and values differ in length")
        if self.p_l.size >= 2:
            deltas = np.diff(self.timestamps.asi8)
            if np.any(deltas != 3600 * 10**9):
                raise ValidationError("series must be uniformly hourly")
        if not np.all(np.isfinite(self.p_l)):
            raise ValidationError("series contains non-finite values")

    def __len__(self):
        return self.p_l.size

    def hour_of_day(self) -> np.ndarray:
        return self.timestamps.hour.to_numpy()

    def to_csv(self, path):
        pd.DataFrame({"timestamp": self.timestamps, "p_l_kw": self.p_l}).to_csv(
            path, index=False, date_format="%Y-%m-%dT%H:%M:%S"
        )


def net_load_from_csv(path) -> NetLoadSeries:
    df = pd.read_csv(path)
    if "timestamp" not in df.columns or "p_l_kw" not in df.columns:
        raise ValidationError("expected columns 'timestamp' and 'p_l_kw'")
    ts = pd.DatetimeIndex(pd.to_datetime(df["timestamp"], format="ISO8601"))
    return NetLoadSeries(ts, df["p_l_kw"].to_numpy(dtype=float))
