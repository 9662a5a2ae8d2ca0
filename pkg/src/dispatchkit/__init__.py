"""Day-ahead dispatch scheduling toolkit for storage-backed feeders."""

from .core import (
    DispatchSchedule,
    NetLoadSeries,
    StorageSpec,
    TariffSpec,
    TimeGrid,
    schedule_cost,
    split_directions,
)

__all__ = [
    "DispatchSchedule",
    "NetLoadSeries",
    "StorageSpec",
    "TariffSpec",
    "TimeGrid",
    "schedule_cost",
    "split_directions",
]

__version__ = "0.1.0"
