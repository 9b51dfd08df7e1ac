"""wattwise: an energy-behaviour campaign platform.

Sensor ingestion, stream cleaning, time-series aggregation, semantic
(JSON-LD) fusion, rule-based personalized recommendations with task
validation, group inference, analytics, and a REST API, plus a scenario
simulator for driving it all without physical devices.
"""

from .broker import AttributeValue, ContextBroker, EntityRecord
from .clock import SimulatedClock, WallClock
from .config import PlatformConfig
from .platform import Platform
from .timeseries import Measurement, SeriesQuery, TimeseriesStore

__version__ = "0.1.0"

__all__ = [
    "AttributeValue",
    "ContextBroker",
    "EntityRecord",
    "Measurement",
    "Platform",
    "PlatformConfig",
    "SeriesQuery",
    "SimulatedClock",
    "TimeseriesStore",
    "WallClock",
    "__version__",
]
