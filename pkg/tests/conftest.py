from __future__ import annotations

import pytest

from wattwise.broker import AttributeValue, ContextBroker
from wattwise.clock import SimulatedClock
from wattwise.config import PlatformConfig
from wattwise.platform import Platform


@pytest.fixture
def clock() -> SimulatedClock:
    return SimulatedClock(0)


@pytest.fixture
def broker(clock: SimulatedClock) -> ContextBroker:
    return ContextBroker(clock)


@pytest.fixture
def platform() -> Platform:
    p = Platform(PlatformConfig(token="test-token"))
    yield p
    p.close()


def att(value, unit="", at=0, quality="Raw") -> AttributeValue:
    return AttributeValue(value=value, unit=unit, observed_at=at, quality=quality)
