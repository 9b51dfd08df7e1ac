"""Platform configuration: defaults < config file (JSON) < environment.

Environment variables use the ``WATTWISE_`` prefix with the upper-cased
field name, e.g. ``WATTWISE_PORT=9000`` or ``WATTWISE_TOKEN=secret``.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Optional

ENV_PREFIX = "WATTWISE_"


@dataclass
class PlatformConfig:
    host: str = "127.0.0.1"
    port: int = 8080
    token: str = "change-me"
    data_dir: Optional[str] = None
    clock: str = "simulated"  # simulated | wall
    sim_start_ms: int = 0
    flush_window_ms: int = 1_000
    clock_skew_ms: int = 60_000
    liveness_multiplier: float = 3.0
    sweep_interval_ms: int = 60_000
    staleness_multiplier: float = 2.0
    validation_window_ms: int = 1_800_000
    preference_evidence_k: int = 3
    gamer_precedence: list[str] = field(
        default_factory=lambda: ["Player", "Socialiser", "Humanitarian", "FreeSpirit"]
    )
    rollup_widths_ms: list[int] = field(default_factory=lambda: [3_600_000, 86_400_000])
    vocab_version: str = "1.0"
    default_n_required: int = 5
    recommendation_expiry_ms: int = 86_400_000
    dashboard_period_ms: int = 604_800_000  # 7 days
    auto_deliver: bool = True

    @classmethod
    def load(cls, path: Optional[str | Path] = None, env: Optional[dict] = None) -> "PlatformConfig":
        config = cls()
        if path:
            raw = json.loads(Path(path).read_text(encoding="utf-8"))
            for f in fields(cls):
                if f.name in raw:
                    setattr(config, f.name, raw[f.name])
        env = os.environ if env is None else env
        for f in fields(cls):
            key = ENV_PREFIX + f.name.upper()
            if key not in env:
                continue
            raw_value = env[key]
            current = getattr(config, f.name)
            if isinstance(current, bool):
                setattr(config, f.name, raw_value.lower() in ("1", "true", "yes"))
            elif isinstance(current, int):
                setattr(config, f.name, int(raw_value))
            elif isinstance(current, float):
                setattr(config, f.name, float(raw_value))
            elif isinstance(current, list):
                setattr(config, f.name, json.loads(raw_value))
            else:
                setattr(config, f.name, raw_value)
        return config

    def to_obj(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}
