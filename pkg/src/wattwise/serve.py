"""Process entrypoint: config, JSON logging, uvicorn."""

from __future__ import annotations

import argparse
import json
import logging
import threading
import time

from .api import create_app
from .config import PlatformConfig
from .platform import Platform


class JsonLogFormatter(logging.Formatter):
    def format(self, record: logging.LogRecord) -> str:
        payload = {
            "ts": int(record.created * 1000),
            "level": record.levelname,
            "logger": record.name,
            "message": record.getMessage(),
        }
        if record.exc_info:
            payload["exc"] = self.formatException(record.exc_info)
        return json.dumps(payload)


def setup_logging() -> None:
    handler = logging.StreamHandler()
    handler.setFormatter(JsonLogFormatter())
    root = logging.getLogger()
    root.handlers = [handler]
    root.setLevel(logging.INFO)


def build_platform(args: argparse.Namespace) -> Platform:
    config = PlatformConfig.load(args.config)
    if args.host:
        config.host = args.host
    if args.port:
        config.port = args.port
    platform = Platform(config)
    if args.seed_demo:
        from .demo import seed_demo

        seed_demo(platform)
    return platform


def main(argv: list[str] | None = None) -> None:
    parser = argparse.ArgumentParser(prog="wattwise-serve")
    parser.add_argument("--config", default=None, help="path to JSON config file")
    parser.add_argument("--host", default=None)
    parser.add_argument("--port", type=int, default=None)
    parser.add_argument("--seed-demo", action="store_true", help="load the demo fixture")
    args = parser.parse_args(argv)

    setup_logging()
    platform = build_platform(args)
    app = create_app(platform)

    if platform.config.clock == "wall":
        def ticker() -> None:
            while True:
                time.sleep(1.0)
                try:
                    platform.tick_wall()
                except Exception:  # noqa: BLE001
                    logging.getLogger(__name__).exception("wall ticker failed")

        threading.Thread(target=ticker, daemon=True, name="wall-ticker").start()

    import uvicorn

    uvicorn.run(app, host=platform.config.host, port=platform.config.port, log_config=None)


if __name__ == "__main__":
    main()
