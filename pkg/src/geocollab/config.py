"""Server configuration: defaults, config-file loading, env and flag overlays.

Precedence is flags > environment (GEOCOLLAB_*) > config file > defaults.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Mapping

ENV_PREFIX = "GEOCOLLAB_"


class ConfigError(Exception):
    pass


@dataclass
class ServerConfig:
    host: str = "127.0.0.1"
    port: int = 8080
    max_sessions: int = 64
    max_participants: int = 64
    replay_capacity: int = 1024
    view_rate_hz: float = 10.0
    service_endpoints: dict[str, str] = field(default_factory=dict)
    asset_dir: str | None = None
    review_dir: str = "review_data"
    write_timeout_s: float = 5.0
    service_timeout_s: float = 30.0
    outbound_queue_size: int = 256
    retention_s: float = 600.0

    def __post_init__(self):
        for name in ("max_sessions", "max_participants", "replay_capacity", "outbound_queue_size"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        for name in ("view_rate_hz", "write_timeout_s", "service_timeout_s", "retention_s"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if not isinstance(self.service_endpoints, dict):
            raise ConfigError("service_endpoints must map op kinds to URLs")
        if self.port < 0 or self.port > 65535:
            raise ConfigError("port must be within [0, 65535]")


_FIELD_TYPES = {f.name: f.type for f in fields(ServerConfig)}


def _coerce(name: str, value: Any) -> Any:
    if name in ("host", "asset_dir", "review_dir"):
        return value if value is None else str(value)
    if name == "service_endpoints":
        if isinstance(value, str):
            try:
                value = json.loads(value)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"service_endpoints must be JSON: {exc}") from exc
        if not isinstance(value, dict):
            raise ConfigError("service_endpoints must be an object")
        return {str(k): str(v) for k, v in value.items()}
    if name in ("port", "max_sessions", "max_participants", "replay_capacity", "outbound_queue_size"):
        try:
            return int(value)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"{name} must be an integer, got {value!r}") from exc
    if name in ("view_rate_hz", "write_timeout_s", "service_timeout_s", "retention_s"):
        try:
            return float(value)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"{name} must be a number, got {value!r}") from exc
    raise ConfigError(f"unknown config key {name!r}")


def load_config(
    path: str | Path | None = None,
    env: Mapping[str, str] | None = None,
    overrides: Mapping[str, Any] | None = None,
) -> ServerConfig:
    """Merge file, environment, and explicit overrides into a ServerConfig."""
    merged: dict[str, Any] = {}

    if path is not None:
        file_path = Path(path)
        if not file_path.exists():
            raise ConfigError(f"config file not found: {file_path}")
        try:
            document = json.loads(file_path.read_text(encoding="utf-8"))
        except (json.JSONDecodeError, OSError) as exc:
            raise ConfigError(f"cannot read config file {file_path}: {exc}") from exc
        if not isinstance(document, dict):
            raise ConfigError("config file must contain a JSON object")
        for key, value in document.items():
            if key not in _FIELD_TYPES:
                raise ConfigError(f"unknown config key {key!r} in {file_path}")
            merged[key] = _coerce(key, value)

    environ = os.environ if env is None else env
    for name in _FIELD_TYPES:
        env_key = ENV_PREFIX + name.upper()
        if env_key in environ:
            merged[name] = _coerce(name, environ[env_key])

    for key, value in (overrides or {}).items():
        if value is None:
            continue
        if key not in _FIELD_TYPES:
            raise ConfigError(f"unknown config key {key!r}")
        merged[key] = _coerce(key, value)

    return ServerConfig(**merged)
