"""Scenario file loading, dotted-path overrides and canonical serialization."""

import copy
import logging
import os
from pathlib import Path
from typing import Any

import yaml
from dotenv import load_dotenv
from pydantic import ValidationError

from linkmpc.models import RuntimeSettings, Scenario

logger = logging.getLogger(__name__)

# Load .env file (if it exists) - env vars take priority
load_dotenv()


class ConfigError(ValueError):
    """Invalid scenario text, override or value."""

    def __init__(self, message: str, line: int | None = None, field: str | None = None):
        super().__init__(message)
        self.line = line
        self.field = field


def deep_merge(base: dict[str, Any], override: dict[str, Any]) -> dict[str, Any]:
    """Recursively merge override into base; lists are replaced, not merged."""
    result = base.copy()
    for key, value in override.items():
        if key in result and isinstance(result[key], dict) and isinstance(value, dict):
            result[key] = deep_merge(result[key], value)
        else:
            result[key] = value
    return result


def default_scenario_data() -> dict[str, Any]:
    """Plain-data form of the default scenario."""
    return Scenario().model_dump(mode="json")


def parse_yaml_text(text: str) -> dict[str, Any]:
    """Parse scenario text into a mapping; empty text is an empty mapping."""
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as e:
        mark = getattr(e, "problem_mark", None)
        line = mark.line + 1 if mark is not None else None
        where = f" at line {line}" if line is not None else ""
        raise ConfigError(f"YAML parse error{where}: {getattr(e, 'problem', e)}", line=line) from e
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ConfigError("scenario file must contain a mapping at the top level", line=1)
    return data


def parse_override(text: str) -> tuple[list[str], Any]:
    """Split 'a.b.c=value' into its path and a YAML-typed value."""
    if "=" not in text:
        raise ConfigError(f"override '{text}' is not of the form key=value")
    key, raw = text.split("=", 1)
    key = key.strip()
    if not key or any(not part for part in key.split(".")):
        raise ConfigError(f"override '{text}' has an empty key component")
    try:
        value = yaml.safe_load(raw) if raw.strip() else None
    except yaml.YAMLError as e:
        raise ConfigError(f"override '{text}' has an unparseable value", field=key) from e
    return key.split("."), value


def _set_path(data: Any, path: list[str], value: Any, dotted: str) -> None:
    node = data
    for depth, part in enumerate(path):
        last = depth == len(path) - 1
        if isinstance(node, list):
            if not part.isdigit() or int(part) >= len(node):
                raise ConfigError(f"override path '{dotted}' has an invalid list index '{part}'", field=dotted)
            idx = int(part)
            if last:
                node[idx] = value
            else:
                node = node[idx]
        elif isinstance(node, dict):
            if last:
                node[part] = value
            else:
                if part not in node or node[part] is None:
                    node[part] = {}
                node = node[part]
        else:
            raise ConfigError(f"override path '{dotted}' descends into a scalar", field=dotted)


def apply_overrides(data: dict[str, Any], overrides: list[str]) -> dict[str, Any]:
    """Apply 'dotted.path=value' overrides to a copy of data."""
    result = copy.deepcopy(data)
    for text in overrides:
        path, value = parse_override(text)
        _set_path(result, path, value, ".".join(path))
        logger.debug("Applied override %s", text)
    return result


def _validation_error(e: ValidationError) -> ConfigError:
    first = e.errors()[0]
    field = ".".join(str(p) for p in first["loc"]) or "<root>"
    return ConfigError(f"{field}: {first['msg']}", field=field)


def build_scenario(data: dict[str, Any], overrides: list[str] | None = None) -> Scenario:
    """Validate user data layered over the defaults, then apply overrides."""
    merged = deep_merge(default_scenario_data(), data)
    merged = apply_overrides(merged, overrides or [])
    try:
        return Scenario.model_validate(merged)
    except ValidationError as e:
        raise _validation_error(e) from e


def load_scenario(text: str, overrides: list[str] | None = None) -> Scenario:
    """Parse and validate scenario text. Empty text is the default mission."""
    scenario = build_scenario(parse_yaml_text(text), overrides)
    logger.info(
        "Loaded scenario: %.1f s, %d obstacles, N=%d",
        scenario.duration,
        scenario.n_obstacles,
        scenario.horizon.steps,
    )
    return scenario


def load_scenario_file(path: Path | None, overrides: list[str] | None = None) -> Scenario:
    """Load a scenario file; None means the default scenario."""
    if path is None:
        return load_scenario("", overrides)
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigError(f"cannot read config file {path}: {e}") from e
    return load_scenario(text, overrides)


def dump_scenario(scenario: Scenario) -> str:
    """Canonical YAML: schema key order, every value explicit."""
    return yaml.safe_dump(
        scenario.model_dump(mode="json"),
        sort_keys=False,
        default_flow_style=None,
    )


def get_env_or_value(env_key: str, value: Any, default: Any = None) -> Any:
    """Get value from environment variable or fall back to the given value."""
    env_value = os.environ.get(env_key)
    if env_value is not None:
        return env_value
    if value is not None:
        return value
    return default


def load_runtime_settings(
    log_level: str | None = None,
    jobs: int | None = None,
    rti_iters: int | None = None,
) -> RuntimeSettings:
    """Process-level knobs. Explicit arguments win over LINKMPC_* variables."""
    try:
        return RuntimeSettings(
            log_level=log_level or get_env_or_value("LINKMPC_LOG_LEVEL", None, "INFO"),
            jobs=jobs or get_env_or_value("LINKMPC_JOBS", None, os.cpu_count() or 1),
            rti_iters=rti_iters or get_env_or_value("LINKMPC_RTI_ITERS", None, None),
        )
    except ValidationError as e:
        raise _validation_error(e) from e
