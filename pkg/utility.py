import hashlib
import logging
import math
import os
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List

import orjson
import yaml
from dotenv import load_dotenv

load_dotenv()

THREADS_ENV = "IBM_TOOLKIT_THREADS"
LOG_LEVEL_ENV = "IBM_TOOLKIT_LOG_LEVEL"

COMMANDS = ("eval", "sim", "verify", "report")
FORMATS = ("csv", "json")


class ConfigError(ValueError):
    """Malformed run configuration or environment setting."""


def configure_logging(level: str | None = None) -> None:
    """
    Configure the root logger once for command-line use.

    Args:
        level: Level name; falls back to IBM_TOOLKIT_LOG_LEVEL, then WARNING
    """
    name = (level or os.environ.get(LOG_LEVEL_ENV) or "WARNING").upper()
    if not isinstance(logging.getLevelName(name), int):
        raise ConfigError(f"unknown log level {name!r}")
    logging.basicConfig(level=name, format="%(asctime)s %(levelname)s %(name)s %(message)s")


def thread_cap(explicit: int | None = None) -> int:
    """
    Number of worker threads: explicit value, else IBM_TOOLKIT_THREADS, else the CPU count.

    Raises:
        ConfigError: If the environment value is not a positive integer
    """
    if explicit is not None:
        if explicit < 1:
            raise ConfigError("--threads must be >= 1")
        return explicit
    raw = os.environ.get(THREADS_ENV)
    if raw is None or raw.strip() == "":
        return os.cpu_count() or 1
    try:
        value = int(raw)
    except ValueError as exc:
        raise ConfigError(f"{THREADS_ENV}={raw!r} is not an integer") from exc
    if value < 1:
        raise ConfigError(f"{THREADS_ENV} must be >= 1")
    return value


def config_digest(params: Dict[str, Any]) -> str:
    """SHA-256 over the canonical (sorted-key) JSON form of the parameters."""
    blob = orjson.dumps(params, option=orjson.OPT_SORT_KEYS | orjson.OPT_SERIALIZE_NUMPY)
    return hashlib.sha256(blob).hexdigest()


def format_number(value: float) -> str:
    """17 significant digits, enough to round-trip a double."""
    if isinstance(value, bool):
        return str(value).lower()
    if isinstance(value, int):
        return str(value)
    if math.isnan(value):
        return "nan"
    return format(value, ".17g")


@dataclass(frozen=True)
class RunConfig:
    command: str
    params: Dict[str, Any] = field(default_factory=dict)
    seed: int = 0
    output_path: str | None = None
    format: str = "csv"

    def __post_init__(self) -> None:
        if self.command not in COMMANDS:
            raise ConfigError(f"unknown command {self.command!r}; expected one of {', '.join(COMMANDS)}")
        if self.format not in FORMATS:
            raise ConfigError(f"unknown format {self.format!r}")
        if not isinstance(self.params, dict):
            raise ConfigError("params must be a mapping")
        if isinstance(self.seed, bool) or not isinstance(self.seed, int) or not 0 <= self.seed < 2 ** 64:
            raise ConfigError(f"seed must be a 64-bit unsigned integer, got {self.seed!r}")

    @classmethod
    def from_mapping(cls, data: Dict[str, Any]) -> "RunConfig":
        if not isinstance(data, dict):
            raise ConfigError("config must be a mapping")
        known = {"command", "params", "seed", "output_path", "format"}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
        if "command" not in data:
            raise ConfigError("config needs a command")
        return cls(**data)

    def to_mapping(self) -> Dict[str, Any]:
        return {
            "command": self.command,
            "params": self.params,
            "seed": self.seed,
            "output_path": self.output_path,
            "format": self.format,
        }

    def dumps(self) -> bytes:
        return orjson.dumps(self.to_mapping(), option=orjson.OPT_SORT_KEYS | orjson.OPT_INDENT_2)

    @property
    def digest(self) -> str:
        return config_digest(self.to_mapping())


def load_config(path: str | Path) -> RunConfig:
    """
    Read a RunConfig file.

    Raises:
        ConfigError: If the file is missing or cannot be parsed
    """
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from exc
    return RunConfig.from_mapping(parse_config_text(text))


def parse_config_text(text: str) -> Dict[str, Any]:
    """
    Parse config text with several fallback strategies.

    Args:
        text: Raw file contents

    Returns:
        Parsed mapping

    Raises:
        ConfigError: If no strategy yields a mapping
    """
    text = text.strip()

    # Strategy 1: plain JSON
    try:
        data = orjson.loads(text)
        if isinstance(data, dict):
            return data
    except orjson.JSONDecodeError:
        pass

    # Strategy 2: JSON inside a fenced block
    match = re.search(r"```(?:json)?\s*(\{[\s\S]*?\})\s*```", text)
    if match:
        try:
            data = orjson.loads(match.group(1))
            if isinstance(data, dict):
                return data
        except orjson.JSONDecodeError:
            pass

    # Strategy 3: YAML
    try:
        data = yaml.safe_load(text)
        if isinstance(data, dict):
            return data
    except yaml.YAMLError:
        pass

    sample = text[:200] + ("..." if len(text) > 200 else "")
    raise ConfigError(f"config is neither a JSON nor a YAML mapping: {sample}")


def expand_grid(axes: Dict[str, List[float]]) -> List[Dict[str, float]]:
    """Cartesian product of named value lists, first axis varying slowest."""
    rows: List[Dict[str, float]] = [{}]
    for name, values in axes.items():
        rows = [{**row, name: v} for row in rows for v in values]
    return rows


def parse_values(text: str) -> List[float]:
    """
    Parse a numeric flag: "1", "1,2,5" or "start:stop:num" (inclusive linspace).

    Raises:
        ConfigError: On malformed input
    """
    text = text.strip()
    try:
        if text.count(":") == 2:
            lo, hi, num = text.split(":")
            count = int(num)
            if count < 1:
                raise ConfigError(f"grid {text!r} needs at least one point")
            a, b = float(lo), float(hi)
            if count == 1:
                return [a]
            return [a + (b - a) * i / (count - 1) for i in range(count)]
        return [float(v) for v in text.split(",") if v.strip()]
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError(f"cannot parse numeric value(s) {text!r}") from exc
