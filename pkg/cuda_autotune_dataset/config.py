"""
Pipeline configuration: defaults, an optional flat TOML file, and command line
overrides, resolved in that order of increasing precedence and validated
before any stage runs.
"""

# Standard
from dataclasses import dataclass, field, fields, replace
from typing import Any, Dict, Optional, Tuple
import sys

# Third Party
if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

# Local
from .constants import (
    DEFAULT_COMPILER_TEMPLATE,
    DEFAULT_FETCH_WORKERS,
    DEFAULT_GAIN_THRESHOLD,
    DEFAULT_MATRIX_SIZES,
    DEFAULT_MAX_FIX_ATTEMPTS,
    DEFAULT_PERF_THRESHOLD,
    DEFAULT_REPEATS,
    DEFAULT_STRATEGY,
    DEFAULT_TIMEOUT_S,
    DEFAULT_WORKERS,
    LARGEST_BLOCK,
)
from .launch import (
    BlockConfig,
    MatrixSize,
    canonical_blocks,
    parse_blocks,
    parse_matrices,
)
from .log import log
from .measurement import AggregateStrategy


class ConfigError(ValueError):
    """Raised for unknown keys, bad values or an unreadable config file"""


BACKENDS = ("real", "simulated")


@dataclass(frozen=True)
class PipelineConfig:
    corpus_root: str = "corpus"
    repo_list: Optional[str] = None
    compiler_template: str = DEFAULT_COMPILER_TEMPLATE
    backend: str = "real"
    seed: int = 0
    timeout_s: float = DEFAULT_TIMEOUT_S
    repeats: int = DEFAULT_REPEATS
    strategy: str = DEFAULT_STRATEGY
    matrices: Tuple[MatrixSize, ...] = tuple(
        MatrixSize(*dims) for dims in DEFAULT_MATRIX_SIZES
    )
    blocks: Tuple[BlockConfig, ...] = field(default_factory=canonical_blocks)
    workers: int = DEFAULT_WORKERS
    device_ids: Tuple[int, ...] = (0,)
    max_fix_attempts: int = DEFAULT_MAX_FIX_ATTEMPTS
    fetch_workers: int = DEFAULT_FETCH_WORKERS
    timestamps: bool = True
    threshold: float = DEFAULT_PERF_THRESHOLD
    gain: float = DEFAULT_GAIN_THRESHOLD
    default_block: BlockConfig = BlockConfig(*LARGEST_BLOCK)

    def validate(self) -> "PipelineConfig":
        if self.backend not in BACKENDS:
            raise ConfigError(f"backend must be one of {BACKENDS}, got {self.backend}")
        if self.strategy not in {strategy.value for strategy in AggregateStrategy}:
            raise ConfigError(f"Unknown aggregation strategy [{self.strategy}]")
        if not self.timeout_s > 0:
            raise ConfigError(f"timeout_s must be positive, got {self.timeout_s}")
        for name in ("repeats", "workers", "fetch_workers"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.max_fix_attempts < 0:
            raise ConfigError("max_fix_attempts must be >= 0")
        if not self.device_ids or any(device < 0 for device in self.device_ids):
            raise ConfigError(f"Invalid device ids {self.device_ids}")
        if len(set(self.device_ids)) != len(self.device_ids):
            raise ConfigError(f"Duplicate device ids {self.device_ids}")
        if not self.matrices or not self.blocks:
            raise ConfigError("At least one matrix and one block are required")
        if len(set(self.blocks)) != len(self.blocks):
            raise ConfigError("Duplicate blocks in configuration")
        if len(set(self.matrices)) != len(self.matrices):
            raise ConfigError("Duplicate matrices in configuration")
        if not 0 < self.threshold <= 1:
            raise ConfigError(f"threshold must be in (0, 1], got {self.threshold}")
        if self.gain < 0:
            raise ConfigError(f"gain must be >= 0, got {self.gain}")
        return self

    @classmethod
    def resolve(
        cls,
        file_values: Optional[Dict[str, Any]] = None,
        overrides: Optional[Dict[str, Any]] = None,
    ) -> "PipelineConfig":
        """Layer file values and then non-None overrides over the defaults"""
        config = cls()
        for source in (file_values or {}, overrides or {}):
            values = {
                key: coerce(key, value)
                for key, value in source.items()
                if value is not None
            }
            config = replace(config, **values)
        return config.validate()


_KNOWN_KEYS = {item.name for item in fields(PipelineConfig)}


def coerce(key: str, value: Any) -> Any:
    """Convert a raw file or flag value to the field's type"""
    if key not in _KNOWN_KEYS:
        raise ConfigError(f"Unknown config key [{key}]")
    try:
        if key == "matrices":
            return parse_matrices(_as_list(value))
        if key == "blocks":
            return parse_blocks(_as_list(value))
        if key == "default_block":
            return BlockConfig.parse(value)
        if key == "device_ids":
            if isinstance(value, str):
                value = [part for part in value.split(",") if part.strip()]
            return tuple(int(device) for device in _as_list(value))
        if key in ("seed", "repeats", "workers", "max_fix_attempts", "fetch_workers"):
            if isinstance(value, bool) or not isinstance(value, (int, str)):
                raise ValueError(f"expected an integer, got {value!r}")
            return int(value)
        if key in ("timeout_s", "threshold", "gain"):
            if isinstance(value, bool):
                raise ValueError(f"expected a number, got {value!r}")
            return float(value)
        if key == "timestamps":
            if not isinstance(value, bool):
                raise ValueError(f"expected true or false, got {value!r}")
            return value
        if not isinstance(value, str):
            raise ValueError(f"expected a string, got {value!r}")
        return value
    except (TypeError, ValueError) as err:
        raise ConfigError(f"Bad value for [{key}]: {err}") from err


def _as_list(value: Any) -> list:
    if isinstance(value, (list, tuple)):
        return list(value)
    return [value]


def load_config_file(path: str) -> Dict[str, Any]:
    """Read a flat TOML config file"""
    try:
        with open(path, "rb") as handle:
            values = tomllib.load(handle)
    except OSError as err:
        raise ConfigError(f"Cannot read config file {path}: {err}") from err
    except tomllib.TOMLDecodeError as err:
        raise ConfigError(f"Invalid TOML in {path}: {err}") from err
    nested = [key for key, value in values.items() if isinstance(value, dict)]
    if nested:
        raise ConfigError(f"Config file must be flat, found tables {nested}")
    log.debug("Loaded config keys %s from %s", sorted(values), path)
    return values
