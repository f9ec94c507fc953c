"""Run configuration: TOML file, presets, per-command defaults and CLI overrides."""

import copy
import hashlib
import json
import logging
import math
import os

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Optional, Union

from .errors import ConfigError
from .model import ModelSpec, make_builtin
from .presets import DEFAULT_PRESET, PresetMapper

logger = logging.getLogger(__name__)

DATA_DIR_ENV = "FVQSD_HOME"

EXPERIMENT_NAMES = ("propagation_of_chaos", "gamma_bias", "long_time", "theorem_main")
COMMAND_NAMES = ("simulate", "oracle", "qsd", "kappa", *EXPERIMENT_NAMES)
KAPPA_MODES = ("profile", "coupling")
COUPLING_MODES = ("reflection", "synchronous")

# Applied on top of the preset and below the config file and CLI flags.
EXPERIMENT_DEFAULTS: dict[str, dict[str, Any]] = {
    "simulate": {"gammas": [0.05], "particles": [1000], "steps": 40, "replicates": 1},
    "oracle": {"gammas": [0.05], "steps": 40},
    "qsd": {"gammas": [0.05]},
    "kappa": {
        "model": "cosine",
        "gammas": [0.05],
        "particles": [100, 1000],
        "epsilons": [0.0, 0.25, 0.5, 1.0],
        "horizons": [1.0],
        "replicates": 200,
        "initial": ["point:0", "uniform"],
    },
    "propagation_of_chaos": {"gammas": [0.05], "steps": 40, "initial": ["uniform"]},
    "gamma_bias": {"gammas": [0.16, 0.08, 0.04, 0.02]},
    "long_time": {
        "gammas": [0.05],
        "horizons": [3.0],
        "initial": ["point:0.5", "uniform"],
    },
    "theorem_main": {
        "gammas": [0.16, 0.08, 0.04],
        "horizons": [0.25, 0.5, 1.0, 2.0],
        "initial": ["point:0.5"],
    },
}

_LIST_FIELDS = {"gammas": float, "particles": int, "horizons": float, "initial": str, "epsilons": float}


def default_data_dir() -> Path:
    """Per-user data directory: $FVQSD_HOME, else ~/.fvqsd."""
    override = os.environ.get(DATA_DIR_ENV)
    if override:
        return Path(override)
    return Path.home() / ".fvqsd"


@dataclass
class RunConfig:
    """Fully resolved parameters of one command or experiment."""

    experiment: str = "propagation_of_chaos"
    model: str = "demo"
    model_params: dict[str, float] = field(default_factory=dict)
    dimension: int = 1
    gammas: list[float] = field(default_factory=lambda: [0.05])
    particles: list[int] = field(default_factory=lambda: [250, 1000, 4000])
    steps: int = 40
    horizons: list[float] = field(default_factory=lambda: [3.0])
    replicates: int = 100
    seed: int = 20240517
    initial: list[str] = field(default_factory=lambda: ["uniform"])
    epsilons: list[float] = field(default_factory=lambda: [0.0, 0.25, 0.5, 1.0])
    n_cells: int = 512
    extra_levels: int = 2
    kappa: Union[float, str] = "profile"
    coupling: str = "reflection"
    rho_a: float = 1.0
    tol: float = 1e-12
    gamma_max: float = 0.25
    preset: str = DEFAULT_PRESET
    workers: int = 1
    out_dir: Optional[str] = None

    def validate(self) -> "RunConfig":
        """Check every invariant; returns self.

        Raises:
            ConfigError: on the first violated constraint.
        """
        if self.experiment not in COMMAND_NAMES:
            raise ConfigError(f"unknown experiment {self.experiment!r}; choose from {list(COMMAND_NAMES)}")
        for name in _LIST_FIELDS:
            if not getattr(self, name):
                raise ConfigError(f"{name} must not be empty")
        for gamma in self.gammas:
            if not (0 < gamma <= self.gamma_max):
                raise ConfigError(f"gamma={gamma} outside (0, {self.gamma_max}]")
        if any(n < 1 for n in self.particles):
            raise ConfigError("particle counts must be >= 1")
        if any(not (t >= 0 and math.isfinite(t)) for t in self.horizons):
            raise ConfigError("horizons must be finite and >= 0")
        if self.steps < 0:
            raise ConfigError("steps must be >= 0")
        if self.replicates < 1:
            raise ConfigError("replicates must be >= 1")
        if not (0 <= self.seed < 2 ** 64):
            raise ConfigError("seed must be a 64-bit unsigned integer")
        if self.dimension < 1:
            raise ConfigError("dimension must be >= 1")
        if self.n_cells < 64:
            raise ConfigError("n_cells must be >= 64")
        if self.extra_levels < 0:
            raise ConfigError("extra_levels must be >= 0")
        if isinstance(self.kappa, str):
            if self.kappa not in KAPPA_MODES:
                raise ConfigError(f"kappa must be a positive number or one of {list(KAPPA_MODES)}")
        elif not self.kappa > 0:
            raise ConfigError("a fixed kappa must be positive")
        if self.coupling not in COUPLING_MODES:
            raise ConfigError(f"coupling must be one of {list(COUPLING_MODES)}")
        if not (self.rho_a > 0 and self.tol > 0):
            raise ConfigError("rho_a and tol must be positive")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")
        return self

    def build_model(self) -> ModelSpec:
        return make_builtin(self.model, self.dimension, **self.model_params)

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)


def config_hash(config: RunConfig) -> str:
    """SHA-256 of the canonical JSON of everything that affects results.

    workers and out_dir are excluded: they change neither numbers nor bytes.
    """
    payload = config.to_dict()
    payload.pop("workers")
    payload.pop("out_dir")
    text = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def _coerce(name: str, value: Any) -> Any:
    if name in _LIST_FIELDS:
        kind = _LIST_FIELDS[name]
        items = value if isinstance(value, list) else [value]
        try:
            return [kind(v) for v in items]
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"{name} must be a list of {kind.__name__}") from exc
    if name == "kappa":
        if isinstance(value, str):
            return value
        return float(value)
    if name == "model_params":
        return {str(k): float(v) for k, v in value.items()}
    return value


_FIELD_NAMES = {f.name for f in fields(RunConfig)}


def read_config_file(path: Path) -> dict[str, Any]:
    """Parse a TOML config into RunConfig field values.

    The optional [model] table holds `family`, `dimension` and the family
    parameters.

    Raises:
        ConfigError: unreadable file, bad TOML or unknown keys.
    """
    try:
        with open(path, "rb") as f:
            data = tomllib.load(f)
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"invalid TOML in {path}: {exc}") from exc

    values: dict[str, Any] = {}
    model_table = data.pop("model", None)
    if model_table is not None:
        if isinstance(model_table, str):
            model_table = {"family": model_table}
        if not isinstance(model_table, dict):
            raise ConfigError("model must be a family name or a [model] table")
        table = dict(model_table)
        if "family" in table:
            values["model"] = str(table.pop("family"))
        if "dimension" in table:
            values["dimension"] = int(table.pop("dimension"))
        if table:
            values["model_params"] = _coerce("model_params", table)
    unknown = sorted(set(data) - _FIELD_NAMES)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    for name, value in data.items():
        values[name] = _coerce(name, value)
    return values


def resolve_config(
    command: str,
    path: Optional[Path] = None,
    overrides: Optional[dict[str, Any]] = None,
) -> RunConfig:
    """Layer preset < command defaults < config file < CLI overrides, then validate.

    Overrides whose value is None are ignored.
    """
    if command not in COMMAND_NAMES:
        raise ConfigError(f"unknown command {command!r}")
    file_values = read_config_file(path) if path is not None else {}
    cli_values = {k: _coerce(k, v) for k, v in (overrides or {}).items() if v is not None}
    unknown = sorted(set(cli_values) - _FIELD_NAMES)
    if unknown:
        raise ConfigError(f"unknown overrides: {', '.join(unknown)}")

    preset_name = cli_values.get("preset") or file_values.get("preset") or DEFAULT_PRESET
    preset = PresetMapper().get_preset(preset_name)
    if preset_name not in PresetMapper().available_presets():
        logger.warning("unknown preset %r, using %s", preset_name, DEFAULT_PRESET)
        preset_name = DEFAULT_PRESET

    config = RunConfig(preset=preset_name, particles=preset.particles, replicates=preset.replicates)
    for layer in (EXPERIMENT_DEFAULTS.get(command, {}), file_values, cli_values):
        for name, value in layer.items():
            setattr(config, name, copy.deepcopy(value))
    config.preset = preset_name
    config.experiment = command
    return config.validate()
