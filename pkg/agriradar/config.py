"""Top-level configuration assembled from one YAML file.

Each section maps onto the dataclass owned by the module it configures:

    scene, trajectory        scene_sim.SceneConfig, scene_sim.TrajectoryConfig
    radar, cfar              radar.RadarConfig, radar.CfarConfig
    preprocess               preprocess.PreprocessConfig (nested grid and fov)
    supervision              supervision.KernelConfig
    schedule, distill        diffusion.NoiseSchedule, diffusion.DistillConfig
    stage1                   models.Stage1TrainConfig
    stage2_model, stage2     models.Stage2ModelConfig, models.Stage2TrainConfig
    pipeline                 pipeline.PipelineConfig
    evaluate                 metrics.EvaluateConfig

Missing sections and keys keep their defaults. Unknown ones are an error.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import typing
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Optional, Union

import yaml

from .diffusion import DistillConfig, NoiseSchedule
from .errors import ConfigError
from .metrics import EvaluateConfig
from .models import Stage1TrainConfig, Stage2ModelConfig, Stage2TrainConfig
from .pipeline import PipelineConfig
from .preprocess import PreprocessConfig
from .radar import CfarConfig, RadarConfig
from .scene_sim import SceneConfig, TrajectoryConfig
from .supervision import KernelConfig

log = logging.getLogger(__name__)


@dataclass
class Config:
    """Every section plus the run-wide seed and thread count."""
    seed: int = 0
    threads: int = 1
    scene: SceneConfig = field(default_factory=SceneConfig)
    trajectory: TrajectoryConfig = field(default_factory=TrajectoryConfig)
    radar: RadarConfig = field(default_factory=RadarConfig)
    cfar: CfarConfig = field(default_factory=CfarConfig)
    preprocess: PreprocessConfig = field(default_factory=PreprocessConfig)
    supervision: KernelConfig = field(default_factory=KernelConfig)
    schedule: NoiseSchedule = field(default_factory=NoiseSchedule)
    stage1: Stage1TrainConfig = field(default_factory=Stage1TrainConfig)
    stage2_model: Stage2ModelConfig = field(default_factory=Stage2ModelConfig)
    stage2: Stage2TrainConfig = field(default_factory=Stage2TrainConfig)
    distill: DistillConfig = field(default_factory=DistillConfig)
    pipeline: PipelineConfig = field(default_factory=PipelineConfig)
    evaluate: EvaluateConfig = field(default_factory=EvaluateConfig)

    def validate(self) -> None:
        """
        Validate every section.

        Raises:
            ConfigError: On the first invalid value.
        """
        if self.threads < 1:
            raise ConfigError(f"threads must be at least 1, got {self.threads}")
        for f in dataclasses.fields(self):
            section = getattr(self, f.name)
            if dataclasses.is_dataclass(section):
                try:
                    section.validate()
                except ConfigError:
                    raise
                except Exception as e:
                    raise ConfigError(f"{f.name}: {e}") from e


def _convert(value: Any, hint: Any, where: str) -> Any:
    """Coerce a YAML value to the annotated field type."""
    if dataclasses.is_dataclass(hint):
        if not isinstance(value, dict):
            raise ConfigError(f"{where} must be a mapping")
        return _build(hint, value, where)
    origin = typing.get_origin(hint)
    if origin is Union:
        args = [a for a in typing.get_args(hint) if a is not type(None)]
        if value is None:
            return None
        return _convert(value, args[0], where)
    if origin is tuple:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{where} must be a list")
        args = typing.get_args(hint)
        if len(args) == 2 and args[1] is Ellipsis:
            return tuple(_convert(v, args[0], where) for v in value)
        if len(args) != len(value):
            raise ConfigError(f"{where} needs {len(args)} values, got {len(value)}")
        return tuple(_convert(v, a, where) for v, a in zip(value, args))
    if hint is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where} must be a number, got {value!r}")
        return float(value)
    if hint is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where} must be an integer, got {value!r}")
        return value
    if hint is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{where} must be true or false, got {value!r}")
        return value
    if hint is str:
        if not isinstance(value, str):
            raise ConfigError(f"{where} must be a string, got {value!r}")
        return value
    return value


def _build(cls, values: dict, where: str = ""):
    hints = typing.get_type_hints(cls)
    known = {f.name for f in dataclasses.fields(cls) if f.init}
    unknown = sorted(set(values) - known)
    if unknown:
        prefix = f"{where}." if where else ""
        raise ConfigError(f"Unknown config key(s): {', '.join(prefix + k for k in unknown)}")
    kwargs = {}
    for name, value in values.items():
        kwargs[name] = _convert(value, hints[name], f"{where}.{name}" if where else name)
    return cls(**kwargs)


def config_from_dict(values: Optional[dict]) -> Config:
    """Build and validate a ``Config`` from plain (YAML-style) values."""
    config = _build(Config, values or {})
    config.validate()
    return config


def load_config(path: Optional[Union[str, Path]] = None) -> Config:
    """
    Load a YAML config file; ``None`` gives the defaults.

    Raises:
        ConfigError: If the file cannot be read or parsed or holds invalid values.
    """
    if path is None:
        return config_from_dict({})
    try:
        text = Path(path).read_text(encoding="utf-8")
        values = yaml.safe_load(text)
    except OSError as e:
        raise ConfigError(f"Cannot read config file '{path}': {e}") from e
    except yaml.YAMLError as e:
        raise ConfigError(f"Invalid YAML in '{path}': {e}") from e
    if values is not None and not isinstance(values, dict):
        raise ConfigError(f"Config file '{path}' must hold a mapping")
    config = config_from_dict(values)
    log.debug("Loaded config from %s", path)
    return config


def config_to_dict(config: Config) -> dict:
    """Plain nested dict with tuples as lists (YAML/JSON friendly)."""
    return json.loads(json.dumps(asdict(config)))


def dump_config(config: Config) -> str:
    return yaml.safe_dump(config_to_dict(config), sort_keys=False)


def config_hash(config: Config) -> str:
    """SHA-256 of the canonical JSON form."""
    blob = json.dumps(asdict(config), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()
