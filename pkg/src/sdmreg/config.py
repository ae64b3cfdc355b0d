"""Configuration management for sdmreg.

This module provides a centralized configuration system that supports:
- Named profiles (the three loss modes plus run presets)
- Configuration files (YAML/JSON)
- Environment variables
- Command-line overrides
"""

import copy
import json
import logging
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

import yaml

from .losses import DEFAULT_SIGMAS, MODE_PRESETS, LossWeights, SigmaSchedule

logger = logging.getLogger(__name__)

DEFAULT_PROFILE = "mix"


@dataclass
class RegistrationConfig:
    """Optimization settings of one registration run."""

    weights: LossWeights = field(default_factory=lambda: MODE_PRESETS["mix"])
    sigmas: SigmaSchedule = field(default_factory=SigmaSchedule)

    # Pyramid and iteration budget
    levels: int = 5
    iters_per_level: int = 150

    # Adam; lr is a step length in mm
    lr: float = 0.1
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8

    seed: int = 0
    convergence_tol: float = 1e-6
    convergence_window: int = 10
    bending_cross_terms: bool = False

    def __post_init__(self):
        """Validate configuration."""
        if isinstance(self.weights, dict):
            self.weights = LossWeights(**self.weights)
        if not isinstance(self.sigmas, SigmaSchedule):
            self.sigmas = SigmaSchedule(tuple(self.sigmas))
        if self.levels < 1:
            raise ValueError("levels must be >= 1")
        if self.iters_per_level < 1:
            raise ValueError("iters_per_level must be >= 1")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if not (0.0 <= self.adam_beta1 < 1.0 and 0.0 <= self.adam_beta2 < 1.0):
            raise ValueError("Adam betas must lie in [0, 1)")
        if self.adam_eps <= 0:
            raise ValueError("adam_eps must be positive")
        if self.convergence_tol < 0:
            raise ValueError("convergence_tol must be >= 0")
        if self.convergence_window < 1:
            raise ValueError("convergence_window must be >= 1")

    def to_dict(self) -> Dict[str, Any]:
        data = {f.name: getattr(self, f.name) for f in fields(self)}
        data["weights"] = {"alpha": self.weights.alpha, "beta": self.weights.beta}
        data["sigmas"] = list(self.sigmas.sigmas)
        return data


@dataclass
class PreprocessConfig:
    """Intensity normalization and coarse-alignment crop."""

    target_dims: Tuple[int, int, int] = (96, 96, 80)
    target_spacing: float = 0.88
    percentile: float = 99.0

    def __post_init__(self):
        """Validate configuration."""
        self.target_dims = tuple(int(d) for d in self.target_dims)
        if len(self.target_dims) != 3 or any(d < 1 for d in self.target_dims):
            raise ValueError("target_dims must be three positive integers")
        if self.target_spacing <= 0:
            raise ValueError("target_spacing must be positive")
        if not 0.0 < self.percentile <= 100.0:
            raise ValueError("percentile must lie in (0, 100]")


@dataclass
class LoggingConfig:
    """Logging configuration."""

    level: str = "INFO"
    format: str = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"
    file: Optional[str] = None
    console: bool = True
    rotate_logs: bool = True
    max_log_size: int = 10 * 1024 * 1024  # 10MB
    backup_count: int = 5

    def __post_init__(self):
        """Validate configuration."""
        if self.level.upper() not in ("DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL"):
            raise ValueError(f"Unknown log level: {self.level}")


@dataclass
class Config:
    """Main configuration container."""

    registration: RegistrationConfig = field(default_factory=RegistrationConfig)
    preprocess: PreprocessConfig = field(default_factory=PreprocessConfig)
    logging: LoggingConfig = field(default_factory=LoggingConfig)

    debug: bool = False

    def to_dict(self) -> Dict[str, Any]:
        """Convert config to a plain dictionary (lists instead of tuples)."""
        return {
            "registration": self.registration.to_dict(),
            "preprocess": {**asdict(self.preprocess), "target_dims": list(self.preprocess.target_dims)},
            "logging": asdict(self.logging),
            "debug": self.debug,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "Config":
        """Create config from dictionary."""
        data = copy.deepcopy(data)
        data.pop("profile", None)

        sections = {"registration": RegistrationConfig, "preprocess": PreprocessConfig, "logging": LoggingConfig}
        unknown = set(data) - set(sections) - {"debug"}
        for name, section_cls in sections.items():
            if name in data and not isinstance(data[name], (dict, section_cls)):
                raise ValueError(f"Configuration section '{name}' must be a mapping")
            if isinstance(data.get(name), dict):
                allowed = {f.name for f in fields(section_cls)}
                unknown |= {f"{name}.{key}" for key in set(data[name]) - allowed}
        if unknown:
            raise ValueError(f"Unknown configuration keys: {sorted(unknown)}")

        try:
            if "registration" in data and isinstance(data["registration"], dict):
                data["registration"] = RegistrationConfig(**data["registration"])

            if "preprocess" in data and isinstance(data["preprocess"], dict):
                data["preprocess"] = PreprocessConfig(**data["preprocess"])

            if "logging" in data and isinstance(data["logging"], dict):
                data["logging"] = LoggingConfig(**data["logging"])
        except TypeError as e:
            raise ValueError(f"Invalid configuration value: {e}") from e

        return cls(**data)


_REGISTRATION_KEYS = {f.name for f in fields(RegistrationConfig)}


def normalize_file_config(data: Dict[str, Any]) -> Dict[str, Any]:
    """Accept flat registration files (``{"lr": ..., "alpha": ...}``) as well as sectioned ones."""
    data = dict(data)
    if not isinstance(data.get("registration") or {}, dict):
        raise ValueError("Configuration section 'registration' must be a mapping")
    section = dict(data.get("registration") or {})
    for key in list(data):
        if key in _REGISTRATION_KEYS:
            section[key] = data.pop(key)
    if not isinstance(section.get("weights") or {}, dict):
        raise ValueError("registration.weights must be a mapping")
    weights = dict(section.get("weights") or {})
    for key in ("alpha", "beta"):
        if key in data:
            weights[key] = data.pop(key)
    if weights:
        section["weights"] = weights
    if section:
        data["registration"] = section
    return data


def _mode_profile(mode: str) -> Dict[str, Any]:
    w = MODE_PRESETS[mode]
    return {"registration": {"weights": {"alpha": w.alpha, "beta": w.beta}}}


class ConfigProfile:
    """Predefined configuration profiles: loss modes and run presets."""

    # Common settings shared across profiles
    COMMON = {
        "registration": {
            "weights": {"alpha": 0.05, "beta": 0.45},
            "sigmas": list(DEFAULT_SIGMAS),
            "levels": 5,
            "iters_per_level": 150,
            "lr": 0.1,
            "convergence_tol": 1e-6,
            "convergence_window": 10,
        },
        "preprocess": {
            "target_dims": [96, 96, 80],
            "target_spacing": 0.88,
            "percentile": 99.0,
        },
    }

    PROFILES = {
        "mdsc": _mode_profile("mdsc"),
        "sdm": _mode_profile("sdm"),
        "mix": _mode_profile("mix"),
        "small-step": {"registration": {"lr": 2e-4, "iters_per_level": 300}},
        "fast": {"registration": {"levels": 3, "iters_per_level": 30}},
        "development": {"logging": {"level": "DEBUG", "console": True}, "debug": True},
    }

    @classmethod
    def get_profile(cls, name: str) -> Dict[str, Any]:
        """Get a configuration profile by name, merged with common settings."""
        profile = cls.PROFILES.get(name, {})
        if not profile:
            return {}

        def deep_merge(base: dict, override: dict) -> dict:
            """Recursively merge override into base."""
            for key, value in override.items():
                if key in base and isinstance(base[key], dict) and isinstance(value, dict):
                    base[key] = deep_merge(base[key], value)
                else:
                    base[key] = copy.deepcopy(value)
            return base

        return deep_merge(copy.deepcopy(cls.COMMON), profile)

    @classmethod
    def list_profiles(cls) -> List[str]:
        """List available profile names."""
        return list(cls.PROFILES.keys())


class ConfigManager:
    """Manages configuration loading and merging from multiple sources."""

    ENV_MAP = {
        "SDMREG_LR": (("registration", "lr"), float),
        "SDMREG_ITERS_PER_LEVEL": (("registration", "iters_per_level"), int),
        "SDMREG_LEVELS": (("registration", "levels"), int),
        "SDMREG_SEED": (("registration", "seed"), int),
        "SDMREG_LOG_LEVEL": (("logging", "level"), str),
        "SDMREG_LOG_FILE": (("logging", "file"), str),
        "SDMREG_DEBUG": (("debug",), lambda v: v.lower() in ("true", "1", "yes")),
    }

    def __init__(self):
        self.config = Config()
        self._config_paths = self._get_config_paths()
        self._profile_name: Optional[str] = None

    def _get_config_paths(self) -> List[Path]:
        """Configuration files checked in order of decreasing priority."""
        return [
            Path("sdmreg.yaml"),
            Path("sdmreg.json"),
            Path.home() / ".config" / "sdmreg" / "config.yaml",
        ]

    def load_from_file(self, path: Path) -> Dict[str, Any]:
        """Load configuration from a YAML or JSON file."""
        path = Path(path)
        if not path.exists():
            return {}

        with open(path, "r") as f:
            if path.suffix in (".yaml", ".yml"):
                data = yaml.safe_load(f) or {}
            elif path.suffix == ".json":
                data = json.load(f)
            else:
                raise ValueError(f"Unsupported config file format: {path.suffix}")
        if not isinstance(data, dict):
            raise ValueError(f"Config file {path} must contain a mapping")
        return normalize_file_config(data)

    def load_from_env(self) -> Dict[str, Any]:
        """Load configuration from SDMREG_* environment variables."""
        config: Dict[str, Any] = {}

        profile_env = os.environ.get("SDMREG_PROFILE")
        if profile_env:
            self._profile_name = profile_env

        for env_var, (config_path, convert) in self.ENV_MAP.items():
            value = os.environ.get(env_var)
            if value is None:
                continue
            current = config
            for key in config_path[:-1]:
                current = current.setdefault(key, {})
            current[config_path[-1]] = convert(value)

        return config

    def merge_configs(self, *configs: Dict[str, Any]) -> Dict[str, Any]:
        """Merge multiple configuration dictionaries, later ones winning."""
        result: Dict[str, Any] = {}

        for config in configs:
            for key, value in config.items():
                if key in result and isinstance(result[key], dict) and isinstance(value, dict):
                    result[key] = self.merge_configs(result[key], value)
                else:
                    result[key] = value

        return result

    def load(self, profile: Optional[str] = None, path: Optional[Path] = None) -> Config:
        """Load configuration from all sources.

        Args:
            profile: Profile to use. If None, will use:
                    1. SDMREG_PROFILE environment variable
                    2. 'profile' key in a discovered config file
                    3. the 'mix' profile
            path: Explicit config file, outranking discovered files.
        """
        env_config = self.load_from_env()
        file_configs = [self.load_from_file(p) for p in reversed(self._config_paths) if p.exists()]
        explicit = self.load_from_file(Path(path)) if path is not None else {}
        if path is not None and not Path(path).exists():
            raise FileNotFoundError(f"Config file not found: {path}")

        if profile:
            self._profile_name = profile
        elif not self._profile_name:
            for file_config in [explicit] + file_configs[::-1]:
                if "profile" in file_config:
                    self._profile_name = file_config["profile"]
                    break
            if not self._profile_name:
                self._profile_name = DEFAULT_PROFILE

        configs = []
        profile_config = ConfigProfile.get_profile(self._profile_name)
        if profile_config:
            configs.append(profile_config)
        else:
            logger.warning("Unknown profile '%s', using defaults", self._profile_name)

        configs.extend(file_configs)
        configs.append(explicit)
        configs.append(env_config)

        merged = self.merge_configs(*configs)
        self.config = Config.from_dict(merged)
        logger.debug("Loaded configuration with profile '%s'", self._profile_name)
        return self.config

    def get_profile_name(self) -> Optional[str]:
        """Get the currently loaded profile name."""
        return self._profile_name

    def save(self, path: Optional[Path] = None) -> None:
        """Save current configuration to file."""
        if path is None:
            config_dir = Path.home() / ".config" / "sdmreg"
            config_dir.mkdir(parents=True, exist_ok=True)
            path = config_dir / "config.yaml"
        path = Path(path)

        config_dict = self.config.to_dict()
        with open(path, "w") as f:
            if path.suffix in (".yaml", ".yml"):
                yaml.safe_dump(config_dict, f, default_flow_style=False, indent=2)
            else:
                json.dump(config_dict, f, indent=2)
