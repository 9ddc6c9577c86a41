"""Configuration management for the ObstacleFusion engine."""

import copy
import os
import re
from pathlib import Path
from typing import Any, Dict, Optional, Union

import yaml
from dotenv import load_dotenv

from src.core.exceptions import ConfigurationError


DEFAULT_CONFIG_PATH = Path(__file__).resolve().parents[2] / "config" / "config.yaml"
_PLACEHOLDER = re.compile(r"\$\{([A-Za-z_][A-Za-z0-9_]*)\}")

REQUIRED_SECTIONS = [
    'labels', 'potentials', 'inference', 'training', 'lidar',
    'supervoxels', 'fusion', 'pipeline', 'synthetic', 'logging',
]


def deep_merge(base: Dict[str, Any], override: Dict[str, Any]) -> Dict[str, Any]:
    """Merge ``override`` into a copy of ``base``; nested mappings merge key by key."""
    merged = copy.deepcopy(base)
    for key, value in (override or {}).items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = deep_merge(merged[key], value)
        else:
            merged[key] = copy.deepcopy(value)
    return merged


class Config:
    """Layered configuration: packaged defaults with an optional user file on top."""

    def __init__(self, config_path: Optional[Union[str, Path]] = None,
                 defaults_path: Union[str, Path] = DEFAULT_CONFIG_PATH):
        """
        Initialize configuration.

        Args:
            config_path: Optional user YAML file deep-merged over the defaults
            defaults_path: Packaged default configuration
        """
        load_dotenv()  # Load environment variables from .env file
        self.config_path = config_path
        self.defaults_path = defaults_path

        config = self._load_file(defaults_path)
        if config_path is not None:
            config = deep_merge(config, self._load_file(config_path))
        self._config = self._process_env_variables(config)

    @staticmethod
    def _load_file(path: Union[str, Path]) -> Dict[str, Any]:
        """Load one YAML file."""
        try:
            with open(path, 'r') as file:
                config = yaml.safe_load(file) or {}
        except FileNotFoundError:
            raise ConfigurationError(f"Configuration file not found: {path}")
        except yaml.YAMLError as e:
            raise ConfigurationError(f"Invalid YAML configuration in {path}: {e}")
        if not isinstance(config, dict):
            raise ConfigurationError(f"Configuration file {path} must contain a mapping")
        return config

    def _process_env_variables(self, config: Dict[str, Any]) -> Dict[str, Any]:
        """Substitute ``${VAR}`` placeholders from the environment."""
        def substitute(match: "re.Match") -> str:
            name = match.group(1)
            value = os.getenv(name)
            if value is None:
                raise ConfigurationError(f"Environment variable not set: {name}")
            return value

        def process_value(value):
            if isinstance(value, str) and "${" in value:
                replaced = _PLACEHOLDER.sub(substitute, value)
                # a value that was only a placeholder is parsed like YAML would
                return yaml.safe_load(replaced) if _PLACEHOLDER.fullmatch(value) else replaced
            elif isinstance(value, dict):
                return {k: process_value(v) for k, v in value.items()}
            elif isinstance(value, list):
                return [process_value(item) for item in value]
            return value

        return process_value(config)

    def get(self, key_path: str, default: Any = None) -> Any:
        """Get configuration value using dot notation.

        Args:
            key_path: Dot-separated key path (e.g., 'inference.damping')
            default: Default value if key not found

        Returns:
            Configuration value or default
        """
        value = self._config
        for key in key_path.split('.'):
            if isinstance(value, dict) and key in value:
                value = value[key]
            else:
                return default
        return value

    def set(self, key_path: str, value: Any) -> None:
        """Set a value using dot notation (used for command-line overrides)."""
        keys = key_path.split('.')
        node = self._config
        for key in keys[:-1]:
            node = node.setdefault(key, {})
        node[keys[-1]] = value

    @property
    def labels_config(self) -> Dict[str, Any]:
        return self._config.get('labels', {})

    @property
    def potentials_config(self) -> Dict[str, Any]:
        return self._config.get('potentials', {})

    @property
    def inference_config(self) -> Dict[str, Any]:
        return self._config.get('inference', {})

    @property
    def training_config(self) -> Dict[str, Any]:
        return self._config.get('training', {})

    @property
    def lidar_config(self) -> Dict[str, Any]:
        return self._config.get('lidar', {})

    @property
    def supervoxel_config(self) -> Dict[str, Any]:
        return self._config.get('supervoxels', {})

    @property
    def fusion_config(self) -> Dict[str, Any]:
        return self._config.get('fusion', {})

    @property
    def pipeline_config(self) -> Dict[str, Any]:
        return self._config.get('pipeline', {})

    @property
    def synthetic_config(self) -> Dict[str, Any]:
        return self._config.get('synthetic', {})

    @property
    def logging_config(self) -> Dict[str, Any]:
        """Get logging configuration section."""
        return self._config.get('logging', {})

    def get_all(self) -> Dict[str, Any]:
        """Get entire configuration as dictionary.

        Returns:
            Complete configuration dictionary
        """
        return copy.deepcopy(self._config)

    def validate(self) -> bool:
        """Validate configuration completeness and ranges.

        Returns:
            True if configuration is valid

        Raises:
            ConfigurationError: If configuration is invalid
        """
        for section in REQUIRED_SECTIONS:
            if section not in self._config:
                raise ConfigurationError(f"Missing configuration section: {section}")

        for name in ('sigma_2d', 'sigma_3d', 'sigma_nav', 'sigma_time'):
            if not self._number(f'potentials.{name}') > 0:
                raise ConfigurationError(f"potentials.{name} must be positive")
        if not 0 < self._number('potentials.prob_floor') <= 1e-3:
            raise ConfigurationError("potentials.prob_floor must lie in (0, 1e-3]")

        if not 0 <= self._number('inference.damping') < 1:
            raise ConfigurationError("inference.damping must lie in [0, 1)")
        if not self._number('inference.tolerance') > 0:
            raise ConfigurationError("inference.tolerance must be positive")
        if self._number('inference.max_iterations') < 1:
            raise ConfigurationError("inference.max_iterations must be positive")
        if self.get('inference.schedule') not in ('sequential', 'parallel'):
            raise ConfigurationError("inference.schedule must be 'sequential' or 'parallel'")
        if self.get('inference.decoder') not in ('max-product', 'marginal-argmax'):
            raise ConfigurationError("inference.decoder must be 'max-product' or 'marginal-argmax'")

        if self._number('training.l2_lambda') < 0:
            raise ConfigurationError("training.l2_lambda must be nonnegative")
        if self.get('training.step_rule') not in ('fixed-step', 'line-search-quasi-newton'):
            raise ConfigurationError("training.step_rule must be 'fixed-step' or 'line-search-quasi-newton'")

        if self._number('lidar.m_points') < 1 or not self._number('lidar.theta_h_deg') > 0:
            raise ConfigurationError("lidar.m_points must be >= 1 and lidar.theta_h_deg > 0")

        voxel = self._number('supervoxels.voxel_resolution')
        seed = self._number('supervoxels.seed_resolution')
        if not (seed >= voxel > 0):
            raise ConfigurationError("supervoxels: seed_resolution >= voxel_resolution > 0 required")
        if self._number('supervoxels.lambda_spatial') < 0:
            raise ConfigurationError("supervoxels.lambda_spatial must be nonnegative")

        if not self._number('fusion.temporal_gate_m') > 0:
            raise ConfigurationError("fusion.temporal_gate_m must be positive")
        if self._number('pipeline.threads') < 1:
            raise ConfigurationError("pipeline.threads must be positive")
        return True

    def _number(self, key_path: str) -> float:
        value = self.get(key_path)
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigurationError(f"{key_path} must be a number, got {value!r}")
        return value
