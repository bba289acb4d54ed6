"""
Configuration - Settings models and layered loading.

Defaults come from the pydantic models, then config/settings.yaml, then an
optional JSON file, then command-line flags.
"""

from pathlib import Path
from typing import Any, Dict, Optional, Type, TypeVar, Union

import yaml
from pydantic import BaseModel, Field, ValidationError

from .alignment import AlignmentConfig
from .errors import ConfigError
from .feature_extractors import FeatureConfig
from .harness import RunConfig, SyntheticSpec
from .utils import get_project_root, merge_dicts

ModelT = TypeVar("ModelT", bound=BaseModel)

DEFAULT_SETTINGS = Path("config") / "settings.yaml"


class Settings(BaseModel):
    """All configuration sections."""
    alignment: AlignmentConfig = Field(default_factory=AlignmentConfig)
    features: FeatureConfig = Field(default_factory=FeatureConfig)
    training: RunConfig = Field(default_factory=RunConfig)
    synthetic: SyntheticSpec = Field(default_factory=SyntheticSpec)


def _describe(error: ValidationError) -> str:
    parts = []
    for item in error.errors():
        location = ".".join(str(x) for x in item["loc"])
        parts.append(f"{location}: {item['msg']}")
    return "; ".join(parts)


def _settings_path(path: Optional[Union[str, Path]]) -> Optional[Path]:
    if path is not None:
        return Path(path)
    for candidate in (DEFAULT_SETTINGS, get_project_root() / DEFAULT_SETTINGS):
        if candidate.exists():
            return candidate
    return None


def load_settings(path: Optional[Union[str, Path]] = None) -> Settings:
    """Read the YAML settings file; missing file or sections fall back to defaults."""
    settings_path = _settings_path(path)
    if settings_path is None or not settings_path.exists():
        if path is not None:
            raise ConfigError(f"settings file {path} does not exist")
        return Settings()
    try:
        with open(settings_path, 'r', encoding='utf-8') as f:
            data = yaml.safe_load(f) or {}
    except yaml.YAMLError as e:
        raise ConfigError(f"{settings_path}: invalid YAML ({e})") from None
    if not isinstance(data, dict):
        raise ConfigError(f"{settings_path}: top level must be a mapping")
    unknown = set(data) - set(Settings.model_fields)
    if unknown:
        raise ConfigError(f"{settings_path}: unknown sections {sorted(unknown)}")
    try:
        return Settings(**{k: v or {} for k, v in data.items()})
    except ValidationError as e:
        raise ConfigError(f"{settings_path}: {_describe(e)}") from None


def merge_overrides(base: ModelT, *overrides: Dict[str, Any]) -> ModelT:
    """Apply override dictionaries in order (None values skipped) and re-validate."""
    values = base.model_dump()
    for layer in overrides:
        unknown = {k for k, v in layer.items() if v is not None} - set(type(base).model_fields)
        if unknown:
            raise ConfigError(f"unknown {type(base).__name__} fields {sorted(unknown)}")
        values = merge_dicts(values, layer)
    return build(type(base), values)


def build(model: Type[ModelT], values: Dict[str, Any]) -> ModelT:
    try:
        return model(**values)
    except ValidationError as e:
        raise ConfigError(f"invalid {model.__name__}: {_describe(e)}") from None
