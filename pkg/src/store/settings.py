"""
Run settings: environment defaults and dotted-key config files.

Precedence, lowest first: model defaults < GUIDG_* environment < config
file < CLI flags.

Config file syntax:
    # comment
    toy.h1 = 60,80,100
    dg.reg.kind = entropy_ueo
"""

import inspect
import os
import typing
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, Mapping, Optional, Union

from pydantic import BaseModel

from ..lib.errors import ConfigError
from ..models import ExperimentConfig, ExperimentKind


@dataclass
class Settings:
    """Process-level defaults read from the environment (and .env)."""
    out_dir: str
    seed: int
    repeats: Optional[int]
    format: str
    log_level: str

    @classmethod
    def from_env(cls) -> "Settings":
        """Load settings from environment variables with defaults."""
        repeats = os.environ.get("GUIDG_REPEATS")
        try:
            return cls(
                out_dir=os.environ.get("GUIDG_OUT_DIR", "results"),
                seed=int(os.environ.get("GUIDG_SEED", "0")),
                repeats=int(repeats) if repeats else None,
                format=os.environ.get("GUIDG_FORMAT", "csv"),
                log_level=os.environ.get("GUIDG_LOG_LEVEL", "WARNING").upper(),
            )
        except ValueError as e:
            raise ConfigError(f"bad GUIDG_* environment value: {e}") from e

    def as_overrides(self) -> Dict[str, Any]:
        overrides: Dict[str, Any] = {"out_dir": self.out_dir, "seed": self.seed, "format": self.format}
        if self.repeats is not None:
            overrides["repeats"] = self.repeats
        return overrides


# =============================================================================
# Config files
# =============================================================================

def parse_config_text(text: str) -> Dict[str, str]:
    """Flat {dotted.key: raw value}; duplicate keys are rejected."""
    values: Dict[str, str] = {}
    for lineno, raw_line in enumerate(text.splitlines(), start=1):
        line = raw_line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not sep or not key:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        values[key] = value
    return values


def load_config_file(path: Union[str, Path]) -> Dict[str, str]:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    return parse_config_text(path.read_text())


def _nested_model(annotation) -> Optional[type]:
    if inspect.isclass(annotation) and issubclass(annotation, BaseModel):
        return annotation
    for arg in typing.get_args(annotation):
        found = _nested_model(arg)
        if found is not None:
            return found
    return None


def _is_sequence(annotation) -> bool:
    return typing.get_origin(annotation) in (list, tuple)


def _insert(target: Dict[str, Any], model: Optional[type], parts, value: Any):
    head, rest = parts[0], parts[1:]
    field = model.model_fields.get(head) if model is not None else None
    annotation = field.annotation if field is not None else None
    if rest:
        child = target.setdefault(head, {})
        if not isinstance(child, dict):
            raise ConfigError(f"{head!r} is both a value and a section")
        _insert(child, _nested_model(annotation), rest, value)
        return
    if isinstance(value, str) and annotation is not None and _is_sequence(annotation):
        value = [item.strip() for item in value.split(",") if item.strip()]
    target[head] = value


def nest_dotted(flat: Mapping[str, Any], model: type = ExperimentConfig) -> Dict[str, Any]:
    """Dotted keys to nested dicts; list-typed fields split on commas."""
    nested: Dict[str, Any] = {}
    for key, value in flat.items():
        _insert(nested, model, key.split("."), value)
    return nested


def build_experiment_config(
    kind: Union[ExperimentKind, str],
    settings: Optional[Settings] = None,
    file_values: Optional[Mapping[str, str]] = None,
    cli_values: Optional[Mapping[str, Any]] = None,
) -> ExperimentConfig:
    """
    Merge every source into one validated ExperimentConfig.

    Raises pydantic ValidationError on unknown keys or out-of-range values.
    """
    flat: Dict[str, Any] = {}
    if settings is not None:
        flat.update(settings.as_overrides())
    flat.update(file_values or {})
    flat.update({k: v for k, v in (cli_values or {}).items() if v is not None})
    flat["kind"] = ExperimentKind(kind).value
    return ExperimentConfig.model_validate(nest_dotted(flat))
