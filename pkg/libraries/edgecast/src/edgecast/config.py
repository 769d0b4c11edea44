"""
Run configuration: one JSON document with a section per module, validated before any
work starts. Unknown keys are rejected at every level.
"""

from __future__ import annotations

import json
import logging
import typing
from enum import StrEnum
from pathlib import Path
from typing import Any, Optional, Sequence, Union

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from edgecast.bundle import BUNDLE_FILE
from edgecast.calibration import CalibrationConfig
from edgecast.data import ColumnSchema, ScenarioConfig, SplitSpec
from edgecast.exceptions import ConfigError
from edgecast.fusion import FusionConfig
from edgecast.predictors.model_set import ModelConfig
from edgecast.router import ControllerConfig
from edgecast.screening import ScreeningConfig
from edgecast.simulation.engine import EvaluationConfig
from edgecast.simulation.policies import Policy

log = logging.getLogger(__name__)

MODELS_FILE = "models.json"
DEFAULT_OUTPUT_DIR = "out"


class DataSource(StrEnum):
    synthetic = "synthetic"
    csv = "csv"


class DataConfig(BaseModel):
    """
    Where the series come from and how they are split.

    Attributes:
        source: `synthetic` generates `scenario`; `csv` reads `csv_paths`
        csv_paths: one pooled file or one file per node
        capacity_path: `node_id,capacity` file for CSV data
        columns: CSV column names
        scenario: synthetic scenario parameters
        eval_scenario: when set, a second synthetic scenario supplies the validation
            and test blocks, while training stays on the primary data
        split: chronological split fractions
        expert_prefix_frac: share of each node's training history its site expert
            may use
    """

    model_config = ConfigDict(frozen=True, extra="forbid")

    source: DataSource = DataSource.synthetic
    csv_paths: list[str] = Field(default_factory=list)
    capacity_path: Optional[str] = None
    columns: ColumnSchema = ColumnSchema()
    scenario: ScenarioConfig = ScenarioConfig()
    eval_scenario: Optional[ScenarioConfig] = None
    split: SplitSpec = SplitSpec()
    expert_prefix_frac: float = Field(1.0, gt=0, le=1)

    @model_validator(mode="after")
    def csv_needs_paths(self) -> DataConfig:
        missing = not self.csv_paths or not self.capacity_path
        if self.source == DataSource.csv and missing:
            raise ValueError("csv data needs csv_paths and capacity_path")
        return self


class RunConfig(BaseModel):
    """
    Attributes:
        data: data source and split
        model: branch models
        screening: routing score and score CDFs
        calibration: replay, gain curves and executed-mode calibrator
        controller: router, budgets, latency and communication
        fusion: online fusion
        evaluation: loss, hard-subset rules and trace options
        policy: routing policy of `simulate`
        seed: seed of data synthesis and model training
        output_dir: directory for artifacts, traces and summaries
        threads: worker cap for sweeps
        bundle_path: calibration bundle; defaults to `<output_dir>/bundle.json`
        models_path: trained branches; defaults to `<output_dir>/models.json`
    """

    model_config = ConfigDict(frozen=True, extra="forbid")

    data: DataConfig = DataConfig()
    model: ModelConfig = ModelConfig()
    screening: ScreeningConfig = ScreeningConfig()
    calibration: CalibrationConfig = CalibrationConfig()
    controller: ControllerConfig = ControllerConfig()
    fusion: FusionConfig = FusionConfig()
    evaluation: EvaluationConfig = EvaluationConfig()
    policy: Policy = Policy.CAPE
    seed: int = 0
    output_dir: str = DEFAULT_OUTPUT_DIR
    threads: int = Field(1, ge=1)
    bundle_path: Optional[str] = None
    models_path: Optional[str] = None

    @classmethod
    def from_json(cls, path: Union[str, Path]) -> RunConfig:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        try:
            document = json.loads(path.read_text())
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: invalid JSON: {e}")
        return cls.model_validate(document)

    def with_overrides(self, overrides: Sequence[str]) -> RunConfig:
        """
        Applies `section.key=value` overrides. Values are parsed as JSON, falling back
        to the raw string; keys may use either field names or their aliases.

        Raises:
            ConfigError: malformed override or unknown key
        """
        if not overrides:
            return self
        document = self.resolved()
        for item in overrides:
            path, sep, raw = item.partition("=")
            if not sep or not path:
                raise ConfigError(f"override {item!r} is not of the form key=value")
            try:
                value = json.loads(raw)
            except json.JSONDecodeError:
                value = raw
            _assign(RunConfig, document, path.split("."), value)
            log.debug("override %s = %r", path, value)
        return RunConfig.model_validate(document)

    def resolved(self) -> dict[str, Any]:
        """Every setting after defaults, as written into run summaries."""
        return self.model_dump(mode="json", by_alias=True)

    @property
    def bundle_file(self) -> Path:
        return Path(self.bundle_path or Path(self.output_dir) / BUNDLE_FILE)

    @property
    def models_file(self) -> Path:
        return Path(self.models_path or Path(self.output_dir) / MODELS_FILE)


def _nested_model(annotation: Any) -> Optional[type[BaseModel]]:
    if typing.get_origin(annotation) is dict:
        return None
    candidates = typing.get_args(annotation) or (annotation,)
    for c in candidates:
        if isinstance(c, type) and issubclass(c, BaseModel):
            return c
    return None


def _map_value_model(annotation: Any) -> Optional[type[BaseModel]]:
    if typing.get_origin(annotation) is not dict:
        return None
    _, value = typing.get_args(annotation)
    return value if isinstance(value, type) and issubclass(value, BaseModel) else None


def _assign(
    model: type[BaseModel], document: dict[str, Any], parts: list[str], value: Any
) -> None:
    head, rest = parts[0], parts[1:]
    for name, field in model.model_fields.items():
        if head not in (name, field.alias):
            continue
        key = field.alias or name
        if not rest:
            document[key] = value
            return
        nested = _nested_model(field.annotation)
        entries = _map_value_model(field.annotation)
        child = document.get(key)
        if child is None:
            child = document[key] = {}
        if nested is not None:
            _assign(nested, child, rest, value)
        elif entries is not None and len(rest) > 1:
            _assign(entries, child.setdefault(rest[0], {}), rest[1:], value)
        else:
            # free-form maps such as per-node kappa
            for part in rest[:-1]:
                child = child.setdefault(part, {})
            child[rest[-1]] = value
        return
    raise ConfigError(f"unknown config key {head!r} in {model.__name__}")


def load_config(
    path: Optional[Union[str, Path]] = None,
    overrides: Sequence[str] = (),
    output_dir: Optional[str] = None,
) -> RunConfig:
    """
    Config from an optional JSON file plus overrides. Validation failures surface as
    `ConfigError`.
    """
    try:
        config = RunConfig.from_json(path) if path is not None else RunConfig()
        if output_dir is not None:
            overrides = [*overrides, f"output_dir={json.dumps(output_dir)}"]
        return config.with_overrides(overrides)
    except ValidationError as e:
        raise ConfigError(f"invalid configuration:\n{e}")
