# Copyright (c) 2025 Softwell Srl, Milano, Italy
# SPDX-License-Identifier: Apache-2.0
#
# Licensed under the Apache License, Version 2.0 (the "License");
# you may not use this file except in compliance with the License.
# You may obtain a copy of the License at
#
#     http://www.apache.org/licenses/LICENSE-2.0
#
# Unless required by applicable law or agreed to in writing, software
# distributed under the License is distributed on an "AS IS" BASIS,
# WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
# See the License for the specific language governing permissions and
# limitations under the License.

"""Run configuration.

A run is described by a :class:`RunConfig`, a tree of frozen pydantic
models loaded from YAML or JSON. Loading is strict: unknown keys anywhere in
the tree are rejected with their dotted path, integers and booleans are not
coerced from other types and every section validates its own ranges.
Validation failures surface as :class:`~genro_vad.exceptions.VadConfigError`.

Examples:
    Load a file and apply command line overrides::

        >>> cfg = load_config('experiment.yaml', overrides=['memae.epochs=2'])
        >>> cfg.memae.epochs
        2

    A minimal configuration file::

        seed: 7
        data:
          train_scenarios: 20
          test_scenarios: 8
        weights: {w_r: 10, w_p: 0.1, w_rp: 10, w_pp: 0.1}
"""

from __future__ import annotations

import hashlib
import json
import math
import os
from pathlib import Path
from typing import (
    Annotated,
    Any,
    Literal,
    Mapping,
    Optional,
    Sequence,
    Tuple,
    Type,
    TypeVar,
    Union,
)

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .cubes import DetectorStub
from .exceptions import VadConfigError
from .scoring import ScoreWeights

RUN_ROOT_ENV = "GENRO_VAD_RUN_ROOT"
DEFAULT_RUN_ROOT = "./runs"

ENVIRONMENTS = ("city", "highway")
WEATHERS = ("clear", "rain")
BOX_SOURCES = ("gt", "detected")
CHECKPOINTS = ("final", "stage2")

# Sections whose values change trained weights or calibration statistics.
MODEL_SECTIONS = ("seed", "precision", "data", "flow", "cubes", "memae", "cvae", "finetune")

Count = Annotated[int, Field(strict=True, ge=1)]
NonNegativeInt = Annotated[int, Field(strict=True, ge=0)]
Positive = Annotated[float, Field(gt=0)]
NonNegative = Annotated[float, Field(ge=0)]
Pair = Tuple[float, float]

SectionT = TypeVar("SectionT", bound="Section")


def _location(loc: Sequence[Union[str, int]]) -> str:
    path = ""
    for part in loc:
        if isinstance(part, int):
            path += f"[{part}]"
        else:
            path = f"{path}.{part}" if path else str(part)
    return path


def config_error(error: ValidationError) -> VadConfigError:
    """Turn a pydantic ``ValidationError`` into a :class:`VadConfigError`.

    The message names the dotted path of the first offending key.
    """
    first = error.errors()[0]
    path = _location(first["loc"])
    if first["type"] == "extra_forbidden":
        message = f"Unknown configuration key '{path}'"
    else:
        detail = first["msg"]
        if detail.startswith("Value error, "):
            detail = detail[len("Value error, ") :]
        message = f"Invalid '{path}': {detail}" if path else f"Invalid configuration: {detail}"
    if error.error_count() > 1:
        message += f" (and {error.error_count() - 1} more)"
    return VadConfigError(message)


def validate_config(cls: Type[SectionT], data: Any) -> SectionT:
    """Validate ``data`` into ``cls``, raising :class:`VadConfigError` on failure."""
    try:
        return cls.model_validate(data)
    except ValidationError as e:
        raise config_error(e) from e


def _ordered(pair: Sequence[float], name: str, low: float) -> None:
    if pair[0] > pair[1]:
        raise ValueError(f"{name}: lower bound {pair[0]} exceeds upper bound {pair[1]}")
    if pair[0] < low:
        raise ValueError(f"{name}: values must be >= {low}, got {pair[0]}")


class Section(BaseModel):
    """Base of every configuration section: frozen, closed to unknown keys."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    def updated(self: SectionT, **changes: Any) -> SectionT:
        """Copy with ``changes`` applied, validated like a loaded section."""
        return validate_config(type(self), {**dict(self), **changes})


class DataConfig(Section):
    """Synthetic dataset generation."""

    frame_height: Annotated[int, Field(strict=True, ge=16)] = 64
    frame_width: Annotated[int, Field(strict=True, ge=16)] = 64
    num_frames: Annotated[int, Field(strict=True, ge=8)] = 150
    train_scenarios: Count = 20
    test_scenarios: Count = 8
    cruise_speed: Pair = Field((1.5, 2.5), description="Cruise speed range (px/frame)")
    speed_changes: NonNegativeInt = Field(2, description="Cruise changes per training clip")
    initial_gap: Pair = (28.0, 36.0)
    lead_size: Tuple[Positive, Positive] = Field((14.0, 11.0), description="Vehicle (w, h)")
    agent_count: NonNegativeInt = 2
    lanes: Tuple[float, ...] = Field((-14.0, 14.0), description="Lateral offsets of agent lanes")
    agent_gap: Pair = (18.0, 60.0)
    agent_relative_speed: float = 0.08
    comfort_accel: Positive = 0.02
    reaction_frames: NonNegativeInt = 5
    ego_brake_decel: Positive = 0.4
    anomaly_decel_threshold: float = Field(0.1, description="Lead deceleration marking a frame")
    braking_onset: Tuple[NonNegativeInt, NonNegativeInt] = (40, 90)
    braking_decel: Pair = (0.2, 0.4)
    stop_duration: NonNegativeInt = 20
    rain_noise: float = Field(0.03, ge=0.0, le=0.2)
    rain_density: float = Field(0.15, ge=0.0, le=1.0)
    environments: Tuple[Literal["city", "highway"], ...] = Field(ENVIRONMENTS, min_length=1)
    weathers: Tuple[Literal["clear", "rain"], ...] = Field(WEATHERS, min_length=1)

    @model_validator(mode="after")
    def check_ranges(self) -> DataConfig:
        _ordered(self.cruise_speed, "cruise_speed", 1e-3)
        _ordered(self.initial_gap, "initial_gap", 1.0)
        _ordered(self.agent_gap, "agent_gap", 1.0)
        _ordered(self.braking_decel, "braking_decel", 1e-3)
        _ordered(self.braking_onset, "braking_onset", 1)
        if self.braking_onset[1] >= self.num_frames:
            raise ValueError("braking_onset must lie inside the clip")
        if self.agent_count > 0 and not self.lanes:
            raise ValueError("lanes needed for agents")
        if not self.comfort_accel < self.anomaly_decel_threshold <= self.braking_decel[0]:
            raise ValueError(
                "need comfort_accel < anomaly_decel_threshold <= braking_decel lower bound"
            )
        # Slowest stop from the fastest cruise must fit after the earliest onset.
        stop_frames = math.ceil(self.cruise_speed[1] / self.braking_decel[0])
        latest = self.num_frames - stop_frames - 1
        if latest < self.braking_onset[0]:
            raise ValueError(
                f"braking_onset starts at frame {self.braking_onset[0]} but a stop from cruise "
                f"{self.cruise_speed[1]} at {self.braking_decel[0]} takes {stop_frames} frames: "
                f"num_frames={self.num_frames} allows onsets up to frame {latest}"
            )
        return self


class FlowConfig(Section):
    """Dense optical flow estimation."""

    levels: Count = Field(3, description="Pyramid levels")
    iterations: Count = Field(100, description="Solver iterations per level")
    smoothness: Positive = 0.1
    max_displacement: Positive = Field(8.0, description="Clamp of |u|, |v| in pixels")
    presmooth_sigma: NonNegative = 0.8
    use_ground_truth: bool = Field(False, strict=True, description="Use the rendered motion")


class CubeConfig(Section):
    """Spatiotemporal cube extraction."""

    t_len: Annotated[int, Field(strict=True, ge=2)] = 4
    size: Annotated[int, Field(strict=True, ge=8, multiple_of=8)] = 32
    margin: NonNegative = 0.0
    min_side: Count = 2
    train_stride: Count = 2


class MemAEConfig(Section):
    """Flow reconstruction autoencoder and its training."""

    widths: Tuple[Count, Count, Count] = (32, 64, 128)
    num_slots: Annotated[int, Field(strict=True, ge=2)] = 100
    shrink_threshold: Optional[Annotated[float, Field(ge=0.0, lt=1.0)]] = Field(
        None, description="Hard shrinkage threshold; 1/num_slots when unset"
    )
    entropy_weight: NonNegative = 0.0002
    leaky_slope: float = 0.2
    lr: Positive = 1e-3
    batch_size: Count = 32
    epochs: Count = 4

    @property
    def threshold(self) -> float:
        """Hard shrinkage threshold, defaulting to 1/num_slots."""
        if self.shrink_threshold is None:
            return 1.0 / self.num_slots
        return self.shrink_threshold


class CVAEConfig(Section):
    """Future frame predictor and its training."""

    widths: Tuple[Count, Count, Count] = (32, 64, 64)
    z_dim: Count = 64
    beta: NonNegative = 0.1
    logvar_limit: Positive = 6.0
    leaky_slope: float = 0.2
    lr: Positive = 1e-3
    batch_size: Count = 32
    epochs: Count = 4


class FinetuneConfig(Section):
    """Joint fine-tuning of both networks."""

    enabled: bool = Field(True, strict=True)
    epochs: Count = 1
    lr: Positive = 2e-4
    batch_size: Count = 32
    memae_weight: NonNegative = 1.0
    cvae_weight: NonNegative = 1.0


class ConditionConfig(Section):
    """One named scoring condition (box source, weights, checkpoint)."""

    name: str = Field(..., strict=True, description="Condition name, also a directory name")
    boxes: Literal["gt", "detected"] = "gt"
    weights: Optional[ScoreWeights] = Field(None, description="Overrides the run's weights")
    detector: Optional[DetectorStub] = Field(None, description="Overrides the run's detector")
    checkpoint: Literal["final", "stage2"] = "final"

    @field_validator("name")
    @classmethod
    def validate_name(cls, v: str) -> str:
        if not v or "/" in v:
            raise ValueError(f"Invalid condition name '{v}'")
        return v


DEFAULT_CONDITIONS = (
    ConditionConfig(name="gt"),
    ConditionConfig(name="detected", boxes="detected"),
    ConditionConfig(name="gt-pred-heavy", weights=ScoreWeights(0.1, 10.0, 0.1, 10.0)),
    ConditionConfig(name="gt-flow-only", weights=ScoreWeights(10.0, 0.0, 10.0, 0.0)),
    ConditionConfig(
        name="detected-lead-missed",
        boxes="detected",
        detector=DetectorStub(jitter=1.0, track_miss_rate={0: 0.5}, seed=11),
    ),
    ConditionConfig(name="gt-no-finetune", checkpoint="stage2"),
)


class EvalConfig(Section):
    """Evaluation conditions and report options."""

    conditions: Tuple[ConditionConfig, ...] = DEFAULT_CONDITIONS
    fpr_target: float = Field(0.95, gt=0.0, le=1.0, description="TPR at which FPR is read")
    calibration_stride: Count = 2
    heatmaps_per_scenario: NonNegativeInt = 2

    @field_validator("conditions")
    @classmethod
    def validate_unique(cls, v: Tuple[ConditionConfig, ...]) -> Tuple[ConditionConfig, ...]:
        names = [c.name for c in v]
        if len(names) != len(set(names)):
            raise ValueError(f"duplicate condition names: {names}")
        return v


def _default_detector() -> DetectorStub:
    return DetectorStub(
        miss_rate=0.05, jitter=1.0, size_bias=1.05, distance_miss_boost=0.3, small_area=150, seed=11
    )


class RunConfig(Section):
    """Complete, resolved configuration of a pipeline run."""

    seed: NonNegativeInt = 7
    precision: Literal["float32", "float64"] = "float32"
    jobs: Count = Field(1, description="Worker processes for generation and flow")
    data: DataConfig = Field(default_factory=DataConfig)
    flow: FlowConfig = Field(default_factory=FlowConfig)
    cubes: CubeConfig = Field(default_factory=CubeConfig)
    memae: MemAEConfig = Field(default_factory=MemAEConfig)
    cvae: CVAEConfig = Field(default_factory=CVAEConfig)
    finetune: FinetuneConfig = Field(default_factory=FinetuneConfig)
    weights: ScoreWeights = Field(default_factory=ScoreWeights)
    detector: DetectorStub = Field(default_factory=_default_detector)
    eval: EvalConfig = Field(default_factory=EvalConfig)

    def to_dict(self) -> dict[str, Any]:
        return self.model_dump(mode="json")

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False)

    def section_hash(self, sections: Sequence[str]) -> str:
        """SHA-256 of the canonical JSON of the named (possibly dotted) sections."""
        plain = self.to_dict()
        subset = {}
        for key in sections:
            value: Any = plain
            for part in key.split("."):
                value = value[part]
            subset[key] = value
        canonical = json.dumps(subset, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()

    def model_hash(self) -> str:
        """SHA-256 of the sections that determine trained weights and calibration."""
        return self.section_hash(MODEL_SECTIONS)

    def active_conditions(self) -> tuple[ConditionConfig, ...]:
        """Conditions to score; the no-finetune ablation only exists with finetuning on."""
        if self.finetune.enabled:
            return self.eval.conditions
        return tuple(c for c in self.eval.conditions if c.checkpoint == "final")

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> RunConfig:
        return validate_config(cls, data)


def config_schema() -> dict[str, Any]:
    """JSON schema of :class:`RunConfig`."""
    schema = RunConfig.model_json_schema()
    schema["$schema"] = "https://json-schema.org/draft/2020-12/schema"
    return schema


# ---------------------------------------------------------------------- loading


def _load_config_file(filepath: Union[str, Path]) -> dict[str, Any]:
    """Load a configuration mapping from a YAML or JSON file.

    Raises:
        VadConfigError: If the file is missing, its format unsupported or
            its content invalid
    """
    path = Path(filepath)
    if not path.exists():
        raise VadConfigError(f"Configuration file not found: {filepath}")

    suffix = path.suffix.lower()
    try:
        with open(path, "r", encoding="utf-8") as f:
            if suffix in (".yaml", ".yml"):
                config = yaml.safe_load(f)
            elif suffix == ".json":
                config = json.load(f)
            else:
                raise VadConfigError(
                    f"Unsupported configuration file format: {suffix}. Use .yaml, .yml, or .json"
                )
    except yaml.YAMLError as e:
        raise VadConfigError(f"Failed to parse YAML file: {e}") from e
    except json.JSONDecodeError as e:
        raise VadConfigError(f"Failed to parse JSON file: {e}") from e

    if config is None:
        return {}
    if not isinstance(config, dict):
        raise VadConfigError(f"Configuration must be a mapping, got {type(config).__name__}")
    return config


def apply_override(data: dict[str, Any], override: str) -> None:
    """Apply one ``dotted.key=value`` override in place; the value is parsed as YAML."""
    key, sep, raw = override.partition("=")
    key = key.strip()
    if not sep or not key:
        raise VadConfigError(f"Override must look like 'section.key=value', got '{override}'")
    try:
        value = yaml.safe_load(raw) if raw.strip() else None
    except yaml.YAMLError as e:
        raise VadConfigError(f"Cannot parse override value for '{key}': {e}") from e
    node = data
    parts = key.split(".")
    for part in parts[:-1]:
        child = node.get(part)
        if child is None:
            child = node[part] = {}
        elif not isinstance(child, dict):
            raise VadConfigError(f"Override '{key}': '{part}' is not a section")
        node = child
    node[parts[-1]] = value


def load_config(
    filepath: Union[str, Path, None] = None,
    overrides: Sequence[str] = (),
    base: Optional[RunConfig] = None,
) -> RunConfig:
    """Resolve a :class:`RunConfig` from an optional file plus overrides.

    Args:
        filepath: YAML or JSON file; when None, ``base`` (or the defaults) is used
        overrides: ``dotted.key=value`` strings applied after the file
        base: Configuration the file and overrides are layered on
    """
    data = base.to_dict() if base is not None else {}
    if filepath is not None:
        data = _merge(data, _load_config_file(filepath))
    for override in overrides:
        apply_override(data, override)
    return RunConfig.from_dict(data)


def parse_config_text(text: str) -> RunConfig:
    """Parse a YAML document (as stored in a run directory's ``config.yaml``)."""
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as e:
        raise VadConfigError(f"Failed to parse stored configuration: {e}") from e
    return RunConfig.from_dict(data or {})


def _merge(base: dict[str, Any], update: Mapping[str, Any]) -> dict[str, Any]:
    merged = dict(base)
    for key, value in update.items():
        if isinstance(value, Mapping) and isinstance(merged.get(key), dict):
            merged[key] = _merge(merged[key], value)
        else:
            merged[key] = value
    return merged


def run_root() -> str:
    """Root directory for runs (``GENRO_VAD_RUN_ROOT`` or ``./runs``)."""
    return os.environ.get(RUN_ROOT_ENV, DEFAULT_RUN_ROOT)
