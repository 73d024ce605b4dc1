"""Validated project configuration (JSON)."""

from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Literal

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from .errors import ConfigError


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class CorruptionParams(_Strict):
    occl_prob: float = Field(0.05, ge=0.0, le=1.0)
    shift_prob: float = Field(0.05, ge=0.0, le=1.0)
    shift_sigma: float = Field(0.01, ge=0.0)


class SimulationParams(_Strict):
    min_cameras: int = Field(2, ge=2)
    skin_eps: float = Field(1e-4, gt=0.0)
    frame_rate: float = Field(120.0, gt=0.0)


class SolverParams(_Strict):
    width: int = Field(64, ge=4)
    conv_blocks: int = Field(2, ge=0)
    kernel: int = Field(3, ge=1)
    encoder_blocks: int = Field(2, ge=0)
    decoder_blocks: int = Field(3, ge=1)
    rotation_blocks: int = Field(4, ge=1)
    heads: int = Field(4, ge=1)
    ff_ratio: int = Field(2, ge=1)
    dtype: Literal["float64", "float32"] = "float64"

    @field_validator("kernel")
    @classmethod
    def _odd(cls, v):
        if v % 2 != 1:
            raise ValueError("kernel must be odd")
        return v


class TrainingParams(_Strict):
    position_steps: int = Field(3000, ge=0)
    rotation_steps: int = Field(3000, ge=0)
    batch_size: int = Field(256, ge=1)
    lr: float = Field(1e-3, ge=0.0)
    clip: float = Field(1.0, ge=0.0)
    cosine: bool = True
    holdout: float = Field(0.2, ge=0.0, lt=1.0)
    lambda1: float = Field(1.0, ge=0.0)
    lambda2: float = Field(1.0, ge=0.0)
    lambda3: float = Field(2.0, ge=0.0)


class ToyParams(_Strict):
    n_joints: int = Field(5, ge=2)
    n_markers: int = Field(12, ge=4)
    n_frames: int = Field(5000, ge=1)
    n_sequences: int = Field(20, ge=1)
    motion_richness: float = Field(1.0, ge=0.0)
    rig: Literal["one_side", "surround"] = "one_side"


class RigSelectionParams(_Strict):
    candidates: list[str] = Field(default_factory=list)
    reference_stats: str | None = None
    k: int = Field(1, ge=1)
    order: Literal["lowest", "highest"] = "lowest"


class OversampleParams(_Strict):
    occlusion_threshold: float = Field(0.2, ge=0.0, le=1.0)
    target_ratio: float = Field(0.5, gt=0.0, lt=1.0)
    max_factor: int = Field(10_000, ge=1)


class Seeds(_Strict):
    base: int = 0
    corruption: int = 0
    split: int = 0


class ProjectConfig(_Strict):
    skeleton: str | None = None
    mesh: str | None = None
    layout: str | None = None
    rig: str | None = None
    motion: str | None = None
    tpose: str | None = None
    dataset: str | None = None
    corruption: CorruptionParams = CorruptionParams()
    simulation: SimulationParams = SimulationParams()
    solver: SolverParams = SolverParams()
    training: TrainingParams = TrainingParams()
    toy: ToyParams = ToyParams()
    rig_selection: RigSelectionParams = RigSelectionParams()
    oversampling: OversampleParams = OversampleParams()
    seeds: Seeds = Seeds()
    buckets: list[float] = Field(default_factory=lambda: [0.05, 0.10, 0.15, 0.20])

    @field_validator("buckets")
    @classmethod
    def _buckets(cls, v):
        if not v or any(not 0.0 <= b <= 1.0 for b in v) or sorted(v) != v or len(set(v)) != len(v):
            raise ValueError("buckets must be a non-empty strictly increasing list in [0, 1]")
        return v

    def path(self, name: str, base: Path | None = None) -> Path | None:
        """Config-relative path for a file field."""
        value = getattr(self, name)
        if value is None:
            return None
        p = Path(value)
        return p if p.is_absolute() or base is None else base / p

    def canonical_json(self) -> str:
        return json.dumps(self.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))

    def digest(self) -> str:
        return hashlib.sha256(self.canonical_json().encode()).hexdigest()


def load_config(path) -> ProjectConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            raw = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc.msg} at char {exc.pos})") from exc
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from exc
    try:
        return ProjectConfig.model_validate(raw)
    except ValidationError as exc:
        details = "; ".join(f"{'.'.join(map(str, e['loc']))}: {e['msg']}" for e in exc.errors())
        raise ConfigError(f"{path}: {details}") from exc
