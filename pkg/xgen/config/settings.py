"""
Runtime settings and the pipeline configuration document.

Two layers:
- environment (.env aware) for things that belong to the machine: log level,
  NaN debugging, default worker count
- PipelineConfig, a canonical JSON document for everything that changes the
  produced artifacts. Its hash is stamped on every output.
"""

import hashlib
import json
import logging
import os
from pathlib import Path
from typing import List, Literal, Optional, Union

from dotenv import load_dotenv
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

load_dotenv()

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"


class RuntimeSettings:
    # Machine-level knobs read from the environment

    def __init__(self):
        self.log_level = os.getenv("XGEN_LOG", "INFO").upper()
        if not isinstance(logging.getLevelName(self.log_level), int):
            raise ValueError(f"XGEN_LOG has an unknown log level: {self.log_level}")

        self.debug_nan = os.getenv("XGEN_DEBUG_NAN", "").lower() in ("1", "true", "yes", "on")

        workers = os.getenv("XGEN_WORKERS", "1")
        try:
            self.workers = int(workers)
        except ValueError:
            raise ValueError(f"XGEN_WORKERS must be an integer, got {workers!r}")
        if self.workers < 1:
            raise ValueError("XGEN_WORKERS must be at least 1")


def configure_logging(level: Optional[str] = None) -> None:
    """
    Configure root logging once. The level comes from XGEN_LOG unless given
    explicitly.
    """
    level = level or RuntimeSettings().log_level
    root = logging.getLogger()
    if not root.handlers:
        logging.basicConfig(level=level, format=LOG_FORMAT)
    root.setLevel(level)


def _is_power_of_two(value: int) -> bool:
    return value > 0 and value & (value - 1) == 0


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class NormalizeConfig(_Section):
    margin: float = Field(0.02, ge=0.0, lt=0.5)


class GridConfig(_Section):
    resolution: int = 64

    @field_validator("resolution")
    @classmethod
    def _power_of_two(cls, value):
        if not _is_power_of_two(value):
            raise ValueError("grid.resolution must be a power of two")
        return value


class TsdfConfig(_Section):
    resolution: int = 64
    truncation: float = Field(0.1, gt=0.0)
    shell_epsilon: float = Field(0.02, gt=0.0)
    shell_samples: int = Field(150_000, ge=1)
    include_surface: bool = True
    resample_per_epoch: bool = False

    @model_validator(mode="after")
    def _epsilon_inside_band(self):
        if not _is_power_of_two(self.resolution):
            raise ValueError("tsdf.resolution must be a power of two")
        if self.shell_epsilon > self.truncation:
            raise ValueError("tsdf.shell_epsilon must not exceed tsdf.truncation")
        return self


class GtFieldConfig(_Section):
    iterations: int = Field(50, ge=0)
    smooth_weight: float = Field(1.0, ge=0.0)
    umbilic_threshold: float = Field(0.05, ge=0.0, le=1.0)


class DatasetConfig(_Section):
    surface_samples: int = Field(150_000, ge=1)
    augmentations: int = Field(6, ge=1)
    test_fraction: float = Field(0.1, ge=0.0, le=1.0)
    normal_k: int = Field(16, ge=3)


class NetworkConfig(_Section):
    """
    Shape of the sparse autoencoder.

    Desk-scale defaults; the full-size network is
    encoder_channels=[16, 32, 64, 128, 128], decoder_channels=[128, 64, 32],
    latent_dim=128, input_resolution=256.
    """

    input_resolution: int = 64
    encoder_channels: List[int] = Field(default_factory=lambda: [8, 16, 32, 64, 64])
    decoder_channels: List[int] = Field(default_factory=lambda: [64, 32, 16])
    encoder_convs_per_level: int = Field(1, ge=1)
    decoder_convs_per_level: int = Field(2, ge=2)
    residual_blocks_per_level: int = Field(1, ge=0)
    latent_dim: int = Field(64, ge=1)
    head_hidden: int = Field(32, ge=1)
    field_head_kind: Literal["direction", "rotation_angle"] = "direction"
    field_head_uses_normal: bool = False
    leaky_slope: float = Field(0.01, ge=0.0)

    @model_validator(mode="after")
    def _consistent_levels(self):
        if not _is_power_of_two(self.input_resolution):
            raise ValueError("network.input_resolution must be a power of two")
        if len(self.encoder_channels) < 2:
            raise ValueError("network.encoder_channels needs at least two levels")
        if not self.decoder_channels:
            raise ValueError("network.decoder_channels needs at least one level")
        if any(c < 1 for c in self.encoder_channels + self.decoder_channels):
            raise ValueError("channel counts must be positive")
        if self.latent_resolution < 1:
            raise ValueError("too many encoder levels for the input resolution")
        if self.output_resolution > self.input_resolution:
            raise ValueError("decoder would upsample beyond the input resolution")
        return self

    @property
    def latent_resolution(self) -> int:
        return self.input_resolution >> (len(self.encoder_channels) - 1)

    @property
    def decoder_resolutions(self) -> List[int]:
        return [self.latent_resolution << (i + 1) for i in range(len(self.decoder_channels))]

    @property
    def output_resolution(self) -> int:
        return self.latent_resolution << len(self.decoder_channels)


class LossWeights(_Section):
    occupancy: float = Field(1.0, ge=0.0)
    cross_field: float = Field(1.0, ge=0.0)
    sdf: float = Field(1.0, ge=0.0)
    kl: float = Field(1e-6, ge=0.0)


class TrainConfig(_Section):
    learning_rate: float = Field(1e-4, gt=0.0)
    beta1: float = Field(0.9, ge=0.0, lt=1.0)
    beta2: float = Field(0.999, ge=0.0, lt=1.0)
    adam_eps: float = Field(1e-8, gt=0.0)
    batch_size: int = Field(16, ge=1)
    epochs: int = Field(1, ge=1)
    max_steps: Optional[int] = Field(None, ge=1)
    checkpoint_every: int = Field(1, ge=1)
    augment_rotation: bool = True
    max_drop_rate: float = Field(0.5, ge=0.0, lt=1.0)
    cf_points_per_step: int = Field(8192, ge=1)
    sdf_points_per_step: int = Field(8192, ge=1)
    loss_weights: LossWeights = Field(default_factory=LossWeights)


class MetricsConfig(_Section):
    chamfer_samples: int = Field(100_000, ge=1)
    anisotropy_mask: float = Field(0.05, ge=0.0, le=1.0)
    boundary_valence: int = Field(3, ge=1)
    count_boundary: bool = True


class PipelineConfig(_Section):
    seed: int = Field(0, ge=0, lt=2**64)
    workers: int = Field(1, ge=1)
    normalize: NormalizeConfig = Field(default_factory=NormalizeConfig)
    grid: GridConfig = Field(default_factory=GridConfig)
    tsdf: TsdfConfig = Field(default_factory=TsdfConfig)
    gt_field: GtFieldConfig = Field(default_factory=GtFieldConfig)
    dataset: DatasetConfig = Field(default_factory=DatasetConfig)
    network: NetworkConfig = Field(default_factory=NetworkConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)
    metrics: MetricsConfig = Field(default_factory=MetricsConfig)

    @classmethod
    def load(cls, path: Optional[Union[str, Path]] = None) -> "PipelineConfig":
        """Read a JSON config file; no path means all defaults"""
        if path is None:
            return cls()
        with open(path, "r", encoding="utf-8") as handle:
            return cls.model_validate(json.load(handle))

    def with_resolution(self, resolution: int) -> "PipelineConfig":
        # One flag drives every lattice so the data and the network agree
        data = self.model_dump()
        data["grid"]["resolution"] = resolution
        data["tsdf"]["resolution"] = resolution
        data["network"]["input_resolution"] = resolution
        return PipelineConfig.model_validate(data)

    def canonical_json(self) -> str:
        # worker count never changes an artifact
        return json.dumps(self.model_dump(mode="json", exclude={"workers"}), sort_keys=True, separators=(",", ":"))

    def config_hash(self) -> str:
        return hashlib.sha256(self.canonical_json().encode("utf-8")).hexdigest()
