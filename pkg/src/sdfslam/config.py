"""Run configuration: a YAML tree mirroring the per-module config dataclasses."""

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import yaml

from .encoding import HashGridConfig, OneBlobConfig, SceneBounds
from .errors import ConfigError
from .mapping import MappingConfig
from .objectives import LossWeights
from .renderer import SamplingConfig
from .tracking import TrackingConfig

DATASET_FORMATS = ("synthetic", "tum")


@dataclass
class FieldConfig:
    hidden: int = 32
    h_dim: int = 15

    def __post_init__(self):
        if self.hidden < 1 or self.h_dim < 1:
            raise ValueError("hidden and h_dim must be positive")


@dataclass
class BaConfig:
    """Optimizer knobs for mapping / bundle adjustment."""

    lr_grid: float = 1e-2
    lr_decoder: float = 1e-2
    lr_pose: float = 1e-3
    pixel_fraction: float = 0.05
    pose_optim: bool = True
    window: Optional[int] = None  # None = all keyframes participate

    def __post_init__(self):
        if min(self.lr_grid, self.lr_decoder, self.lr_pose) <= 0:
            raise ValueError("learning rates must be positive")
        if not 0 < self.pixel_fraction <= 1:
            raise ValueError("pixel_fraction must be in (0, 1]")
        if self.window is not None and self.window < 1:
            raise ValueError("window must be >= 1 when set")


@dataclass
class RunConfig:
    dataset: str
    dataset_format: str = "synthetic"
    output_dir: str = "output"
    seed: int = 0
    frame_start: int = 0
    frame_end: Optional[int] = None
    bounds: Optional[SceneBounds] = None  # None: read bounds.txt from the dataset
    grid: HashGridConfig = field(default_factory=HashGridConfig)
    oneblob: OneBlobConfig = field(default_factory=OneBlobConfig)
    field_cfg: FieldConfig = field(default_factory=FieldConfig)
    sampling: SamplingConfig = field(default_factory=SamplingConfig)
    weights: LossWeights = field(default_factory=LossWeights)
    tracking: TrackingConfig = field(default_factory=TrackingConfig)
    mapping: MappingConfig = field(default_factory=MappingConfig)
    ba: BaConfig = field(default_factory=BaConfig)
    mesh_voxel: float = 0.02

    def __post_init__(self):
        if self.dataset_format not in DATASET_FORMATS:
            raise ConfigError(f"unknown dataset_format {self.dataset_format!r}")
        if self.frame_start < 0:
            raise ConfigError("frame_start must be >= 0")
        if self.frame_end is not None and self.frame_end <= self.frame_start:
            raise ConfigError("frame_end must exceed frame_start")
        if self.mesh_voxel <= 0:
            raise ConfigError("mesh_voxel must be positive")
        if not 0 < self.sampling.d_s <= self.sampling.truncation:
            raise ConfigError("need 0 < d_s <= truncation")
        if self.dataset_format == "tum" and self.bounds is None:
            raise ConfigError("tum datasets need explicit bounds")


_SECTIONS = {
    "grid": HashGridConfig,
    "oneblob": OneBlobConfig,
    "field": FieldConfig,
    "sampling": SamplingConfig,
    "weights": LossWeights,
    "tracking": TrackingConfig,
    "mapping": MappingConfig,
    "ba": BaConfig,
}

_TOP_KEYS = {
    "dataset", "dataset_format", "output_dir", "seed",
    "frame_start", "frame_end", "bounds", "mesh_voxel",
} | set(_SECTIONS)


def _build(cls, data, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"section {where!r} must be a mapping")
    try:
        return cls(**data)
    except TypeError as exc:  # unknown or missing keys
        raise ConfigError(f"section {where!r}: {exc}") from exc
    except ValueError as exc:
        raise ConfigError(f"section {where!r}: {exc}") from exc


def _parse_bounds(data) -> SceneBounds:
    if not isinstance(data, dict) or set(data) != {"min", "max"}:
        raise ConfigError("bounds needs exactly the keys min and max")
    lo = np.asarray(data["min"], dtype=np.float64)
    hi = np.asarray(data["max"], dtype=np.float64)
    if lo.shape != (3,) or hi.shape != (3,):
        raise ConfigError("bounds min/max must be 3-vectors")
    try:
        return SceneBounds(min=lo, max=hi)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def config_from_dict(data: dict) -> RunConfig:
    if not isinstance(data, dict):
        raise ConfigError("config root must be a mapping")
    unknown = set(data) - _TOP_KEYS
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    if "dataset" not in data:
        raise ConfigError("config must name a dataset")
    kwargs = {
        k: data[k]
        for k in ("dataset", "dataset_format", "output_dir", "seed",
                  "frame_start", "frame_end", "mesh_voxel")
        if k in data and data[k] is not None
    }
    if data.get("bounds") is not None:
        kwargs["bounds"] = _parse_bounds(data["bounds"])
    for key, cls in _SECTIONS.items():
        if data.get(key) is not None:
            dest = "field_cfg" if key == "field" else key
            kwargs[dest] = _build(cls, data[key], key)
    try:
        return RunConfig(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path: str) -> RunConfig:
    try:
        with open(path) as fh:
            data = yaml.safe_load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"malformed YAML in {path}: {exc}") from exc
    return config_from_dict(data if data is not None else {})


def default_config_yaml(dataset: str, output_dir: str = "output", seed: int = 0) -> str:
    """Commented config template with every default spelled out."""
    return f"""\
dataset: {dataset}
dataset_format: synthetic     # or: tum (then bounds below becomes mandatory)
output_dir: {output_dir}
seed: {seed}
frame_start: 0
frame_end: null               # null = all frames
bounds: null                  # null = read <dataset>/bounds.txt
mesh_voxel: 0.02              # final mesh resolution, meters

grid:                         # multiresolution hash encoding
  levels: 16
  r_min: 16                   # coarsest resolution per axis
  finest_voxel: 0.02          # meters; fixes the finest resolution
  table_size_log2: 13
  feature_dim: 2

oneblob:
  bins: 16                    # per-axis coordinate encoding bins

field:
  hidden: 32                  # MLP width (both heads, one hidden layer)
  h_dim: 15                   # geometric feature passed to the color head

sampling:
  m_c: 32                     # uniform samples per ray
  m_f: 11                     # extra samples near the observed depth
  near: 0.1                   # meters
  far: 4.0                    # meters
  d_s: 0.025                  # half-width of the near-depth sampling band
  truncation: 0.1             # SDF truncation distance, meters

weights:                      # loss term multipliers
  rgb: 5.0
  depth: 0.1
  sdf: 1000.0
  free_space: 10.0
  smooth: 1.0e-6

tracking:
  n_pixels: 1024              # pixels sampled per tracking iteration
  iters: 10
  lr: 1.0e-3

mapping:
  n_g: 2048                   # rays per bundle-adjustment iteration
  ba_iters: 10                # iterations per mapping round
  k_m: 10                     # scene steps per accumulated pose step
  first_frame_iters: 200
  map_every: 5                # insert a keyframe every N frames

ba:
  lr_grid: 1.0e-2
  lr_decoder: 1.0e-2
  lr_pose: 1.0e-3
  pixel_fraction: 0.05        # fraction of pixels stored per keyframe
  pose_optim: true            # false: mapping only, keyframe poses frozen
  window: null                # null = global; N = only the N newest keyframes
"""
