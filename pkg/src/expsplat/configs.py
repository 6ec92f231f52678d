"""Dataclass configs for rendering, model, training, and data generation."""
from __future__ import annotations

from dataclasses import dataclass, field

from .core import ConfigError


@dataclass(frozen=True)
class RenderConfig:
    tile_size: int = 16
    #: isotropic low-pass added to the 2D covariance diagonal, px^2
    lowpass: float = 0.3
    alpha_clamp: float = 0.99
    #: front-to-back compositing stops once transmittance falls below this
    transmittance_floor: float = 1e-4
    #: binning / frustum radius in units of the footprint's largest sigma.
    #: exp(-cull_sigmas^2 / 2) bounds what a tile can miss; 7 keeps the
    #: tile path within 1e-6 of a full per-pixel sort.
    cull_sigmas: float = 7.0
    near: float = 1e-6

    def __post_init__(self):
        if self.tile_size < 1:
            raise ConfigError("tile_size must be >= 1")
        if self.lowpass < 0:
            raise ConfigError("lowpass must be >= 0")
        if not (0 < self.alpha_clamp < 1):
            raise ConfigError("alpha_clamp must be in (0, 1)")
        if not (0 < self.transmittance_floor < 1):
            raise ConfigError("transmittance_floor must be in (0, 1)")


@dataclass(frozen=True)
class ModelConfig:
    #: token / attention width shared by the geometry and appearance branches
    dim: int = 64
    patch: int = 8
    #: alternating frame/global attention layers in the geometry encoder
    layers: int = 4
    #: 1-based layer whose global-attention Q/K guide the appearance branch
    qk_layer: int = 3
    sh_degree: int = 0
    #: channels of the high-frequency image CNN feeding the DoG upsampler
    dog_channels: int = 32
    tonemap_hidden: int = 32
    #: pixel-level gaussian head activation floor/gain for scale
    scale_floor: float = 1e-4
    scale_gain: float = 0.02
    depth_min: float = 0.05
    voxel_size: float = 0.002

    def __post_init__(self):
        if self.dim % 2 != 0:
            raise ConfigError("dim must be even (sin/cos embedding halves)")
        if not (1 <= self.qk_layer <= self.layers):
            raise ConfigError(f"qk_layer {self.qk_layer} outside 1..{self.layers}")
        if self.sh_degree not in (0, 1, 2, 3):
            raise ConfigError("sh_degree must be in [0, 3]")
        if self.scale_floor <= 0 or self.scale_gain <= 0:
            raise ConfigError("scale activation floor/gain must be positive")
        if self.voxel_size <= 0:
            raise ConfigError("voxel_size must be positive")


@dataclass(frozen=True)
class LossWeights:
    """Weights of the reconstruction objective
    L = mean_v [mse + lambda_perc * perceptual] + lambda_g * geometry."""

    lambda_perc: float = 0.05
    lambda_g: float = 0.1
    #: percentage of most-confident pixels kept by the geometry-loss mask
    top_percent: float = 30.0

    def __post_init__(self):
        if not (0 < self.top_percent <= 100):
            raise ConfigError("top_percent must be in (0, 100]")


@dataclass(frozen=True)
class TrainConfig:
    iters: int = 2000
    lr: float = 2e-4
    warmup: int = 50
    min_views: int = 2
    max_views: int = 10
    seed: int = 0
    #: depth/confidence pretraining steps for the geometry encoder before it
    #: is frozen for the main loop
    geo_iters: int = 400
    geo_lr: float = 1e-3
    geo_views: int = 3
    loss: LossWeights = field(default_factory=LossWeights)

    def __post_init__(self):
        if not (1 <= self.min_views <= self.max_views):
            raise ConfigError("need 1 <= min_views <= max_views")
        if self.iters < 1:
            raise ConfigError("iters must be >= 1")


@dataclass(frozen=True)
class PostOptConfig:
    """Per-attribute Adam refinement of a predicted scene."""

    iters: int = 1000
    lr_position: float = 1.6e-4
    lr_scale: float = 5e-3
    lr_rotation: float = 1e-3
    lr_opacity: float = 5e-2
    lr_color: float = 2.5e-3
    lr_tonemap: float = 2.5e-3
    #: gaussians with opacity below this are dropped before refinement
    prune_opacity: float = 0.01
    mse_weight: float = 0.8
    ssim_weight: float = 0.2

    def __post_init__(self):
        if self.iters < 0:
            raise ConfigError("iters must be >= 0")
        if not (0 <= self.prune_opacity < 1):
            raise ConfigError("prune_opacity must be in [0, 1)")

    def learning_rates(self) -> dict[str, float]:
        return {
            "position": self.lr_position,
            "scale": self.lr_scale,
            "rotation": self.lr_rotation,
            "opacity": self.lr_opacity,
            "color": self.lr_color,
            "tonemap": self.lr_tonemap,
        }


@dataclass(frozen=True)
class DataConfig:
    """Synthetic multi-exposure dataset: a grid of nearby viewpoints around
    a procedural emissive scene, each view captured at a fixed exposure
    bracket through one scene-level response curve."""

    grid_rows: int = 5
    grid_cols: int = 7
    elevation_step_deg: float = 2.5
    azimuth_step_deg: float = 5.0
    image_size: int = 64
    exposures: tuple[float, ...] = (0.125, 0.5, 2.0, 8.0, 32.0)
    #: "standard" | "filmic" | "agx" | "random" (one pick per scene)
    crf: str = "random"
    camera_radius: float = 2.6
    #: focal length in pixels as a multiple of image_size
    focal_scale: float = 1.0
    gaussians_min: int = 350
    gaussians_max: int = 600
    min_dynamic_range: float = 1e4

    def __post_init__(self):
        if self.grid_rows < 1 or self.grid_cols < 1:
            raise ConfigError("viewpoint grid must be non-empty")
        if self.image_size < 16:
            raise ConfigError("image_size must be >= 16")
        if len(self.exposures) < 2:
            raise ConfigError("need at least two exposures in the bracket")
        if any(t <= 0 for t in self.exposures):
            raise ConfigError("exposure times must be positive")
        if self.crf not in ("standard", "filmic", "agx", "random"):
            raise ConfigError(f"unknown crf preset {self.crf!r}")

    @property
    def n_views(self) -> int:
        return self.grid_rows * self.grid_cols
