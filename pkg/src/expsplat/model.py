"""End-to-end scene model: multi-exposure LDR views in, renderable HDR
Gaussian scene plus tone-mapper out, in a single feed-forward pass."""
from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .appearance import (AppearanceTokens, DogUpsampler, FilmNet, GaussianHead,
                         PixelGaussians, exposure_embedding, exposure_normalize,
                         geo_attention, voxelize)
from .configs import ModelConfig
from .core import (CameraParams, ConfigError, ExposureContext, GaussianCloud,
                   SceneBundle)
from .geometry import GeoContext, GeometryEncoder
from .metanet import MetaNet
from .render import camera_tensor
from .tonemap import TonemapParams


@dataclass
class ForwardResult:
    gaussians: GaussianCloud          # after the voxel merge
    pixel_gaussians: PixelGaussians   # raw per-pixel prediction
    theta: torch.Tensor               # flat tone-mapper parameters
    geo: GeoContext
    anchor: float


class SceneModel(nn.Module):
    """Geometry encoder (frozen after pretraining) + appearance branch +
    pixel-level Gaussian head + meta tone-mapper network."""

    def __init__(self, cfg: ModelConfig = ModelConfig(), seed: int = 0):
        super().__init__()
        self.cfg = cfg
        # deterministic initialization regardless of ambient RNG state
        with torch.random.fork_rng():
            torch.manual_seed(seed)
            self.geometry = GeometryEncoder(cfg)
            self.appearance = AppearanceTokens(cfg)
            self.film = FilmNet(cfg.dim)
            self.dog = DogUpsampler(cfg)
            self.head = GaussianHead(cfg)
            self.meta = MetaNet(cfg)

    def trainable_parameters(self):
        """Everything except the frozen geometry branch."""
        for module in (self.appearance, self.film, self.dog, self.head, self.meta):
            yield from module.parameters()

    def forward(self, images: torch.Tensor, exposures: ExposureContext,
                cameras: list[CameraParams]) -> ForwardResult:
        """images: (V, 3, H, W) LDR stack, one exposure per view."""
        if images.shape[0] != len(exposures) or images.shape[0] != len(cameras):
            raise ConfigError("views, exposures, and cameras must align")
        dtype = images.dtype
        rel = torch.tensor(exposures.relative(), dtype=dtype)
        emb = exposure_embedding(rel, self.cfg.dim)

        geo = self.geometry(images, cameras)
        tokens = self.appearance(images)
        t_hat = exposure_normalize(tokens, emb, self.film)
        t_tilde = geo_attention(t_hat, geo.q, geo.k)
        f_hr, g_feats = self.dog(t_tilde, images)

        cam_vecs = torch.stack([camera_tensor(c, dtype) for c in cameras])
        pixel = self.head(geo.tokens, f_hr, geo.depth, cam_vecs)
        theta = self.meta(g_feats, emb, pixel.attribute_maps())
        merged = voxelize(pixel.flatten(), self.cfg.voxel_size)
        return ForwardResult(gaussians=merged, pixel_gaussians=pixel,
                             theta=theta, geo=geo, anchor=exposures.anchor)

    def bundle_from(self, result: ForwardResult, exposures: ExposureContext,
                    cameras: list[CameraParams]) -> SceneBundle:
        theta = result.theta.detach().to(torch.float64).numpy()
        return SceneBundle(
            gaussians=result.gaussians.detach_clone(),
            cameras=list(cameras),
            exposures=exposures,
            tonemap=TonemapParams.from_flat(theta, self.cfg.tonemap_hidden),
        ).validate()


def infer(model: SceneModel, images: torch.Tensor, exposures: ExposureContext,
          cameras: list[CameraParams]) -> tuple[SceneBundle, float]:
    """Feed-forward reconstruction; returns the bundle and wall seconds."""
    start = time.perf_counter()
    model.eval()
    with torch.no_grad():
        result = model(images, exposures, cameras)
        bundle = model.bundle_from(result, exposures, cameras)
    return bundle, time.perf_counter() - start


def stack_images(buffers, dtype: torch.dtype = torch.float32) -> torch.Tensor:
    """List of (H, W, 3) LDR buffers -> (V, 3, H, W) tensor."""
    arrs = [np.transpose(b.data, (2, 0, 1)) for b in buffers]
    return torch.tensor(np.stack(arrs), dtype=dtype)
