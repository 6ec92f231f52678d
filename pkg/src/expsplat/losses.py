"""Reconstruction losses.

Photometric term: per-view MSE plus a small feature-space distance computed
by a fixed, randomly initialized multi-scale conv bank. The bank is seeded
and never trained; it only has to provide a stable frequency-sensitive
metric, not semantics.

Geometry term: squared depth error restricted to the most confident pixels
of the geometry branch. Mask cardinality is exactly ceil(percent/100 * H*W)
per view, ties broken by ascending pixel index, and the mask never carries
gradients back into the confidence head.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import nn
from torch.nn import functional as F

from .configs import LossWeights
from .core import ConfigError


class PerceptualBank(nn.Module):
    """Frozen 3-scale conv feature extractor.

    Each scale is conv3x3 -> ReLU -> conv3x3 -> ReLU followed by 2x average
    pooling into the next scale. Features from all three scales enter the
    distance with equal weight.
    """

    def __init__(self, channels: tuple[int, int, int] = (16, 32, 32),
                 seed: int = 1234):
        super().__init__()
        stages = []
        in_ch = 3
        with torch.random.fork_rng():
            torch.manual_seed(seed)
            for ch in channels:
                stages.append(nn.Sequential(
                    nn.Conv2d(in_ch, ch, 3, padding=1), nn.ReLU(),
                    nn.Conv2d(ch, ch, 3, padding=1), nn.ReLU()))
                in_ch = ch
        self.stages = nn.ModuleList(stages)
        for p in self.parameters():
            p.requires_grad_(False)

    def features(self, image: torch.Tensor) -> list[torch.Tensor]:
        """(H, W, 3) in [0, 1] -> per-scale feature maps."""
        if image.ndim != 3 or image.shape[-1] != 3:
            raise ConfigError("perceptual bank expects an (H, W, 3) image")
        if next(self.parameters()).dtype != image.dtype:
            # f32 master weights widen exactly; narrowing back is lossless
            self.to(image.dtype)
        x = image.permute(2, 0, 1)[None]
        out = []
        for i, stage in enumerate(self.stages):
            if i > 0:
                x = F.avg_pool2d(x, 2, ceil_mode=True)
            x = stage(x)
            out.append(x)
        return out

    def distance(self, a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
        fa, fb = self.features(a), self.features(b)
        per_scale = [((x - y) ** 2).mean() for x, y in zip(fa, fb)]
        return sum(per_scale) / len(per_scale)


@dataclass
class PhotometricTerms:
    loss: torch.Tensor
    mse: torch.Tensor
    perceptual: torch.Tensor


def photometric_loss(rendered: list[torch.Tensor], targets: list[torch.Tensor],
                     weights: LossWeights = LossWeights(),
                     bank: PerceptualBank | None = None) -> PhotometricTerms:
    """Mean over views of [MSE + lambda_perc * feature distance].

    rendered/targets: matching lists of (H, W, 3) LDR tensors in [0, 1].
    """
    if len(rendered) != len(targets) or not rendered:
        raise ConfigError("rendered and target view lists must match and be non-empty")
    if weights.lambda_perc > 0 and bank is None:
        bank = PerceptualBank()
    mse_sum = 0.0
    perc_sum = 0.0
    for r, t in zip(rendered, targets):
        if r.shape != t.shape:
            raise ConfigError(f"view shape mismatch {tuple(r.shape)} vs {tuple(t.shape)}")
        mse_sum = mse_sum + ((r - t) ** 2).mean()
        if weights.lambda_perc > 0:
            perc_sum = perc_sum + bank.distance(r, t)
    n = len(rendered)
    mse = mse_sum / n
    perc = perc_sum / n if weights.lambda_perc > 0 else torch.zeros(())
    return PhotometricTerms(loss=mse + weights.lambda_perc * perc,
                            mse=mse, perceptual=perc)


def confidence_mask(confidence: torch.Tensor, percent: float) -> torch.Tensor:
    """Boolean (H, W) mask of the ceil(percent/100 * H*W) most confident
    pixels. Equal confidences resolve toward the lower flat pixel index."""
    if not (0 < percent <= 100):
        raise ConfigError("percent must be in (0, 100]")
    h, w = confidence.shape
    k = math.ceil(percent / 100.0 * h * w)
    flat = confidence.detach().reshape(-1)
    order = torch.argsort(-flat, stable=True)
    mask = torch.zeros(h * w, dtype=torch.bool)
    mask[order[:k]] = True
    return mask.reshape(h, w)


def geometry_loss(depth: torch.Tensor, rendered_depth: torch.Tensor,
                  confidence: torch.Tensor, percent: float = 30.0) -> torch.Tensor:
    """Mean over views of masked squared depth error.

    depth / rendered_depth / confidence: (V, H, W) tensors. The mask is a
    function of the detached confidence only.
    """
    if depth.shape != rendered_depth.shape or depth.shape != confidence.shape:
        raise ConfigError("depth, rendered depth, and confidence shapes must match")
    if depth.ndim != 3:
        raise ConfigError("expected (V, H, W) depth stacks")
    total = 0.0
    for v in range(depth.shape[0]):
        mask = confidence_mask(confidence[v], percent)
        err = (depth[v] - rendered_depth[v]) ** 2
        total = total + err[mask].mean()
    return total / depth.shape[0]


def total_loss(photometric: torch.Tensor, geometry: torch.Tensor,
               weights: LossWeights = LossWeights()) -> torch.Tensor:
    return photometric + weights.lambda_g * geometry
