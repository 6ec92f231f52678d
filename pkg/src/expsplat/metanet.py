"""Meta network: per-scene tone-mapper weights from per-view evidence.

Inputs per view are the high-frequency image features g_v, the broadcast
exposure embedding, and eight channels of pixel-level Gaussian attributes.
A shared strided conv encoder runs on each view independently; descriptors
are mean-pooled over space and views and a final linear layer emits the
flat tone-mapper parameter vector (7h + 3 values).

The view reduction sorts per-view descriptors componentwise before summing,
which makes permutation invariance exact in floating point, not just in
exact arithmetic.
"""
from __future__ import annotations

import torch
from torch import nn

from .configs import ModelConfig
from .core import ConfigError
from .tonemap import TonemapParams


def _orderless_mean(per_view: torch.Tensor) -> torch.Tensor:
    """(V, D) -> (D,) mean whose value is independent of view order."""
    ordered, _ = torch.sort(per_view, dim=0)
    return ordered.sum(dim=0) / per_view.shape[0]


class MetaNet(nn.Module):
    def __init__(self, cfg: ModelConfig = ModelConfig()):
        super().__init__()
        self.cfg = cfg
        in_ch = cfg.dog_channels + cfg.dim + 8
        self.encoder = nn.Sequential(
            nn.Conv2d(in_ch, 32, 3, stride=2, padding=1), nn.ReLU(),
            nn.Conv2d(32, 64, 3, stride=2, padding=1), nn.ReLU(),
            nn.Conv2d(64, 64, 3, stride=2, padding=1), nn.ReLU())
        self.fc = nn.Linear(64, TonemapParams.flat_size(cfg.tonemap_hidden))

    def forward(self, image_feats: torch.Tensor, exposure_emb: torch.Tensor,
                attribute_maps: torch.Tensor) -> torch.Tensor:
        """(V, dog_ch, H, W), (V, dim), (V, 8, H, W) -> flat theta."""
        v, _, h, w = image_feats.shape
        if exposure_emb.shape != (v, self.cfg.dim):
            raise ConfigError(
                f"exposure embedding {tuple(exposure_emb.shape)} does not match "
                f"{v} views of width {self.cfg.dim}")
        if attribute_maps.shape != (v, 8, h, w):
            raise ConfigError("attribute maps must be (V, 8, H, W)")
        emb_map = exposure_emb[:, :, None, None].expand(v, self.cfg.dim, h, w)
        x = torch.cat([image_feats, emb_map, attribute_maps], dim=1)
        # per-view encoding keeps each descriptor independent of batch layout
        pooled = torch.stack([
            self.encoder(x[i:i + 1]).mean(dim=(0, 2, 3)) for i in range(v)
        ])
        return self.fc(_orderless_mean(pooled))

    def predict_tonemap(self, image_feats, exposure_emb, attribute_maps):
        """Convenience wrapper returning structured parameter tensors
        (w1, b1, w2, b2) split out of the flat prediction."""
        theta = self.forward(image_feats, exposure_emb, attribute_maps)
        h = self.cfg.tonemap_hidden
        w1 = theta[:3 * h].reshape(h, 3)
        b1 = theta[3 * h:4 * h]
        w2 = theta[4 * h:7 * h].reshape(3, h)
        b2 = theta[7 * h:]
        return theta, (w1, b1, w2, b2)
