"""Frozen multi-view geometry branch.

A small transformer over 8x8 patch tokens with alternating per-frame
self-attention and global cross-view attention (single head, pre-norm).
One designated layer exposes its global-attention queries and keys; the
appearance branch reuses them to aggregate its own tokens with the same
geometric affinities. Small convolutional heads decode per-view depth
(strictly positive) and confidence from the upsampled token grid.

The branch is pretrained on rendered depth and then frozen; nothing in the
main objective updates it.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import nn
from torch.nn import functional as F

from .configs import ModelConfig
from .core import CameraParams, ConfigError


def sincos_position_embedding(grid_h: int, grid_w: int, dim: int,
                              dtype: torch.dtype = torch.float32) -> torch.Tensor:
    """Fixed 2D sin/cos embedding, dim split evenly between y and x."""
    if dim % 4 != 0:
        raise ConfigError("position embedding needs dim divisible by 4")
    half = dim // 2

    def axis(n, d):
        pos = torch.arange(n, dtype=dtype).unsqueeze(1)
        omega = torch.exp(-math.log(10000.0)
                          * torch.arange(d // 2, dtype=dtype) / (d // 2))
        ang = pos * omega
        return torch.cat([torch.sin(ang), torch.cos(ang)], dim=1)  # (n, d)

    ey = axis(grid_h, half)
    ex = axis(grid_w, half)
    grid = torch.cat([
        ey[:, None, :].expand(grid_h, grid_w, half),
        ex[None, :, :].expand(grid_h, grid_w, half),
    ], dim=-1)
    return grid.reshape(grid_h * grid_w, dim)


def _attend(q, k, v):
    """Single-head scaled dot-product attention over the last two dims."""
    scale = 1.0 / math.sqrt(q.shape[-1])
    attn = torch.softmax(q @ k.transpose(-2, -1) * scale, dim=-1)
    return attn @ v


class AlternatingBlock(nn.Module):
    """Pre-norm frame self-attention, global cross-view attention, MLP."""

    def __init__(self, dim: int):
        super().__init__()
        self.norm_frame = nn.LayerNorm(dim)
        self.frame_qkv = nn.Linear(dim, 3 * dim)
        self.frame_out = nn.Linear(dim, dim)
        self.norm_global = nn.LayerNorm(dim)
        self.global_qkv = nn.Linear(dim, 3 * dim)
        self.global_out = nn.Linear(dim, dim)
        self.norm_mlp = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(nn.Linear(dim, 2 * dim), nn.GELU(),
                                 nn.Linear(2 * dim, dim))

    def forward(self, x: torch.Tensor):
        # x: (V, N, d); frame attention stays within each view
        y = self.norm_frame(x)
        q, k, v = self.frame_qkv(y).chunk(3, dim=-1)
        x = x + self.frame_out(_attend(q, k, v))

        views, n, d = x.shape
        y = self.norm_global(x).reshape(views * n, d)
        q, k, v = self.global_qkv(y).chunk(3, dim=-1)
        x = x + self.global_out(_attend(q, k, v)).reshape(views, n, d)

        x = x + self.mlp(self.norm_mlp(x))
        return x, q, k


@dataclass
class GeoContext:
    """Frozen-branch outputs consumed downstream: tokens (V,N,d), the
    designated layer's global-attention q/k (V*N,d), per-view depth and
    confidence (V,H,W), and the cameras the views were captured with."""

    tokens: torch.Tensor
    q: torch.Tensor
    k: torch.Tensor
    depth: torch.Tensor
    confidence: torch.Tensor
    cameras: list[CameraParams]

    @property
    def grid(self) -> tuple[int, int]:
        v, n, _ = self.tokens.shape
        side = int(math.isqrt(n))
        return (side, side)


class GeometryEncoder(nn.Module):
    def __init__(self, cfg: ModelConfig = ModelConfig()):
        super().__init__()
        self.cfg = cfg
        d = cfg.dim
        self.patch_embed = nn.Conv2d(3, d, kernel_size=cfg.patch, stride=cfg.patch)
        self.blocks = nn.ModuleList(AlternatingBlock(d) for _ in range(cfg.layers))
        self.norm_out = nn.LayerNorm(d)
        self.head = nn.Sequential(
            nn.Conv2d(d, 32, 3, padding=1, padding_mode="replicate"), nn.ReLU(),
            nn.Conv2d(32, 2, 3, padding=1, padding_mode="replicate"))
        self._pos_cache: dict = {}

    def _pos(self, gh: int, gw: int, dtype) -> torch.Tensor:
        key = (gh, gw, dtype)
        if key not in self._pos_cache:
            self._pos_cache[key] = sincos_position_embedding(gh, gw, self.cfg.dim,
                                                             dtype=dtype)
        return self._pos_cache[key]

    def forward(self, images: torch.Tensor, cameras: list[CameraParams]) -> GeoContext:
        """images: (V, 3, H, W) LDR in [0, 1]; H, W divisible by patch."""
        if images.ndim != 4 or images.shape[1] != 3:
            raise ConfigError(f"expected (V, 3, H, W) images, got {tuple(images.shape)}")
        views, _, h, w = images.shape
        p = self.cfg.patch
        if h % p or w % p:
            raise ConfigError(f"image size {h}x{w} not divisible by patch {p}")
        if len(cameras) != views:
            raise ConfigError(f"{views} views vs {len(cameras)} cameras")
        gh, gw = h // p, w // p

        x = self.patch_embed(images)  # (V, d, gh, gw)
        x = x.flatten(2).transpose(1, 2)  # (V, N, d)
        x = x + self._pos(gh, gw, x.dtype)

        q_sel = k_sel = None
        for i, block in enumerate(self.blocks, start=1):
            x, q, k = block(x)
            if i == self.cfg.qk_layer:
                q_sel, k_sel = q, k

        tokens = self.norm_out(x)
        grid = tokens.transpose(1, 2).reshape(views, self.cfg.dim, gh, gw)
        up = F.interpolate(grid, size=(h, w), mode="bilinear", align_corners=False)
        raw = self.head(up)
        depth = F.softplus(raw[:, 0]) + self.cfg.depth_min
        confidence = F.softplus(raw[:, 1])
        return GeoContext(tokens=tokens, q=q_sel, k=k_sel, depth=depth,
                          confidence=confidence, cameras=list(cameras))

    def freeze(self) -> "GeometryEncoder":
        for p in self.parameters():
            p.requires_grad_(False)
        return self.eval()
