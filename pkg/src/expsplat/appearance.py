"""Exposure-aware appearance branch and pixel-level Gaussian prediction.

The branch turns per-view LDR tokens into exposure-normalized features
(FiLM conditioned on a sinusoidal log-exposure embedding), mixes them across
views with the frozen geometry branch's attention affinities, reinjects
high-frequency image detail through a difference-of-gaussians residual, and
decodes one Gaussian per pixel whose center comes from backprojecting the
predicted depth. A voxel-grid merge then fuses near-duplicate Gaussians
across views.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import nn
from torch.nn import functional as F

from .configs import ModelConfig
from .core import ConfigError, DomainError, GaussianCloud, SH_C0
from .geometry import sincos_position_embedding
from .render import rotation_from_axis_angle


def exposure_embedding(rel_ells: torch.Tensor, dim: int) -> torch.Tensor:
    """Sinusoidal embedding of the anchored log-exposure offsets.

    dim/2 frequencies spanning 8 octaves from pi/20; the lowest frequency
    stays within a quarter period over |rel| <= 10, so the embedding is
    injective across any realistic bracket. Values are bounded in [-1, 1]
    and the map is deterministic.
    """
    if dim % 2 != 0:
        raise ConfigError("embedding dim must be even")
    m = dim // 2
    j = torch.arange(m, dtype=rel_ells.dtype)
    omega = (math.pi / 20.0) * torch.pow(2.0, 8.0 * j / max(m - 1, 1))
    ang = rel_ells.reshape(-1, 1) * omega
    return torch.cat([torch.sin(ang), torch.cos(ang)], dim=-1)


class AppearanceTokens(nn.Module):
    """Patch encoder for the appearance branch; same geometry as the
    geometry-branch patchifier but its own weights."""

    def __init__(self, cfg: ModelConfig = ModelConfig()):
        super().__init__()
        self.cfg = cfg
        self.embed = nn.Conv2d(3, cfg.dim, kernel_size=cfg.patch, stride=cfg.patch)
        self.norm = nn.LayerNorm(cfg.dim)
        self._pos_cache: dict = {}

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        v, _, h, w = images.shape
        p = self.cfg.patch
        if h % p or w % p:
            raise ConfigError(f"image size {h}x{w} not divisible by patch {p}")
        x = self.embed(images).flatten(2).transpose(1, 2)
        key = (h // p, w // p, x.dtype)
        if key not in self._pos_cache:
            self._pos_cache[key] = sincos_position_embedding(
                h // p, w // p, self.cfg.dim, dtype=x.dtype)
        return self.norm(x + self._pos_cache[key])


class FilmNet(nn.Module):
    """(embedding, per-view mean, global mean) -> per-view (gamma, beta).

    The output layer starts at zero so modulation begins as the identity.
    """

    def __init__(self, dim: int, hidden: int = 64):
        super().__init__()
        self.net = nn.Sequential(nn.Linear(3 * dim, hidden), nn.ReLU(),
                                 nn.Linear(hidden, 2 * dim))
        nn.init.zeros_(self.net[2].weight)
        nn.init.zeros_(self.net[2].bias)

    def forward(self, embeddings, per_view_mean, global_mean):
        x = torch.cat([embeddings, per_view_mean,
                       global_mean.unsqueeze(0).expand_as(per_view_mean)], dim=-1)
        return self.net(x).chunk(2, dim=-1)


def exposure_normalize(tokens: torch.Tensor, embeddings: torch.Tensor,
                       film: FilmNet) -> torch.Tensor:
    """FiLM the tokens: t * (1 + gamma) + beta, statistics token-derived.

    gamma = beta = 0 leaves the tokens bitwise unchanged.
    """
    if tokens.shape[0] != embeddings.shape[0]:
        raise ConfigError("views of tokens and embeddings differ")
    per_view = tokens.mean(dim=1)
    global_mean = per_view.mean(dim=0)
    gamma, beta = film(embeddings, per_view, global_mean)
    return tokens * (1.0 + gamma.unsqueeze(1)) + beta.unsqueeze(1)


def geo_attention(tokens: torch.Tensor, q: torch.Tensor, k: torch.Tensor) -> torch.Tensor:
    """Aggregate appearance tokens with frozen geometry affinities:
    softmax(q k^T / sqrt(d)) applied across all views' tokens at once."""
    v, n, d = tokens.shape
    if q.shape != (v * n, q.shape[-1]) or k.shape != q.shape:
        raise ConfigError(
            f"geometry q/k shape {tuple(q.shape)} does not cover {v}x{n} tokens")
    attn = torch.softmax(q @ k.transpose(0, 1) / math.sqrt(q.shape[-1]), dim=-1)
    return (attn @ tokens.reshape(v * n, d)).reshape(v, n, d)


class DogUpsampler(nn.Module):
    """Token upsampling with a difference-of-gaussians detail residual.

    f_hr = Conv(Up(tokens) + Conv(g - up(down(g)))) where g is a shallow
    CNN feature of the input image; the band-pass residual vanishes for
    constant inputs. Replicate padding keeps constants constant.
    """

    def __init__(self, cfg: ModelConfig = ModelConfig()):
        super().__init__()
        self.cfg = cfg
        ch = cfg.dog_channels
        self.img_cnn = nn.Sequential(
            nn.Conv2d(3, ch, 3, padding=1, padding_mode="replicate"), nn.ReLU(),
            nn.Conv2d(ch, ch, 3, padding=1, padding_mode="replicate"))
        self.res_proj = nn.Conv2d(ch, cfg.dim, 3, padding=1, padding_mode="replicate")
        self.fuse = nn.Conv2d(cfg.dim, cfg.dim, 3, padding=1, padding_mode="replicate")

    def band_pass(self, images: torch.Tensor) -> torch.Tensor:
        _, _, h, w = images.shape
        p = self.cfg.patch
        g = self.img_cnn(images)
        # the low-pass leg runs in float64 so that constant inputs survive
        # the resize arithmetic and the residual is exactly zero
        low = F.interpolate(
            F.interpolate(g.to(torch.float64), size=(h // p, w // p),
                          mode="bilinear", align_corners=False),
            size=(h, w), mode="bilinear", align_corners=False).to(g.dtype)
        return g - low, g

    def forward(self, tokens: torch.Tensor, images: torch.Tensor):
        v, n, d = tokens.shape
        _, _, h, w = images.shape
        gh, gw = h // self.cfg.patch, w // self.cfg.patch
        if gh * gw != n:
            raise ConfigError(f"{n} tokens cannot tile a {gh}x{gw} grid")
        residual, g = self.band_pass(images)
        grid = tokens.transpose(1, 2).reshape(v, d, gh, gw)
        up = F.interpolate(grid, size=(h, w), mode="bilinear", align_corners=False)
        return self.fuse(up + self.res_proj(residual)), g


@dataclass
class PixelGaussians:
    """One Gaussian per pixel per view, before the voxel merge."""

    center: torch.Tensor      # (V, H, W, 3)
    opacity: torch.Tensor     # (V, H, W)
    rotation: torch.Tensor    # (V, H, W, 4), unit
    scale: torch.Tensor       # (V, H, W, 3), > 0
    sh: torch.Tensor          # (V, H, W, 3, C)
    depth: torch.Tensor       # (V, H, W)

    @property
    def views(self) -> int:
        return int(self.center.shape[0])

    def flatten(self) -> GaussianCloud:
        v, h, w, _ = self.center.shape
        c = self.sh.shape[-1]
        return GaussianCloud(
            center=self.center.reshape(-1, 3),
            opacity=self.opacity.reshape(-1),
            rotation=self.rotation.reshape(-1, 4),
            scale=self.scale.reshape(-1, 3),
            sh=self.sh.reshape(-1, 3, c))

    def attribute_maps(self) -> torch.Tensor:
        """(V, 8, H, W): opacity, log scale x3, SH DC x3, center depth."""
        return torch.cat([
            self.opacity.unsqueeze(1),
            torch.log(self.scale).permute(0, 3, 1, 2),
            self.sh[..., 0].permute(0, 3, 1, 2),
            self.depth.unsqueeze(1),
        ], dim=1)


def backproject_depth(camera_vecs: torch.Tensor, depth: torch.Tensor) -> torch.Tensor:
    """Lift per-view depth maps to world points; differentiable in both
    the depth and the (V, 9) camera vectors."""
    v, h, w = depth.shape
    dtype = depth.dtype
    ys = torch.arange(h, dtype=dtype)
    xs = torch.arange(w, dtype=dtype)
    gy, gx = torch.meshgrid(ys, xs, indexing="ij")
    out = []
    for i in range(v):
        cam = camera_vecs[i]
        focal, principal = cam[0], cam[7:9]
        rot = rotation_from_axis_angle(cam[1:4])
        dx = (gx - 0.5 * w - principal[0]) / focal
        dy = (gy - 0.5 * h - principal[1]) / focal
        pc = torch.stack([dx, dy, torch.ones_like(dx)], dim=-1) * depth[i].unsqueeze(-1)
        out.append((pc - cam[4:7]) @ rot)  # x @ R == R^T x
    return torch.stack(out)


class GaussianHead(nn.Module):
    """Decode per-pixel Gaussian attributes from fused features.

    Activations: sigmoid opacity, quaternion normalized after an identity
    offset on the raw w component, scale = floor + gain * softplus(raw)
    (resting value floor + gain*log 2 at zero output), raw SH coefficients.
    Centers are not predicted: they come from backprojected depth.
    """

    def __init__(self, cfg: ModelConfig = ModelConfig()):
        super().__init__()
        self.cfg = cfg
        n_coeff = (cfg.sh_degree + 1) ** 2
        self.out_channels = 1 + 4 + 3 + 3 * n_coeff
        self.net = nn.Sequential(
            nn.Conv2d(cfg.dim, 64, 3, padding=1, padding_mode="replicate"),
            nn.ReLU(),
            nn.Conv2d(64, 64, 3, padding=1, padding_mode="replicate"),
            nn.ReLU(),
            nn.Conv2d(64, self.out_channels, 1))

    def forward(self, geo_tokens: torch.Tensor, f_hr: torch.Tensor,
                depth: torch.Tensor, camera_vecs: torch.Tensor) -> PixelGaussians:
        v, _, h, w = f_hr.shape
        d = geo_tokens.shape[-1]
        gh, gw = h // self.cfg.patch, w // self.cfg.patch
        grid = geo_tokens.transpose(1, 2).reshape(v, d, gh, gw)
        up = F.interpolate(grid, size=(h, w), mode="bilinear", align_corners=False)
        raw = self.net(up + f_hr)

        opacity = torch.sigmoid(raw[:, 0])
        quat = raw[:, 1:5].permute(0, 2, 3, 1)
        quat = quat + torch.tensor([1.0, 0.0, 0.0, 0.0], dtype=quat.dtype)
        quat = quat / quat.norm(dim=-1, keepdim=True).clamp_min(1e-12)
        scale = self.cfg.scale_floor + self.cfg.scale_gain * F.softplus(
            raw[:, 5:8].permute(0, 2, 3, 1))
        n_coeff = (self.cfg.sh_degree + 1) ** 2
        sh = raw[:, 8:].reshape(v, 3, n_coeff, h, w).permute(0, 3, 4, 1, 2)
        center = backproject_depth(camera_vecs, depth)
        return PixelGaussians(center=center, opacity=opacity, rotation=quat,
                              scale=scale, sh=sh.contiguous(), depth=depth)


# ---------------------------------------------------------------------------
# voxel merge

def voxelize(cloud: GaussianCloud, epsilon: float) -> GaussianCloud:
    """Merge Gaussians sharing a voxel cell of side epsilon.

    Merge rules: opacity-weighted mean center, DC color averaged in the
    linear radiance domain (higher SH bands opacity-weighted arithmetic
    mean), max opacity, unweighted mean scale, opacity-weighted quaternion
    mean sign-aligned to the bucket's first member then renormalized.
    Buckets with a single member (and buckets whose members are bitwise
    identical) pass through untouched, so the operation is idempotent.
    Output is ordered by cell index; all reductions are torch index_add /
    gather ops, so the merge stays differentiable.
    """
    if epsilon <= 0 or not math.isfinite(epsilon):
        raise DomainError(f"voxel size must be finite and > 0, got {epsilon}")
    g = cloud.count
    if g == 0:
        return cloud
    cells = torch.floor(cloud.center.detach() / epsilon).to(torch.int64)
    _, inverse, counts = torch.unique(cells, dim=0, return_inverse=True,
                                      return_counts=True)
    b = int(counts.shape[0])
    if b == g:
        order = torch.argsort(inverse, stable=True)
        return cloud.select(order)

    device_kwargs = dict(dtype=cloud.center.dtype)
    idx = torch.arange(g)
    first = torch.full((b,), g, dtype=torch.int64)
    first = first.scatter_reduce(0, inverse, idx, reduce="amin", include_self=True)

    w = cloud.opacity
    wsum = torch.zeros(b, **device_kwargs).index_add(0, inverse, w)

    def weighted_mean(values, ref):
        delta = values - ref[inverse]
        acc = torch.zeros((b,) + values.shape[1:], **device_kwargs)
        acc = acc.index_add(0, inverse, delta * w.reshape(-1, *([1] * (values.ndim - 1))))
        return ref + acc / wsum.reshape(-1, *([1] * (values.ndim - 1)))

    ref_center = cloud.center[first]
    center = weighted_mean(cloud.center, ref_center)

    ref_scale = cloud.scale[first]
    dscale = torch.zeros(b, 3, **device_kwargs).index_add(
        0, inverse, cloud.scale - ref_scale[inverse])
    scale = ref_scale + dscale / counts.reshape(-1, 1).to(cloud.scale.dtype)

    # opacity: the bucket max, selected by index so gradients pass through
    omax = torch.zeros(b, **device_kwargs).scatter_reduce(
        0, inverse, w.detach(), reduce="amax", include_self=False)
    cand = torch.where(w.detach() == omax[inverse], idx, torch.full_like(idx, g))
    sel = torch.full((b,), g, dtype=torch.int64).scatter_reduce(
        0, inverse, cand, reduce="amin", include_self=True)
    opacity = w[sel]

    # rotation: sign-align to the first member, weighted mean, renormalize
    ref_q = cloud.rotation[first]
    dots = (cloud.rotation * ref_q[inverse]).sum(-1, keepdim=True)
    aligned = torch.where(dots < 0, -cloud.rotation, cloud.rotation)
    rotation = weighted_mean(aligned, ref_q)
    rotation = rotation / rotation.norm(dim=-1, keepdim=True).clamp_min(1e-12)

    # color: DC through the linear radiance domain, higher bands directly
    dc = cloud.sh[:, :, 0]
    linear = torch.exp(SH_C0 * dc)
    ref_lin = linear[first]
    merged_lin = weighted_mean(linear, ref_lin)
    merged_dc = torch.log(merged_lin.clamp_min(1e-30)) / SH_C0
    if cloud.sh.shape[2] > 1:
        rest = cloud.sh[:, :, 1:]
        merged_rest = weighted_mean(rest.reshape(g, -1),
                                    rest[first].reshape(b, -1))
        sh = torch.cat([merged_dc.unsqueeze(-1),
                        merged_rest.reshape(b, 3, -1)], dim=-1)
    else:
        sh = merged_dc.unsqueeze(-1)

    # pass buckets through untouched when merging could only echo the input
    same = ((cloud.center == ref_center[inverse]).all(-1)
            & (cloud.opacity == w[first][inverse])
            & (cloud.rotation == cloud.rotation[first][inverse]).all(-1)
            & (cloud.scale == ref_scale[inverse]).all(-1)
            & (cloud.sh == cloud.sh[first][inverse]).reshape(g, -1).all(-1))
    identical = torch.ones(b, dtype=torch.int64).scatter_reduce(
        0, inverse, same.to(torch.int64), reduce="amin", include_self=False)
    passthrough = (counts == 1) | identical.bool()

    pick = lambda merged, raw: torch.where(
        passthrough.reshape(-1, *([1] * (merged.ndim - 1))), raw[first], merged)
    return GaussianCloud(
        center=pick(center, cloud.center),
        opacity=torch.where(passthrough, cloud.opacity[first], opacity),
        rotation=pick(rotation, cloud.rotation),
        scale=pick(scale, cloud.scale),
        sh=pick(sh, cloud.sh),
    )
