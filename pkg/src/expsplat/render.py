"""Differentiable splat rendering.

prepare_splats projects a Gaussian cloud through a camera into screen-space
splats (2D mean, 2D covariance, depth, linear color, opacity) entirely in
torch, so gradients w.r.t. every Gaussian attribute and the 9-DoF camera
come from autograd. rasterize feeds the prepared splats through the tile
compositing kernels, whose analytic backward is wired in via a custom
autograd Function.

Linear color is exp of the evaluated log-radiance SH, so rendered radiance
is positive by construction.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from . import _composite
from .configs import RenderConfig
from .core import (CameraParams, DomainError, GaussianCloud, ImageBuffer,
                   NumericalError)

# real SH basis constants for degrees 0..3
_C0 = 0.28209479177387814
_C1 = 0.4886025119029199
_C2 = (1.0925484305920792, -1.0925484305920792, 0.31539156525252005,
       -1.0925484305920792, 0.5462742152960396)
_C3 = (-0.5900435899266435, 2.890611442640554, -0.4570457994644658,
       0.3731763325901154, -0.4570457994644658, 1.445305721320277,
       -0.5900435899266435)


def camera_tensor(camera: CameraParams, dtype: torch.dtype = torch.float32) -> torch.Tensor:
    """(9,) tensor [focal, axis-angle(3), translation(3), principal(2)]."""
    return torch.tensor(camera.to_vector(), dtype=dtype)


def rotation_from_axis_angle(w: torch.Tensor) -> torch.Tensor:
    """Differentiable Rodrigues map, smooth through the identity.

    Goes through the quaternion (cos(t/2), sinc(t/2) w / 2); torch.sinc
    keeps the zero-angle limit exact and NaN-free.
    """
    theta2 = (w * w).sum(-1)
    theta = torch.sqrt(theta2.clamp_min(1e-30))
    half = 0.5 * theta
    qw = torch.cos(half)
    # sin(t/2)/(t/2) = sinc(t / (2 pi)); exact 1 at t = 0
    s = torch.sinc(theta / (2.0 * math.pi))
    small = theta2 < 1e-24
    qxyz = torch.where(small, 0.5 * w, (0.5 * s) * w)
    q = torch.cat([qw.reshape(1), qxyz.reshape(3)])
    return quaternion_to_matrix(q.unsqueeze(0)).squeeze(0)


def quaternion_to_matrix(q: torch.Tensor) -> torch.Tensor:
    """(N,4) unit quaternions (w,x,y,z) to (N,3,3) rotation matrices."""
    w, x, y, z = q.unbind(-1)
    two = 2.0
    m = torch.stack([
        1 - two * (y * y + z * z), two * (x * y - w * z), two * (x * z + w * y),
        two * (x * y + w * z), 1 - two * (x * x + z * z), two * (y * z - w * x),
        two * (x * z - w * y), two * (y * z + w * x), 1 - two * (x * x + y * y),
    ], dim=-1)
    return m.reshape(q.shape[:-1] + (3, 3))


def eval_sh(sh: torch.Tensor, dirs: torch.Tensor) -> torch.Tensor:
    """Evaluate per-channel SH coefficients (G,3,C) along unit dirs (G,3)."""
    n = sh.shape[2]
    basis = [torch.full_like(dirs[:, 0], _C0)]
    if n > 1:
        x, y, z = dirs.unbind(-1)
        basis += [-_C1 * y, _C1 * z, -_C1 * x]
    if n > 4:
        xx, yy, zz = x * x, y * y, z * z
        xy, yz, xz = x * y, y * z, x * z
        basis += [_C2[0] * xy, _C2[1] * yz, _C2[2] * (2 * zz - xx - yy),
                  _C2[3] * xz, _C2[4] * (xx - yy)]
    if n > 9:
        basis += [_C3[0] * y * (3 * xx - yy), _C3[1] * xy * z,
                  _C3[2] * y * (4 * zz - xx - yy),
                  _C3[3] * z * (2 * zz - 3 * xx - 3 * yy),
                  _C3[4] * x * (4 * zz - xx - yy),
                  _C3[5] * z * (xx - yy), _C3[6] * x * (xx - 3 * yy)]
    b = torch.stack(basis, dim=-1)  # (G, C)
    return torch.einsum("gcj,gj->gc", sh, b)


@dataclass
class SplatBatch:
    """Screen-space splats produced by prepare_splats. cov2d rows are the
    symmetric (xx, xy, yy) entries after low-pass regularization."""

    mean2d: torch.Tensor
    cov2d: torch.Tensor
    depth: torch.Tensor
    color: torch.Tensor
    opacity: torch.Tensor
    culled: int = 0

    @property
    def count(self) -> int:
        return int(self.mean2d.shape[0])


def prepare_splats(gaussians: GaussianCloud, camera, image_size,
                   cfg: RenderConfig = RenderConfig()) -> SplatBatch:
    """Project a cloud into screen space and cull what cannot contribute.

    camera may be a CameraParams or a (9,) tensor (the latter keeps the
    pose in the autograd graph). Culled: behind-camera splats and splats
    whose cull_sigmas-radius footprint misses the image entirely.
    """
    width, height = int(image_size[0]), int(image_size[1])
    if not torch.is_tensor(camera):
        camera = camera_tensor(camera, dtype=gaussians.center.dtype)
    focal = camera[0]
    rot_wc = rotation_from_axis_angle(camera[1:4])
    trans = camera[4:7]
    principal = camera[7:9]

    pc = gaussians.center @ rot_wc.T + trans
    z = pc[:, 2]
    in_front = z > cfg.near
    # clamp keeps the graph NaN-free for culled rows; they are dropped below
    zs = z.clamp_min(cfg.near)
    cx = 0.5 * width + principal[0]
    cy = 0.5 * height + principal[1]
    px = focal * pc[:, 0] / zs + cx
    py = focal * pc[:, 1] / zs + cy
    mean2d = torch.stack([px, py], dim=-1)

    quat = gaussians.rotation / gaussians.rotation.norm(dim=-1, keepdim=True)
    rot_g = quaternion_to_matrix(quat)
    m = rot_g * gaussians.scale.unsqueeze(1)
    cov3d = m @ m.transpose(1, 2)
    cov_cam = rot_wc @ cov3d @ rot_wc.T

    fz = focal / zs
    fz2 = focal / (zs * zs)
    zeros = torch.zeros_like(z)
    jac = torch.stack([
        torch.stack([fz, zeros, -fz2 * pc[:, 0]], dim=-1),
        torch.stack([zeros, fz, -fz2 * pc[:, 1]], dim=-1),
    ], dim=1)  # (G, 2, 3)
    cov2d = jac @ cov_cam @ jac.transpose(1, 2)
    cov2d = torch.stack([cov2d[:, 0, 0] + cfg.lowpass,
                         cov2d[:, 0, 1],
                         cov2d[:, 1, 1] + cfg.lowpass], dim=-1)

    cam_center = -(rot_wc.T @ trans)
    offs = gaussians.center - cam_center
    dirs = offs / offs.norm(dim=-1, keepdim=True).clamp_min(1e-12)
    color = torch.exp(eval_sh(gaussians.sh, dirs))

    radius = _footprint_radius(cov2d.detach(), cfg.cull_sigmas)
    on_screen = ((mean2d[:, 0].detach() + radius >= 0)
                 & (mean2d[:, 0].detach() - radius <= width - 1)
                 & (mean2d[:, 1].detach() + radius >= 0)
                 & (mean2d[:, 1].detach() - radius <= height - 1))
    keep = in_front & on_screen
    culled = int((~keep).sum())
    idx = torch.nonzero(keep, as_tuple=False).squeeze(-1)
    return SplatBatch(mean2d[idx], cov2d[idx], z[idx], color[idx],
                      gaussians.opacity[idx], culled=culled)


def _footprint_radius(cov2d: torch.Tensor, sigmas: float) -> torch.Tensor:
    mid = 0.5 * (cov2d[:, 0] + cov2d[:, 2])
    det = cov2d[:, 0] * cov2d[:, 2] - cov2d[:, 1] ** 2
    lam_max = mid + torch.sqrt((mid * mid - det).clamp_min(0.0))
    return torch.ceil(sigmas * torch.sqrt(lam_max.clamp_min(0.0)))


class _TileBins:
    """Depth-sorted (tile, splat) pairs plus per-tile ranges.

    Order inside a tile is (depth, splat index): front to back, ties broken
    by index so the composite is reproducible.
    """

    __slots__ = ("point_list", "tile_ranges", "n_tiles_x", "n_tiles_y")

    def __init__(self, mean2d: np.ndarray, radius: np.ndarray, depth: np.ndarray,
                 width: int, height: int, tile_size: int):
        ntx = (width + tile_size - 1) // tile_size
        nty = (height + tile_size - 1) // tile_size
        self.n_tiles_x = ntx
        self.n_tiles_y = nty
        tx0 = np.clip(np.floor((mean2d[:, 0] - radius) / tile_size), 0, ntx).astype(np.int64)
        tx1 = np.clip(np.floor((mean2d[:, 0] + radius) / tile_size) + 1, 0, ntx).astype(np.int64)
        ty0 = np.clip(np.floor((mean2d[:, 1] - radius) / tile_size), 0, nty).astype(np.int64)
        ty1 = np.clip(np.floor((mean2d[:, 1] + radius) / tile_size) + 1, 0, nty).astype(np.int64)
        w = np.maximum(tx1 - tx0, 0)
        h = np.maximum(ty1 - ty0, 0)
        counts = w * h
        offsets = np.concatenate([[0], np.cumsum(counts)])
        total = int(offsets[-1])
        if total == 0:
            self.point_list = np.zeros(0, dtype=np.int64)
            self.tile_ranges = np.zeros((ntx * nty, 2), dtype=np.int64)
            return
        splat = np.repeat(np.arange(len(counts)), counts)
        local = np.arange(total) - offsets[splat]
        lx = local % np.maximum(w[splat], 1)
        ly = local // np.maximum(w[splat], 1)
        tile = (ty0[splat] + ly) * ntx + (tx0[splat] + lx)
        order = np.lexsort((splat, depth[splat], tile))
        self.point_list = splat[order]
        sorted_tiles = tile[order]
        grid = np.arange(ntx * nty)
        starts = np.searchsorted(sorted_tiles, grid, side="left")
        ends = np.searchsorted(sorted_tiles, grid, side="right")
        self.tile_ranges = np.stack([starts, ends], axis=-1).astype(np.int64)


class _CompositeFunction(torch.autograd.Function):
    @staticmethod
    def forward(ctx, mean2d, conic, depth, color, opacity, background, bins,
                width, height, cfg):
        npdtype = np.float64 if mean2d.dtype == torch.float64 else np.float32
        arr = lambda t: np.ascontiguousarray(t.detach().numpy(), dtype=npdtype)
        out_color = np.zeros((height, width, 3), dtype=npdtype)
        out_depth = np.zeros((height, width), dtype=npdtype)
        out_trans = np.ones((height, width), dtype=npdtype)
        out_count = np.zeros((height, width), dtype=np.int64)
        _composite.composite_forward(
            bins.point_list, bins.tile_ranges, bins.n_tiles_x, cfg.tile_size,
            width, height, arr(mean2d), arr(conic), arr(depth), arr(color),
            arr(opacity), arr(background), cfg.alpha_clamp,
            cfg.transmittance_floor, out_color, out_depth, out_trans, out_count)
        ctx.save_for_backward(mean2d, conic, depth, color, opacity, background)
        ctx.bins = bins
        ctx.meta = (width, height, cfg)
        ctx.out_trans = out_trans
        ctx.out_count = out_count
        t = lambda a: torch.from_numpy(a).to(mean2d.dtype)
        return t(out_color), t(out_depth), t(1.0 - out_trans)

    @staticmethod
    def backward(ctx, grad_color, grad_depth, grad_alpha):
        mean2d, conic, depth, color, opacity, background = ctx.saved_tensors
        width, height, cfg = ctx.meta
        bins = ctx.bins
        npdtype = np.float64 if mean2d.dtype == torch.float64 else np.float32
        arr = lambda t: np.ascontiguousarray(t.detach().numpy(), dtype=npdtype)
        zeros_img = lambda: np.zeros((height, width), dtype=npdtype)
        g_color = (arr(grad_color) if grad_color is not None
                   else np.zeros((height, width, 3), dtype=npdtype))
        g_depth = arr(grad_depth) if grad_depth is not None else zeros_img()
        g_alpha = arr(grad_alpha) if grad_alpha is not None else zeros_img()
        n = mean2d.shape[0]
        d_mean = np.zeros((n, 2), dtype=npdtype)
        d_conic = np.zeros((n, 3), dtype=npdtype)
        d_depth = np.zeros(n, dtype=npdtype)
        d_color = np.zeros((n, 3), dtype=npdtype)
        d_opacity = np.zeros(n, dtype=npdtype)
        _composite.composite_backward(
            bins.point_list, bins.tile_ranges, bins.n_tiles_x, cfg.tile_size,
            width, height, arr(mean2d), arr(conic), arr(depth), arr(color),
            arr(opacity), arr(background), cfg.alpha_clamp,
            cfg.transmittance_floor, ctx.out_trans, ctx.out_count,
            g_color, g_depth, g_alpha,
            d_mean, d_conic, d_depth, d_color, d_opacity)
        t = lambda a: torch.from_numpy(a).to(mean2d.dtype)
        # background is lit by the final transmittance at every pixel
        trans = torch.from_numpy(ctx.out_trans).to(mean2d.dtype)
        gc = grad_color if grad_color is not None else torch.zeros(
            height, width, 3, dtype=mean2d.dtype)
        d_background = (gc * trans.unsqueeze(-1)).sum(dim=(0, 1))
        return (t(d_mean), t(d_conic), t(d_depth), t(d_color), t(d_opacity),
                d_background, None, None, None, None)


def composite_splats(splats: SplatBatch, image_size, background: torch.Tensor,
                     cfg: RenderConfig = RenderConfig()):
    """Tensor-level rasterization: (hdr, depth, alpha) with full autograd."""
    width, height = int(image_size[0]), int(image_size[1])
    if width < 1 or height < 1:
        raise DomainError(f"bad image size {image_size!r}")
    a = splats.cov2d[:, 0]
    b = splats.cov2d[:, 1]
    c = splats.cov2d[:, 2]
    det = a * c - b * b
    good = torch.isfinite(det) & (det > 0) & (a > 0) & (c > 0)
    skipped = int((~good).sum())
    if skipped:
        idx = torch.nonzero(good, as_tuple=False).squeeze(-1)
        splats = SplatBatch(splats.mean2d[idx], splats.cov2d[idx],
                            splats.depth[idx], splats.color[idx],
                            splats.opacity[idx], culled=splats.culled)
        a, b, c = splats.cov2d.unbind(-1)
        det = a * c - b * b
    conic = torch.stack([c / det, -b / det, a / det], dim=-1)
    radius = _footprint_radius(splats.cov2d.detach(), cfg.cull_sigmas)
    bins = _TileBins(splats.mean2d.detach().numpy(), radius.numpy(),
                     splats.depth.detach().numpy(), width, height, cfg.tile_size)
    hdr, depth, alpha = _CompositeFunction.apply(
        splats.mean2d, conic, splats.depth, splats.color, splats.opacity,
        background, bins, width, height, cfg)
    return hdr, depth, alpha, skipped


@dataclass
class RenderOutput:
    hdr: ImageBuffer
    depth: ImageBuffer
    alpha: ImageBuffer
    #: splats dropped for a non-positive-definite footprint
    skipped: int = 0


def rasterize(splats: SplatBatch, image_size, background,
              cfg: RenderConfig = RenderConfig()) -> RenderOutput:
    """Composite prepared splats into HDR radiance, depth, and alpha buffers."""
    bg = torch.as_tensor(background, dtype=splats.mean2d.dtype).reshape(3)
    with torch.no_grad():
        hdr, depth, alpha, skipped = composite_splats(splats, image_size, bg, cfg)
    if not torch.isfinite(hdr).all():
        raise NumericalError("non-finite radiance out of the compositor")
    return RenderOutput(
        hdr=ImageBuffer(hdr.numpy().astype(np.float32), "hdr"),
        depth=ImageBuffer(depth.numpy().astype(np.float32), "depth"),
        alpha=ImageBuffer(alpha.numpy().astype(np.float32), "confidence"),
        skipped=skipped)


@dataclass
class SplatGradients:
    mean2d: np.ndarray
    cov2d: np.ndarray
    depth: np.ndarray
    color: np.ndarray
    opacity: np.ndarray
    background: np.ndarray


def rasterize_backward(splats: SplatBatch, image_size, background,
                       grad_hdr, grad_depth=None, grad_alpha=None,
                       cfg: RenderConfig = RenderConfig()) -> SplatGradients:
    """Adjoints of the composite w.r.t. every splat field and the background.

    grad_* are arrays shaped like the corresponding rasterize outputs; the
    return packs dL/d(splat fields) for L = sum(grad_hdr * hdr)
    + sum(grad_depth * depth) + sum(grad_alpha * alpha).
    """
    dtype = splats.mean2d.dtype
    fields = [splats.mean2d, splats.cov2d, splats.depth, splats.color, splats.opacity]
    leaves = [f.detach().clone().requires_grad_(True) for f in fields]
    bg = torch.as_tensor(background, dtype=dtype).reshape(3).requires_grad_(True)
    batch = SplatBatch(*leaves, culled=splats.culled)
    hdr, depth, alpha, _ = composite_splats(batch, image_size, bg, cfg)
    total = (hdr * torch.as_tensor(grad_hdr, dtype=dtype)).sum()
    if grad_depth is not None:
        total = total + (depth * torch.as_tensor(grad_depth, dtype=dtype)).sum()
    if grad_alpha is not None:
        total = total + (alpha * torch.as_tensor(grad_alpha, dtype=dtype)).sum()
    total.backward()
    grab = lambda t: (t.grad if t.grad is not None else torch.zeros_like(t)).numpy()
    return SplatGradients(*(grab(t) for t in leaves), background=grab(bg))


def render_gaussians(gaussians: GaussianCloud, camera, image_size, background,
                     cfg: RenderConfig = RenderConfig()):
    """prepare_splats + composite in one differentiable call.

    Returns (hdr, depth, alpha, stats) tensors; camera may be a tensor to
    keep the pose in the graph.
    """
    splats = prepare_splats(gaussians, camera, image_size, cfg)
    bg = torch.as_tensor(background, dtype=gaussians.center.dtype).reshape(3)
    hdr, depth, alpha, skipped = composite_splats(splats, image_size, bg, cfg)
    return hdr, depth, alpha, {"culled": splats.culled, "skipped": skipped}
