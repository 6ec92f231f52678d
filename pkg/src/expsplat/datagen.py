"""Procedural multi-exposure datasets.

A scene is a set of HDR gaussians assembled from simple primitives: a dim
backdrop wall, a textured floor, diffuse spheres and boxes, and one or two
small emissive spheres whose radiance sits several decades above the
backdrop. The generator and the renderer share one forward model, so stored
HDR images are exact renders of the stored gaussians, and every LDR file is
the scene's response curve applied to its HDR at that exposure.

Cameras sit on a rows x cols angular grid on a sphere around the scene
center, all looking at the center, with small random principal-point
offsets standing in for imperfect calibration.

Generation is a pure function of (seed, config): constraints on dynamic
range, saturation at the shortest exposure, and underexposure at the
longest are checked on a rendered probe view and, when violated, repaired
by a deterministic radiance adjustment before the dataset is written.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from . import formats
from .configs import DataConfig, RenderConfig
from .core import (SH_C0, CameraParams, DataError, ExposureContext,
                   GaussianCloud, ImageBuffer, NumericalError)
from .render import render_gaussians
from .tonemap import CRF_PRESETS, reference_crf_apply

_UP = np.array([0.0, -1.0, 0.0])  # world up in the y-down convention


@dataclass
class ProceduralScene:
    seed: int
    crf: str
    gaussians: GaussianCloud
    target: np.ndarray
    #: index ranges of the emissive / darkest gaussians, for deterministic
    #: radiance repair when a rendered constraint fails
    emissive: slice
    darkest: slice

    def validate(self) -> "ProceduralScene":
        self.gaussians.validate()
        if self.crf not in CRF_PRESETS:
            raise DataError(f"unknown response curve {self.crf!r}")
        return self


def _log_color(rng, radiance_lo, radiance_hi, n, tint=0.35) -> np.ndarray:
    """(n, 3) log-radiance DC coefficients with mild channel tint."""
    base = np.exp(rng.uniform(math.log(radiance_lo), math.log(radiance_hi),
                              size=(n, 1)))
    chroma = np.exp(rng.uniform(-tint, tint, size=(n, 3)))
    return np.log(base * chroma) / SH_C0


def _fibonacci_sphere(n: int) -> np.ndarray:
    i = np.arange(n, dtype=np.float64)
    phi = math.pi * (3.0 - math.sqrt(5.0))
    y = 1.0 - 2.0 * (i + 0.5) / n
    r = np.sqrt(1.0 - y * y)
    return np.stack([r * np.cos(phi * i), y, r * np.sin(phi * i)], axis=1)


class _Builder:
    def __init__(self):
        self.center, self.opacity, self.scale, self.dc = [], [], [], []

    def add(self, centers, opacities, scales, dcs):
        self.center.append(np.asarray(centers, dtype=np.float64))
        self.opacity.append(np.asarray(opacities, dtype=np.float64))
        self.scale.append(np.asarray(scales, dtype=np.float64))
        self.dc.append(np.asarray(dcs, dtype=np.float64))

    @property
    def count(self) -> int:
        return sum(len(c) for c in self.center)

    def cloud(self) -> GaussianCloud:
        center = np.concatenate(self.center)
        n = len(center)
        rotation = np.zeros((n, 4))
        rotation[:, 0] = 1.0
        return GaussianCloud(
            center=torch.from_numpy(center.astype(np.float32)),
            opacity=torch.from_numpy(np.concatenate(self.opacity).astype(np.float32)),
            rotation=torch.from_numpy(rotation.astype(np.float32)),
            scale=torch.from_numpy(np.concatenate(self.scale).astype(np.float32)),
            sh=torch.from_numpy(np.concatenate(self.dc).astype(np.float32)[:, :, None]),
        )


def _backdrop(rng, b: _Builder):
    """Dim far wall: the scene's darkest structures live here."""
    n = 12
    xs = np.linspace(-2.6, 2.6, n)
    gx, gy = np.meshgrid(xs, xs, indexing="ij")
    centers = np.stack([gx.ravel(), gy.ravel(),
                        np.full(n * n, 1.45) + rng.uniform(-0.02, 0.02, n * n)],
                       axis=1)
    checker = (np.indices((n, n)).sum(axis=0).ravel() % 2).astype(np.float64)
    lum = np.where(checker > 0,
                   np.exp(rng.uniform(math.log(6e-5), math.log(4e-4), n * n)),
                   np.exp(rng.uniform(math.log(1.5e-5), math.log(5e-5), n * n)))
    dc = np.log(lum[:, None] * np.exp(rng.uniform(-0.2, 0.2, (n * n, 3)))) / SH_C0
    scales = np.full((n * n, 3), 0.26)
    scales[:, 2] = 0.02
    b.add(centers, np.full(n * n, 0.93), scales, dc)


def _floor(rng, b: _Builder):
    nx, nz = 9, 8
    xs = np.linspace(-1.15, 1.15, nx)
    zs = np.linspace(-0.7, 1.15, nz)
    gx, gz = np.meshgrid(xs, zs, indexing="ij")
    m = nx * nz
    centers = np.stack([gx.ravel(), np.full(m, 0.85), gz.ravel()], axis=1)
    checker = (np.indices((nx, nz)).sum(axis=0).ravel() % 2).astype(np.float64)
    lum = np.where(checker > 0, 0.32, 0.05) * np.exp(rng.uniform(-0.3, 0.3, m))
    dc = np.log(lum[:, None] * np.exp(rng.uniform(-0.25, 0.25, (m, 3)))) / SH_C0
    scales = np.full((m, 3), 0.14)
    scales[:, 1] = 0.02
    b.add(centers, np.full(m, 0.9), scales, dc)


def _diffuse_spheres(rng, b: _Builder):
    for _ in range(int(rng.integers(2, 5))):
        radius = rng.uniform(0.16, 0.3)
        at = np.array([rng.uniform(-0.6, 0.6), 0.85 - radius,
                       rng.uniform(-0.3, 0.6)])
        pts = at + radius * _fibonacci_sphere(42)
        dc = _log_color(rng, 0.08, 1.2, 1).repeat(42, axis=0)
        dc += rng.uniform(-0.25, 0.25, dc.shape) / SH_C0
        b.add(pts, rng.uniform(0.88, 0.96, 42),
              np.full((42, 3), radius * 0.33), dc)


def _boxes(rng, b: _Builder):
    for _ in range(int(rng.integers(1, 3))):
        half = rng.uniform(0.1, 0.22, size=3)
        at = np.array([rng.uniform(-0.55, 0.55), 0.85 - half[1],
                       rng.uniform(-0.25, 0.55)])
        pts = []
        for axis in range(3):
            for sign in (-1.0, 1.0):
                u = np.linspace(-1, 1, 3)
                gu, gv = np.meshgrid(u, u, indexing="ij")
                face = np.zeros((9, 3))
                others = [a for a in range(3) if a != axis]
                face[:, axis] = sign
                face[:, others[0]] = gu.ravel()
                face[:, others[1]] = gv.ravel()
                pts.append(face)
        pts = at + np.concatenate(pts) * half
        m = len(pts)
        dc = _log_color(rng, 0.06, 0.9, 1).repeat(m, axis=0)
        dc += rng.uniform(-0.2, 0.2, dc.shape) / SH_C0
        b.add(pts, rng.uniform(0.88, 0.95, m),
              np.full((m, 3), float(half.mean()) * 0.3), dc)


def _emissive(rng, b: _Builder) -> int:
    added = 0
    for _ in range(int(rng.integers(1, 3))):
        radius = rng.uniform(0.07, 0.12)
        at = np.array([rng.uniform(-0.55, 0.55), rng.uniform(-0.35, 0.15),
                       rng.uniform(-0.2, 0.5)])
        pts = at + radius * _fibonacci_sphere(26)
        dc = _log_color(rng, 80.0, 350.0, 1, tint=0.15).repeat(26, axis=0)
        b.add(pts, np.full(26, 0.97), np.full((26, 3), radius * 0.45), dc)
        added += 26
    return added


def generate_scene(seed: int, cfg: DataConfig = DataConfig()) -> ProceduralScene:
    rng = np.random.default_rng(seed)
    crf = cfg.crf
    if crf == "random":
        crf = sorted(CRF_PRESETS)[int(rng.integers(len(CRF_PRESETS)))]

    b = _Builder()
    _backdrop(rng, b)
    dark_count = b.count
    _floor(rng, b)
    _diffuse_spheres(rng, b)
    _boxes(rng, b)
    before_emissive = b.count
    n_emissive = _emissive(rng, b)

    scene = ProceduralScene(
        seed=seed, crf=crf, gaussians=b.cloud(),
        target=np.zeros(3),
        emissive=slice(before_emissive, before_emissive + n_emissive),
        darkest=slice(0, dark_count)).validate()
    if not (cfg.gaussians_min <= scene.gaussians.count <= cfg.gaussians_max):
        raise NumericalError(
            f"generated {scene.gaussians.count} gaussians, configured bounds "
            f"[{cfg.gaussians_min}, {cfg.gaussians_max}]")
    return _enforce_constraints(scene, cfg)


def grid_cameras(cfg: DataConfig, seed: int,
                 target=np.zeros(3)) -> list[CameraParams]:
    """rows x cols look-at cameras on a sphere, row-major order."""
    rng = np.random.default_rng(seed + 7919)
    focal = cfg.focal_scale * cfg.image_size
    rows, cols = cfg.grid_rows, cfg.grid_cols
    els = (np.arange(rows) - (rows - 1) / 2) * math.radians(cfg.elevation_step_deg)
    azs = (np.arange(cols) - (cols - 1) / 2) * math.radians(cfg.azimuth_step_deg)
    cams = []
    for el in els:
        for az in azs:
            eye = target + cfg.camera_radius * np.array([
                math.sin(az) * math.cos(el),
                -math.sin(el),
                -math.cos(az) * math.cos(el)])
            cams.append(CameraParams.look_at(
                eye, target, focal=focal, up=_UP,
                principal_offset=rng.uniform(-1.5, 1.5, size=2)))
    return cams


def render_view(gaussians: GaussianCloud, camera: CameraParams, size: int,
                cfg: RenderConfig = RenderConfig()):
    """One HDR/depth/alpha render at f32, gradients off."""
    with torch.no_grad():
        hdr, depth, alpha, _ = render_gaussians(
            gaussians, camera, (size, size), background=(0.0, 0.0, 0.0),
            cfg=cfg)
    return (hdr.numpy().astype(np.float32), depth.numpy().astype(np.float32),
            alpha.numpy().astype(np.float32))


def _probe_camera(cfg: DataConfig, seed: int) -> CameraParams:
    cams = grid_cameras(cfg, seed)
    return cams[len(cams) // 2]


def _shift_dc(cloud: GaussianCloud, rows: slice, factor: float) -> None:
    """Multiply linear radiance of a gaussian range by `factor` in place."""
    with torch.no_grad():
        cloud.sh[rows, :, 0] += math.log(factor) / SH_C0


def _enforce_constraints(scene: ProceduralScene,
                         cfg: DataConfig) -> ProceduralScene:
    """Probe-render the center view and repair radiance until the bracket
    constraints hold: dynamic range, saturation, underexposure."""
    crf = CRF_PRESETS[scene.crf]
    camera = _probe_camera(cfg, scene.seed)
    t_short, t_long = min(cfg.exposures), max(cfg.exposures)
    for _ in range(4):
        hdr, _, _ = render_view(scene.gaussians, camera, cfg.image_size)
        nonzero = hdr[hdr > 0]
        dyn = float(nonzero.max() / nonzero.min()) if nonzero.size else 0.0
        short = crf.apply(hdr.astype(np.float64) * t_short)
        long = crf.apply(hdr.astype(np.float64) * t_long)
        ok_range = dyn >= cfg.min_dynamic_range
        ok_sat = float(short.max()) >= 0.95
        ok_dark = float(long.max(axis=2).min()) <= 0.05
        if ok_range and ok_sat and ok_dark:
            return scene
        if not (ok_range and ok_sat):
            _shift_dc(scene.gaussians, scene.emissive, 8.0)
        if not ok_dark:
            _shift_dc(scene.gaussians, scene.darkest, 1.0 / 8.0)
    raise NumericalError(
        f"scene {scene.seed}: could not satisfy dynamic-range/exposure "
        f"constraints (range {dyn:.3g}, sat {short.max():.3g}, "
        f"dark {long.max(axis=2).min():.3g})")


def render_dataset(scene: ProceduralScene, cfg: DataConfig, out_dir) -> Path:
    """Write view_<v>/{hdr.pfm, depth.pfm, ldr_<e>.png} and manifest.json."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    crf = CRF_PRESETS[scene.crf]
    cameras = grid_cameras(cfg, scene.seed)
    views = []
    for v, camera in enumerate(cameras):
        vdir = out / f"view_{v}"
        vdir.mkdir(exist_ok=True)
        hdr, depth, _ = render_view(scene.gaussians, camera, cfg.image_size)
        formats.write_pfm(vdir / "hdr.pfm", hdr)
        formats.write_pfm(vdir / "depth.pfm", depth)
        ldr_names = []
        buffer = ImageBuffer(hdr, "hdr")
        for e, dt in enumerate(cfg.exposures):
            ldr = reference_crf_apply(crf, buffer, dt)
            formats.write_png(vdir / f"ldr_{e}.png", ldr.data)
            ldr_names.append(f"view_{v}/ldr_{e}.png")
        views.append(formats.ViewRecord(
            camera=camera, hdr=f"view_{v}/hdr.pfm",
            depth=f"view_{v}/depth.pfm", ldr=ldr_names))
    manifest = formats.SceneManifest(
        scene_id=f"scene_{scene.seed:06d}",
        image_size=(cfg.image_size, cfg.image_size),
        crf=scene.crf, exposures=list(cfg.exposures), views=views, root=out)
    path = out / "manifest.json"
    formats.save_manifest(path, manifest)
    return path


# ---------------------------------------------------------------------------
# training-side dataset access

@dataclass
class TrainingScene:
    """All images of one scene loaded as tensors.

    ldr: (V, E, 3, H, W) in [0, 1]; hdr: (V, H, W, 3); depth: (V, H, W).
    """
    manifest: formats.SceneManifest
    ldr: torch.Tensor
    hdr: torch.Tensor
    depth: torch.Tensor
    cameras: list[CameraParams]
    exposures: tuple[float, ...]

    @property
    def n_views(self) -> int:
        return self.ldr.shape[0]


def load_training_scene(manifest_path) -> TrainingScene:
    m = formats.load_manifest(manifest_path)
    ldr, hdr, depth = [], [], []
    for view in m.views:
        hdr.append(formats.read_pfm(m.path(view.hdr)))
        depth.append(formats.read_pfm(m.path(view.depth)))
        ldr.append(np.stack([
            formats.read_png(m.path(rel)).transpose(2, 0, 1)
            for rel in view.ldr]))
    return TrainingScene(
        manifest=m,
        ldr=torch.from_numpy(np.stack(ldr)),
        hdr=torch.from_numpy(np.stack(hdr)),
        depth=torch.from_numpy(np.stack(depth)),
        cameras=[v.camera for v in m.views],
        exposures=tuple(m.exposures))
