import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from conftest import random_camera, random_cloud
from expsplat.configs import RenderConfig
from expsplat.core import CameraParams, GaussianCloud, HdrGaussian, SH_C0
from expsplat.render import (SplatBatch, composite_splats, prepare_splats,
                             rasterize, render_gaussians)


def splat_arrays(splats):
    a, b, c = splats.cov2d.unbind(-1)
    det = a * c - b * b
    conic = torch.stack([c / det, -b / det, a / det], dim=-1)
    return (splats.mean2d.numpy(), conic.numpy(), splats.depth.numpy(),
            splats.color.numpy(), splats.opacity.numpy())


def test_prepare_splats_isotropic_example():
    g = HdrGaussian([0, 0, 2], 0.8, [1, 0, 0, 0], [0.05] * 3,
                    np.log(np.array([[2.0], [1.0], [0.5]])) / SH_C0)
    cloud = GaussianCloud.from_gaussians([g], dtype=torch.float64)
    cam = CameraParams(focal=100.0, rotation=np.zeros(3), translation=np.zeros(3))
    splats = prepare_splats(cloud, cam, (64, 64))
    expected = (100.0 * 0.05 / 2.0) ** 2 + 0.3
    assert np.allclose(splats.mean2d.numpy(), [[32.0, 32.0]])
    assert np.allclose(splats.cov2d.numpy(), [[expected, 0.0, expected]])
    assert np.allclose(splats.color.numpy(), [[2.0, 1.0, 0.5]], rtol=1e-12)
    assert splats.culled == 0


def test_prepare_splats_culls_behind_and_offscreen():
    gs = [
        HdrGaussian([0, 0, -3], 0.5, [1, 0, 0, 0], [0.05] * 3, np.zeros((3, 1))),
        HdrGaussian([50, 0, 2], 0.5, [1, 0, 0, 0], [0.05] * 3, np.zeros((3, 1))),
        HdrGaussian([0, 0, 2], 0.5, [1, 0, 0, 0], [0.05] * 3, np.zeros((3, 1))),
    ]
    cloud = GaussianCloud.from_gaussians(gs, dtype=torch.float64)
    cam = CameraParams(focal=100.0, rotation=np.zeros(3), translation=np.zeros(3))
    splats = prepare_splats(cloud, cam, (64, 64))
    assert splats.count == 1
    assert splats.culled == 2


def test_projection_chain_matches_scalar_oracle():
    rng = np.random.default_rng(7)
    for _ in range(30):
        cloud = random_cloud(rng, 1)
        cam = random_camera(rng)
        splats = prepare_splats(cloud, cam, (48, 40))
        ref = oracles.project_splat_dense(
            cloud.center[0].numpy(), float(cloud.opacity[0]),
            cloud.rotation[0].numpy(), cloud.scale[0].numpy(),
            cloud.sh[0, :, 0].numpy(), cam.to_vector(), 48, 40)
        if splats.count == 0:
            continue
        mean2d, conic, depth, color = ref
        assert np.allclose(splats.mean2d[0].numpy(), mean2d, rtol=1e-10)
        assert np.allclose(splats.depth[0].numpy(), depth, rtol=1e-10)
        assert np.allclose(splats.color[0].numpy(), color, rtol=1e-10)


def test_single_splat_alpha_peak():
    # one splat centered on a pixel: alpha there is exactly the opacity
    g = HdrGaussian([0, 0, 2], 0.8, [1, 0, 0, 0], [0.05] * 3, np.zeros((3, 1)))
    cloud = GaussianCloud.from_gaussians([g], dtype=torch.float64)
    cam = CameraParams(focal=100.0, rotation=np.zeros(3), translation=np.zeros(3))
    out = rasterize(prepare_splats(cloud, cam, (64, 64)), (64, 64), [0, 0, 0])
    assert np.isclose(out.alpha.data[32, 32, 0], 0.8, atol=1e-7)
    # depth is alpha-weighted and unnormalized
    assert np.isclose(out.depth.data[32, 32, 0], 0.8 * 2.0, rtol=1e-6)


def test_two_splat_order_and_occlusion():
    # front splat at z=1 with opacity 0.99 nearly hides the back one
    mk = lambda z, dc: HdrGaussian([0, 0, z], 0.99, [1, 0, 0, 0], [0.3] * 3,
                                   np.full((3, 1), dc))
    cloud = GaussianCloud.from_gaussians([mk(1.0, 0.0), mk(4.0, 5.0)],
                                         dtype=torch.float64)
    cam = CameraParams(focal=100.0, rotation=np.zeros(3), translation=np.zeros(3))
    out = rasterize(prepare_splats(cloud, cam, (32, 32)), (32, 32), [0, 0, 0])
    center = out.hdr.data[16, 16, 0]
    # both splats are centered, alpha 0.99 each: front contributes 0.99 c1,
    # the occluded back one only 0.01 * 0.99 c2
    expected = 0.99 * 1.0 + 0.01 * 0.99 * math.exp(SH_C0 * 5.0)
    swapped = 0.99 * math.exp(SH_C0 * 5.0) + 0.01 * 0.99 * 1.0
    assert abs(center - expected) < 1e-4
    assert abs(center - swapped) > 1.0


@pytest.mark.parametrize("seed", range(6))
def test_tile_rasterizer_matches_dense_oracle(seed):
    rng = np.random.default_rng(100 + seed)
    cloud = random_cloud(rng, 64)
    cam = random_camera(rng)
    cfg = RenderConfig(tile_size=8)
    splats = prepare_splats(cloud, cam, (16, 16), cfg)
    bg = rng.uniform(0, 0.3, size=3)
    out = rasterize(splats, (16, 16), bg, cfg)
    ref_c, ref_d, ref_a = oracles.composite_dense(
        *splat_arrays(splats), bg, 16, 16,
        alpha_clamp=cfg.alpha_clamp, t_floor=cfg.transmittance_floor)
    assert np.max(np.abs(out.hdr.data - ref_c)) < 1e-6
    assert np.max(np.abs(out.depth.data[:, :, 0] - ref_d)) < 1e-6
    assert np.max(np.abs(out.alpha.data[:, :, 0] - ref_a)) < 1e-6


def test_heavy_overlap_early_stop_matches_oracle():
    # many near-opaque splats stacked on one spot exercises the T floor
    rng = np.random.default_rng(500)
    gs = []
    for i in range(40):
        gs.append(HdrGaussian(
            center=[rng.normal(scale=0.02), rng.normal(scale=0.02), 2.0 + 0.05 * i],
            opacity=0.97, rotation=[1, 0, 0, 0], scale=[0.08] * 3,
            sh_color=rng.normal(size=(3, 1))))
    cloud = GaussianCloud.from_gaussians(gs, dtype=torch.float64)
    cam = CameraParams(focal=60.0, rotation=np.zeros(3), translation=np.zeros(3))
    cfg = RenderConfig(tile_size=8)
    splats = prepare_splats(cloud, cam, (16, 16), cfg)
    out = rasterize(splats, (16, 16), [0.1, 0.2, 0.3], cfg)
    ref_c, ref_d, ref_a = oracles.composite_dense(
        *splat_arrays(splats), [0.1, 0.2, 0.3], 16, 16)
    assert np.max(np.abs(out.hdr.data - ref_c)) < 1e-6
    assert np.max(np.abs(out.alpha.data[:, :, 0] - ref_a)) < 1e-6


def test_duplicate_depth_ties_break_by_index():
    # identical depths: compositing order must follow gaussian index
    mk = lambda dc: HdrGaussian([0, 0, 2], 0.9, [1, 0, 0, 0], [0.2] * 3,
                                np.full((3, 1), dc))
    cloud = GaussianCloud.from_gaussians([mk(0.0), mk(3.0)], dtype=torch.float64)
    cam = CameraParams(focal=60.0, rotation=np.zeros(3), translation=np.zeros(3))
    splats = prepare_splats(cloud, cam, (16, 16))
    out = rasterize(splats, (16, 16), [0, 0, 0])
    ref_c, _, _ = oracles.composite_dense(*splat_arrays(splats), [0, 0, 0], 16, 16)
    assert np.max(np.abs(out.hdr.data - ref_c)) < 1e-6
    # lower index composites first: 0.9 c1 + 0.1 * 0.9 c2, not the reverse
    c2 = math.exp(SH_C0 * 3.0)
    expected = 0.9 * 1.0 + 0.1 * 0.9 * c2
    swapped = 0.9 * c2 + 0.1 * 0.9 * 1.0
    assert abs(out.hdr.data[8, 8, 0] - expected) < 1e-4
    assert abs(out.hdr.data[8, 8, 0] - swapped) > 0.5


def test_empty_pixels_show_background():
    g = HdrGaussian([0, 0, 2], 0.9, [1, 0, 0, 0], [0.01] * 3, np.zeros((3, 1)))
    cloud = GaussianCloud.from_gaussians([g], dtype=torch.float64)
    cam = CameraParams(focal=100.0, rotation=np.zeros(3), translation=np.zeros(3))
    out = rasterize(prepare_splats(cloud, cam, (64, 64)), (64, 64), [0.2, 0.4, 0.6])
    corner = out.hdr.data[0, 0]
    assert np.allclose(corner, [0.2, 0.4, 0.6], atol=1e-7)
    assert out.alpha.data[0, 0, 0] < 1e-7
    assert out.depth.data[0, 0, 0] == 0.0


def test_alpha_in_unit_interval_and_depth_nonnegative():
    rng = np.random.default_rng(9)
    for _ in range(5):
        cloud = random_cloud(rng, 120)
        cam = random_camera(rng)
        out = rasterize(prepare_splats(cloud, cam, (24, 24)), (24, 24), [0, 0, 0])
        assert out.alpha.data.min() >= 0.0
        assert out.alpha.data.max() <= 1.0
        assert out.depth.data.min() >= 0.0
        assert np.all(np.isfinite(out.hdr.data))


@given(st.integers(0, 10 ** 6))
@settings(max_examples=12, deadline=None)
def test_rendered_radiance_nonnegative(seed):
    rng = np.random.default_rng(seed)
    cloud = random_cloud(rng, 32)
    cam = random_camera(rng)
    out = rasterize(prepare_splats(cloud, cam, (12, 12)), (12, 12), [0, 0, 0])
    assert out.hdr.data.min() >= 0.0


def test_tile_size_invariance():
    # the same scene through different tilings is the same image
    rng = np.random.default_rng(77)
    cloud = random_cloud(rng, 90)
    cam = random_camera(rng)
    outs = []
    for ts in (8, 16, 32):
        cfg = RenderConfig(tile_size=ts)
        splats = prepare_splats(cloud, cam, (33, 29), cfg)
        outs.append(rasterize(splats, (33, 29), [0.1, 0.1, 0.1], cfg).hdr.data)
    assert np.max(np.abs(outs[0] - outs[1])) < 1e-6
    assert np.max(np.abs(outs[1] - outs[2])) < 1e-6


def test_render_determinism_bitwise():
    rng = np.random.default_rng(123)
    cloud = random_cloud(rng, 80, dtype=torch.float32)
    cam = random_camera(rng)
    a = rasterize(prepare_splats(cloud, cam, (32, 32)), (32, 32), [0, 0, 0])
    b = rasterize(prepare_splats(cloud, cam, (32, 32)), (32, 32), [0, 0, 0])
    assert np.array_equal(a.hdr.data, b.hdr.data)
    assert np.array_equal(a.depth.data, b.depth.data)


def test_degenerate_cov2d_skipped():
    splats = SplatBatch(
        mean2d=torch.tensor([[8.0, 8.0], [8.0, 8.0]], dtype=torch.float64),
        cov2d=torch.tensor([[1.0, 0.0, 1.0], [1.0, 1.0, 1.0]], dtype=torch.float64),
        depth=torch.tensor([1.0, 1.0], dtype=torch.float64),
        color=torch.ones(2, 3, dtype=torch.float64),
        opacity=torch.tensor([0.5, 0.5], dtype=torch.float64))
    hdr, depth, alpha, skipped = composite_splats(
        splats, (16, 16), torch.zeros(3, dtype=torch.float64))
    assert skipped == 1
    assert torch.isfinite(hdr).all()
    assert abs(float(alpha[8, 8]) - 0.5) < 1e-12
