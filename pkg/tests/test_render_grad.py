"""Finite-difference checks of the rendering gradients.

The compositing backward is hand-derived inside the kernel; the projection
chain backward comes from autograd. Both are probed here in float64 with
central differences (h = 1e-4) against randomly weighted scalar losses.
"""
import numpy as np
import pytest
import torch

import oracles
from conftest import random_camera, random_cloud
from expsplat.configs import RenderConfig
from expsplat.core import GaussianCloud
from expsplat.render import (camera_tensor, composite_splats, prepare_splats,
                             rasterize_backward, render_gaussians)

CFG = RenderConfig(tile_size=8)


def loss_weights(rng, width, height):
    return (rng.uniform(-1, 1, size=(height, width, 3)),
            rng.uniform(-1, 1, size=(height, width)),
            rng.uniform(-1, 1, size=(height, width)))


def splat_leaves(rng, count=8, width=12, height=12):
    """Random prepared splats as leaf tensors (keeps FD independent of the
    projection chain)."""
    mean2d = rng.uniform(1, width - 2, size=(count, 2))
    depths = rng.uniform(1.0, 4.0, size=count)
    # random SPD conics via random footprints
    sx = rng.uniform(0.8, 3.0, size=count)
    sy = rng.uniform(0.8, 3.0, size=count)
    rho = rng.uniform(-0.6, 0.6, size=count)
    cov = np.stack([sx * sx, rho * sx * sy, sy * sy], axis=-1)
    colors = rng.uniform(0.05, 3.0, size=(count, 3))
    opac = rng.uniform(0.1, 0.9, size=count)
    return mean2d, cov, depths, colors, opac


@pytest.mark.parametrize("seed", range(8))
def test_composite_gradients_match_fd(seed):
    rng = np.random.default_rng(1000 + seed)
    width = height = 12
    mean2d, cov, depths, colors, opac = splat_leaves(rng)
    bg = rng.uniform(0, 0.5, size=3)
    gw_c, gw_d, gw_a = loss_weights(rng, width, height)

    arrays = [mean2d, cov, depths, colors, opac, bg]

    def run(with_grad=False):
        ts = [torch.tensor(a, dtype=torch.float64, requires_grad=with_grad)
              for a in arrays]
        from expsplat.render import SplatBatch
        batch = SplatBatch(ts[0], ts[1], ts[2], ts[3], ts[4])
        hdr, dep, alp, _ = composite_splats(batch, (width, height), ts[5], CFG)
        loss = ((hdr * torch.tensor(gw_c)).sum()
                + (dep * torch.tensor(gw_d)).sum()
                + (alp * torch.tensor(gw_a)).sum())
        return loss, ts

    loss, ts = run(with_grad=True)
    loss.backward()
    analytic = [t.grad.numpy() for t in ts]
    oracles.fd_check(lambda: float(run()[0]), arrays, analytic,
                     h=1e-4, rel_tol=1e-3, max_coords=14,
                     rng=np.random.default_rng(seed))


@pytest.mark.parametrize("seed", range(6))
def test_full_chain_gradients_match_fd(seed):
    """Gradients through prepare_splats: every gaussian field + camera pose."""
    rng = np.random.default_rng(2000 + seed)
    width = height = 10
    cloud_np = {
        "center": rng.uniform(-0.5, 0.5, size=(6, 3)) + [0, 0, 2.5],
        "opacity": rng.uniform(0.15, 0.85, size=6),
        "rotation": rng.normal(size=(6, 4)),
        "scale": np.exp(rng.uniform(-3.0, -1.5, size=(6, 3))),
        "sh": rng.uniform(-1.0, 2.0, size=(6, 3, 1)),
    }
    cloud_np["rotation"] /= np.linalg.norm(cloud_np["rotation"], axis=1, keepdims=True)
    cam_vec = random_camera(rng, focal=22.0).to_vector()
    bg = rng.uniform(0, 0.3, size=3)
    gw_c, gw_d, gw_a = loss_weights(rng, width, height)

    names = ["center", "opacity", "rotation", "scale", "sh"]
    arrays = [cloud_np[n] for n in names] + [cam_vec]

    def run(with_grad=False):
        ts = [torch.tensor(a, dtype=torch.float64, requires_grad=with_grad)
              for a in arrays]
        cloud = GaussianCloud(*ts[:5])
        hdr, dep, alp, _ = render_gaussians(cloud, ts[5], (width, height), bg, CFG)
        loss = ((hdr * torch.tensor(gw_c)).sum()
                + (dep * torch.tensor(gw_d)).sum()
                + (alp * torch.tensor(gw_a)).sum())
        return loss, ts

    loss, ts = run(with_grad=True)
    loss.backward()
    analytic = [t.grad.numpy() if t.grad is not None else np.zeros_like(a)
                for t, a in zip(ts, arrays)]
    oracles.fd_check(lambda: float(run()[0]), arrays, analytic,
                     h=1e-4, rel_tol=1e-3, max_coords=10,
                     rng=np.random.default_rng(seed))


def test_rasterize_backward_agrees_with_autograd():
    rng = np.random.default_rng(5)
    cloud = random_cloud(rng, 20)
    cam = random_camera(rng)
    splats = prepare_splats(cloud, cam, (16, 16), CFG)
    gw_c, gw_d, gw_a = loss_weights(rng, 16, 16)
    grads = rasterize_backward(splats, (16, 16), [0.1, 0.1, 0.1],
                               gw_c, gw_d, gw_a, CFG)

    fields = [splats.mean2d, splats.cov2d, splats.depth, splats.color, splats.opacity]
    leaves = [f.detach().clone().requires_grad_(True) for f in fields]
    from expsplat.render import SplatBatch
    bg = torch.tensor([0.1, 0.1, 0.1], dtype=torch.float64, requires_grad=True)
    hdr, dep, alp, _ = composite_splats(SplatBatch(*leaves), (16, 16), bg, CFG)
    loss = ((hdr * torch.tensor(gw_c)).sum() + (dep * torch.tensor(gw_d)).sum()
            + (alp * torch.tensor(gw_a)).sum())
    loss.backward()
    for got, leaf in zip([grads.mean2d, grads.cov2d, grads.depth,
                          grads.color, grads.opacity], leaves):
        assert np.allclose(got, leaf.grad.numpy(), rtol=1e-12, atol=1e-12)
    assert np.allclose(grads.background, bg.grad.numpy(), rtol=1e-12)


def test_background_gradient_is_residual_transmittance():
    # with no splats, d(sum hdr)/d(bg_c) is exactly the pixel count
    from expsplat.render import SplatBatch
    empty = SplatBatch(
        mean2d=torch.zeros((0, 2), dtype=torch.float64),
        cov2d=torch.zeros((0, 3), dtype=torch.float64),
        depth=torch.zeros(0, dtype=torch.float64),
        color=torch.zeros((0, 3), dtype=torch.float64),
        opacity=torch.zeros(0, dtype=torch.float64))
    bg = torch.tensor([0.3, 0.4, 0.5], dtype=torch.float64, requires_grad=True)
    hdr, _, _, _ = composite_splats(empty, (9, 7), bg, CFG)
    hdr.sum().backward()
    assert np.allclose(bg.grad.numpy(), [63.0, 63.0, 63.0])


def test_gradient_flows_to_occluded_splats():
    # a nearly opaque front splat still lets gradient reach the one behind
    rng = np.random.default_rng(8)
    mean2d = np.array([[6.0, 6.0], [6.0, 6.0]])
    cov = np.array([[4.0, 0.0, 4.0], [4.0, 0.0, 4.0]])
    depths = np.array([1.0, 3.0])
    colors = np.array([[1.0, 1.0, 1.0], [2.0, 2.0, 2.0]])
    opac = np.array([0.95, 0.9])
    ts = [torch.tensor(a, dtype=torch.float64, requires_grad=True)
          for a in (mean2d, cov, depths, colors, opac)]
    from expsplat.render import SplatBatch
    hdr, _, _, _ = composite_splats(SplatBatch(*ts), (12, 12),
                                    torch.zeros(3, dtype=torch.float64), CFG)
    hdr.sum().backward()
    assert abs(float(ts[3].grad[1].sum())) > 1e-4
