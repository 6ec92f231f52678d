import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from expsplat.core import DomainError, ImageBuffer
from expsplat.tonemap import (CRF_PRESETS, MU_LAW_MU, ReferenceCrf,
                              TonemapParams, mu_law, mu_law_normalizer,
                              reference_crf_apply, tonemap_apply,
                              tonemap_backward, tonemap_forward)


def random_params(rng, hidden=6):
    return TonemapParams(
        w1=rng.normal(scale=0.7, size=(hidden, 3)),
        b1=rng.normal(scale=0.7, size=hidden),
        w2=rng.normal(scale=0.7, size=(3, hidden)),
        b2=rng.normal(scale=0.3, size=3))


def random_hdr(rng, h=5, w=4):
    return ImageBuffer(np.exp(rng.uniform(-4, 4, size=(h, w, 3))).astype(np.float32),
                       "hdr")


def test_flat_round_trip_and_sizes():
    rng = np.random.default_rng(0)
    p = random_params(rng, hidden=9)
    assert p.to_flat().size == TonemapParams.flat_size(9) == 7 * 9 + 3
    q = TonemapParams.from_flat(p.to_flat(), 9)
    assert np.array_equal(p.w1, q.w1) and np.array_equal(p.b2, q.b2)
    with pytest.raises(DomainError):
        TonemapParams.from_flat(np.zeros(10), 9)


def test_zero_params_give_half():
    p = TonemapParams.zeros(8)
    hdr = random_hdr(np.random.default_rng(1))
    out = tonemap_forward(hdr, p, ell=2.0, anchor=0.5)
    assert np.allclose(out.data, 0.5, atol=1e-7)
    # identity basis also starts at 0.5: the second layer is zero
    p2 = TonemapParams.identity_basis(8)
    out2 = tonemap_forward(hdr, p2, ell=-1.0, anchor=0.5)
    assert np.allclose(out2.data, 0.5, atol=1e-7)


@pytest.mark.parametrize("seed", range(5))
def test_matches_scalar_oracle(seed):
    rng = np.random.default_rng(40 + seed)
    p = random_params(rng)
    hdr = random_hdr(rng)
    ell = rng.uniform(-4, 4)
    anchor = rng.uniform(-2, 2)
    out = tonemap_forward(hdr, p, ell, anchor)
    ref = oracles.tonemap_scalar(hdr.data, p.w1, p.b1, p.w2, p.b2, ell, anchor)
    assert np.max(np.abs(out.data - ref)) < 1e-6


@pytest.mark.parametrize("seed", range(6))
def test_exposure_shift_identity(seed):
    """g(H, anchor + k) == g(2^k H, anchor) exactly, by construction."""
    rng = np.random.default_rng(80 + seed)
    p = random_params(rng)
    hdr = random_hdr(rng, 6, 6)
    anchor = rng.uniform(-2, 2)
    k = rng.uniform(-5, 5)
    shifted_ell = tonemap_forward(hdr, p, anchor + k, anchor)
    scaled = ImageBuffer(hdr.data * np.float32(2.0 ** k), "hdr")
    scaled_h = tonemap_forward(scaled, p, anchor, anchor)
    assert np.max(np.abs(shifted_ell.data.astype(np.float64)
                         - scaled_h.data.astype(np.float64))) < 1e-6


def test_output_range_is_unit_interval():
    rng = np.random.default_rng(3)
    for _ in range(10):
        p = random_params(rng)
        out = tonemap_forward(random_hdr(rng), p, rng.uniform(-6, 6), 0.0)
        # sigmoid keeps (0, 1) in exact math; float32 may saturate the ends
        assert out.data.min() >= 0.0 and out.data.max() <= 1.0
        assert out.kind == "ldr"


@pytest.mark.parametrize("seed", range(8))
def test_gradients_match_fd(seed):
    rng = np.random.default_rng(300 + seed)
    hidden = 5
    p = random_params(rng, hidden)
    hdr = np.exp(rng.uniform(-3, 3, size=(4, 3, 3)))
    ell = np.array([rng.uniform(-3, 3)])
    anchor = 0.25
    gw = rng.uniform(-1, 1, size=(4, 3, 3))

    arrays = [hdr, p.w1, p.b1, p.w2, p.b2, ell]

    def run():
        ts = [torch.tensor(a, dtype=torch.float64, requires_grad=True)
              for a in arrays]
        out = tonemap_apply(ts[0], ts[1], ts[2], ts[3], ts[4],
                            ts[5].reshape(()), anchor)
        return (out * torch.tensor(gw)).sum(), ts

    loss, ts = run()
    loss.backward()
    analytic = [t.grad.numpy().reshape(a.shape) for t, a in zip(ts, arrays)]
    oracles.fd_check(lambda: float(run()[0]), arrays, analytic,
                     h=1e-4, rel_tol=1e-3, max_coords=20,
                     rng=np.random.default_rng(seed))


def test_backward_api_matches_autograd_path():
    rng = np.random.default_rng(9)
    p = random_params(rng)
    hdr = random_hdr(rng)
    gw = rng.uniform(-1, 1, size=hdr.data.shape)
    g = tonemap_backward(hdr, p, ell=1.5, anchor=0.5, grad_ldr=gw)
    # recompute with plain autograd over the same Function
    t = hdr.tensor(torch.float64).requires_grad_(True)
    w = [x.requires_grad_(True) for x in p.tensors(torch.float64)]
    ell = torch.tensor(1.5, dtype=torch.float64, requires_grad=True)
    out = tonemap_apply(t, *w, ell, 0.5)
    (out * torch.tensor(gw)).sum().backward()
    assert np.allclose(g.d_hdr, t.grad.numpy())
    assert np.allclose(g.d_w1, w[0].grad.numpy())
    assert np.isclose(g.d_ell, float(ell.grad))


def test_gradient_zero_below_radiance_floor():
    p = random_params(np.random.default_rng(2))
    hdr = ImageBuffer(np.full((2, 2, 3), 1e-12, dtype=np.float32), "hdr")
    g = tonemap_backward(hdr, p, 0.0, 0.0, np.ones((2, 2, 3)))
    assert np.all(g.d_hdr == 0.0)


# ---------------------------------------------------------------------------
# reference response curves

def test_standard_crf_examples():
    crf = CRF_PRESETS["standard"]
    hdr = ImageBuffer(np.array([[[0.5, 4.0, 0.0]]]), "hdr")
    out = reference_crf_apply(crf, hdr, delta_t=0.5)
    # E = (0.25, 2.0, 0.0) -> (0.25^(1/2.2), 1, 0)
    assert abs(out.data[0, 0, 0] - 0.25 ** (1 / 2.2)) < 1e-6
    assert out.data[0, 0, 1] == 1.0
    assert out.data[0, 0, 2] == 0.0


@pytest.mark.parametrize("kind", ["standard", "filmic", "agx"])
def test_crf_monotone_zero_and_bounded(kind):
    crf = CRF_PRESETS[kind]
    e = np.concatenate([[0.0], np.logspace(-6, 6, 200)])
    out = crf.apply(e)
    assert out[0] == 0.0
    assert np.all(np.diff(out) >= 0)
    assert np.all((out >= 0) & (out <= 1))
    assert out[-1] > 0.9  # saturates toward 1


def test_crf_presets_are_distinct():
    e = np.logspace(-3, 2, 40)
    s = CRF_PRESETS["standard"].apply(e)
    f = CRF_PRESETS["filmic"].apply(e)
    a = CRF_PRESETS["agx"].apply(e)
    assert np.max(np.abs(s - f)) > 0.05
    assert np.max(np.abs(s - a)) > 0.05
    assert np.max(np.abs(f - a)) > 0.05


def test_crf_rejects_bad_input():
    with pytest.raises(DomainError):
        CRF_PRESETS["standard"].apply(np.array([-0.1]))
    with pytest.raises(DomainError):
        ReferenceCrf("gamma22")
    hdr = ImageBuffer(np.ones((2, 2, 3)), "hdr")
    with pytest.raises(DomainError):
        reference_crf_apply(CRF_PRESETS["standard"], hdr, delta_t=0.0)


# ---------------------------------------------------------------------------
# mu-law

def test_mu_law_endpoints():
    assert mu_law(np.array([0.0]), 1.0)[0] == 0.0
    assert abs(mu_law(np.array([1.0]), 1.0)[0] - 1.0) < 1e-12
    mid = mu_law(np.array([0.5]), 1.0)[0]
    assert abs(mid - math.log(1 + 0.5 * MU_LAW_MU) / math.log(1 + MU_LAW_MU)) < 1e-12
    # spec'd midpoint value log(2501)/log(5001)
    assert abs(mid - 0.91862) < 1e-4


@given(st.floats(0.0, 10.0), st.floats(0.0, 10.0))
@settings(max_examples=60)
def test_mu_law_monotone(a, b):
    fa, fb = mu_law(np.array([a]), 5.0)[0], mu_law(np.array([b]), 5.0)[0]
    if a <= b:
        assert fa <= fb
    assert 0.0 <= fa <= 1.0


def test_mu_law_normalizer_percentile():
    rng = np.random.default_rng(4)
    img = rng.uniform(0, 1, size=(50, 50, 3))
    img[:, :, 1] *= 3.0
    norm = mu_law_normalizer(img)
    assert abs(norm - np.percentile(img[:, :, 1], 99)) < 1e-12
    with pytest.raises(DomainError):
        mu_law(np.ones(3), 0.0)
