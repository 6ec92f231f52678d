"""Learned tone mapping and reference camera response curves.

The learned mapper is a tiny per-pixel MLP applied in log-radiance space:

    L = sigmoid(W2 @ relu(W1 @ x + b1) + b2),
    x = log(H) + (ell - ell_bar) * log 2

where H is linear radiance, ell the view's log2 exposure time and ell_bar
the bracket anchor. Because exposure enters only through the additive shift
of x, scaling H by 2^k and shifting ell by k are exactly interchangeable:
g(H, ell_bar + k) == g(2^k H, ell_bar). The backward pass is written out by
hand so the mapper does not depend on autograd when embedded in other
pipelines; autograd-driven use goes through the same Function.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from .core import DomainError, ImageBuffer

LOG2 = math.log(2.0)
#: radiance floor inside the log; gradients are zeroed below it
RADIANCE_EPS = 1e-8


@dataclass
class TonemapParams:
    """Weights of the two-layer mapper, hidden width h: W1 (h,3), b1 (h,),
    W2 (3,h), b2 (3,). Flat layout is [W1, b1, W2, b2], 7h + 3 values."""

    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray

    def __post_init__(self):
        self.w1 = np.asarray(self.w1, dtype=np.float64)
        self.b1 = np.asarray(self.b1, dtype=np.float64)
        self.w2 = np.asarray(self.w2, dtype=np.float64)
        self.b2 = np.asarray(self.b2, dtype=np.float64)
        h = self.w1.shape[0]
        if self.w1.shape != (h, 3) or self.b1.shape != (h,) \
                or self.w2.shape != (3, h) or self.b2.shape != (3,):
            raise DomainError("inconsistent tonemap parameter shapes")
        for a in (self.w1, self.b1, self.w2, self.b2):
            if not np.all(np.isfinite(a)):
                raise DomainError("tonemap parameters must be finite")

    @property
    def hidden(self) -> int:
        return self.w1.shape[0]

    @staticmethod
    def flat_size(hidden: int) -> int:
        return 7 * hidden + 3

    def to_flat(self) -> np.ndarray:
        return np.concatenate([self.w1.ravel(), self.b1,
                               self.w2.ravel(), self.b2])

    @classmethod
    def from_flat(cls, theta, hidden: int) -> "TonemapParams":
        theta = np.asarray(theta, dtype=np.float64).ravel()
        if theta.size != cls.flat_size(hidden):
            raise DomainError(
                f"theta length {theta.size} != {cls.flat_size(hidden)} for h={hidden}")
        h = hidden
        w1 = theta[:3 * h].reshape(h, 3)
        b1 = theta[3 * h:4 * h]
        w2 = theta[4 * h:7 * h].reshape(3, h)
        b2 = theta[7 * h:]
        return cls(w1, b1, w2, b2)

    @classmethod
    def zeros(cls, hidden: int) -> "TonemapParams":
        return cls.from_flat(np.zeros(cls.flat_size(hidden)), hidden)

    @classmethod
    def identity_basis(cls, hidden: int, lo: float = -9.0, hi: float = 4.0) -> "TonemapParams":
        """Per-channel hinge basis over log radiance in [lo, hi].

        Hidden units are split evenly across the three channels; unit j of a
        channel computes relu(x_c - knot_j). W2 and b2 start at zero so the
        initial output is sigmoid(0) = 0.5 everywhere and fitting a monotone
        response curve is initially a linear problem in W2, b2.
        """
        w1 = np.zeros((hidden, 3))
        b1 = np.zeros(hidden)
        counts = [hidden // 3 + (1 if c < hidden % 3 else 0) for c in range(3)]
        j = 0
        for c, n in enumerate(counts):
            knots = np.linspace(lo, hi, n) if n > 1 else np.array([0.5 * (lo + hi)])
            for k in knots:
                w1[j, c] = 1.0
                b1[j] = -k
                j += 1
        return cls(w1, b1, np.zeros((3, hidden)), np.zeros(3))

    def tensors(self, dtype: torch.dtype = torch.float32) -> tuple[torch.Tensor, ...]:
        return (torch.tensor(self.w1, dtype=dtype),
                torch.tensor(self.b1, dtype=dtype),
                torch.tensor(self.w2, dtype=dtype),
                torch.tensor(self.b2, dtype=dtype))


class _TonemapFunction(torch.autograd.Function):
    """Pixelwise two-layer MLP in shifted log space, hand-written backward."""

    @staticmethod
    def forward(ctx, hdr, w1, b1, w2, b2, ell, anchor):
        x = torch.log(hdr.clamp_min(RADIANCE_EPS)) + (ell - anchor) * LOG2
        pre1 = x @ w1.T + b1
        hid = torch.relu(pre1)
        out = torch.sigmoid(hid @ w2.T + b2)
        ctx.save_for_backward(hdr, x, pre1, hid, out, w1, w2, ell)
        return out

    @staticmethod
    def backward(ctx, grad_out):
        hdr, x, pre1, hid, out, w1, w2, ell = ctx.saved_tensors
        flat = lambda t, c: t.reshape(-1, c)
        go = flat(grad_out * out * (1.0 - out), 3)
        d_b2 = go.sum(0)
        d_w2 = go.T @ flat(hid, w1.shape[0])
        d_hid = (go @ w2) * (flat(pre1, w1.shape[0]) > 0)
        d_b1 = d_hid.sum(0)
        d_w1 = d_hid.T @ flat(x, 3)
        d_x = d_hid @ w1
        # log clamps below RADIANCE_EPS, so those pixels get zero gradient
        live = flat(hdr, 3) > RADIANCE_EPS
        d_hdr = torch.where(live, d_x / flat(hdr, 3).clamp_min(RADIANCE_EPS),
                            torch.zeros_like(d_x)).reshape(hdr.shape)
        d_ell = (d_x.sum() * LOG2).reshape(ell.shape)
        return d_hdr, d_w1, d_b1, d_w2, d_b2, d_ell, None


def tonemap_apply(hdr: torch.Tensor, w1, b1, w2, b2, ell, anchor: float) -> torch.Tensor:
    """Differentiable tone mapping of an (..., 3) radiance tensor."""
    if hdr.shape[-1] != 3:
        raise DomainError(f"tonemap expects (..., 3) radiance, got {tuple(hdr.shape)}")
    if not torch.is_tensor(ell):
        ell = torch.tensor(float(ell), dtype=hdr.dtype)
    return _TonemapFunction.apply(hdr, w1, b1, w2, b2, ell, float(anchor))


def tonemap_forward(hdr: ImageBuffer, params: TonemapParams, ell: float,
                    anchor: float) -> ImageBuffer:
    """Map an HDR buffer to LDR at log-exposure ell under bracket anchor."""
    if hdr.kind != "hdr":
        raise DomainError(f"tonemap_forward expects an hdr buffer, got {hdr.kind!r}")
    if hdr.channels != 3:
        raise DomainError("tonemap_forward expects 3 channels")
    with torch.no_grad():
        out = tonemap_apply(hdr.tensor(torch.float64),
                            *params.tensors(torch.float64), ell, anchor)
    return ImageBuffer(out.numpy().astype(np.float32), "ldr")


@dataclass
class TonemapGradients:
    d_hdr: np.ndarray
    d_w1: np.ndarray
    d_b1: np.ndarray
    d_w2: np.ndarray
    d_b2: np.ndarray
    d_ell: float


def tonemap_backward(hdr: ImageBuffer, params: TonemapParams, ell: float,
                     anchor: float, grad_ldr: np.ndarray) -> TonemapGradients:
    """Gradients of sum(grad_ldr * ldr) w.r.t. radiance, weights, exposure."""
    inputs = [hdr.tensor(torch.float64).requires_grad_(True)]
    inputs += [t.requires_grad_(True) for t in params.tensors(torch.float64)]
    ell_t = torch.tensor(float(ell), dtype=torch.float64, requires_grad=True)
    out = _TonemapFunction.apply(*inputs, ell_t, float(anchor))
    out.backward(torch.tensor(np.asarray(grad_ldr, dtype=np.float64)))
    grads = [t.grad.numpy() for t in inputs]
    return TonemapGradients(*grads, d_ell=float(ell_t.grad))


# ---------------------------------------------------------------------------
# reference response curves for synthetic captures

@dataclass(frozen=True)
class ReferenceCrf:
    """Analytic monotone response curve mapping exposure E = H * dt to [0, 1].

    standard: min(E, 1)^(1/gamma), the usual gamma law.
    filmic / agx: sigmoid(slope * (log2 E - center))^power, two presets with
    different contrast and toe; both map 0 to 0 and saturate below 1.
    """

    kind: str
    gamma: float = 2.2
    slope: float = 1.0
    center: float = 0.0
    power: float = 1.0

    def __post_init__(self):
        if self.kind not in ("standard", "filmic", "agx"):
            raise DomainError(f"unknown response curve {self.kind!r}")

    def apply(self, irradiance: np.ndarray) -> np.ndarray:
        e = np.asarray(irradiance, dtype=np.float64)
        if np.any(e < 0) or not np.all(np.isfinite(e)):
            raise DomainError("response curve input must be finite and >= 0")
        if self.kind == "standard":
            return np.clip(e, 0.0, 1.0) ** (1.0 / self.gamma)
        with np.errstate(divide="ignore"):
            logs = np.where(e > 0.0, np.log2(np.maximum(e, 1e-300)), -np.inf)
        z = self.slope * (logs - self.center)
        sig = np.where(e > 0.0, 1.0 / (1.0 + np.exp(-np.clip(z, -500, 500))), 0.0)
        return sig ** self.power

    def params(self) -> dict:
        if self.kind == "standard":
            return {"gamma": self.gamma}
        return {"slope": self.slope, "center": self.center, "power": self.power}


CRF_PRESETS = {
    "standard": ReferenceCrf("standard", gamma=2.2),
    "filmic": ReferenceCrf("filmic", slope=0.9, center=-2.2, power=1.25),
    "agx": ReferenceCrf("agx", slope=0.55, center=-2.8, power=1.0),
}


def reference_crf_apply(crf: ReferenceCrf, hdr: ImageBuffer, delta_t: float) -> ImageBuffer:
    """Simulate an LDR capture of an HDR buffer at exposure time delta_t."""
    if hdr.kind != "hdr":
        raise DomainError(f"expected an hdr buffer, got {hdr.kind!r}")
    if delta_t <= 0 or not math.isfinite(delta_t):
        raise DomainError(f"exposure time must be finite and > 0, got {delta_t}")
    return ImageBuffer(crf.apply(hdr.data * delta_t).astype(np.float32), "ldr")


# ---------------------------------------------------------------------------
# mu-law compression for HDR-space metrics

MU_LAW_MU = 5000.0


def mu_law(hdr: np.ndarray, normalizer: float, mu: float = MU_LAW_MU) -> np.ndarray:
    """log(1 + mu x) / log(1 + mu) on radiance normalized to [0, 1]."""
    if normalizer <= 0 or not math.isfinite(normalizer):
        raise DomainError(f"mu-law normalizer must be finite and > 0, got {normalizer}")
    x = np.clip(np.asarray(hdr, dtype=np.float64) / normalizer, 0.0, 1.0)
    return np.log1p(mu * x) / math.log1p(mu)


def mu_law_normalizer(hdr: np.ndarray) -> float:
    """99th percentile of radiance, taken as the max over channels."""
    a = np.asarray(hdr, dtype=np.float64)
    if a.ndim == 2:
        a = a[:, :, None]
    per_channel = [float(np.percentile(a[..., c], 99.0)) for c in range(a.shape[-1])]
    return max(per_channel)
