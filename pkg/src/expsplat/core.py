"""Core scene types and camera math.

Shared conventions used by every module:

* world and camera frames are right-handed; the camera looks down +z,
  image x runs right, image y runs down,
* a camera pose is (axis-angle rotation w, translation t) mapping world to
  camera coordinates, X_cam = R(w) @ X_world + t,
* pixel coordinates are continuous with the optical axis landing on the
  image center (W/2, H/2) plus the principal-point offset; the rasterizer
  samples pixel (ix, iy) at the continuous position (ix, iy),
* exposure is tracked in log2 seconds; the anchor of a bracket is the
  midpoint of the extreme log-exposures.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch


class DomainError(ValueError):
    """Input outside an operation's documented domain."""


class ConfigError(ValueError):
    """Inconsistent or unsupported configuration."""


class DataError(ValueError):
    """Malformed or mutually inconsistent on-disk data."""


class NumericalError(RuntimeError):
    """Numerical failure: NaN loss, divergence, empty scene after pruning."""


# ---------------------------------------------------------------------------
# exposure bookkeeping

def log_exposure(delta_t: float) -> float:
    """log2 of an exposure time in seconds."""
    if not math.isfinite(delta_t) or delta_t <= 0.0:
        raise DomainError(f"exposure time must be finite and > 0, got {delta_t!r}")
    return math.log2(delta_t)


def exposure_anchor(log_exposures: Sequence[float]) -> float:
    """Midpoint of the extreme log-exposures of a bracket."""
    vals = [float(v) for v in log_exposures]
    if not vals:
        raise DomainError("empty exposure bracket")
    if not all(math.isfinite(v) for v in vals):
        raise DomainError("log-exposures must be finite")
    return 0.5 * (max(vals) + min(vals))


@dataclass(frozen=True)
class ExposureContext:
    """A bracket of per-view log2 exposure times plus its anchor."""

    log_exposures: tuple[float, ...]
    anchor: float

    def __post_init__(self):
        expected = exposure_anchor(self.log_exposures)
        if self.anchor != expected:
            raise DomainError(
                f"anchor {self.anchor} is not the bracket midpoint {expected}")

    @classmethod
    def from_times(cls, delta_ts: Sequence[float]) -> "ExposureContext":
        ells = tuple(log_exposure(t) for t in delta_ts)
        return cls(ells, exposure_anchor(ells))

    @classmethod
    def from_log(cls, ells: Sequence[float]) -> "ExposureContext":
        ells = tuple(float(v) for v in ells)
        return cls(ells, exposure_anchor(ells))

    def relative(self) -> tuple[float, ...]:
        """Per-view offset from the anchor, ell_v - ell_bar."""
        return tuple(v - self.anchor for v in self.log_exposures)

    @property
    def times(self) -> tuple[float, ...]:
        """Exposure durations in seconds."""
        return tuple(2.0 ** v for v in self.log_exposures)

    def __len__(self) -> int:
        return len(self.log_exposures)


# ---------------------------------------------------------------------------
# rotations

def _skew(v: np.ndarray) -> np.ndarray:
    return np.array([
        [0.0, -v[2], v[1]],
        [v[2], 0.0, -v[0]],
        [-v[1], v[0], 0.0],
    ])


def axis_angle_to_matrix(w) -> np.ndarray:
    """Rodrigues' rotation formula; safe near the identity."""
    w = np.asarray(w, dtype=np.float64).reshape(3)
    theta = float(np.linalg.norm(w))
    if theta < 1e-12:
        return np.eye(3) + _skew(w)
    k = _skew(w / theta)
    return np.eye(3) + math.sin(theta) * k + (1.0 - math.cos(theta)) * (k @ k)


def matrix_to_axis_angle(r: np.ndarray) -> np.ndarray:
    """Log map of a rotation matrix. Inverse of axis_angle_to_matrix."""
    r = np.asarray(r, dtype=np.float64)
    cos_theta = max(-1.0, min(1.0, 0.5 * (np.trace(r) - 1.0)))
    theta = math.acos(cos_theta)
    if theta < 1e-8:
        return 0.5 * np.array([r[2, 1] - r[1, 2], r[0, 2] - r[2, 0], r[1, 0] - r[0, 1]])
    if theta > math.pi - 1e-6:
        # near pi the off-diagonal form degenerates; take axis from R + I
        m = 0.5 * (r + np.eye(3))
        axis = np.sqrt(np.maximum(np.diag(m), 0.0))
        # fix signs from the off-diagonal terms
        if m[0, 1] < 0:
            axis[1] = -axis[1]
        if m[0, 2] < 0:
            axis[2] = -axis[2]
        n = np.linalg.norm(axis)
        if n == 0.0:
            raise NumericalError("degenerate rotation matrix in log map")
        return theta * axis / n
    axis = np.array([r[2, 1] - r[1, 2], r[0, 2] - r[2, 0], r[1, 0] - r[0, 1]])
    return theta / (2.0 * math.sin(theta)) * axis


def quat_normalize(q) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64).reshape(4)
    n = float(np.linalg.norm(q))
    if n < 1e-12 or not math.isfinite(n):
        raise DomainError(f"cannot normalize near-zero quaternion {q!r}")
    return q / n


def quat_to_matrix(q) -> np.ndarray:
    """Rotation matrix from a unit quaternion in (w, x, y, z) order."""
    w, x, y, z = quat_normalize(q)
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


# ---------------------------------------------------------------------------
# cameras

def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=np.float64)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class CameraParams:
    """Pinhole camera: focal length in pixels, axis-angle world-to-camera
    rotation, translation, and a principal-point offset from the image
    center. 9 degrees of freedom in total."""

    focal: float
    rotation: np.ndarray
    translation: np.ndarray
    principal_offset: np.ndarray = field(default_factory=lambda: np.zeros(2))

    def __post_init__(self):
        object.__setattr__(self, "focal", float(self.focal))
        object.__setattr__(self, "rotation", _readonly(np.reshape(self.rotation, (3,))))
        object.__setattr__(self, "translation", _readonly(np.reshape(self.translation, (3,))))
        object.__setattr__(self, "principal_offset",
                           _readonly(np.reshape(self.principal_offset, (2,))))
        if not math.isfinite(self.focal) or self.focal <= 0.0:
            raise DomainError(f"focal must be finite and > 0, got {self.focal}")
        for name in ("rotation", "translation", "principal_offset"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise DomainError(f"camera {name} must be finite")

    def rotation_matrix(self) -> np.ndarray:
        return axis_angle_to_matrix(self.rotation)

    def center(self) -> np.ndarray:
        """Camera position in world coordinates, -R^T t."""
        return -self.rotation_matrix().T @ self.translation

    def to_vector(self) -> np.ndarray:
        return np.concatenate([[self.focal], self.rotation, self.translation,
                               self.principal_offset])

    @classmethod
    def from_vector(cls, v) -> "CameraParams":
        v = np.asarray(v, dtype=np.float64).reshape(9)
        return cls(focal=v[0], rotation=v[1:4], translation=v[4:7],
                   principal_offset=v[7:9])

    @classmethod
    def look_at(cls, eye, target, focal: float, up=(0.0, 1.0, 0.0),
                principal_offset=(0.0, 0.0)) -> "CameraParams":
        """Camera at `eye` looking toward `target`, world +y treated as up.

        The image y axis points down, so the camera y basis vector is the
        negated up direction after orthogonalization.
        """
        eye = np.asarray(eye, dtype=np.float64)
        target = np.asarray(target, dtype=np.float64)
        up = np.asarray(up, dtype=np.float64)
        fwd = target - eye
        n = np.linalg.norm(fwd)
        if n < 1e-12:
            raise DomainError("look_at eye and target coincide")
        fwd = fwd / n
        down = -up - np.dot(-up, fwd) * fwd
        dn = np.linalg.norm(down)
        if dn < 1e-9:
            raise DomainError("look_at direction parallel to up")
        down = down / dn
        right = np.cross(down, fwd)
        r = np.stack([right, down, fwd])  # rows: world axes of cam x, y, z
        return cls(focal=focal, rotation=matrix_to_axis_angle(r),
                   translation=-r @ eye, principal_offset=principal_offset)


def project_point(camera: CameraParams, point, image_size):
    """Project a world point. Returns (pixel, depth, in_front).

    depth is the camera-space z; in_front is False for z <= 0 and the caller
    is expected to cull (the pixel is still returned for z > 0 only).
    """
    point = np.asarray(point, dtype=np.float64).reshape(3)
    pc = camera.rotation_matrix() @ point + camera.translation
    z = float(pc[2])
    if z <= 0.0:
        return np.full(2, np.nan), z, False
    w, h = int(image_size[0]), int(image_size[1])
    px = camera.focal * pc[0] / z + 0.5 * w + camera.principal_offset[0]
    py = camera.focal * pc[1] / z + 0.5 * h + camera.principal_offset[1]
    return np.array([px, py]), z, True


def backproject(camera: CameraParams, pixel, depth: float, image_size) -> np.ndarray:
    """Lift a pixel at a given camera-space depth back to a world point.

    Exact inverse of project_point for depth > 0.
    """
    if not math.isfinite(depth) or depth <= 0.0:
        raise DomainError(f"backproject needs depth > 0, got {depth!r}")
    pixel = np.asarray(pixel, dtype=np.float64).reshape(2)
    w, h = int(image_size[0]), int(image_size[1])
    x = (pixel[0] - 0.5 * w - camera.principal_offset[0]) / camera.focal
    y = (pixel[1] - 0.5 * h - camera.principal_offset[1]) / camera.focal
    pc = depth * np.array([x, y, 1.0])
    return camera.rotation_matrix().T @ (pc - camera.translation)


# ---------------------------------------------------------------------------
# gaussians

#: Zeroth spherical-harmonic basis value, 1 / (2 sqrt(pi)).
SH_C0 = 0.28209479177387814


def sh_coeff_count(degree: int) -> int:
    if degree < 0 or degree > 3:
        raise ConfigError(f"spherical-harmonic degree must be in [0, 3], got {degree}")
    return (degree + 1) ** 2


@dataclass(frozen=True)
class HdrGaussian:
    """One anisotropic 3D Gaussian with log-radiance SH color.

    The quaternion is normalized on construction; sh_color stores, per RGB
    channel, SH coefficients of the *log* of linear radiance, so the decoded
    radiance exp(sh eval) is always positive.
    """

    center: np.ndarray
    opacity: float
    rotation: np.ndarray
    scale: np.ndarray
    sh_color: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "center", _readonly(np.reshape(self.center, (3,))))
        object.__setattr__(self, "opacity", float(self.opacity))
        object.__setattr__(self, "rotation", _readonly(quat_normalize(self.rotation)))
        object.__setattr__(self, "scale", _readonly(np.reshape(self.scale, (3,))))
        sh = np.asarray(self.sh_color, dtype=np.float64)
        if sh.ndim != 2 or sh.shape[0] != 3:
            raise DomainError(f"sh_color must have shape (3, n_coeffs), got {sh.shape}")
        n = sh.shape[1]
        if n not in (1, 4, 9, 16):
            raise DomainError(f"sh_color coefficient count {n} is not a full band")
        object.__setattr__(self, "sh_color", _readonly(sh))
        if not np.all(np.isfinite(self.center)):
            raise DomainError("gaussian center must be finite")
        if not (0.0 < self.opacity <= 1.0):
            raise DomainError(f"opacity must be in (0, 1], got {self.opacity}")
        if not np.all(self.scale > 0.0) or not np.all(np.isfinite(self.scale)):
            raise DomainError("scale must be positive and finite")
        if not np.all(np.isfinite(self.sh_color)):
            raise DomainError("sh_color must be finite")

    @property
    def sh_degree(self) -> int:
        return int(math.isqrt(self.sh_color.shape[1])) - 1

    def covariance(self) -> np.ndarray:
        """World-space 3D covariance R diag(s^2) R^T."""
        r = quat_to_matrix(self.rotation)
        return (r * self.scale[None, :] ** 2) @ r.T


@dataclass
class GaussianCloud:
    """Structure-of-arrays Gaussian set as torch tensors.

    center (G,3), opacity (G,), rotation (G,4) unit quaternions, scale (G,3)
    positive, sh (G,3,C) log-radiance SH coefficients. This is the working
    representation; HdrGaussian is the per-element value type.
    """

    center: torch.Tensor
    opacity: torch.Tensor
    rotation: torch.Tensor
    scale: torch.Tensor
    sh: torch.Tensor

    @property
    def count(self) -> int:
        return int(self.center.shape[0])

    @property
    def sh_degree(self) -> int:
        return int(math.isqrt(int(self.sh.shape[2]))) - 1

    def validate(self) -> "GaussianCloud":
        g = self.count
        if self.center.shape != (g, 3) or self.rotation.shape != (g, 4) \
                or self.scale.shape != (g, 3) or self.opacity.shape != (g,):
            raise DomainError("inconsistent gaussian tensor shapes")
        if self.sh.ndim != 3 or self.sh.shape[:2] != (g, 3):
            raise DomainError(f"sh must be (G, 3, C), got {tuple(self.sh.shape)}")
        for name in ("center", "opacity", "rotation", "scale", "sh"):
            t = getattr(self, name)
            if not torch.isfinite(t).all():
                raise DomainError(f"non-finite values in gaussian {name}")
        if g and (self.opacity.min() <= 0 or self.opacity.max() > 1.0):
            raise DomainError("opacity must lie in (0, 1]")
        if g and self.scale.min() <= 0:
            raise DomainError("scale must be positive")
        return self

    def detach_clone(self) -> "GaussianCloud":
        return GaussianCloud(*(getattr(self, f).detach().clone()
                               for f in ("center", "opacity", "rotation", "scale", "sh")))

    def to(self, dtype: torch.dtype) -> "GaussianCloud":
        return GaussianCloud(*(getattr(self, f).to(dtype)
                               for f in ("center", "opacity", "rotation", "scale", "sh")))

    def select(self, index) -> "GaussianCloud":
        return GaussianCloud(self.center[index], self.opacity[index],
                             self.rotation[index], self.scale[index], self.sh[index])

    def to_gaussians(self) -> list[HdrGaussian]:
        c = self.center.detach().cpu().numpy()
        o = self.opacity.detach().cpu().numpy()
        r = self.rotation.detach().cpu().numpy()
        s = self.scale.detach().cpu().numpy()
        sh = self.sh.detach().cpu().numpy()
        return [HdrGaussian(c[i], float(o[i]), r[i], s[i], sh[i])
                for i in range(self.count)]

    @classmethod
    def from_gaussians(cls, gaussians: Sequence[HdrGaussian],
                       dtype: torch.dtype = torch.float32) -> "GaussianCloud":
        if not gaussians:
            raise DomainError("empty gaussian list")
        n_coeff = gaussians[0].sh_color.shape[1]
        if any(g.sh_color.shape[1] != n_coeff for g in gaussians):
            raise DomainError("mixed SH coefficient counts in one cloud")
        stack = lambda f: torch.tensor(np.stack([f(g) for g in gaussians]), dtype=dtype)
        return cls(
            center=stack(lambda g: g.center),
            opacity=stack(lambda g: np.float64(g.opacity)),
            rotation=stack(lambda g: g.rotation),
            scale=stack(lambda g: g.scale),
            sh=stack(lambda g: g.sh_color),
        ).validate()


# ---------------------------------------------------------------------------
# image buffers

IMAGE_KINDS = ("ldr", "hdr", "depth", "confidence")


@dataclass(frozen=True)
class ImageBuffer:
    """A typed float32 raster of shape (height, width, channels).

    Kind fixes the value domain: ldr in [0, 1] (clamped on construction),
    hdr finite and >= 0, depth finite and >= 0 (renderers emit 0 where no
    splat contributed), confidence finite and >= 0.
    """

    data: np.ndarray
    kind: str

    def __post_init__(self):
        if self.kind not in IMAGE_KINDS:
            raise DomainError(f"unknown image kind {self.kind!r}")
        a = np.asarray(self.data, dtype=np.float32)
        if a.ndim == 2:
            a = a[:, :, None]
        if a.ndim != 3 or a.shape[2] not in (1, 3):
            raise DomainError(f"image data must be (H, W, 1|3), got {a.shape}")
        if not np.all(np.isfinite(a)):
            raise DataError(f"non-finite values in {self.kind} image")
        if self.kind == "ldr":
            a = np.clip(a, 0.0, 1.0)
        elif np.any(a < 0.0):
            raise DataError(f"negative values in {self.kind} image")
        a = np.ascontiguousarray(a)
        a.setflags(write=False)
        object.__setattr__(self, "data", a)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    def tensor(self, dtype: torch.dtype = torch.float32) -> torch.Tensor:
        return torch.tensor(self.data, dtype=dtype)


@dataclass
class SceneBundle:
    """Everything needed to re-render a reconstructed scene: the Gaussian
    cloud, per-view cameras, the exposure bracket they were captured with,
    and the predicted tone-mapper parameters."""

    gaussians: GaussianCloud
    cameras: list[CameraParams]
    exposures: ExposureContext
    tonemap: "TonemapParams"

    def validate(self) -> "SceneBundle":
        if self.gaussians.count == 0:
            raise DomainError("bundle has no gaussians")
        if len(self.cameras) != len(self.exposures):
            raise DomainError(
                f"{len(self.cameras)} cameras vs {len(self.exposures)} exposures")
        self.gaussians.validate()
        return self
