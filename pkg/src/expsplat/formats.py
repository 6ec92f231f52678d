"""File formats: PFM float maps, 8-bit PNG, weight/bundle containers,
gaussian binary export, PLY export, and the dataset manifest.

All binary payloads are little-endian. Parse failures raise DataError with
the byte offset where decoding stopped.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import jsonschema
import numpy as np
import torch
from PIL import Image

from .core import (CameraParams, DataError, ExposureContext, GaussianCloud,
                   SceneBundle)
from .tonemap import CRF_PRESETS, TonemapParams

# ---------------------------------------------------------------------------
# PFM


def write_pfm(path, data: np.ndarray) -> None:
    """Portable float map, little-endian (scale -1.0), rows bottom-up."""
    a = np.asarray(data, dtype=np.float32)
    if a.ndim == 2:
        header = b"Pf"
    elif a.ndim == 3 and a.shape[2] == 3:
        header = b"PF"
    else:
        raise DataError(f"pfm supports (H, W) or (H, W, 3), got {a.shape}")
    h, w = a.shape[:2]
    with open(path, "wb") as f:
        f.write(header + b"\n")
        f.write(f"{w} {h}\n".encode("ascii"))
        f.write(b"-1.0\n")
        f.write(np.flipud(a).tobytes())


def _read_bytes(path) -> bytes:
    try:
        return Path(path).read_bytes()
    except OSError as e:
        raise DataError(f"{path}: {e}")


def read_pfm(path) -> np.ndarray:
    raw = _read_bytes(path)

    def next_token(pos):
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise DataError(f"{path}: truncated pfm header at byte {start}")
        return raw[start:pos], pos

    magic, pos = next_token(0)
    if magic not in (b"PF", b"Pf"):
        raise DataError(f"{path}: bad pfm magic {magic!r} at byte 0")
    channels = 3 if magic == b"PF" else 1
    wtok, pos = next_token(pos)
    htok, pos = next_token(pos)
    stok, pos = next_token(pos)
    try:
        w, h, scale = int(wtok), int(htok), float(stok)
    except ValueError:
        raise DataError(f"{path}: malformed pfm dimensions at byte {pos}")
    if w <= 0 or h <= 0:
        raise DataError(f"{path}: non-positive pfm size at byte {pos}")
    pos += 1  # single whitespace byte terminates the header
    count = w * h * channels
    end = pos + 4 * count
    if end > len(raw):
        raise DataError(f"{path}: pfm payload truncated at byte {len(raw)}, "
                        f"expected {end}")
    dt = "<f4" if scale < 0 else ">f4"
    a = np.frombuffer(raw[pos:end], dtype=dt).astype(np.float32)
    a = a.reshape(h, w, channels) if channels == 3 else a.reshape(h, w)
    return np.flipud(a).copy()


# ---------------------------------------------------------------------------
# PNG

def write_png(path, data: np.ndarray) -> None:
    """LDR image in [0, 1] quantized by round(x * 255)."""
    a = np.asarray(data, dtype=np.float64)
    if a.ndim != 3 or a.shape[2] != 3:
        raise DataError(f"png output expects (H, W, 3), got {a.shape}")
    q = np.round(np.clip(a, 0.0, 1.0) * 255.0).astype(np.uint8)
    Image.fromarray(q, mode="RGB").save(path)


def read_png(path) -> np.ndarray:
    try:
        img = Image.open(path)
        img.load()
    except (OSError, SyntaxError) as e:
        raise DataError(f"{path}: {e}")
    a = np.asarray(img.convert("RGB"), dtype=np.float32)
    return a / 255.0


# ---------------------------------------------------------------------------
# named-section container (checkpoints and scene bundles)

_WEIGHTS_MAGIC = b"IHDRW1"
_KIND_F32 = 0
_KIND_F64 = 1
_KIND_I64 = 2
_KIND_JSON = 3
_DTYPE_KIND = {np.dtype("<f4"): _KIND_F32, np.dtype("<f8"): _KIND_F64,
               np.dtype("<i8"): _KIND_I64}
_KIND_DTYPE = {v: k for k, v in _DTYPE_KIND.items()}


def write_sections(path, sections: dict) -> None:
    """Named sections, each a numpy array (f32/f64/i64) or a JSON-able
    object. Section order is preserved and part of the byte-exact format."""
    blob = bytearray()
    blob += _WEIGHTS_MAGIC
    blob += struct.pack("<I", len(sections))
    for name, value in sections.items():
        encoded = name.encode("utf-8")
        blob += struct.pack("<H", len(encoded)) + encoded
        if isinstance(value, np.ndarray):
            dt = value.dtype.newbyteorder("<")
            if dt not in _DTYPE_KIND:
                raise DataError(f"section {name}: unsupported dtype {value.dtype}")
            payload = np.ascontiguousarray(value, dtype=dt).tobytes()
            blob += struct.pack("<BB", _DTYPE_KIND[dt], value.ndim)
            blob += struct.pack(f"<{value.ndim}I", *value.shape)
        else:
            payload = json.dumps(value, sort_keys=True).encode("utf-8")
            blob += struct.pack("<BB", _KIND_JSON, 0)
        blob += struct.pack("<Q", len(payload)) + payload
    Path(path).write_bytes(bytes(blob))


def read_sections(path) -> dict:
    raw = _read_bytes(path)
    if raw[:6] != _WEIGHTS_MAGIC:
        raise DataError(f"{path}: bad container magic at byte 0")
    pos = 6

    def take(fmt):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(raw):
            raise DataError(f"{path}: truncated container at byte {pos}")
        vals = struct.unpack_from(fmt, raw, pos)
        pos += size
        return vals

    (count,) = take("<I")
    out = {}
    for _ in range(count):
        (name_len,) = take("<H")
        if pos + name_len > len(raw):
            raise DataError(f"{path}: truncated section name at byte {pos}")
        name = raw[pos:pos + name_len].decode("utf-8")
        pos += name_len
        kind, ndim = take("<BB")
        shape = take(f"<{ndim}I") if ndim else ()
        (nbytes,) = take("<Q")
        if pos + nbytes > len(raw):
            raise DataError(f"{path}: truncated payload of {name!r} at byte {pos}")
        payload = raw[pos:pos + nbytes]
        pos += nbytes
        if kind == _KIND_JSON:
            out[name] = json.loads(payload.decode("utf-8"))
        elif kind in _KIND_DTYPE:
            arr = np.frombuffer(payload, dtype=_KIND_DTYPE[kind])
            out[name] = arr.reshape(shape).copy()
        else:
            raise DataError(f"{path}: unknown section kind {kind} at byte {pos}")
    return out


def save_checkpoint(path, model_state: dict, optimizer_state: dict,
                    meta: dict) -> None:
    """model_state: name -> tensor; optimizer_state: nested JSON-able dict
    holding moment arrays under 'tensors' (name -> array)."""
    sections: dict = {"meta": dict(meta)}
    for name, tensor in model_state.items():
        sections[f"model/{name}"] = tensor.detach().cpu().numpy()
    opt = dict(optimizer_state)
    tensors = opt.pop("tensors", {})
    sections["optimizer"] = opt
    for name, arr in tensors.items():
        sections[f"optstate/{name}"] = np.asarray(arr)
    write_sections(path, sections)


def load_checkpoint(path) -> tuple[dict, dict, dict]:
    sections = read_sections(path)
    if "meta" not in sections or "optimizer" not in sections:
        raise DataError(f"{path}: not a training checkpoint")
    model_state = {}
    tensors = {}
    for name, value in sections.items():
        if name.startswith("model/"):
            model_state[name[len("model/"):]] = torch.from_numpy(value)
        elif name.startswith("optstate/"):
            tensors[name[len("optstate/"):]] = value
    optimizer_state = dict(sections["optimizer"])
    optimizer_state["tensors"] = tensors
    return model_state, optimizer_state, sections["meta"]


def save_bundle(path, bundle: SceneBundle, extra_meta: dict = None) -> None:
    g = bundle.gaussians
    meta = {"kind": "scene_bundle", "sh_degree": g.sh_degree,
            "count": g.count}
    if extra_meta:
        meta.update(extra_meta)
    sections = {
        "meta": meta,
        "gauss/center": g.center.detach().numpy(),
        "gauss/opacity": g.opacity.detach().numpy(),
        "gauss/rotation": g.rotation.detach().numpy(),
        "gauss/scale": g.scale.detach().numpy(),
        "gauss/sh": g.sh.detach().numpy(),
        "tonemap": bundle.tonemap.to_flat().astype(np.float64),
        # log2 exposures round-trip exactly; seconds would re-quantize
        "exposures": np.asarray(bundle.exposures.log_exposures, dtype=np.float64),
        "cameras": [camera_to_json(c) for c in bundle.cameras],
    }
    write_sections(path, sections)


def load_bundle(path) -> SceneBundle:
    s = read_sections(path)
    meta = s.get("meta", {})
    if meta.get("kind") != "scene_bundle":
        raise DataError(f"{path}: not a scene bundle")
    gaussians = GaussianCloud(
        center=torch.from_numpy(s["gauss/center"]),
        opacity=torch.from_numpy(s["gauss/opacity"]),
        rotation=torch.from_numpy(s["gauss/rotation"]),
        scale=torch.from_numpy(s["gauss/scale"]),
        sh=torch.from_numpy(s["gauss/sh"]),
    )
    hidden = (s["tonemap"].size - 3) // 7
    return SceneBundle(
        gaussians=gaussians,
        cameras=[camera_from_json(c) for c in s["cameras"]],
        exposures=ExposureContext.from_log(list(s["exposures"])),
        tonemap=TonemapParams.from_flat(s["tonemap"], hidden),
    ).validate()


def read_bundle_meta(path) -> dict:
    meta = read_sections(path).get("meta", {})
    if meta.get("kind") != "scene_bundle":
        raise DataError(f"{path}: not a scene bundle")
    return meta


# ---------------------------------------------------------------------------
# gaussian binary + PLY export

_GAUSS_MAGIC = b"IHDRG1"


def write_gaussians(path, cloud: GaussianCloud) -> None:
    """Record layout per gaussian, little-endian f32:
    center[3], opacity, quaternion[4], scale[3], sh[3 * n_coeffs]
    with sh flattened channel-major."""
    n_coeffs = cloud.sh.shape[2]
    recs = torch.cat([
        cloud.center, cloud.opacity[:, None], cloud.rotation, cloud.scale,
        cloud.sh.reshape(cloud.count, -1)], dim=1)
    blob = _GAUSS_MAGIC + struct.pack("<II", cloud.count, n_coeffs)
    blob += recs.detach().numpy().astype("<f4").tobytes()
    Path(path).write_bytes(blob)


def read_gaussians(path) -> GaussianCloud:
    raw = _read_bytes(path)
    if raw[:6] != _GAUSS_MAGIC:
        raise DataError(f"{path}: bad gaussian magic at byte 0")
    if len(raw) < 14:
        raise DataError(f"{path}: truncated gaussian header at byte {len(raw)}")
    count, n_coeffs = struct.unpack_from("<II", raw, 6)
    width = 3 + 1 + 4 + 3 + 3 * n_coeffs
    expected = 14 + 4 * count * width
    if len(raw) != expected:
        raise DataError(f"{path}: gaussian payload ends at byte {len(raw)}, "
                        f"expected {expected}")
    recs = np.frombuffer(raw[14:], dtype="<f4").reshape(count, width)
    t = torch.from_numpy(recs.copy())
    return GaussianCloud(center=t[:, 0:3], opacity=t[:, 3],
                         rotation=t[:, 4:8], scale=t[:, 8:11],
                         sh=t[:, 11:].reshape(count, 3, n_coeffs))


def write_ply(path, cloud: GaussianCloud) -> None:
    """ASCII point cloud with the property names splat viewers expect.

    Opacity is stored as its logit and scale as its log, matching the usual
    pre-activation convention of splat PLY files.
    """
    n_coeffs = cloud.sh.shape[2]
    opacity = torch.logit(cloud.opacity.clamp(1e-6, 1 - 1e-6))
    log_scale = torch.log(cloud.scale)
    names = ["x", "y", "z", "nx", "ny", "nz"]
    names += [f"f_dc_{c}" for c in range(3)]
    names += [f"f_rest_{i}" for i in range(3 * (n_coeffs - 1))]
    names += ["opacity", "scale_0", "scale_1", "scale_2",
              "rot_0", "rot_1", "rot_2", "rot_3"]
    cols = [cloud.center, torch.zeros(cloud.count, 3),
            cloud.sh[:, :, 0]]
    if n_coeffs > 1:
        cols.append(cloud.sh[:, :, 1:].reshape(cloud.count, -1))
    cols += [opacity[:, None], log_scale, cloud.rotation]
    table = torch.cat(cols, dim=1).detach().numpy()
    with open(path, "w") as f:
        f.write("ply\nformat ascii 1.0\n")
        f.write(f"element vertex {cloud.count}\n")
        for n in names:
            f.write(f"property float {n}\n")
        f.write("end_header\n")
        for row in table:
            f.write(" ".join(f"{v:.9g}" for v in row) + "\n")


# ---------------------------------------------------------------------------
# dataset manifest

MANIFEST_SCHEMA = {
    "type": "object",
    "required": ["scene_id", "image_size", "crf", "exposures", "views"],
    "properties": {
        "scene_id": {"type": "string"},
        "image_size": {"type": "array", "items": {"type": "integer", "minimum": 1},
                       "minItems": 2, "maxItems": 2},
        "crf": {"enum": sorted(CRF_PRESETS)},
        "exposures": {"type": "array", "items": {"type": "number",
                                                 "exclusiveMinimum": 0},
                      "minItems": 2},
        "views": {
            "type": "array", "minItems": 1,
            "items": {
                "type": "object",
                "required": ["camera", "hdr", "depth", "ldr"],
                "properties": {
                    "camera": {
                        "type": "object",
                        "required": ["focal", "rotation", "translation",
                                     "principal_offset"],
                        "properties": {
                            "focal": {"type": "number", "exclusiveMinimum": 0},
                            "rotation": {"type": "array", "minItems": 3,
                                         "maxItems": 3,
                                         "items": {"type": "number"}},
                            "translation": {"type": "array", "minItems": 3,
                                            "maxItems": 3,
                                            "items": {"type": "number"}},
                            "principal_offset": {"type": "array", "minItems": 2,
                                                 "maxItems": 2,
                                                 "items": {"type": "number"}},
                        },
                    },
                    "hdr": {"type": "string"},
                    "depth": {"type": "string"},
                    "ldr": {"type": "array", "items": {"type": "string"}},
                },
            },
        },
    },
}


def camera_to_json(cam: CameraParams) -> dict:
    return {"focal": float(cam.focal),
            "rotation": [float(v) for v in cam.rotation],
            "translation": [float(v) for v in cam.translation],
            "principal_offset": [float(v) for v in cam.principal_offset]}


def camera_from_json(d: dict) -> CameraParams:
    return CameraParams(focal=d["focal"],
                        rotation=np.array(d["rotation"], dtype=np.float64),
                        translation=np.array(d["translation"], dtype=np.float64),
                        principal_offset=np.array(d["principal_offset"],
                                                  dtype=np.float64))


@dataclass
class ViewRecord:
    camera: CameraParams
    hdr: str
    depth: str
    ldr: list[str] = field(default_factory=list)


@dataclass
class SceneManifest:
    scene_id: str
    image_size: tuple[int, int]  # (H, W)
    crf: str
    exposures: list[float]
    views: list[ViewRecord]
    root: Path = Path(".")

    def to_json(self) -> dict:
        return {
            "scene_id": self.scene_id,
            "image_size": list(self.image_size),
            "crf": self.crf,
            "exposures": list(self.exposures),
            "views": [{"camera": camera_to_json(v.camera), "hdr": v.hdr,
                       "depth": v.depth, "ldr": list(v.ldr)}
                      for v in self.views],
        }

    def path(self, rel: str) -> Path:
        return self.root / rel


def save_manifest(path, manifest: SceneManifest) -> None:
    doc = manifest.to_json()
    jsonschema.validate(doc, MANIFEST_SCHEMA)
    Path(path).write_text(json.dumps(doc, indent=1, sort_keys=True))


def load_manifest(path) -> SceneManifest:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise DataError(f"{path}: {e}")
    try:
        jsonschema.validate(doc, MANIFEST_SCHEMA)
    except jsonschema.ValidationError as e:
        raise DataError(f"{path}: manifest schema violation: {e.message}")
    if len(doc["exposures"]) != len(set(doc["exposures"])):
        raise DataError(f"{path}: duplicate exposure times")
    root = path.parent
    views = []
    for i, v in enumerate(doc["views"]):
        if len(v["ldr"]) != len(doc["exposures"]):
            raise DataError(f"{path}: view {i} has {len(v['ldr'])} ldr files "
                            f"for {len(doc['exposures'])} exposures")
        for rel in [v["hdr"], v["depth"], *v["ldr"]]:
            if not (root / rel).exists():
                raise DataError(f"{path}: missing file {rel} (view {i})")
        views.append(ViewRecord(camera=camera_from_json(v["camera"]),
                                hdr=v["hdr"], depth=v["depth"],
                                ldr=list(v["ldr"])))
    return SceneManifest(scene_id=doc["scene_id"],
                         image_size=tuple(doc["image_size"]),
                         crf=doc["crf"], exposures=list(doc["exposures"]),
                         views=views, root=root)
