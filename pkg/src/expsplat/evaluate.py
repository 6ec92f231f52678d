"""Held-out evaluation protocol and the JSON metrics report.

A reconstructed bundle is scored against the untouched views of its
dataset: every target view is re-rendered at all bracket exposures plus
the radiance map, and compared with the stored files. LDR predictions
are quantized to 8 bits first so the comparison is like-for-like with
the PNG ground truth.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .configs import RenderConfig
from .core import ConfigError, ImageBuffer, SceneBundle
from .datagen import TrainingScene
from .formats import SceneManifest
from .metrics import hdr_psnr_mulaw, psnr, ssim_value
from .render import render_gaussians
from .tonemap import tonemap_forward

REPORT_VERSION = 1

# bracket positions a context view may be captured at; the complement is
# only ever seen at evaluation time
OBSERVED_EXPOSURES = (0, 2, 4)


@dataclass(frozen=True)
class EvalSplit:
    """Deterministic context/target assignment for one scene."""

    context_views: tuple[int, ...]
    context_exposures: tuple[int, ...]  # one bracket index per context view
    target_views: tuple[int, ...]
    seed: int
    pool: tuple[int, ...] = OBSERVED_EXPOSURES

    def __post_init__(self):
        if len(self.context_views) != len(self.context_exposures):
            raise ConfigError("one exposure index per context view required")
        overlap = set(self.context_views) & set(self.target_views)
        if overlap:
            raise ConfigError(f"views {sorted(overlap)} are both context "
                              f"and target")


def split_views(manifest: SceneManifest, seed: int, n_context: int = 18,
                pool: tuple[int, ...] = OBSERVED_EXPOSURES) -> EvalSplit:
    """Draw the context set and its per-view exposures from the manifest.

    Pure in (manifest, seed, n_context, pool): the same arguments always
    produce the same split.
    """
    n_views = len(manifest.views)
    if not 0 < n_context < n_views:
        raise ConfigError(
            f"need 0 < context ({n_context}) < views ({n_views})")
    n_exp = len(manifest.exposures)
    if any(not 0 <= e < n_exp for e in pool):
        raise ConfigError(f"exposure pool {pool} outside bracket 0..{n_exp - 1}")
    rng = np.random.default_rng(seed)
    order = rng.permutation(n_views)
    context = np.sort(order[:n_context])
    exposures = rng.choice(len(pool), size=n_context)
    return EvalSplit(
        context_views=tuple(int(v) for v in context),
        context_exposures=tuple(int(pool[i]) for i in exposures),
        target_views=tuple(int(v) for v in np.sort(order[n_context:])),
        seed=seed, pool=tuple(pool))


@dataclass
class ViewScore:
    view: int
    hdr_psnr: float
    ldr_psnr: dict[int, float] = field(default_factory=dict)
    ldr_ssim: dict[int, float] = field(default_factory=dict)


@dataclass
class EvalReport:
    scene_id: str
    split: EvalSplit
    exposures: tuple[float, ...]
    views: list[ViewScore]
    reconstruction_seconds: float | None = None

    def _collect(self, metric: str, exposure_set=None):
        vals = []
        for score in self.views:
            table = getattr(score, metric)
            for e, v in table.items():
                if exposure_set is None or e in exposure_set:
                    vals.append(v)
        return vals

    def average(self, metric: str, exposure_set=None):
        """Plain mean of the per-view entries; recomputable from the JSON.

        None when no entry falls in the requested exposure set.
        """
        if metric == "hdr_psnr":
            vals = [s.hdr_psnr for s in self.views]
        else:
            vals = self._collect(metric, exposure_set)
        return float(np.mean(vals)) if vals else None

    def to_dict(self) -> dict:
        observed = set(self.split.pool)
        novel = tuple(e for e in range(len(self.exposures))
                      if e not in observed)
        per_exposure = {
            str(e): {
                "psnr": _enc(self.average("ldr_psnr", {e})),
                "ssim": _enc(self.average("ldr_ssim", {e})),
            }
            for e in range(len(self.exposures))
        }
        return {
            "report_version": REPORT_VERSION,
            "scene_id": self.scene_id,
            "seed": self.split.seed,
            "context_views": list(self.split.context_views),
            "context_exposures": list(self.split.context_exposures),
            "target_views": list(self.split.target_views),
            "exposures_s": list(self.exposures),
            "reconstruction_seconds": None
            if self.reconstruction_seconds is None
            else round(self.reconstruction_seconds, 3),
            "per_view": [
                {
                    "view": s.view,
                    "hdr_psnr": _enc(s.hdr_psnr),
                    "ldr_psnr": {str(e): _enc(v) for e, v in s.ldr_psnr.items()},
                    "ldr_ssim": {str(e): _enc(v) for e, v in s.ldr_ssim.items()},
                }
                for s in self.views
            ],
            "averages": {
                "psnr": _enc(self.average("ldr_psnr")),
                "ssim": _enc(self.average("ldr_ssim")),
                "hdr_psnr": _enc(self.average("hdr_psnr")),
                "psnr_observed": _enc(self.average("ldr_psnr", observed)),
                "psnr_novel": _enc(self.average("ldr_psnr", set(novel))),
                "ssim_observed": _enc(self.average("ldr_ssim", observed)),
                "ssim_novel": _enc(self.average("ldr_ssim", set(novel))),
            },
            "per_exposure": per_exposure,
            "notes": {
                "lpips": "omitted: metric requires pretrained network weights",
                "hdr_psnr": "mu-law tone-mapped PSNR, both buffers normalized "
                            "by the ground-truth 99th percentile",
                "ldr": "predictions quantized to 8 bits before comparison",
            },
        }

    def save(self, path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True)
                        + "\n")
        return path


def _enc(v):
    if v is not None and math.isinf(v):
        return "inf" if v > 0 else "-inf"
    return v


def quantize_ldr(image: np.ndarray) -> np.ndarray:
    """Snap a float LDR image to the 8-bit grid used by the PNG files."""
    return np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.float32) / 255.0


def evaluate_bundle(bundle: SceneBundle, scene: TrainingScene,
                    split: EvalSplit,
                    reconstruction_seconds: float | None = None,
                    render_cfg: RenderConfig = RenderConfig()) -> EvalReport:
    """Score a bundle on the target views of its scene."""
    bad = [v for v in split.target_views if not 0 <= v < scene.n_views]
    if bad:
        raise ConfigError(f"target views {bad} outside dataset")
    size = tuple(scene.hdr.shape[1:3])
    anchor = bundle.exposures.anchor
    scores = []
    for v in split.target_views:
        with torch.no_grad():
            pred_hdr, _, _, _ = render_gaussians(
                bundle.gaussians, scene.cameras[v], size,
                background=(0.0, 0.0, 0.0), cfg=render_cfg)
        pred_hdr = pred_hdr.numpy().astype(np.float32)
        gt_hdr = scene.hdr[v].numpy()
        score = ViewScore(view=v, hdr_psnr=hdr_psnr_mulaw(pred_hdr, gt_hdr))
        buffer = ImageBuffer(pred_hdr, "hdr")
        for e, dt in enumerate(scene.exposures):
            pred = quantize_ldr(
                tonemap_forward(buffer, bundle.tonemap, math.log2(dt),
                                anchor).data)
            gt = scene.ldr[v, e].permute(1, 2, 0).numpy()
            score.ldr_psnr[e] = psnr(pred, gt)
            score.ldr_ssim[e] = ssim_value(torch.from_numpy(pred),
                                           torch.from_numpy(gt))
        scores.append(score)
    return EvalReport(scene_id=scene.manifest.scene_id, split=split,
                      exposures=tuple(scene.exposures), views=scores,
                      reconstruction_seconds=reconstruction_seconds)
