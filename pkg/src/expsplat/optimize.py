"""Hand-rolled Adam, scene refinement, test-time pose alignment, and the
toy training loop.

Adam is implemented here rather than taken from torch.optim so optimizer
state can be serialized bit-exactly into checkpoints and so single-step
updates stay hand-verifiable against the textbook formula.
"""
from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import formats
from .configs import ModelConfig, PostOptConfig, RenderConfig, TrainConfig
from .core import (CameraParams, ConfigError, ExposureContext, GaussianCloud,
                   NumericalError, SceneBundle)
from .datagen import TrainingScene
from .losses import (PerceptualBank, geometry_loss, photometric_loss,
                     total_loss)
from .metrics import ssim
from .model import SceneModel
from .render import render_gaussians
from .tonemap import TonemapParams, tonemap_apply

# ---------------------------------------------------------------------------
# Adam


@dataclass
class AdamGroup:
    name: str
    params: dict[str, torch.Tensor]
    lr: float


class Adam:
    """Plain Adam with per-group learning rates and exportable state."""

    def __init__(self, groups: list[AdamGroup],
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        names = [g.name for g in groups]
        if len(set(names)) != len(names):
            raise ConfigError(f"duplicate optimizer group names in {names}")
        self.groups = groups
        self.betas = betas
        self.eps = eps
        self.step_count = 0
        self.m = {k: torch.zeros_like(p) for k, p, _ in self._entries()}
        self.v = {k: torch.zeros_like(p) for k, p, _ in self._entries()}

    def _entries(self):
        for g in self.groups:
            for pname, p in g.params.items():
                yield f"{g.name}/{pname}", p, g

    def zero_grad(self):
        for _, p, _ in self._entries():
            p.grad = None

    @torch.no_grad()
    def step(self):
        self.step_count += 1
        b1, b2 = self.betas
        c1 = 1.0 - b1 ** self.step_count
        c2 = 1.0 - b2 ** self.step_count
        for key, p, g in self._entries():
            if p.grad is None:
                continue
            grad = p.grad
            m = self.m[key].mul_(b1).add_(grad, alpha=1.0 - b1)
            v = self.v[key].mul_(b2).addcmul_(grad, grad, value=1.0 - b2)
            p.addcdiv_(m / c1, (v / c2).sqrt().add_(self.eps), value=-g.lr)

    def set_lr(self, name: str, lr: float):
        for g in self.groups:
            if g.name == name:
                g.lr = lr
                return
        raise ConfigError(f"no optimizer group named {name!r}")

    def state(self) -> dict:
        tensors = {}
        for key, _, _ in self._entries():
            tensors[f"{key}/m"] = self.m[key].numpy()
            tensors[f"{key}/v"] = self.v[key].numpy()
        return {"step": self.step_count,
                "lrs": {g.name: g.lr for g in self.groups},
                "tensors": tensors}

    def load_state(self, state: dict):
        self.step_count = int(state["step"])
        for g in self.groups:
            g.lr = float(state["lrs"][g.name])
        for key, p, _ in self._entries():
            for dst, tag in ((self.m, "m"), (self.v, "v")):
                arr = state["tensors"][f"{key}/{tag}"]
                t = torch.from_numpy(np.asarray(arr)).to(p.dtype)
                if t.shape != p.shape:
                    raise ConfigError(f"optimizer state {key}/{tag} has shape "
                                      f"{tuple(t.shape)}, param {tuple(p.shape)}")
                dst[key] = t.clone()


# ---------------------------------------------------------------------------
# scene refinement

def prune_gaussians(cloud: GaussianCloud, min_opacity: float) -> GaussianCloud:
    """Keep gaussians with opacity >= min_opacity."""
    keep = torch.nonzero(cloud.opacity >= min_opacity, as_tuple=False).reshape(-1)
    if keep.numel() == 0:
        raise NumericalError(
            f"all {cloud.count} gaussians fall below opacity {min_opacity}")
    return cloud.select(keep)


_ALL_GROUPS = ("position", "scale", "rotation", "opacity", "color", "tonemap")


def _theta_views(theta: torch.Tensor, hidden: int):
    h = hidden
    return (theta[:3 * h].reshape(h, 3), theta[3 * h:4 * h],
            theta[4 * h:7 * h].reshape(3, h), theta[7 * h:])


def post_optimize(bundle: SceneBundle, images, exposures, cameras=None,
                  cfg: PostOptConfig = PostOptConfig(),
                  groups: tuple[str, ...] = _ALL_GROUPS,
                  render_cfg: RenderConfig = RenderConfig()):
    """Prune, then refine gaussian attributes and tonemapper weights by
    Adam on 0.8*MSE + 0.2*(1-SSIM) against the given LDR targets.

    images: list of (H, W, 3) arrays/tensors in [0, 1]; exposures: seconds
    per image; cameras default to the bundle's. Returns (bundle, history).
    """
    for g in groups:
        if g not in _ALL_GROUPS:
            raise ConfigError(f"unknown parameter group {g!r}")
    cameras = list(bundle.cameras) if cameras is None else list(cameras)
    if not (len(images) == len(exposures) == len(cameras)):
        raise ConfigError("images, exposures, and cameras must align")
    cloud = prune_gaussians(bundle.gaussians.detach_clone(), cfg.prune_opacity)
    if cfg.iters == 0:
        return SceneBundle(gaussians=cloud, cameras=list(bundle.cameras),
                           exposures=bundle.exposures,
                           tonemap=bundle.tonemap).validate(), []

    dtype = cloud.center.dtype
    targets = [torch.tensor(np.asarray(im), dtype=dtype) for im in images]
    size = tuple(targets[0].shape[:2])
    ells = [math.log2(float(t)) for t in exposures]
    anchor = bundle.exposures.anchor

    # untouched groups bypass the raw reparametrization so they pass
    # through bit-exact; optimized ones live in unconstrained coordinates
    transforms = {
        "position": lambda: cloud.center.clone(),
        "scale": lambda: cloud.scale.log(),
        "rotation": lambda: cloud.rotation.clone(),
        "opacity": lambda: torch.logit(cloud.opacity.clamp(1e-6, 1.0 - 1e-6)),
        "color": lambda: cloud.sh.clone(),
        "tonemap": lambda: torch.from_numpy(bundle.tonemap.to_flat()).to(dtype),
    }
    lrs = cfg.learning_rates()
    raw = {}
    adam_groups = []
    for name in _ALL_GROUPS:
        if name in groups:
            raw[name] = transforms[name]().requires_grad_(True)
            adam_groups.append(AdamGroup(name, {name: raw[name]}, lrs[name]))
    opt = Adam(adam_groups)
    hidden = bundle.tonemap.hidden
    theta_t = raw.get("tonemap")
    if theta_t is None:
        theta_t = transforms["tonemap"]()

    def current_cloud() -> GaussianCloud:
        return GaussianCloud(
            center=raw["position"] if "position" in raw else cloud.center,
            opacity=torch.sigmoid(raw["opacity"]) if "opacity" in raw
            else cloud.opacity,
            rotation=raw["rotation"]
            / raw["rotation"].norm(dim=1, keepdim=True).clamp_min(1e-12)
            if "rotation" in raw else cloud.rotation,
            scale=raw["scale"].exp() if "scale" in raw else cloud.scale,
            sh=raw["color"] if "color" in raw else cloud.sh)

    history = []
    background = torch.zeros(3, dtype=dtype)
    for it in range(cfg.iters):
        opt.zero_grad()
        scene = current_cloud()
        w1, b1, w2, b2 = _theta_views(theta_t, hidden)
        loss = 0.0
        for target, camera, ell in zip(targets, cameras, ells):
            hdr, _, _, _ = render_gaussians(scene, camera, size, background,
                                            cfg=render_cfg)
            ldr = tonemap_apply(hdr, w1, b1, w2, b2, ell, anchor)
            mse = ((ldr - target) ** 2).mean()
            loss = loss + cfg.mse_weight * mse \
                + cfg.ssim_weight * (1.0 - ssim(ldr, target))
        loss = loss / len(targets)
        if not torch.isfinite(loss):
            raise NumericalError(f"refinement loss became non-finite at "
                                 f"iteration {it}")
        loss.backward()
        opt.step()
        history.append(float(loss.detach()))

    with torch.no_grad():
        refined = current_cloud().detach_clone()
    if "tonemap" in raw:
        theta = raw["tonemap"].detach().to(torch.float64).numpy()
        tonemap = TonemapParams.from_flat(theta, hidden)
    else:
        tonemap = bundle.tonemap
    out = SceneBundle(gaussians=refined, cameras=list(bundle.cameras),
                      exposures=bundle.exposures, tonemap=tonemap)
    return out.validate(), history


def align_test_pose(bundle: SceneBundle, target_image, target_exposure: float,
                    init_pose: CameraParams, steps: int = 200,
                    lr: float = 1e-3,
                    render_cfg: RenderConfig = RenderConfig()) -> CameraParams:
    """Adam on the 9 camera parameters against photometric MSE.

    Stops early and returns the best pose seen if the loss rises for 50
    consecutive steps.
    """
    target = torch.tensor(np.asarray(target_image), dtype=torch.float64)
    size = tuple(target.shape[:2])
    cloud = bundle.gaussians.detach_clone().to(torch.float64)
    theta = bundle.tonemap.tensors(torch.float64)
    ell = math.log2(float(target_exposure))
    anchor = bundle.exposures.anchor
    background = torch.zeros(3, dtype=torch.float64)

    pose = torch.tensor(init_pose.to_vector(), dtype=torch.float64,
                        requires_grad=True)
    opt = Adam([AdamGroup("pose", {"pose": pose}, lr)])

    def photometric(p):
        hdr, _, _, _ = render_gaussians(cloud, p, size, background,
                                        cfg=render_cfg)
        ldr = tonemap_apply(hdr, *theta, ell, anchor)
        return ((ldr - target) ** 2).mean()

    best_loss = float("inf")
    best_vec = pose.detach().numpy().copy()
    prev = float("inf")
    streak = 0
    for _ in range(steps):
        opt.zero_grad()
        loss = photometric(pose)
        value = float(loss.detach())
        if value < best_loss:
            best_loss = value
            best_vec = pose.detach().numpy().copy()
        streak = streak + 1 if value > prev else 0
        if streak >= 50:
            break
        prev = value
        loss.backward()
        opt.step()
    return CameraParams.from_vector(best_vec)


# ---------------------------------------------------------------------------
# toy training loop

def cosine_lr(cfg: TrainConfig, iteration: int) -> float:
    """Linear warmup into a cosine decay that reaches ~0 at cfg.iters."""
    if iteration < cfg.warmup:
        return cfg.lr * (iteration + 1) / cfg.warmup
    span = max(1, cfg.iters - cfg.warmup)
    progress = min(1.0, (iteration - cfg.warmup) / span)
    return cfg.lr * 0.5 * (1.0 + math.cos(math.pi * progress))


@dataclass
class TrainResult:
    checkpoint: Path
    log: Path
    losses: list = field(default_factory=list)


def _named_trainable(model: SceneModel, geometry: bool):
    for name, p in model.named_parameters():
        is_geo = name.startswith("geometry.")
        if geometry == is_geo and p.requires_grad:
            yield name, p


def _pretrain_geometry(model: SceneModel, scenes: list[TrainingScene],
                       cfg: TrainConfig, rng: np.random.Generator):
    """Fit the toy geometry encoder's depth and confidence heads to the
    dataset depth maps before the encoder is frozen for the main loop.

    Confidence is trained by the usual trick of weighting the squared error
    by the confidence and paying a log-confidence penalty, which makes high
    confidence cheap exactly where the depth is accurate.
    """
    params = dict(_named_trainable(model, geometry=True))
    opt = Adam([AdamGroup("geometry", params, cfg.geo_lr)])
    for _ in range(cfg.geo_iters):
        scene = scenes[int(rng.integers(len(scenes)))]
        k = min(cfg.geo_views, scene.n_views)
        idx = rng.choice(scene.n_views, size=k, replace=False)
        e = int(rng.integers(scene.ldr.shape[1]))
        images = scene.ldr[idx, e]
        cams = [scene.cameras[int(i)] for i in idx]
        geo = model.geometry(images, cams)
        gt = scene.depth[idx].to(images.dtype)
        err = (geo.depth - gt) ** 2
        conf = geo.confidence.clamp_min(1e-6)
        loss = (conf * err).mean() - 0.05 * conf.log().mean()
        if not torch.isfinite(loss):
            raise NumericalError("geometry pretraining loss became non-finite")
        opt.zero_grad()
        loss.backward()
        opt.step()


def _save_train_checkpoint(path, model: SceneModel, opt: Adam,
                           rng: np.random.Generator, iteration: int,
                           cfg: TrainConfig):
    meta = {"iteration": iteration, "seed": cfg.seed,
            "rng": rng.bit_generator.state}
    formats.save_checkpoint(path, dict(model.state_dict()), opt.state(), meta)


def train_toy(scenes: list[TrainingScene], cfg: TrainConfig, out_dir,
              model_cfg: ModelConfig = ModelConfig(), resume=None,
              checkpoint_every: int | None = None,
              render_cfg: RenderConfig = RenderConfig()) -> TrainResult:
    """Fit the feed-forward model on generated scenes.

    Per iteration: pick a scene, sample 2..10 context views with one
    exposure each, reconstruct, re-render the context views, and minimize
    photometric + geometry consistency loss. The geometry encoder is fit
    against dataset depth first and stays frozen afterward.
    """
    if not scenes:
        raise ConfigError("train_toy needs at least one scene")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    model = SceneModel(model_cfg, seed=cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    bank = PerceptualBank()
    start_iter = 0
    losses: list[float] = []

    if resume is not None:
        model_state, opt_state, meta = formats.load_checkpoint(resume)
        model.load_state_dict(model_state)
        model.geometry.freeze()
        params = dict(_named_trainable(model, geometry=False))
        opt = Adam([AdamGroup("main", params, cfg.lr)])
        opt.load_state(opt_state)
        rng.bit_generator.state = meta["rng"]
        start_iter = int(meta["iteration"])
    else:
        _pretrain_geometry(model, scenes, cfg, rng)
        model.geometry.freeze()
        params = dict(_named_trainable(model, geometry=False))
        opt = Adam([AdamGroup("main", params, cfg.lr)])

    log_path = out / "loss_log.csv"
    mode = "a" if resume is not None and log_path.exists() else "w"
    log_file = open(log_path, mode, newline="")
    writer = csv.writer(log_file)
    if mode == "w":
        writer.writerow(["iter", "total", "rgb", "perc", "geom", "lr", "wall_ms"])

    ckpt_path = out / "checkpoint.bin"
    try:
        for it in range(start_iter, cfg.iters):
            t0 = time.perf_counter()
            scene = scenes[int(rng.integers(len(scenes)))]
            v = int(rng.integers(cfg.min_views, cfg.max_views + 1))
            v = min(v, scene.n_views)
            idx = [int(i) for i in rng.choice(scene.n_views, size=v,
                                              replace=False)]
            exp_idx = [int(e) for e in rng.integers(scene.ldr.shape[1], size=v)]
            images = torch.stack([scene.ldr[i, e]
                                  for i, e in zip(idx, exp_idx)])
            cams = [scene.cameras[i] for i in idx]
            exposures = ExposureContext.from_times(
                [scene.exposures[e] for e in exp_idx])

            result = model(images, exposures, cams)
            w1, b1, w2, b2 = _theta_views(result.theta, model_cfg.tonemap_hidden)
            size = tuple(images.shape[-2:])
            background = torch.zeros(3, dtype=images.dtype)
            rendered, depths = [], []
            for cam, rel in zip(cams, exposures.log_exposures):
                hdr, depth, _, _ = render_gaussians(
                    result.gaussians, cam, size, background, cfg=render_cfg)
                rendered.append(tonemap_apply(hdr, w1, b1, w2, b2, rel,
                                              exposures.anchor))
                depths.append(depth)
            targets = [images[i].permute(1, 2, 0) for i in range(v)]
            photo = photometric_loss(rendered, targets, cfg.loss, bank)
            geom = geometry_loss(result.geo.depth.detach(),
                                 torch.stack(depths),
                                 result.geo.confidence.detach(),
                                 cfg.loss.top_percent)
            loss = total_loss(photo.loss, geom, cfg.loss)

            if not torch.isfinite(loss):
                _dump_diagnostics(out / "diagnostics.txt", it, photo, geom,
                                  model)
                raise NumericalError(
                    f"training loss became non-finite at iteration {it}; "
                    f"see {out / 'diagnostics.txt'}")

            lr = cosine_lr(cfg, it)
            opt.set_lr("main", lr)
            opt.zero_grad()
            loss.backward()
            opt.step()

            wall_ms = (time.perf_counter() - t0) * 1e3
            losses.append(float(loss.detach()))
            writer.writerow([it, f"{float(loss.detach()):.8g}",
                             f"{float(photo.mse.detach()):.8g}",
                             f"{float(photo.perceptual.detach()):.8g}",
                             f"{float(geom.detach()):.8g}", f"{lr:.8g}",
                             f"{wall_ms:.3f}"])
            log_file.flush()

            done = it + 1
            if checkpoint_every and done % checkpoint_every == 0 \
                    and done < cfg.iters:
                _save_train_checkpoint(out / f"ckpt_{done:06d}.bin", model,
                                       opt, rng, done, cfg)
        _save_train_checkpoint(ckpt_path, model, opt, rng, cfg.iters, cfg)
    finally:
        log_file.close()
    return TrainResult(checkpoint=ckpt_path, log=log_path, losses=losses)


def _dump_diagnostics(path, iteration, photo, geom, model):
    with open(path, "w") as f:
        f.write(f"iteration {iteration}\n")
        f.write(f"photometric {float(photo.loss.detach())} "
                f"mse {float(photo.mse.detach())} "
                f"perceptual {float(photo.perceptual.detach())}\n")
        f.write(f"geometry {float(geom.detach())}\n")
        for name, p in model.named_parameters():
            gnorm = float(p.grad.norm()) if p.grad is not None else float("nan")
            f.write(f"{name} |p|={float(p.detach().norm()):.6g} "
                    f"|g|={gnorm:.6g}\n")


def load_model(checkpoint, model_cfg: ModelConfig = ModelConfig(),
               seed: int = 0) -> SceneModel:
    """Rebuild a SceneModel from a training checkpoint."""
    model_state, _, _ = formats.load_checkpoint(checkpoint)
    model = SceneModel(model_cfg, seed=seed)
    model.load_state_dict(model_state)
    model.geometry.freeze()
    model.eval()
    return model
