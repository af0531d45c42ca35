"""Scene fitting: Adam over primitive parameters with adaptive density control."""

from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from ..scenecore.geometry import GaussianScene, quat_to_rotmat
from ..splatrender import DEFAULT_SETTINGS, rasterize, rasterize_backward
from .losses import loss_gs_and_grad, loss_tgt_and_grad, psnr

logger = logging.getLogger(__name__)

SOURCE = "source"
TARGET = "target"
PARAM_GROUPS = ("positions", "log_scales", "quats", "opacity_logits", "sh")


class EmptyViewSet(ValueError):
    pass


class ConfigError(ValueError):
    pass


@dataclass
class OptimizerConfig:
    total_steps: int = 5000
    warmup_steps: int = 200
    adc_stop_step: int = 2500
    adc_interval: int = 100
    ssim_weight: float = 0.2
    target_ssim_weight: float = 0.02
    lpips_weight: float = 0.02
    lr_position: float = 1.6e-4
    lr_position_final: float = 1.6e-6
    lr_sh: float = 2.5e-3
    lr_sh_rest: float = 1.25e-4
    lr_opacity: float = 0.025
    lr_scale: float = 5e-3
    lr_rotation: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-15
    densify_grad_threshold: float = 1.2e-3
    prune_opacity: float = 0.005
    percent_dense: float = 0.01
    split_factor: float = 1.6
    max_screen_size: float = 20.0
    max_primitives: int = 4000
    random_background: bool = False
    log_interval: int = 50

    def __post_init__(self):
        self.validate()

    def validate(self):
        if not (self.warmup_steps < self.adc_stop_step <= self.total_steps) and self.adc_stop_step != 0:
            raise ConfigError("require warmup_steps < adc_stop_step <= total_steps (or adc_stop_step = 0)")
        for name in ("ssim_weight", "target_ssim_weight", "lpips_weight"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1]")
        if self.adc_interval <= 0:
            raise ConfigError("adc_interval must be positive")

    def replace(self, **kw):
        d = asdict(self)
        d.update(kw)
        return OptimizerConfig(**d)

    @classmethod
    def field_names(cls):
        return [f.name for f in fields(cls)]


@dataclass
class AdcStats:
    max_grad: np.ndarray
    abs_grad: np.ndarray
    grad_sum: np.ndarray
    count: np.ndarray
    max_radius: np.ndarray

    @classmethod
    def zeros(cls, n):
        return cls(np.zeros(n), np.zeros(n), np.zeros(n), np.zeros(n), np.zeros(n))

    def update(self, g):
        v = g.visible
        self.max_grad[v] = np.maximum(self.max_grad[v], g.mean2d_grad_norm[v])
        self.abs_grad[v] += g.abs_grad_norm[v]
        self.grad_sum[v] += g.mean2d_grad_norm[v]
        self.count[v] += 1
        self.max_radius[v] = np.maximum(self.max_radius[v], g.radius[v])

    def score(self):
        """Average AbsGrad per observation: the densification score."""
        return np.where(self.count > 0, self.abs_grad / np.maximum(self.count, 1), 0.0)


@dataclass
class Adam:
    lrs: dict
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-15
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0

    def step(self, params, grads):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1 - b1**self.t
        c2 = 1 - b2**self.t
        for k, g in grads.items():
            if k not in self.m:
                self.m[k] = np.zeros_like(params[k])
                self.v[k] = np.zeros_like(params[k])
            m, v = self.m[k], self.v[k]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            lr = self.lrs[k]
            params[k] -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def remap(self, index, n_new=0):
        """Keep state rows ``index``; append ``n_new`` zero rows."""
        for d in (self.m, self.v):
            for k, a in d.items():
                kept = a[index]
                d[k] = np.concatenate([kept, np.zeros((n_new,) + a.shape[1:])], 0)


def _sh_lr(cfg, n):
    lr = np.full((n, 1), cfg.lr_sh_rest)
    lr[0] = cfg.lr_sh
    return lr


def scene_extent(views):
    centers = np.array([v.center for v in views])
    mid = centers.mean(0)
    return 1.1 * max(float(np.max(np.linalg.norm(centers - mid, axis=1))), 1e-3)


def clone_primitives(params, mask, compensate_opacity=False):
    """Duplicate selected primitives in place.

    With ``compensate_opacity`` each copy gets ``1 - sqrt(1 - alpha)`` so the
    pair composites to the original weight at the kernel centre.
    """
    idx = np.nonzero(mask)[0]
    out = {k: np.concatenate([v, v[idx]], 0) for k, v in params.items()}
    if compensate_opacity and len(idx):
        a = 1.0 / (1.0 + np.exp(-params["opacity_logits"][idx]))
        a2 = 1.0 - np.sqrt(1.0 - a)
        logit = np.log(a2) - np.log1p(-a2)
        out["opacity_logits"][idx] = logit
        out["opacity_logits"][len(params["opacity_logits"]):] = logit
    return out


def split_primitives(params, mask, rng, factor=1.6, n_children=2):
    """Replace selected primitives by children sampled from the parent."""
    idx = np.nonzero(mask)[0]
    if len(idx) == 0:
        return params, np.arange(len(params["positions"])), 0
    s = np.exp(params["log_scales"][idx])
    U = quat_to_rotmat(params["quats"][idx])
    children = {}
    for k, v in params.items():
        children[k] = np.repeat(v[idx], n_children, 0)
    local = rng.normal(size=(len(idx) * n_children, 3)) * np.repeat(s, n_children, 0)
    children["positions"] = children["positions"] + np.einsum("kij,kj->ki", np.repeat(U, n_children, 0), local)
    children["log_scales"] = children["log_scales"] - np.log(factor)
    keep = np.nonzero(~mask)[0]
    out = {k: np.concatenate([v[keep], children[k]], 0) for k, v in params.items()}
    return out, keep, len(idx) * n_children


def densify_and_prune(params, stats, cfg, extent, rng, optimizer=None):
    score = stats.score()
    max_scale = np.exp(params["log_scales"]).max(1)
    high = score >= cfg.densify_grad_threshold
    n = len(score)
    big = stats.max_radius > cfg.max_screen_size
    budget = max(cfg.max_primitives - n, 0)
    clone = high & (max_scale <= cfg.percent_dense * extent)
    split = (high | big) & (max_scale > cfg.percent_dense * extent)
    # respect the primitive cap: strongest candidates first
    for mask, cost in ((clone, 1), (split, 1)):
        cand = np.nonzero(mask)[0]
        if len(cand) * cost > budget:
            keep = cand[np.argsort(-score[cand], kind="stable")[: budget // cost]]
            mask[:] = False
            mask[keep] = True
        budget -= int(mask.sum()) * cost

    params = clone_primitives(params, clone)
    n_cloned = int(clone.sum())
    split_mask = np.concatenate([split, np.zeros(n_cloned, dtype=bool)])
    if optimizer is not None:
        optimizer.remap(np.arange(n), n_cloned)
    params, keep, n_new = split_primitives(params, split_mask, rng, cfg.split_factor)
    if optimizer is not None:
        optimizer.remap(keep, n_new)

    opacity = 1.0 / (1.0 + np.exp(-params["opacity_logits"]))
    prune = opacity < cfg.prune_opacity
    if prune.all():
        prune[np.argmax(opacity)] = False
    keep = np.nonzero(~prune)[0]
    params = {k: v[keep] for k, v in params.items()}
    if optimizer is not None:
        optimizer.remap(keep)
    return params


def _render_loss(scene, view, kind, cfg, bg, settings, perceptual_hook):
    out = rasterize(scene, view, settings=settings, background=bg)
    if kind == TARGET:
        loss, g = loss_tgt_and_grad(out.color, view.image, cfg, perceptual_hook)
    else:
        loss, g = loss_gs_and_grad(out.color, view.image, cfg)
    return out, loss, g


def mean_loss(scene, train_views, cfg, settings=DEFAULT_SETTINGS, perceptual_hook=None):
    total = 0.0
    for view, kind in train_views:
        total += _render_loss(scene, view, kind, cfg, None, settings, perceptual_hook)[1]
    return total / len(train_views)


def fit(scene, train_views, cfg=None, seed=0, settings=DEFAULT_SETTINGS, perceptual_hook=None, history=None,
        extent=None):
    """Fit ``scene`` to ``train_views``: a list of ``(CameraView, kind)``.

    ``kind`` is ``"source"`` (L1 + D-SSIM) or ``"target"`` (MSE + D-SSIM +
    perceptual hook).  One random view per step.  When a list is passed as
    ``history`` it receives one dict per logged step.
    """
    cfg = cfg or OptimizerConfig()
    if not train_views:
        raise EmptyViewSet("fit needs at least one training view")
    train_views = list(train_views)
    rng = np.random.default_rng(seed)
    extent = extent or scene_extent([v for v, _ in train_views])
    out_dtype = scene.dtype
    params = {k: v.astype(np.float64) for k, v in scene.params().items()}
    n_sh = params["sh"].shape[1]

    def lrs(step):
        frac = min(step / max(cfg.total_steps, 1), 1.0)
        pos = np.exp(np.log(cfg.lr_position) * (1 - frac) + np.log(cfg.lr_position_final) * frac) * extent
        return {
            "positions": pos,
            "log_scales": cfg.lr_scale,
            "quats": cfg.lr_rotation,
            "opacity_logits": cfg.lr_opacity,
            "sh": _sh_lr(cfg, n_sh),
        }

    opt = Adam(lrs(0), cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
    stats = AdcStats.zeros(len(params["positions"]))
    make = lambda p: scene.with_params(p, dtype=np.float64)  # noqa: E731

    for step in range(1, cfg.total_steps + 1):
        cur = make(params)
        view, kind = train_views[int(rng.integers(len(train_views)))]
        bg = rng.uniform(size=3) if cfg.random_background else None
        out, loss, g = _render_loss(cur, view, kind, cfg, bg, settings, perceptual_hook)
        if not np.isfinite(loss):
            raise FloatingPointError(f"non-finite loss at step {step}")
        grads = rasterize_backward(cur, view, g, settings=settings, background=bg, forward=out)
        opt.lrs = lrs(step)
        opt.step(params, grads.as_dict())
        params["quats"] /= np.linalg.norm(params["quats"], axis=1, keepdims=True)

        adc_on = cfg.adc_stop_step > 0 and step <= cfg.adc_stop_step
        if adc_on:
            stats.update(grads)
            if step > cfg.warmup_steps and step % cfg.adc_interval == 0:
                params = densify_and_prune(params, stats, cfg, extent, rng, opt)
                stats = AdcStats.zeros(len(params["positions"]))

        if history is not None and (step % cfg.log_interval == 0 or step == 1 or step == cfg.total_steps):
            history.append(
                {
                    "step": step,
                    "loss": float(loss),
                    "psnr": psnr(np.clip(out.color, 0, 1), view.image),
                    "primitive_count": len(params["positions"]),
                }
            )
    return scene.with_params(params, dtype=out_dtype)


def write_training_log(path, history):
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=["step", "loss", "psnr", "primitive_count"])
        w.writeheader()
        for row in history:
            w.writerow({k: row[k] for k in w.fieldnames})
