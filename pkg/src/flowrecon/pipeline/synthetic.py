"""Seeded synthetic scenes with ground-truth Gaussians, trajectories and depths."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..scenecore.geometry import CameraView, GaussianScene, intrinsics_matrix, look_at
from ..scenecore.sh import rgb_to_sh0
from ..splatrender import rasterize

ORBIT = "orbit"
SPLINE = "spline"


@dataclass(frozen=True)
class SyntheticScene:
    """Ground truth plus the depth cues a real capture pipeline would provide.

    ``mono_depths`` are metric (multiplied by ``metric_scale``) with
    multiplicative log-normal noise; ``sparse_depths`` stand in for
    triangulated depth in scene units (zero where unavailable).
    """

    gt: GaussianScene
    views: list
    mono_depths: list
    confidences: list
    sparse_depths: list
    metric_scale: float


def random_gt_scene(rng, n_primitives, radius=1.0, scale_range=(0.05, 0.16)):
    """A blob-shaped object of coloured Gaussians around the origin.

    Smaller ``scale_range`` values give finer detail for a given count.
    """
    n_clusters = max(1, min(6, n_primitives // 20))
    centers = rng.normal(size=(n_clusters, 3)) * 0.45 * radius
    palette = rng.uniform(0.15, 0.95, size=(n_clusters, 3))
    which = rng.integers(n_clusters, size=n_primitives)
    pos = centers[which] + rng.normal(size=(n_primitives, 3)) * 0.3 * radius
    pos = np.clip(pos, -radius, radius)
    color = np.clip(palette[which] + rng.normal(size=(n_primitives, 3)) * 0.12, 0.02, 0.98)
    log_scales = np.log(rng.uniform(*scale_range, size=(n_primitives, 3)) * radius)
    quats = rng.normal(size=(n_primitives, 4))
    quats /= np.linalg.norm(quats, axis=1, keepdims=True)
    alpha = rng.uniform(0.55, 0.95, size=n_primitives)
    return GaussianScene(
        positions=pos,
        log_scales=log_scales,
        quats=quats,
        opacity_logits=np.log(alpha) - np.log1p(-alpha),
        sh=rgb_to_sh0(color)[:, None, :],
        sh_degree=0,
    )


def make_trajectory(kind, n_views, image_size=32, radius=3.2, focal_factor=1.1, rng=None):
    """Cameras looking at the origin: a full orbit or an open wobbling arc."""
    H = W = image_size
    f = focal_factor * W
    K = intrinsics_matrix(f, f, (W - 1) / 2, (H - 1) / 2)
    if kind == ORBIT:
        ang = np.linspace(0, 2 * np.pi, n_views, endpoint=False)
        height = 0.6 * np.sin(2 * ang)
    elif kind == SPLINE:
        ang = np.linspace(-0.6 * np.pi, 0.6 * np.pi, n_views)
        height = 0.8 * np.sin(1.5 * ang + (0.0 if rng is None else rng.uniform(0, np.pi)))
    else:
        raise ValueError(f"unknown trajectory kind {kind!r}")
    views = []
    for i, (a, h) in enumerate(zip(ang, height)):
        c = np.array([radius * np.sin(a), h, -radius * np.cos(a)])
        views.append(CameraView(look_at(c, np.zeros(3)), c, K, W, H, id=i))
    return views


def generate_synthetic_scene(seed, n_primitives=150, trajectory_kind=ORBIT, n_views=48, image_size=32,
                             depth_noise=0.05, metric_scale=1.7, sparse_fraction=0.2, scale_range=(0.05, 0.16)):
    if n_primitives < 1:
        raise ValueError("n_primitives must be >= 1")
    rng = np.random.default_rng(seed)
    gt = random_gt_scene(rng, n_primitives, scale_range=scale_range)
    cams = make_trajectory(trajectory_kind, n_views, image_size, rng=rng)
    views, mono, conf, sparse = [], [], [], []
    for cam in cams:
        out = rasterize(gt, cam)
        views.append(cam.with_image(np.clip(out.color, 0.0, 1.0)))
        valid = out.alpha > 0.5
        noise = rng.normal(size=out.depth.shape) * depth_noise
        mono.append(np.where(valid, out.depth * metric_scale * np.exp(noise), 0.0))
        conf.append(np.where(valid, 1.0 / (np.abs(noise) + 0.01), 0.0))
        pick = valid & (rng.uniform(size=valid.shape) < sparse_fraction)
        sparse.append(np.where(pick, out.depth * np.exp(rng.normal(size=valid.shape) * 0.01), 0.0))
    return SyntheticScene(gt, views, mono, conf, sparse, metric_scale)
