"""Latent codec and the small corruption task used to train velocity networks."""

from __future__ import annotations

import numpy as np
from scipy.ndimage import gaussian_filter

from ..flowcore import FlowBatch
from ..splatrender import rasterize
from ..velocitynet.encoding import closest_to_centroid, compute_raymap, draw_view_indices
from .synthetic import ORBIT, make_trajectory, random_gt_scene


def encode(images, factor=4):
    """Average-pool ``(..., H, W, C)`` images by ``factor``: the latent."""
    images = np.asarray(images, dtype=np.float64)
    *lead, H, W, C = images.shape
    if H % factor or W % factor:
        raise ValueError(f"image size {H}x{W} is not divisible by {factor}")
    x = images.reshape(*lead, H // factor, factor, W // factor, factor, C)
    return x.mean(axis=(-4, -2))


def upsample(latent, factor=4):
    """Bilinear upsampling with pixel-centre alignment and edge clamping."""
    latent = np.asarray(latent, dtype=np.float64)
    h, w = latent.shape[-3:-1]

    def axis_weights(n):
        pos = (np.arange(n * factor) + 0.5) / factor - 0.5
        lo = np.clip(np.floor(pos).astype(int), 0, n - 1)
        hi = np.clip(lo + 1, 0, n - 1)
        frac = np.clip(pos - np.floor(pos), 0, 1)
        frac = np.where(pos < 0, 0.0, frac)
        return lo, hi, frac

    ylo, yhi, fy = axis_weights(h)
    xlo, xhi, fx = axis_weights(w)
    rows = latent[..., ylo, :, :] * (1 - fy)[:, None, None] + latent[..., yhi, :, :] * fy[:, None, None]
    return rows[..., xlo, :] * (1 - fx)[:, None] + rows[..., xhi, :] * fx[:, None]


def decode_residual(render, z_in, z_out, factor=4):
    """Image after the flow: the rendering plus the upsampled latent change."""
    return np.clip(np.asarray(render) + upsample(np.asarray(z_out) - np.asarray(z_in), factor), 0.0, 1.0)


def corrupt(latent, severity, rng):
    """Blur, low-frequency colour drift, a floater blob and noise."""
    if severity <= 0:
        return latent.copy()
    h, w, C = latent.shape
    out = np.stack([gaussian_filter(latent[..., c], 1.2 * severity, mode="nearest") for c in range(C)], -1)
    gain = upsample(rng.normal(size=(2, 2, C)), max(h // 2, 1))[:h, :w]
    out = out * (1 + 0.25 * severity * gain)
    cy, cx = rng.uniform(0, h), rng.uniform(0, w)
    ys, xs = np.mgrid[0:h, 0:w]
    blob = np.exp(-((ys - cy) ** 2 + (xs - cx) ** 2) / (2 * 1.2**2))
    out = out + severity * 0.3 * rng.uniform(-1, 1, size=C) * blob[..., None]
    out = out + severity * 0.03 * rng.normal(size=out.shape)
    return out


class CorruptionDataset:
    """Clean multi-view latents whose targets are corrupted on access.

    With ``fresh`` every access draws a new corruption from one running
    generator, and every frame of the item gets the same random channel
    permutation and gain (augmentation for training).  Otherwise item ``i``
    always gets the same corruption and no colour change (fixed validation
    sets).
    """

    def __init__(self, clean, seed=0, clean_fraction=0.2, max_severity=1.0, fresh=False):
        self.clean = clean
        self.seed = seed
        self.clean_fraction = clean_fraction
        self.max_severity = max_severity
        self.fresh = fresh
        self._rng = np.random.default_rng(seed)

    def __len__(self):
        return len(self.clean)

    def __getitem__(self, i):
        rng = self._rng if self.fresh else np.random.default_rng((self.seed, int(i)))
        z1, cond = self.clean[i]
        if self.fresh:
            perm = rng.permutation(z1.shape[-1])
            gain = rng.uniform(0.75, 1.25, size=z1.shape[-1])
            z1 = z1[..., perm] * gain
            cond = dict(cond, src=cond["src"][..., perm] * gain)
        z0 = np.empty_like(z1)
        for k in range(z1.shape[1]):
            sev = 0.0 if rng.uniform() < self.clean_fraction else rng.uniform(0, self.max_severity)
            z0[0, k] = corrupt(z1[0, k], sev, rng)
        return FlowBatch(z0, z1, cond)

    def items(self):
        return [self[i] for i in range(len(self))]


def make_corruption_dataset(seed, n_items, n_targets=2, n_sources=2, image_size=32, factor=4, n_primitives=40,
                            clean_fraction=0.2, max_severity=1.0, fresh=False):
    """Corrupted targets plus clean sources, batch size 1 per item.

    Each item comes from its own random scene and a short run of an orbit.
    Ray maps are relative to the frame closest to the camera centroid.
    Severity is uniform in ``[0, max_severity]``, exactly zero for a
    ``clean_fraction`` of the targets.
    """
    rng = np.random.default_rng(seed)
    V = n_targets + n_sources
    h = image_size // factor
    clean = []
    for _ in range(n_items):
        gt = random_gt_scene(rng, n_primitives)
        cams = make_trajectory(ORBIT, 24, image_size, radius=rng.uniform(2.8, 3.6))
        start = int(rng.integers(len(cams)))
        stride = int(rng.integers(1, 3))
        frames = [cams[(start + k * stride) % len(cams)] for k in range(V)]
        lat = np.stack([encode(np.clip(rasterize(gt, c).color, 0, 1), factor) for c in frames])
        # targets interleave with sources along the trajectory
        tgt_pos = np.sort(rng.choice(V, size=n_targets, replace=False))
        src_pos = np.array([i for i in range(V) if i not in set(tgt_pos)], dtype=int)
        perm = np.concatenate([tgt_pos, src_pos])
        ref = frames[closest_to_centroid(frames)]
        ray = np.stack([compute_raymap(frames[i], ref, h, h) for i in perm])
        idx = draw_view_indices(rng, V)[perm]
        cond = {"src": lat[src_pos][None], "raymaps": ray[None], "indices": idx[None]}
        clean.append((lat[tgt_pos][None], cond))
    return CorruptionDataset(clean, seed, clean_fraction, max_severity, fresh)
