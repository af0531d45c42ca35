"""Tile-based Gaussian splatting: forward compositing and its analytic adjoint.

Primitives are projected with the EWA affine approximation, depth-sorted once
globally (ties broken by primitive index) and alpha-composited front to back
inside each tile.  Per contribution ``w = min(max_weight, opacity * kernel)``;
contributions below ``skip_weight`` are ignored, and a pixel stops compositing
once its transmittance has fallen below ``min_transmittance`` (the primitive
that crosses the threshold is still composited).

The backward pass recomputes the per-tile compositing rather than storing
per-pixel lists.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .scenecore.geometry import GaussianScene, quat_to_rotmat
from .scenecore.sh import sh_basis, sh_basis_jacobian


@dataclass(frozen=True)
class RenderSettings:
    tile_size: int = 8
    near: float = 0.01
    lowpass: float = 0.3
    skip_weight: float = 1.0 / 255.0
    max_weight: float = 0.999
    min_transmittance: float = 1e-4
    cull_sigma: float = 3.0
    background: tuple = (0.0, 0.0, 0.0)
    workers: int = 1


DEFAULT_SETTINGS = RenderSettings()

# Tile extents never grow beyond the radius where the kernel drops below this.
_EXTENT_FLOOR = 1e-10


@dataclass(frozen=True)
class Projected2DGaussian:
    mean2d: np.ndarray
    cov2d: np.ndarray
    depth: float
    opacity: float
    rgb: np.ndarray
    source_index: int


CULLED = None


@dataclass
class Projection:
    """Vectorized projection of the visible primitives plus backward caches."""

    index: np.ndarray  # source primitive index, in global depth order
    mean2d: np.ndarray
    cov2d: np.ndarray
    conic: np.ndarray
    depth: np.ndarray
    opacity: np.ndarray
    rgb: np.ndarray
    bbox: np.ndarray  # (K, 4) xmin, ymin, xmax, ymax
    radius: np.ndarray
    cache: dict = field(default_factory=dict, repr=False)


@dataclass
class RenderOutput:
    color: np.ndarray
    alpha: np.ndarray
    depth: np.ndarray
    per_gaussian_stats: dict
    projection: Projection | None = field(default=None, repr=False)


@dataclass
class SceneGradients:
    positions: np.ndarray
    log_scales: np.ndarray
    quats: np.ndarray
    opacity_logits: np.ndarray
    sh: np.ndarray
    mean2d_grad_norm: np.ndarray
    abs_grad_norm: np.ndarray
    visible: np.ndarray
    radius: np.ndarray

    def as_dict(self):
        return {
            "positions": self.positions,
            "log_scales": self.log_scales,
            "quats": self.quats,
            "opacity_logits": self.opacity_logits,
            "sh": self.sh,
        }


def _dquat_rot(q):
    """``dR/dq`` for unit quaternions: shape ``(K, 4, 3, 3)``."""
    w, x, y, z = q.T
    o = np.zeros_like(w)
    dw = np.stack([np.stack([o, -z, y], -1), np.stack([z, o, -x], -1), np.stack([-y, x, o], -1)], -2)
    dx = np.stack([np.stack([o, y, z], -1), np.stack([y, -2 * x, -w], -1), np.stack([z, w, -2 * x], -1)], -2)
    dy = np.stack([np.stack([-2 * y, x, w], -1), np.stack([x, o, z], -1), np.stack([-w, z, -2 * y], -1)], -2)
    dz = np.stack([np.stack([-2 * z, -w, x], -1), np.stack([w, -2 * z, y], -1), np.stack([x, y, o], -1)], -2)
    return 2.0 * np.stack([dw, dx, dy, dz], 1)


def project_scene(scene, cam, settings=DEFAULT_SETTINGS):
    """Project all primitives; culled ones are dropped from the result."""
    mu = scene.positions.astype(np.float64)
    W = cam.rotation.T
    fx, fy = cam.intrinsics[0, 0], cam.intrinsics[1, 1]
    cx, cy = cam.intrinsics[0, 2], cam.intrinsics[1, 2]
    pc = (mu - cam.translation) @ cam.rotation
    z = pc[:, 2]
    keep = z > settings.near
    x, y = pc[:, 0], pc[:, 1]
    zs = np.where(keep, z, 1.0)
    mean2d = np.stack([fx * x / zs + cx, fy * y / zs + cy], -1)

    qn = np.linalg.norm(scene.quats.astype(np.float64), axis=1)
    qhat = scene.quats.astype(np.float64) / qn[:, None]
    U = quat_to_rotmat(qhat)
    s = np.exp(scene.log_scales.astype(np.float64))
    M = U * s[:, None, :]
    Sigma = M @ np.swapaxes(M, 1, 2)

    J = np.zeros((len(mu), 2, 3))
    J[:, 0, 0] = fx / zs
    J[:, 0, 2] = -fx * x / zs**2
    J[:, 1, 1] = fy / zs
    J[:, 1, 2] = -fy * y / zs**2
    T = J @ W
    cov2d = T @ Sigma @ np.swapaxes(T, 1, 2) + settings.lowpass * np.eye(2)
    cov2d = 0.5 * (cov2d + np.swapaxes(cov2d, 1, 2))

    opacity = 1.0 / (1.0 + np.exp(-scene.opacity_logits.astype(np.float64)))
    floor = max(settings.skip_weight, _EXTENT_FLOOR)
    # Mahalanobis radius where alpha * G falls to the skip threshold
    r_all = np.sqrt(2.0 * np.log(np.maximum(np.minimum(opacity, settings.max_weight) / floor, 1.0)))
    # the 3-sigma pad is widened to that radius so culling never drops a
    # contribution the skip rule would keep
    pad = np.maximum(settings.cull_sigma, r_all)
    sig = pad[:, None] * np.sqrt(np.stack([cov2d[:, 0, 0], cov2d[:, 1, 1]], -1))
    lo, hi = mean2d - sig, mean2d + sig
    inside = (hi[:, 0] >= -0.5) & (lo[:, 0] <= cam.width - 0.5) & (hi[:, 1] >= -0.5) & (lo[:, 1] <= cam.height - 0.5)

    # primitives that can never reach the skip threshold contribute nothing
    keep = keep & inside & (np.minimum(opacity, settings.max_weight) >= floor)

    idx = np.nonzero(keep)[0]
    order = np.lexsort((idx, z[idx]))
    idx = idx[order]

    v = mu[idx] - cam.translation
    vn = np.linalg.norm(v, axis=1)
    dirs = v / np.maximum(vn, 1e-12)[:, None]
    basis = sh_basis(dirs, scene.sh_degree)
    rgb_raw = np.einsum("kn,knc->kc", basis, scene.sh[idx].astype(np.float64))
    rgb = np.maximum(rgb_raw, 0.0)

    c2 = cov2d[idx]
    det = c2[:, 0, 0] * c2[:, 1, 1] - c2[:, 0, 1] ** 2
    conic = np.stack(
        [np.stack([c2[:, 1, 1], -c2[:, 0, 1]], -1), np.stack([-c2[:, 0, 1], c2[:, 0, 0]], -1)], -2
    ) / det[:, None, None]
    op = opacity[idx]
    r = r_all[idx]
    half = r[:, None] * np.sqrt(np.stack([c2[:, 0, 0], c2[:, 1, 1]], -1))
    m2 = mean2d[idx]
    bbox = np.concatenate([m2 - half, m2 + half], -1)
    radius = np.ceil(3.0 * np.sqrt(np.max(np.linalg.eigvalsh(c2), axis=1))) if len(idx) else np.zeros(0)

    cache = dict(
        pc=pc[idx], J=J[idx], T=T[idx], W=W, Sigma=Sigma[idx], M=M[idx], U=U[idx], s=s[idx], qhat=qhat[idx],
        qn=qn[idx], dirs=dirs, vn=vn, basis=basis, rgb_raw=rgb_raw, fx=fx, fy=fy,
    )
    return Projection(idx, m2, c2, conic, z[idx], op, rgb, bbox, radius, cache)


def project_gaussian(g, cam, settings=DEFAULT_SETTINGS):
    """Project one primitive; returns ``CULLED`` (``None``) when culled."""
    scene = GaussianScene(
        positions=[g.position],
        log_scales=[g.log_scale],
        quats=[g.rotation_quat],
        opacity_logits=[g.opacity_logit],
        sh=[g.color_sh],
        sh_degree=int(round(np.sqrt(len(g.color_sh)))) - 1,
        dtype=np.float64,
    )
    proj = project_scene(scene, cam, settings)
    if len(proj.index) == 0:
        return CULLED
    return Projected2DGaussian(
        proj.mean2d[0], proj.cov2d[0], float(proj.depth[0]), float(proj.opacity[0]), proj.rgb[0], 0
    )


def _tiles(cam, tile_size):
    for y0 in range(0, cam.height, tile_size):
        for x0 in range(0, cam.width, tile_size):
            yield x0, y0, min(x0 + tile_size, cam.width), min(y0 + tile_size, cam.height)


def _tile_members(proj, x0, y0, x1, y1):
    b = proj.bbox
    hit = (b[:, 2] >= x0) & (b[:, 0] <= x1 - 1) & (b[:, 3] >= y0) & (b[:, 1] <= y1 - 1)
    return np.nonzero(hit)[0]


def _composite(proj, ids, px, py, settings, bg):
    dx = px[:, None] - proj.mean2d[ids, 0][None, :]
    dy = py[:, None] - proj.mean2d[ids, 1][None, :]
    Q = proj.conic[ids]
    power = -0.5 * (Q[:, 0, 0] * dx * dx + Q[:, 1, 1] * dy * dy) - Q[:, 0, 1] * dx * dy
    G = np.exp(power)
    raw = proj.opacity[ids][None, :] * G
    clamped = raw > settings.max_weight
    w = np.where(clamped, settings.max_weight, raw)
    active = w >= settings.skip_weight
    w = np.where(active, w, 0.0)
    one_minus = 1.0 - w
    t_after = np.cumprod(one_minus, axis=1)
    t_before = np.concatenate([np.ones((len(px), 1)), t_after[:, :-1]], axis=1)
    alive = t_before >= settings.min_transmittance
    w = np.where(alive, w, 0.0)
    t_final = np.prod(np.where(alive, one_minus, 1.0), axis=1)
    contrib = w * t_before
    color = contrib @ proj.rgb[ids] + t_final[:, None] * bg[None, :]
    return dict(
        dx=dx, dy=dy, G=G, w=w, t_before=t_before, t_final=t_final, contrib=contrib, color=color,
        grad_mask=active & alive & ~clamped, one_minus=one_minus,
    )


def _background(settings, background):
    bg = settings.background if background is None else background
    return np.broadcast_to(np.asarray(bg, dtype=np.float64), (3,)).copy()


def rasterize(scene, cam, tile_size=None, settings=DEFAULT_SETTINGS, background=None):
    """Render ``scene`` from ``cam``; see module docstring for the rules."""
    tile_size = tile_size or settings.tile_size
    bg = _background(settings, background)
    H, W = cam.height, cam.width
    color = np.empty((H, W, 3))
    alpha = np.empty((H, W))
    depth = np.empty((H, W))
    proj = project_scene(scene, cam, settings)

    def run(tile):
        x0, y0, x1, y1 = tile
        ys, xs = np.mgrid[y0:y1, x0:x1]
        px, py = xs.ravel().astype(np.float64), ys.ravel().astype(np.float64)
        ids = _tile_members(proj, x0, y0, x1, y1)
        shape = (y1 - y0, x1 - x0)
        if len(ids) == 0:
            color[y0:y1, x0:x1] = bg
            alpha[y0:y1, x0:x1] = 0.0
            depth[y0:y1, x0:x1] = 0.0
            return
        out = _composite(proj, ids, px, py, settings, bg)
        a = 1.0 - out["t_final"]
        d = out["contrib"] @ proj.depth[ids]
        color[y0:y1, x0:x1] = out["color"].reshape(shape + (3,))
        alpha[y0:y1, x0:x1] = a.reshape(shape)
        with np.errstate(invalid="ignore", divide="ignore"):
            depth[y0:y1, x0:x1] = np.where(a > 1e-8, d / a, 0.0).reshape(shape)

    _for_tiles(run, list(_tiles(cam, tile_size)), settings.workers)
    stats = {"index": proj.index, "radius": proj.radius}
    return RenderOutput(color, alpha, depth, stats, proj)


def _for_tiles(fn, tiles, workers):
    if workers and workers > 1:
        with ThreadPoolExecutor(workers) as ex:
            list(ex.map(fn, tiles))
    else:
        for t in tiles:
            fn(t)


def rasterize_backward(scene, cam, upstream_grad, tile_size=None, settings=DEFAULT_SETTINGS, background=None,
                       forward=None):
    """Gradients of ``sum(upstream_grad * color)`` w.r.t. every primitive parameter.

    ``forward`` may carry the :class:`RenderOutput` of the matching forward
    call to reuse its projection.
    """
    tile_size = tile_size or settings.tile_size
    bg = _background(settings, background)
    proj = forward.projection if forward is not None and forward.projection is not None else project_scene(
        scene, cam, settings)
    g_img = np.asarray(upstream_grad, dtype=np.float64).reshape(cam.height, cam.width, 3)
    n = len(proj.index)
    d_mean = np.zeros((n, 2))
    d_conic = np.zeros((n, 2, 2))
    d_op = np.zeros(n)
    d_rgb = np.zeros((n, 3))
    abs_mean = np.zeros((n, 2))

    def run(tile):
        x0, y0, x1, y1 = tile
        ids = _tile_members(proj, x0, y0, x1, y1)
        if len(ids) == 0:
            return None
        ys, xs = np.mgrid[y0:y1, x0:x1]
        px, py = xs.ravel().astype(np.float64), ys.ravel().astype(np.float64)
        g = g_img[y0:y1, x0:x1].reshape(-1, 3)
        o = _composite(proj, ids, px, py, settings, bg)
        rgb = proj.rgb[ids]
        gc = g @ rgb.T  # (P, Kt)
        term = gc * o["contrib"]
        suffix = np.cumsum(term[:, ::-1], axis=1)[:, ::-1] - term
        suffix = suffix + (o["t_final"] * (g @ bg))[:, None]
        dw = gc * o["t_before"] - suffix / o["one_minus"]
        draw = np.where(o["grad_mask"], dw, 0.0)
        op = proj.opacity[ids]
        dG = draw * op[None, :]
        dpow = dG * o["G"]
        Q = proj.conic[ids]
        dx, dy = o["dx"], o["dy"]
        gmx = dpow * (Q[None, :, 0, 0] * dx + Q[None, :, 0, 1] * dy)
        gmy = dpow * (Q[None, :, 0, 1] * dx + Q[None, :, 1, 1] * dy)
        dq = np.empty((len(ids), 2, 2))
        dq[:, 0, 0] = -0.5 * np.sum(dpow * dx * dx, 0)
        dq[:, 0, 1] = dq[:, 1, 0] = -0.5 * np.sum(dpow * dx * dy, 0)
        dq[:, 1, 1] = -0.5 * np.sum(dpow * dy * dy, 0)
        return (
            ids,
            np.stack([gmx.sum(0), gmy.sum(0)], -1),
            dq,
            np.sum(draw * o["G"], 0),
            o["contrib"].T @ g,
            np.stack([np.abs(gmx).sum(0), np.abs(gmy).sum(0)], -1),
        )

    tiles = list(_tiles(cam, tile_size))
    if settings.workers and settings.workers > 1:
        with ThreadPoolExecutor(settings.workers) as ex:
            parts = list(ex.map(run, tiles))
    else:
        parts = [run(t) for t in tiles]
    # reduction happens on one thread so tiles never write shared buffers
    for part in parts:
        if part is None:
            continue
        ids, a, b, c, d, e = part
        d_mean[ids] += a
        d_conic[ids] += b
        d_op[ids] += c
        d_rgb[ids] += d
        abs_mean[ids] += e

    grads = _chain_to_params(scene, cam, proj, d_mean, d_conic, d_op, d_rgb, settings)
    K = len(scene)
    mg = np.zeros(K)
    ag = np.zeros(K)
    vis = np.zeros(K, dtype=bool)
    rad = np.zeros(K)
    mg[proj.index] = np.linalg.norm(d_mean, axis=1)
    ag[proj.index] = np.linalg.norm(abs_mean, axis=1)
    vis[proj.index] = True
    rad[proj.index] = proj.radius
    return SceneGradients(*grads, mean2d_grad_norm=mg, abs_grad_norm=ag, visible=vis, radius=rad)


def _chain_to_params(scene, cam, proj, d_mean, d_conic, d_op, d_rgb, settings):
    K = len(scene)
    c = proj.cache
    idx = proj.index
    out_pos = np.zeros((K, 3))
    out_ls = np.zeros((K, 3))
    out_q = np.zeros((K, 4))
    out_op = np.zeros(K)
    out_sh = np.zeros(scene.sh.shape)
    if len(idx) == 0:
        return out_pos, out_ls, out_q, out_op, out_sh

    Q = proj.conic
    d_cov = -Q @ d_conic @ Q
    d_cov = 0.5 * (d_cov + np.swapaxes(d_cov, 1, 2))
    T, Sigma, W = c["T"], c["Sigma"], c["W"]
    d_sigma = np.swapaxes(T, 1, 2) @ d_cov @ T
    d_T = 2.0 * d_cov @ T @ Sigma
    d_J = d_T @ W.T

    fx, fy = c["fx"], c["fy"]
    x, y, z = c["pc"].T
    d_pc = np.zeros((len(idx), 3))
    d_pc[:, 0] = fx / z * d_mean[:, 0] - fx / z**2 * d_J[:, 0, 2]
    d_pc[:, 1] = fy / z * d_mean[:, 1] - fy / z**2 * d_J[:, 1, 2]
    d_pc[:, 2] = (
        -fx * x / z**2 * d_mean[:, 0]
        - fy * y / z**2 * d_mean[:, 1]
        - fx / z**2 * d_J[:, 0, 0]
        + 2 * fx * x / z**3 * d_J[:, 0, 2]
        - fy / z**2 * d_J[:, 1, 1]
        + 2 * fy * y / z**3 * d_J[:, 1, 2]
    )
    d_mu = d_pc @ W

    # colour: rgb = max(0, basis(dir) . sh)
    d_rgb = d_rgb * (c["rgb_raw"] > 0)
    basis = c["basis"]
    out_sh[idx] = basis[:, :, None] * d_rgb[:, None, :]
    if scene.sh_degree > 0:
        dB = sh_basis_jacobian(c["dirs"], scene.sh_degree)  # (K, n, 3)
        d_basis = np.einsum("knc,kc->kn", scene.sh[idx].astype(np.float64), d_rgb)
        d_dir = np.einsum("kn,knj->kj", d_basis, dB)
        dirs = c["dirs"]
        d_mu += (d_dir - dirs * np.sum(dirs * d_dir, 1, keepdims=True)) / c["vn"][:, None]
    out_pos[idx] = d_mu

    U, s, M = c["U"], c["s"], c["M"]
    d_M = 2.0 * d_sigma @ M
    out_ls[idx] = np.einsum("kji,kji->ki", d_M, U) * s
    d_U = d_M * s[:, None, :]
    d_qhat = np.einsum("kij,kqij->kq", d_U, _dquat_rot(c["qhat"]))
    qhat = c["qhat"]
    out_q[idx] = (d_qhat - qhat * np.sum(qhat * d_qhat, 1, keepdims=True)) / c["qn"][:, None]

    op = proj.opacity
    out_op[idx] = d_op * op * (1.0 - op)
    return out_pos, out_ls, out_q, out_op, out_sh
