"""Initial reconstruction, flow-guided refinement, training pairs and metrics."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .. import viewplan
from ..gsopt import SOURCE, TARGET, OptimizerConfig, align_metric_scale, fit, psnr, ssim, ssim_map
from ..scenecore.geometry import GaussianScene
from ..scenecore.sh import rgb_to_sh0
from ..splatrender import rasterize
from ..velocitynet.encoding import closest_to_centroid, compute_raymap
from .toydata import decode_residual, encode

logger = logging.getLogger(__name__)

UNDEFINED = float("nan")


class NoValidTargets(RuntimeError):
    pass


@dataclass
class DepthCues:
    """Per-view depth inputs keyed by view id: metric mono depth with
    confidence, and sparse scene-unit depth (triangulation stand-in)."""

    mono: dict
    confidence: dict
    sparse: dict

    @classmethod
    def from_synthetic(cls, synth):
        ids = [v.id for v in synth.views]
        return cls(dict(zip(ids, synth.mono_depths)), dict(zip(ids, synth.confidences)),
                   dict(zip(ids, synth.sparse_depths)))


@dataclass
class ReconConfig:
    """``steps`` is the short initial schedule; ``refine_steps`` the refit."""

    steps: int = 1500
    refine_steps: int = 5000
    voxel_size: float = 0.05
    max_init_points: int = 600
    init_opacity: float = 0.3
    k_neighbors: int = 2
    densify_grad_threshold: float = 1.2e-3
    max_primitives: int = 1500
    seed: int = 0

    def optimizer(self, steps=None, **kw):
        steps = self.steps if steps is None else steps
        stop = max(steps // 2, 1)
        warm = min(steps // 10, stop - 1)
        base = OptimizerConfig(
            total_steps=steps,
            warmup_steps=warm,
            adc_stop_step=stop if stop > warm else 0,
            adc_interval=max(steps // 20, 1),
            densify_grad_threshold=self.densify_grad_threshold,
            max_primitives=self.max_primitives,
            log_interval=max(steps // 20, 1),
        )
        return base.replace(**kw) if kw else base


def voxel_dedup(points, colors, voxel_size):
    """Keep the first point in each occupied voxel; ``voxel_size <= 0`` keeps all."""
    if voxel_size <= 0 or len(points) == 0:
        return points, colors
    keys = np.floor(points / voxel_size).astype(np.int64)
    _, first = np.unique(keys, axis=0, return_index=True)
    first = np.sort(first)
    return points[first], colors[first]


def unproject_views(views, depth_maps, masks):
    pts, cols = [], []
    for v, d, m in zip(views, depth_maps, masks):
        m = np.asarray(m, dtype=bool) & (np.asarray(d) > 0)
        pts.append(v.unproject(d, m))
        cols.append(v.image[m])
    if not pts:
        return np.zeros((0, 3)), np.zeros((0, 3))
    return np.concatenate(pts), np.concatenate(cols)


def source_points(views, cues, cfg, keyframe_ids=None):
    """Scale-aligned, deduplicated unprojection of keyframe depths.

    Returns ``(points, colors, beta)``.
    """
    graph = viewplan.build_covis_graph(views, cfg.k_neighbors, keyframe_ids)
    kf = [v for v in views if v.id in set(graph.keyframes)]
    beta = align_metric_scale([cues.sparse[v.id] for v in views], [cues.mono[v.id] for v in views],
                              [cues.confidence[v.id] for v in views])
    depths = [cues.mono[v.id] / beta for v in kf]
    masks = [cues.confidence[v.id] > 0 for v in kf]
    pts, cols = unproject_views(kf, depths, masks)
    pts, cols = voxel_dedup(pts, cols, cfg.voxel_size)
    return pts, cols, beta


def scene_from_points(points, colors, cfg, scene_scale=1.0, rng=None):
    """Isotropic primitives with nearest-neighbour sizes."""
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    if len(points) > cfg.max_init_points:
        keep = np.sort(rng.choice(len(points), cfg.max_init_points, replace=False))
        points, colors = points[keep], colors[keep]
    n = len(points)
    if n == 0:
        raise ValueError("no points to initialize from")
    if n > 1:
        k = min(4, n)
        d, _ = cKDTree(points).query(points, k=k)
        nn = np.sqrt(np.mean(d[:, 1:] ** 2, axis=1))
    else:
        nn = np.full(1, 0.1)
    scale = np.clip(nn, 1e-3, None)
    a = cfg.init_opacity
    return GaussianScene(
        positions=points,
        log_scales=np.repeat(np.log(scale)[:, None], 3, 1),
        quats=np.tile([1.0, 0, 0, 0], (n, 1)),
        opacity_logits=np.full(n, math.log(a / (1 - a))),
        sh=rgb_to_sh0(np.clip(colors, 0.01, 0.99))[:, None, :],
        scene_scale=scene_scale,
    )


def random_init_scene(n, views, cfg, rng=None):
    """Uniform points in the box the cameras look into, random colours."""
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    centers = np.array([v.center for v in views])
    look = centers + np.array([v.forward for v in views]) * np.linalg.norm(centers - centers.mean(0), axis=1).mean()
    mid = look.mean(0)
    half = max(np.abs(look - mid).max(), 0.5)
    pts = mid + rng.uniform(-half, half, size=(n, 3))
    return scene_from_points(pts, rng.uniform(0.1, 0.9, size=(n, 3)), cfg, rng=rng)


def initial_reconstruction(views, cues, cfg=None, history=None):
    """Fit a reconstruction to posed source images from depth-initialized points."""
    cfg = cfg or ReconConfig()
    if len(views) < 2:
        raise ValueError("initial reconstruction needs at least two views")
    pts, cols, beta = source_points(views, cues, cfg)
    init = scene_from_points(pts, cols, cfg, scene_scale=beta)
    return fit(init, [(v, SOURCE) for v in views], cfg.optimizer(), seed=cfg.seed, history=history)


# -- flows ------------------------------------------------------------------


class IdentityFlow:
    """Generated views are the renderings themselves (a zero velocity field)."""

    def __call__(self, renders, targets, sources):
        return [np.array(r) for r in renders]


class OracleFlow:
    """Upper bound: ground-truth images at the target poses."""

    def __init__(self, gt_scene):
        self.gt = gt_scene

    def __call__(self, renders, targets, sources):
        return [np.clip(rasterize(self.gt, t).color, 0, 1) for t in targets]


class ModelFlow:
    """Runs a trained :class:`VelocityNet` on latent renderings.

    Targets are processed ``n_targets`` at a time with ``n_sources``
    reference views each; the latent change is decoded as a residual on
    top of the full-resolution rendering.
    """

    def __init__(self, model, n_targets=2, n_sources=2, factor=4, n_steps=20, schedule="decreasing", seed=0):
        self.model = model
        self.n_targets = n_targets
        self.n_sources = n_sources
        self.factor = factor
        self.n_steps = n_steps
        self.schedule = schedule
        self.seed = seed

    def __call__(self, renders, targets, sources):
        from ..flowcore import integrate_euler
        from ..velocitynet.encoding import draw_view_indices

        rng = np.random.default_rng(self.seed)
        out = [None] * len(targets)
        N, M = self.n_targets, self.n_sources
        for start in range(0, len(targets), N):
            group = list(range(start, min(start + N, len(targets))))
            while len(group) < N:
                group.append(group[-1])
            tg = [targets[i] for i in group]
            refs = viewplan.select_reference_views(sources, tg, min(M, len(sources)), seed=self.seed)
            while len(refs) < M:
                refs.append(refs[-1])
            frames = tg + refs
            h = tg[0].height // self.factor
            w = tg[0].width // self.factor
            ref = frames[closest_to_centroid(frames)]
            ray = np.stack([compute_raymap(f, ref, h, w) for f in frames])
            z_in = np.stack([encode(renders[i], self.factor) for i in group])
            src = np.stack([encode(r.image, self.factor) for r in refs])
            idx = _trajectory_indices(frames, sources, rng, draw_view_indices)
            cond = {"src": src[None], "raymaps": ray[None], "indices": idx[None]}
            if self.model.cfg.cond_channels:
                cond["extra"] = np.concatenate([z_in, src], 0)[None]
            z_out = integrate_euler(self.model.velocity, z_in[None], cond, self.n_steps, self.schedule)[0]
            for k, i in enumerate(group):
                if out[i] is None:
                    out[i] = decode_residual(renders[i], z_in[k], z_out[k], self.factor)
        return out


def _trajectory_indices(frames, sources, rng, draw):
    """Ascending random indices ordered by position along the capture."""
    src_c = np.array([s.center for s in sources])
    ids = np.array([s.id for s in sources], dtype=float)
    key = []
    for f in frames:
        j = int(np.argmin(np.linalg.norm(src_c - f.center, axis=1)))
        key.append(ids[j] + (0.0 if f.id == sources[j].id else 0.5))
    rank = np.argsort(np.argsort(key, kind="stable"), kind="stable")
    return draw(rng, len(frames))[rank]


# -- refinement -------------------------------------------------------------


@dataclass
class RefineResult:
    scene: GaussianScene
    targets: list
    generated: list
    renders: list
    tags: list = field(default_factory=list)


def refine_reconstruction(g_src, source_views, flow, cues, cfg=None, plan_cfg=None, target_loss=TARGET,
                          reinit=True, history=None):
    """Generate views at planned targets and refit on sources plus targets.

    ``target_loss`` selects the objective on generated views: ``"target"``
    (MSE-dominated) or ``"source"`` (the ordinary L1/D-SSIM loss).
    """
    cfg = cfg or ReconConfig()
    plan_cfg = plan_cfg or viewplan.PlanConfig(seed=cfg.seed)
    keep = g_src.opacities > 0.1
    pts = np.asarray(g_src.positions, dtype=np.float64)[keep if keep.sum() >= 10 else slice(None)]
    targets = viewplan.plan_targets(source_views, pts, plan_cfg)
    if len(targets) == 0:
        raise NoValidTargets("every planned target pose was filtered out")
    outs = [rasterize(g_src, t) for t in targets.poses]
    renders = [np.clip(o.color, 0, 1) for o in outs]
    generated = flow(renders, targets.poses, source_views)
    tgt_views = [t.with_image(g) for t, g in zip(targets.poses, generated)]

    pts, cols, beta = source_points(source_views, cues, cfg, keyframe_ids=[v.id for v in source_views])
    if reinit:
        gp, gc = unproject_views(tgt_views, [o.depth for o in outs], [o.alpha > 0.5 for o in outs])
        pts, cols = voxel_dedup(np.concatenate([pts, gp]), np.concatenate([cols, gc]), cfg.voxel_size)
    init = scene_from_points(pts, cols, cfg, scene_scale=g_src.scene_scale)
    train = [(v, SOURCE) for v in source_views] + [(v, target_loss) for v in tgt_views]
    scene = fit(init, train, cfg.optimizer(cfg.refine_steps), seed=cfg.seed, history=history)
    return RefineResult(scene, targets.poses, generated, renders, list(targets.tags))


# -- pairs ------------------------------------------------------------------


@dataclass(frozen=True)
class PairRecord:
    rendering: np.ndarray
    ground_truth: np.ndarray
    camera: object
    source_view_ids: tuple
    sparsity: int

    def __post_init__(self):
        if np.shape(self.rendering) != np.shape(self.ground_truth):
            raise ValueError("rendering and ground truth differ in shape")


def equally_spaced(views, s):
    idx = np.unique(np.round(np.linspace(0, len(views), s, endpoint=False)).astype(int))
    return [views[i] for i in idx]


def generate_pairs(views, cues, sparsity_levels, cfg=None):
    """(rendering, ground truth) pairs on held-out views for each sparsity level."""
    cfg = cfg or ReconConfig()
    records = []
    for s in sparsity_levels:
        inputs = equally_spaced(views, s)
        in_ids = {v.id for v in inputs}
        held = [v for v in views if v.id not in in_ids]
        if not held:
            logger.warning("sparsity %d leaves no held-out views; no pairs", s)
            continue
        scene = initial_reconstruction(inputs, cues, cfg)
        for v in held:
            r = np.clip(rasterize(scene, v).color, 0, 1)
            records.append(PairRecord(r, v.image, v, tuple(sorted(in_ids)), s))
    return records


def pairs_to_flow_batches(records, views, n_targets=2, n_sources=2, factor=4, seed=0):
    """Group pair records into ``FlowBatch`` items with nearby clean sources."""
    from ..flowcore import FlowBatch
    from ..velocitynet.encoding import draw_view_indices

    rng = np.random.default_rng(seed)
    by_id = {v.id: v for v in views}
    items = []
    groups = {}
    for r in records:
        groups.setdefault((r.sparsity, r.source_view_ids), []).append(r)
    for (s, src_ids), recs in groups.items():
        sources = [by_id[i] for i in src_ids]
        order = rng.permutation(len(recs))
        for start in range(0, len(order) - n_targets + 1, n_targets):
            chunk = [recs[i] for i in order[start : start + n_targets]]
            cams = [r.camera for r in chunk]
            refs = viewplan.select_reference_views(sources, cams, min(n_sources, len(sources)), seed=seed)
            while len(refs) < n_sources:
                refs.append(refs[-1])
            frames = cams + refs
            h = cams[0].height // factor
            w = cams[0].width // factor
            ref = frames[closest_to_centroid(frames)]
            ray = np.stack([compute_raymap(f, ref, h, w) for f in frames])
            idx = _trajectory_indices(frames, sources, rng, draw_view_indices)
            z0 = np.stack([encode(r.rendering, factor) for r in chunk])
            z1 = np.stack([encode(r.ground_truth, factor) for r in chunk])
            src = np.stack([encode(v.image, factor) for v in refs])
            items.append(FlowBatch(z0[None], z1[None], {"src": src[None], "raymaps": ray[None], "indices": idx[None]}))
    return items


# -- metrics ----------------------------------------------------------------


@dataclass
class MetricsReport:
    rows: list
    mean_psnr: float
    mean_ssim: float
    coverage: float
    primitive_count: int
    opacity_threshold: float | None = None


def evaluate(scene, test_views, opacity_threshold=None):
    """PSNR, SSIM and coverage per view; with a threshold, metrics use only
    pixels whose accumulated opacity reaches it (undefined when none do)."""
    rows = []
    covered_total, pixels_total = 0, 0
    for v in test_views:
        out = rasterize(scene, v)
        img = np.clip(out.color, 0, 1)
        thr = 0.0 if opacity_threshold is None else opacity_threshold
        mask = out.alpha >= thr
        cov = float(mask.mean())
        covered_total += int(mask.sum())
        pixels_total += mask.size
        if opacity_threshold is None:
            p, s = psnr(img, v.image), ssim(img, v.image)
        elif mask.any():
            mse = float(np.mean((img[mask] - v.image[mask]) ** 2))
            p = 99.0 if mse <= 0 else min(99.0, 10 * math.log10(1.0 / mse))
            s = float(ssim_map(img, v.image)[mask].mean())
        else:
            p, s = UNDEFINED, UNDEFINED
        rows.append({"view_id": v.id, "psnr": p, "ssim": s, "coverage": cov})
    ps = [r["psnr"] for r in rows if not math.isnan(r["psnr"])]
    ss = [r["ssim"] for r in rows if not math.isnan(r["ssim"])]
    return MetricsReport(
        rows,
        float(np.mean(ps)) if ps else UNDEFINED,
        float(np.mean(ss)) if ss else UNDEFINED,
        covered_total / max(pixels_total, 1),
        len(scene),
        opacity_threshold,
    )


def _fmt(x):
    if isinstance(x, float):
        return "undefined" if math.isnan(x) else repr(x)
    return str(x)


def write_metrics_csv(path, report):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["view_id", "psnr", "ssim", "coverage"])
        for r in report.rows:
            w.writerow([_fmt(r["view_id"]), _fmt(r["psnr"]), _fmt(r["ssim"]), _fmt(r["coverage"])])
        w.writerow(["mean", _fmt(report.mean_psnr), _fmt(report.mean_ssim), _fmt(report.coverage)])
