"""View selection: co-visibility graph, target poses, frustum filtering, references."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.interpolate import BSpline
from scipy.spatial.transform import Rotation, Slerp
from sklearn.cluster import KMeans

from .scenecore.geometry import CameraView

ETA = 1.0 / 6.0
SPLINE_TAG = "spline"
SPHERE_TAG = "sphere"


class DegenerateSet(ValueError):
    pass


class TooFewControls(ValueError):
    pass


class KTooLarge(ValueError):
    pass


@dataclass(frozen=True)
class CovisGraph:
    nodes: tuple
    edges: tuple
    keyframes: tuple

    def neighbors(self, node):
        return sorted({b if a == node else a for a, b in self.edges if node in (a, b)})


@dataclass
class TargetPoseSet:
    poses: list = field(default_factory=list)
    tags: list = field(default_factory=list)
    rejected: list = field(default_factory=list)

    def __len__(self):
        return len(self.poses)

    def add(self, pose, tag):
        self.poses.append(pose)
        self.tags.append(tag)

    def extend(self, other):
        self.poses.extend(other.poses)
        self.tags.extend(other.tags)
        self.rejected.extend(other.rejected)


def pose_distance(a, b, eta=ETA):
    return float(np.linalg.norm(a.rotation - b.rotation) + eta * np.linalg.norm(a.center - b.center))


def pairwise_pose_distances(views, eta=ETA):
    R = np.stack([v.rotation for v in views])
    t = np.stack([v.center for v in views])
    dR = np.sqrt(np.sum((R[:, None] - R[None]) ** 2, axis=(2, 3)))
    dt = np.linalg.norm(t[:, None] - t[None], axis=-1)
    return dR + eta * dt


def covisibility(a, b, normalizer, eta=ETA):
    if not normalizer > 0:
        raise DegenerateSet("pose-distance normalizer must be positive (all poses identical?)")
    return 1.0 - pose_distance(a, b, eta) / normalizer


def covisibility_matrix(views, eta=ETA):
    D = pairwise_pose_distances(views, eta)
    m = D.max()
    if not m > 0:
        raise DegenerateSet("all poses are identical")
    return 1.0 - D / m


def farthest_point_sampling(D, k, start=None, allowed=None):
    """Greedy max-min selection on a distance matrix; ties go to the lowest index.

    Starts from the node with the smallest summed distance unless ``start``
    is given.  ``allowed`` restricts the candidates.
    """
    n = len(D)
    allowed = np.arange(n) if allowed is None else np.asarray(sorted(allowed), dtype=int)
    k = min(k, len(allowed))
    if start is None:
        start = int(allowed[np.argmin(D[np.ix_(allowed, allowed)].sum(1))])
    chosen = [start]
    mind = D[start, allowed].copy()
    while len(chosen) < k:
        nxt = int(allowed[np.argmax(mind)])
        chosen.append(nxt)
        mind = np.minimum(mind, D[nxt, allowed])
    return chosen


def build_covis_graph(views, k_neighbors=2, keyframe_ids=None, eta=ETA):
    """Sparse co-visibility graph over ``views``.

    ``ceil(sqrt(N))`` keyframes by farthest-point sampling are densely
    connected; every other view links to its closest keyframe and its
    ``k_neighbors`` nearest views.  ``keyframe_ids`` limits which views may
    become keyframes.
    """
    n = len(views)
    if n < 2:
        raise ValueError("need at least two views")
    ids = [v.id for v in views]
    D = pairwise_pose_distances(views, eta)
    allowed = None
    if keyframe_ids is not None:
        allowed = [i for i, vid in enumerate(ids) if vid in set(keyframe_ids)]
        if not allowed:
            raise ValueError("no view may become a keyframe")
    kf = farthest_point_sampling(D, math.ceil(math.sqrt(n)), allowed=allowed)
    kf_set = set(kf)
    edges = set()
    for a_i, a in enumerate(kf):
        for b in kf[a_i + 1 :]:
            edges.add((min(a, b), max(a, b)))
    kf_arr = np.array(kf)
    for i in range(n):
        if i in kf_set:
            continue
        j = int(kf_arr[np.argmin(D[i, kf_arr])])
        edges.add((min(i, j), max(i, j)))
        order = [j for j in np.argsort(D[i], kind="stable") if j != i][:k_neighbors]
        for j in order:
            edges.add((min(i, int(j)), max(i, int(j))))
    edges = tuple(sorted((ids[a], ids[b]) for a, b in edges))
    return CovisGraph(tuple(ids), edges, tuple(ids[i] for i in kf))


def clamped_knots(n_ctrl, degree=2):
    inner = np.linspace(0.0, 1.0, n_ctrl - degree + 1)
    return np.concatenate([np.zeros(degree), inner, np.ones(degree)])


def greville_abscissae(knots, n_ctrl, degree=2):
    return np.array([knots[i + 1 : i + degree + 1].mean() for i in range(n_ctrl)])


def sample_spline_trajectory(control_views, n_targets, degree=2):
    """Poses along a clamped B-spline through ordered control cameras.

    Positions follow the spline; orientations slerp between control
    rotations placed at their Greville abscissae, so both share one
    parameterization and the ends coincide with the first and last control.
    """
    if len(control_views) < degree + 1:
        raise TooFewControls(f"need at least {degree + 1} control poses, got {len(control_views)}")
    ctrl = np.array([v.center for v in control_views])
    knots = clamped_knots(len(ctrl), degree)
    spline = BSpline(knots, ctrl, degree)
    u = np.linspace(0.0, 1.0, n_targets)
    pos = spline(u)
    g = greville_abscissae(knots, len(ctrl), degree)
    rots = Rotation.from_matrix(np.stack([v.rotation for v in control_views]))
    R = Slerp(g, rots)(u).as_matrix()
    ref = control_views[0]
    out = TargetPoseSet()
    for k in range(n_targets):
        Rk = _orthonormalize(R[k])
        out.add(CameraView(Rk, pos[k], ref.intrinsics, ref.width, ref.height, id=-(k + 1)), SPLINE_TAG)
    return out


def _orthonormalize(R):
    u, _, vt = np.linalg.svd(R)
    Q = u @ vt
    if np.linalg.det(Q) < 0:
        u[:, -1] *= -1
        Q = u @ vt
    return Q


def fibonacci_sphere(n):
    """Quasi-uniform unit vectors on the golden-angle spiral."""
    i = np.arange(n) + 0.5
    y = 1.0 - 2.0 * i / n
    r = np.sqrt(np.maximum(0.0, 1.0 - y * y))
    phi = np.pi * (3.0 - np.sqrt(5.0)) * np.arange(n)
    return np.stack([r * np.cos(phi), y, r * np.sin(phi)], -1)


def _axis_rotation(axis, angle):
    return Rotation.from_rotvec(np.asarray(axis, dtype=np.float64) * angle).as_matrix()


def sample_sphere_targets(ref_pose, source_positions, n_candidates=64, radius_range=(0.2, 0.5),
                          perturb_deg=(0.0, 30.0), rng=None, target_id=-1):
    """One new pose near ``ref_pose``, as far as possible from every source camera."""
    rng = rng if rng is not None else np.random.default_rng(0)
    radius = rng.uniform(*radius_range) if radius_range[1] > radius_range[0] else radius_range[0]
    cand = ref_pose.center + radius * fibonacci_sphere(n_candidates)
    src = np.atleast_2d(np.asarray(source_positions, dtype=np.float64))
    mind = np.min(np.linalg.norm(cand[:, None] - src[None], axis=-1), axis=1)
    best = int(np.nonzero(mind >= mind.max() - 1e-12)[0][0])
    yaw, pitch = np.deg2rad(rng.uniform(*perturb_deg, size=2)) * rng.choice([-1.0, 1.0], size=2)
    # yaw about the camera's down axis, pitch about its right axis
    R = ref_pose.rotation @ _axis_rotation([0, 1, 0], yaw) @ _axis_rotation([1, 0, 0], pitch)
    pose = CameraView(_orthonormalize(R), cand[best], ref_pose.intrinsics, ref_pose.width, ref_pose.height,
                      id=target_id)
    out = TargetPoseSet()
    out.add(pose, SPHERE_TAG)
    return out


def frustum_stats(cam, points, near_threshold):
    uv, z = cam.project(points)
    inside = (z > 0) & np.all(np.isfinite(uv), -1)
    inside &= (uv[:, 0] >= -0.5) & (uv[:, 0] < cam.width - 0.5)
    inside &= (uv[:, 1] >= -0.5) & (uv[:, 1] < cam.height - 0.5)
    n_in = int(inside.sum())
    n_near = int(np.sum(inside & (z < near_threshold)))
    return n_in, n_near


def median_depth(views, points):
    depths = np.concatenate([v.world_to_camera(points)[:, 2] for v in views])
    depths = depths[depths > 0]
    return float(np.median(depths)) if len(depths) else 1.0


def filter_target_poses(candidates, scene_points, near_fraction_max=0.3, min_points_in_frustum=50,
                        near_threshold=None, near_scale=0.05):
    """Drop poses that see too few points or too many very close ones.

    ``near_threshold`` defaults to ``near_scale`` times the median positive
    depth of the points over all candidates.
    """
    pts = np.asarray(scene_points, dtype=np.float64).reshape(-1, 3)
    if len(pts) == 0:
        raise ValueError("scene_points is empty")
    if not isinstance(candidates, TargetPoseSet):
        cs = TargetPoseSet()
        for c in candidates:
            cs.add(c, "candidate")
        candidates = cs
    if near_threshold is None:
        near_threshold = near_scale * median_depth(candidates.poses, pts) if len(candidates) else 0.0
    out = TargetPoseSet(rejected=list(candidates.rejected))
    for pose, tag in zip(candidates.poses, candidates.tags):
        n_in, n_near = frustum_stats(pose, pts, near_threshold)
        if n_in < min_points_in_frustum:
            out.rejected.append((pose, tag, f"only {n_in} points in frustum"))
        elif n_near / n_in > near_fraction_max:
            out.rejected.append((pose, tag, f"near fraction {n_near / n_in:.3f}"))
        else:
            out.add(pose, tag)
    return out


def view_embedding(views):
    """Position and unit viewing direction, ``(n, 6)``."""
    return np.array([np.concatenate([v.center, v.forward]) for v in views])


def select_reference_views(source_views, target_poses, k, seed=0):
    """``k`` distinct source views nearest the k-means centres of the targets."""
    if k > len(source_views):
        raise KTooLarge(f"k={k} exceeds the {len(source_views)} source views")
    if k < 1:
        raise ValueError("k must be >= 1")
    poses = target_poses.poses if isinstance(target_poses, TargetPoseSet) else list(target_poses)
    X = view_embedding(poses)
    S = view_embedding(source_views)
    if len(X) >= k:
        km = KMeans(n_clusters=k, init="k-means++", n_init=1, max_iter=50, random_state=seed).fit(X)
        centers = km.cluster_centers_
    else:
        centers = np.concatenate([X, np.repeat(X.mean(0, keepdims=True), k - len(X), 0)])
    chosen = []
    for c in centers:
        order = np.argsort(np.linalg.norm(S - c, axis=1), kind="stable")
        pick = next(int(j) for j in order if int(j) not in chosen)
        chosen.append(pick)
    return [source_views[j] for j in chosen]


@dataclass
class PlanConfig:
    n_targets: int = 20
    mode: str = "spline"
    n_candidates: int = 64
    radius_min: float = 0.2
    radius_max: float = 0.5
    perturb_min_deg: float = 0.0
    perturb_max_deg: float = 30.0
    near_scale: float = 0.05
    near_fraction_max: float = 0.3
    min_points_in_frustum: int = 50
    k_neighbors: int = 2
    n_references: int = 4
    seed: int = 0


def plan_targets(source_views, scene_points, cfg=None):
    """Target poses for a capture: spline through ordered sources, sphere
    samples around each source, or both; then frustum-filtered."""
    cfg = cfg or PlanConfig()
    rng = np.random.default_rng(cfg.seed)
    ordered = sorted(source_views, key=lambda v: v.id)
    cands = TargetPoseSet()
    if cfg.mode in ("spline", "both"):
        if len(ordered) >= 3:
            # denser than the sources, skipping samples that coincide with the ends
            sp = sample_spline_trajectory(ordered, cfg.n_targets + 2)
            for pose, tag in list(zip(sp.poses, sp.tags))[1:-1]:
                cands.add(pose, tag)
    if cfg.mode in ("sphere", "both"):
        positions = np.array([v.center for v in source_views])
        for k in range(cfg.n_targets):
            ref = ordered[k % len(ordered)]
            s = sample_sphere_targets(ref, positions, cfg.n_candidates, (cfg.radius_min, cfg.radius_max),
                                      (cfg.perturb_min_deg, cfg.perturb_max_deg), rng)
            cands.add(s.poses[0], s.tags[0])
    if cfg.mode not in ("spline", "sphere", "both"):
        raise ValueError(f"unknown planning mode {cfg.mode!r}")
    near = cfg.near_scale * median_depth(source_views, scene_points)
    kept = filter_target_poses(cands, scene_points, cfg.near_fraction_max, cfg.min_points_in_frustum, near)
    kept.poses = [replace(p, id=-(i + 1)) for i, p in enumerate(kept.poses)]
    return kept


def write_plan(path, targets):
    with open(path, "w") as f:
        for pose, tag in zip(targets.poses, targets.tags):
            vals = list(pose.rotation.ravel()) + list(pose.center)
            f.write(" ".join(repr(float(v)) for v in vals) + f" {tag}\n")


def read_plan(path, camera_template):
    """Poses from a plan file; intrinsics and size come from ``camera_template``."""
    out = TargetPoseSet()
    with open(path) as f:
        for i, line in enumerate(f):
            parts = line.split()
            if not parts:
                continue
            if len(parts) != 13:
                raise ValueError(f"{path}:{i + 1}: expected 13 fields, got {len(parts)}")
            v = np.array([float(x) for x in parts[:12]])
            pose = CameraView(v[:9].reshape(3, 3), v[9:12], camera_template.intrinsics, camera_template.width,
                              camera_template.height, id=-(len(out) + 1))
            out.add(pose, parts[12])
    return out
