"""Cameras, Gaussian primitives and the covariance parameterization.

Conventions used everywhere in the package:

* Cameras are stored camera-to-world: a world point ``X`` maps to the camera
  frame as ``R.T @ (X - t)``.  The camera looks along ``+z``; pixel ``y`` grows
  downwards; pixel centres sit at integer coordinates.
* Quaternions are ``(w, x, y, z)``.
* Scales are stored as ``log`` scale and opacity as a logit, so every learnable
  quantity is unconstrained.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np


class DegenerateQuaternion(ValueError):
    pass


class InvalidCamera(ValueError):
    pass


def _frozen(a, dtype=np.float64):
    a = np.array(a, dtype=dtype, copy=True)
    a.setflags(write=False)
    return a


def quat_to_rotmat(q):
    """Rotation matrices for quaternions ``q`` of shape ``(..., 4)``.

    The quaternions are normalized first.
    """
    q = np.asarray(q, dtype=np.float64)
    norm = np.linalg.norm(q, axis=-1, keepdims=True)
    if np.any(norm <= 1e-12):
        raise DegenerateQuaternion("quaternion norm <= 1e-12")
    w, x, y, z = np.moveaxis(q / norm, -1, 0)
    return np.stack(
        [
            np.stack([1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)], -1),
            np.stack([2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)], -1),
            np.stack([2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)], -1),
        ],
        -2,
    )


def rotmat_to_quat(R):
    """Inverse of :func:`quat_to_rotmat`, returning ``w >= 0``."""
    R = np.asarray(R, dtype=np.float64)
    batch = R.shape[:-2]
    R = R.reshape(-1, 3, 3)
    out = np.empty((len(R), 4))
    for i, m in enumerate(R):
        tr = np.trace(m)
        if tr > 0:
            s = 2.0 * np.sqrt(tr + 1.0)
            q = [0.25 * s, (m[2, 1] - m[1, 2]) / s, (m[0, 2] - m[2, 0]) / s, (m[1, 0] - m[0, 1]) / s]
        elif m[0, 0] > m[1, 1] and m[0, 0] > m[2, 2]:
            s = 2.0 * np.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2])
            q = [(m[2, 1] - m[1, 2]) / s, 0.25 * s, (m[0, 1] + m[1, 0]) / s, (m[0, 2] + m[2, 0]) / s]
        elif m[1, 1] > m[2, 2]:
            s = 2.0 * np.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2])
            q = [(m[0, 2] - m[2, 0]) / s, (m[0, 1] + m[1, 0]) / s, 0.25 * s, (m[1, 2] + m[2, 1]) / s]
        else:
            s = 2.0 * np.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1])
            q = [(m[1, 0] - m[0, 1]) / s, (m[0, 2] + m[2, 0]) / s, (m[1, 2] + m[2, 1]) / s, 0.25 * s]
        q = np.asarray(q)
        out[i] = q if q[0] >= 0 else -q
    return (out / np.linalg.norm(out, axis=1, keepdims=True)).reshape(batch + (4,))


def covariance_from_params(log_scale, rotation_quat):
    """``U diag(exp(log_scale))^2 U^T``; batched over leading axes."""
    U = quat_to_rotmat(rotation_quat)
    s2 = np.exp(2.0 * np.asarray(log_scale, dtype=np.float64))
    M = U * s2[..., None, :]
    cov = M @ np.swapaxes(U, -1, -2)
    return 0.5 * (cov + np.swapaxes(cov, -1, -2))


def intrinsics_matrix(fx, fy, cx, cy):
    return np.array([[fx, 0.0, cx], [0.0, fy, cy], [0.0, 0.0, 1.0]])


def look_at(position, target, up=(0.0, -1.0, 0.0)):
    """Camera-to-world rotation looking from ``position`` at ``target``.

    ``up`` is the world direction that should appear towards the top of the
    image, i.e. against the camera ``+y`` axis.
    """
    position = np.asarray(position, dtype=np.float64)
    forward = np.asarray(target, dtype=np.float64) - position
    forward /= np.linalg.norm(forward)
    down = -np.asarray(up, dtype=np.float64)
    right = np.cross(down, forward)
    if np.linalg.norm(right) < 1e-9:
        right = np.cross([1.0, 0.0, 0.0] if abs(forward[0]) < 0.9 else [0.0, 0.0, 1.0], forward)
    right /= np.linalg.norm(right)
    down = np.cross(forward, right)
    return np.stack([right, down, forward], axis=1)


@dataclass(frozen=True)
class CameraView:
    """A posed pinhole camera, optionally carrying its image."""

    rotation: np.ndarray
    translation: np.ndarray
    intrinsics: np.ndarray
    width: int
    height: int
    id: int = 0
    image: np.ndarray | None = None

    def __post_init__(self):
        R = _frozen(self.rotation)
        t = _frozen(self.translation).reshape(3)
        K = _frozen(self.intrinsics)
        if R.shape != (3, 3) or K.shape != (3, 3):
            raise InvalidCamera("rotation and intrinsics must be 3x3")
        if np.linalg.norm(R.T @ R - np.eye(3)) > 1e-6 or abs(np.linalg.det(R) - 1.0) > 1e-6:
            raise InvalidCamera("rotation is not a proper rotation matrix")
        if K[2, 2] != 1.0 or K[1, 0] != 0.0 or K[2, 0] != 0.0 or K[2, 1] != 0.0:
            raise InvalidCamera("intrinsics must be upper triangular with K[2,2] = 1")
        if K[0, 1] != 0.0:
            raise InvalidCamera("skewed intrinsics are not supported")
        if K[0, 0] <= 0 or K[1, 1] <= 0:
            raise InvalidCamera("focal lengths must be positive")
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)
        object.__setattr__(self, "intrinsics", K)
        object.__setattr__(self, "width", int(self.width))
        object.__setattr__(self, "height", int(self.height))
        object.__setattr__(self, "id", int(self.id))
        if self.image is not None:
            img = _frozen(self.image)
            if img.shape != (self.height, self.width, 3):
                raise InvalidCamera(f"image shape {img.shape} does not match {self.height}x{self.width}x3")
            object.__setattr__(self, "image", img)

    @property
    def center(self):
        return self.translation

    @property
    def forward(self):
        return self.rotation[:, 2]

    def world_to_camera(self, points):
        return (np.asarray(points, dtype=np.float64) - self.translation) @ self.rotation

    def project(self, points):
        """Pixel coordinates and camera-frame depths of world points."""
        pc = self.world_to_camera(points)
        z = pc[..., 2]
        K = self.intrinsics
        with np.errstate(divide="ignore", invalid="ignore"):
            u = K[0, 0] * pc[..., 0] / z + K[0, 2]
            v = K[1, 1] * pc[..., 1] / z + K[1, 2]
        return np.stack([u, v], -1), z

    def pixel_rays(self):
        """Unit world-space ray directions, shape ``(H, W, 3)``."""
        ys, xs = np.mgrid[0 : self.height, 0 : self.width].astype(np.float64)
        pix = np.stack([xs, ys, np.ones_like(xs)], -1)
        d = pix @ np.linalg.inv(self.intrinsics).T @ self.rotation.T
        return d / np.linalg.norm(d, axis=-1, keepdims=True)

    def unproject(self, depth, mask=None):
        """World points for a camera-frame ``z`` depth map."""
        ys, xs = np.mgrid[0 : self.height, 0 : self.width].astype(np.float64)
        pix = np.stack([xs, ys, np.ones_like(xs)], -1)
        cam = (pix @ np.linalg.inv(self.intrinsics).T) * np.asarray(depth)[..., None]
        pts = cam @ self.rotation.T + self.translation
        if mask is not None:
            return pts[np.asarray(mask, dtype=bool)]
        return pts.reshape(-1, 3)

    def with_image(self, image):
        return replace(self, image=image)

    def scaled(self, factor):
        """Same pose at a resolution divided by an integer ``factor``."""
        K = self.intrinsics.copy()
        K[0, 0] /= factor
        K[1, 1] /= factor
        # pixel centres at integers: x' = (x + 0.5) / f - 0.5
        K[0, 2] = (K[0, 2] + 0.5) / factor - 0.5
        K[1, 2] = (K[1, 2] + 0.5) / factor - 0.5
        return replace(self, intrinsics=K, width=self.width // factor, height=self.height // factor, image=None)


@dataclass(frozen=True)
class GaussianPrimitive:
    position: np.ndarray
    log_scale: np.ndarray
    rotation_quat: np.ndarray
    opacity_logit: float
    color_sh: np.ndarray

    @property
    def opacity(self):
        return 1.0 / (1.0 + np.exp(-self.opacity_logit))

    @property
    def covariance(self):
        return covariance_from_params(self.log_scale, self.rotation_quat)


def num_sh_coeffs(degree):
    return (degree + 1) ** 2


@dataclass(frozen=True)
class GaussianScene:
    """Structure-of-arrays storage for a set of Gaussian primitives.

    ``sh`` has shape ``(K, (degree + 1)**2, 3)``.  Arrays default to float32
    (the on-disk precision); float64 scenes are allowed for numerical checks.
    """

    positions: np.ndarray
    log_scales: np.ndarray
    quats: np.ndarray
    opacity_logits: np.ndarray
    sh: np.ndarray
    sh_degree: int = 0
    scene_scale: float = 1.0
    dtype: type = field(default=np.float32, compare=False)

    def __post_init__(self):
        dt = np.dtype(self.dtype)
        pos = _frozen(self.positions, dt).reshape(-1, 3)
        k = len(pos)
        object.__setattr__(self, "positions", pos)
        object.__setattr__(self, "log_scales", _frozen(self.log_scales, dt).reshape(k, 3))
        object.__setattr__(self, "quats", _frozen(self.quats, dt).reshape(k, 4))
        object.__setattr__(self, "opacity_logits", _frozen(self.opacity_logits, dt).reshape(k))
        n = num_sh_coeffs(int(self.sh_degree))
        object.__setattr__(self, "sh", _frozen(self.sh, dt).reshape(k, n, 3))
        object.__setattr__(self, "sh_degree", int(self.sh_degree))
        object.__setattr__(self, "scene_scale", float(self.scene_scale))
        if self.scene_scale <= 0:
            raise ValueError("scene_scale must be positive")

    def __len__(self):
        return len(self.positions)

    @classmethod
    def from_primitives(cls, primitives, sh_degree=0, scene_scale=1.0, dtype=np.float32):
        return cls(
            positions=[p.position for p in primitives],
            log_scales=[p.log_scale for p in primitives],
            quats=[p.rotation_quat for p in primitives],
            opacity_logits=[p.opacity_logit for p in primitives],
            sh=[p.color_sh for p in primitives],
            sh_degree=sh_degree,
            scene_scale=scene_scale,
            dtype=dtype,
        )

    @property
    def primitives(self):
        return [
            GaussianPrimitive(
                self.positions[i], self.log_scales[i], self.quats[i], float(self.opacity_logits[i]), self.sh[i]
            )
            for i in range(len(self))
        ]

    @property
    def opacities(self):
        return 1.0 / (1.0 + np.exp(-self.opacity_logits.astype(np.float64)))

    def params(self):
        """Mutable float copies of the learnable arrays, keyed by group."""
        return {
            "positions": self.positions.copy(),
            "log_scales": self.log_scales.copy(),
            "quats": self.quats.copy(),
            "opacity_logits": self.opacity_logits.copy(),
            "sh": self.sh.copy(),
        }

    def with_params(self, params, **kw):
        return replace(self, **params, **kw)

    def astype(self, dtype):
        return replace(self, dtype=dtype)

    def subset(self, index):
        return replace(
            self,
            positions=self.positions[index],
            log_scales=self.log_scales[index],
            quats=self.quats[index],
            opacity_logits=self.opacity_logits[index],
            sh=self.sh[index],
        )


def rigid_transform_scene(scene, R, t):
    """Apply ``X -> R X + t`` to every primitive (degree-0 colours only)."""
    R = np.asarray(R, dtype=np.float64)
    q_r = rotmat_to_quat(R)
    q = scene.quats.astype(np.float64)
    w1, x1, y1, z1 = q_r
    w2, x2, y2, z2 = q.T
    prod = np.stack(
        [
            w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
            w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
            w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
            w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2,
        ],
        -1,
    )
    return replace(scene, positions=scene.positions.astype(np.float64) @ R.T + t, quats=prod)


def rigid_transform_camera(cam, R, t):
    R = np.asarray(R, dtype=np.float64)
    return replace(cam, rotation=R @ cam.rotation, translation=R @ cam.translation + t)
