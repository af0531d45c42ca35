"""Flow-matching math independent of any network.

Time runs from ``t = 0`` (source sample ``z0``) to ``t = 1`` (target ``z1``)
along the straight path ``z_t = t z1 + (1 - (1 - sigma_min) t) z0``.  The
source may be Gaussian noise or, in the conditional setting, a rendering of
an initial reconstruction.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import ndtr

SIGMA_MIN = 1e-5
UNIFORM = "uniform"
DECREASING = "decreasing"


class ShapeMismatch(ValueError):
    pass


class InvalidSchedule(ValueError):
    pass


@dataclass
class FlowBatch:
    """Source/target frames of shape ``(B, N, h, w, C)`` plus conditioning.

    ``cond`` holds ``src`` (``(B, M, h, w, C)`` source-view latents),
    ``raymaps`` (``(B, N + M, h, w, 6)``), ``indices`` (``(B, N + M)``) and,
    for the noise-source baseline, ``extra`` channels for every frame.
    """

    z0: np.ndarray
    z1: np.ndarray
    cond: dict = field(default_factory=dict)
    t: np.ndarray | None = None

    def __post_init__(self):
        if np.shape(self.z0) != np.shape(self.z1):
            raise ShapeMismatch(f"z0 {np.shape(self.z0)} vs z1 {np.shape(self.z1)}")
        if self.t is not None and (np.any(self.t < 0) or np.any(self.t > 1)):
            raise ValueError("t must lie in [0, 1]")


@dataclass(frozen=True)
class TimeSampler:
    kind: str = "logit_normal"
    loc: float = 0.0
    scale: float = 1.0
    per_frame: bool = True

    def __post_init__(self):
        if self.kind not in ("logit_normal", "uniform"):
            raise ValueError(f"unknown time distribution {self.kind!r}")
        if self.scale <= 0:
            raise ValueError("scale must be positive")


def _frame_t(t, z):
    """Broadcast per-frame times ``(B, N)`` (or scalars) against ``z``."""
    t = np.asarray(t, dtype=np.float64)
    return t.reshape(t.shape + (1,) * (np.ndim(z) - t.ndim))


def _check(a, b):
    if np.shape(a) != np.shape(b):
        raise ShapeMismatch(f"{np.shape(a)} vs {np.shape(b)}")


def interpolate_state(z0, z1, t, sigma_min=SIGMA_MIN):
    _check(z0, z1)
    tt = _frame_t(t, z0)
    return tt * z1 + (1.0 - (1.0 - sigma_min) * tt) * z0


def target_velocity(z0, z1, sigma_min=SIGMA_MIN):
    _check(z0, z1)
    return np.asarray(z1) - (1.0 - sigma_min) * np.asarray(z0)


def cfm_loss(vel_pred, z0, z1, sigma_min=SIGMA_MIN):
    _check(vel_pred, z0)
    d = np.asarray(vel_pred, dtype=np.float64) - target_velocity(z0, z1, sigma_min)
    return float(np.mean(d * d))


def sample_time(sampler, n_frames, rng=None, batch=None):
    """Draw times of shape ``(n_frames,)`` or ``(batch, n_frames)``."""
    if n_frames < 1:
        raise ValueError("n_frames must be >= 1")
    rng = rng if rng is not None else np.random.default_rng()
    shape = (n_frames,) if batch is None else (batch, n_frames)
    draw_shape = shape if sampler.per_frame else shape[:-1] + (1,)
    if sampler.kind == "uniform":
        t = rng.uniform(size=draw_shape)
    else:
        t = 1.0 / (1.0 + np.exp(-(sampler.loc + sampler.scale * rng.normal(size=draw_shape))))
    return np.broadcast_to(t, shape).copy()


def logit_normal_cdf(x, loc=0.0, scale=1.0):
    x = np.clip(np.asarray(x, dtype=np.float64), 1e-300, 1 - 1e-16)
    return ndtr((np.log(x) - np.log1p(-x) - loc) / scale)


def make_schedule(n_steps=20, kind=DECREASING, shift=3.0):
    """Step sizes partitioning ``[0, 1]``.

    ``decreasing``: ``dt_i`` proportional to ``1 + shift * (1 - i / n)``, so
    steps shrink as ``t`` approaches the target.
    """
    if n_steps < 1:
        raise InvalidSchedule("n_steps must be >= 1")
    if kind == UNIFORM:
        dt = np.full(n_steps, 1.0 / n_steps)
    elif kind == DECREASING:
        grid = np.arange(n_steps) / n_steps
        dt = 1.0 + shift * (1.0 - grid)
        dt = dt / dt.sum()
    else:
        raise InvalidSchedule(f"unknown schedule kind {kind!r}")
    return dt


def validate_schedule(dt):
    dt = np.asarray(dt, dtype=np.float64)
    if dt.ndim != 1 or len(dt) == 0:
        raise InvalidSchedule("schedule must be a non-empty 1-D array of step sizes")
    if np.any(dt <= 0):
        raise InvalidSchedule("step sizes must be positive")
    if abs(dt.sum() - 1.0) > 1e-9:
        raise InvalidSchedule(f"step sizes sum to {dt.sum()!r}, not 1")
    return dt


def integrate_euler(velocity_fn, z0, cond=None, n_steps=20, schedule=DECREASING):
    """Transport ``z0`` with ``z <- z + dt * velocity_fn(z, cond, t)``.

    ``schedule`` is a kind name or an explicit array of step sizes.
    """
    if isinstance(schedule, str):
        dt = make_schedule(n_steps, schedule)
    else:
        dt = validate_schedule(schedule)
    z = np.array(z0, dtype=np.float64, copy=True)
    t = 0.0
    for h in dt:
        z = z + h * np.asarray(velocity_fn(z, cond, t))
        t += h
    return z


def exact_velocity_closure(z0, z1, sigma_min=SIGMA_MIN):
    """Velocity field of the straight path through the fixed pair ``(z0, z1)``."""
    v = target_velocity(z0, z1, sigma_min)
    return lambda z, cond, t: v
