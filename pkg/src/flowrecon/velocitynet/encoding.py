"""Token layout and camera/index encodings for the velocity network."""

from __future__ import annotations

import numpy as np

from .layers import sinusoidal

MAX_VIEW_INDEX = 1000


class OddDimensions(ValueError):
    pass


def patchify(x, p=2):
    """``(..., H, W, C)`` -> ``(..., H/p * W/p, p*p*C)``.

    Tokens are in raster order over patches (row-major), and each token
    flattens its patch row-major with channels last.
    """
    x = np.asarray(x)
    *lead, H, W, C = x.shape
    if H % p or W % p:
        raise OddDimensions(f"spatial size {H}x{W} is not divisible by the patch size {p}")
    nl = len(lead)
    y = x.reshape(*lead, H // p, p, W // p, p, C)
    y = y.transpose(*range(nl), nl, nl + 2, nl + 1, nl + 3, nl + 4)
    return y.reshape(*lead, (H // p) * (W // p), p * p * C)


def unpatchify(tokens, H, W, p=2):
    tokens = np.asarray(tokens)
    *lead, T, D = tokens.shape
    if H % p or W % p:
        raise OddDimensions(f"spatial size {H}x{W} is not divisible by the patch size {p}")
    C = D // (p * p)
    if T != (H // p) * (W // p) or D != p * p * C:
        raise ValueError(f"{T} tokens of dim {D} do not tile {H}x{W} with patch {p}")
    nl = len(lead)
    y = tokens.reshape(*lead, H // p, W // p, p, p, C)
    y = y.transpose(*range(nl), nl, nl + 2, nl + 1, nl + 3, nl + 4)
    return y.reshape(*lead, H, W, C)


def patchify_tensor(x, p=2):
    """Differentiable counterpart of :func:`patchify` for autodiff tensors."""
    *lead, H, W, C = x.shape
    if H % p or W % p:
        raise OddDimensions(f"spatial size {H}x{W} is not divisible by the patch size {p}")
    nl = len(lead)
    y = x.reshape(*lead, H // p, p, W // p, p, C)
    y = y.transpose(*range(nl), nl, nl + 2, nl + 1, nl + 3, nl + 4)
    return y.reshape(*lead, (H // p) * (W // p), p * p * C)


def unpatchify_tensor(tokens, H, W, p=2):
    *lead, T, D = tokens.shape
    C = D // (p * p)
    nl = len(lead)
    y = tokens.reshape(*lead, H // p, W // p, p, p, C)
    y = y.transpose(*range(nl), nl, nl + 2, nl + 1, nl + 3, nl + 4)
    return y.reshape(*lead, H, W, C)


def view_index_encoding(i, dim, max_period=10000.0):
    """Sinusoidal encoding of an integer view index, interleaved sin/cos."""
    i = np.asarray(i)
    if np.any(i < 0) or np.any(i > 10**6):
        raise ValueError("view index must lie in [0, 1e6]")
    return sinusoidal(i, dim, max_period)


def positional_encoding_2d(h, w, dim):
    """Half the channels encode the patch row, half the column."""
    ys, xs = np.mgrid[0:h, 0:w]
    half = dim // 2
    return np.concatenate([sinusoidal(ys.ravel(), half), sinusoidal(xs.ravel(), dim - half)], -1)


def compute_raymap(view_i, ref_j, H=None, W=None):
    """Plücker map ``(H, W, 6)`` of camera ``i`` expressed in frame ``j``.

    Channels are ``(o x d, d)``; ``o`` is the camera centre of ``i`` and ``d``
    the unit pixel direction, both in the camera frame of ``j``.  ``H, W``
    rescale the intrinsics when they differ from the view's resolution.
    """
    H = view_i.height if H is None else H
    W = view_i.width if W is None else W
    K = view_i.intrinsics.copy()
    sx, sy = W / view_i.width, H / view_i.height
    K[0, 0] *= sx
    K[1, 1] *= sy
    K[0, 2] = (K[0, 2] + 0.5) * sx - 0.5
    K[1, 2] = (K[1, 2] + 0.5) * sy - 0.5
    Rj, Ri = ref_j.rotation, view_i.rotation
    o = Rj.T @ (view_i.translation - ref_j.translation)
    ys, xs = np.mgrid[0:H, 0:W].astype(np.float64)
    pix = np.stack([xs, ys, np.ones_like(xs)], -1)
    d = pix @ np.linalg.inv(K).T @ (Rj.T @ Ri).T
    d /= np.linalg.norm(d, axis=-1, keepdims=True)
    m = np.cross(np.broadcast_to(o, d.shape), d)
    return np.concatenate([m, d], -1)


def closest_to_centroid(views):
    """Index of the camera nearest the mean of all camera centres."""
    c = np.array([v.center for v in views])
    return int(np.argmin(np.linalg.norm(c - c.mean(0), axis=1)))


def draw_view_indices(rng, n, max_index=MAX_VIEW_INDEX):
    """``n`` distinct indices from ``[0, max_index]``, ascending."""
    return np.sort(rng.choice(max_index + 1, size=n, replace=False))
