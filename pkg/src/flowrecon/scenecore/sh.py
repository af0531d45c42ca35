"""Real spherical harmonics up to degree 3.

The basis and its constants are the table used by the reference 3D Gaussian
splatting rasterizer (the graphics convention: real SH without the
Condon-Shortley phase).  Coefficient ``n`` of a degree-``D`` colour holds
``(l, m)`` with ``n = l*l + l + m``.
"""

import numpy as np

C0 = 0.28209479177387814
C1 = 0.4886025119029199
C2 = (1.0925484305920792, -1.0925484305920792, 0.31539156525252005, -1.0925484305920792, 0.5462742152960396)
C3 = (
    -0.5900435899266435,
    2.890611442640554,
    -0.4570457994644658,
    0.3731763325901154,
    -0.4570457994644658,
    1.445305721320277,
    -0.5900435899266435,
)

MAX_DEGREE = 3


class UnsupportedDegree(ValueError):
    pass


def sh_basis(dirs, degree):
    """Basis values, shape ``(..., (degree+1)**2)`` for unit ``dirs``."""
    if degree > MAX_DEGREE or degree < 0:
        raise UnsupportedDegree(f"SH degree {degree} not in 0..{MAX_DEGREE}")
    dirs = np.asarray(dirs, dtype=np.float64)
    x, y, z = dirs[..., 0], dirs[..., 1], dirs[..., 2]
    out = [np.full_like(x, C0)]
    if degree >= 1:
        out += [-C1 * y, C1 * z, -C1 * x]
    if degree >= 2:
        xx, yy, zz = x * x, y * y, z * z
        out += [
            C2[0] * x * y,
            C2[1] * y * z,
            C2[2] * (2 * zz - xx - yy),
            C2[3] * x * z,
            C2[4] * (xx - yy),
        ]
    if degree >= 3:
        out += [
            C3[0] * y * (3 * xx - yy),
            C3[1] * x * y * z,
            C3[2] * y * (4 * zz - xx - yy),
            C3[3] * z * (2 * zz - 3 * xx - 3 * yy),
            C3[4] * x * (4 * zz - xx - yy),
            C3[5] * z * (xx - yy),
            C3[6] * x * (xx - 3 * yy),
        ]
    return np.stack(out, -1)


def sh_basis_jacobian(dirs, degree):
    """Derivatives of :func:`sh_basis` w.r.t. ``(x, y, z)``: ``(..., n, 3)``."""
    dirs = np.asarray(dirs, dtype=np.float64)
    x, y, z = dirs[..., 0], dirs[..., 1], dirs[..., 2]
    zero = np.zeros_like(x)
    rows = [(zero, zero, zero)]
    if degree >= 1:
        rows += [(zero, -C1 + zero, zero), (zero, zero, C1 + zero), (-C1 + zero, zero, zero)]
    if degree >= 2:
        rows += [
            (C2[0] * y, C2[0] * x, zero),
            (zero, C2[1] * z, C2[1] * y),
            (-2 * C2[2] * x, -2 * C2[2] * y, 4 * C2[2] * z),
            (C2[3] * z, zero, C2[3] * x),
            (2 * C2[4] * x, -2 * C2[4] * y, zero),
        ]
    if degree >= 3:
        xx, yy, zz = x * x, y * y, z * z
        rows += [
            (C3[0] * 6 * x * y, C3[0] * (3 * xx - 3 * yy), zero),
            (C3[1] * y * z, C3[1] * x * z, C3[1] * x * y),
            (C3[2] * -2 * x * y, C3[2] * (4 * zz - xx - 3 * yy), C3[2] * 8 * y * z),
            (C3[3] * -6 * x * z, C3[3] * -6 * y * z, C3[3] * (6 * zz - 3 * xx - 3 * yy)),
            (C3[4] * (4 * zz - 3 * xx - yy), C3[4] * -2 * x * y, C3[4] * 8 * x * z),
            (C3[5] * 2 * x * z, C3[5] * -2 * y * z, C3[5] * (xx - yy)),
            (C3[6] * (3 * xx - 3 * yy), C3[6] * -6 * x * y, zero),
        ]
    return np.stack([np.stack(r, -1) for r in rows], -2)


def evaluate_sh(color_sh, view_dir):
    """RGB for SH coefficients ``(n, 3)`` (or batched ``(..., n, 3)``).

    No clamping happens here; the renderer clamps at zero.
    """
    color_sh = np.asarray(color_sh, dtype=np.float64)
    n = color_sh.shape[-2]
    degree = int(round(np.sqrt(n))) - 1
    if (degree + 1) ** 2 != n:
        raise UnsupportedDegree(f"{n} coefficients is not a complete SH band set")
    basis = sh_basis(view_dir, degree)
    return np.einsum("...n,...nc->...c", basis, color_sh)


def rgb_to_sh0(rgb):
    return (np.asarray(rgb, dtype=np.float64)) / C0
