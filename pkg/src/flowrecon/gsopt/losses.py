"""Image losses with analytic gradients w.r.t. the rendered image."""

import numpy as np
from scipy.ndimage import correlate1d

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
C1 = 0.01**2
C2 = 0.03**2


class ShapeMismatch(ValueError):
    pass


def _window():
    x = np.arange(SSIM_WINDOW) - SSIM_WINDOW // 2
    g = np.exp(-(x**2) / (2 * SSIM_SIGMA**2))
    return g / g.sum()


_WIN = _window()


def _blur(img):
    # zero-padded 'same' filtering; symmetric kernel makes this self-adjoint
    out = correlate1d(img, _WIN, axis=0, mode="constant", cval=0.0)
    return correlate1d(out, _WIN, axis=1, mode="constant", cval=0.0)


def _check(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeMismatch(f"{a.shape} vs {b.shape}")
    return a, b


def ssim_and_grad(a, b):
    """Mean SSIM over the map and its gradient w.r.t. ``a``."""
    a, b = _check(a, b)
    mu1, mu2 = _blur(a), _blur(b)
    e11, e22, e12 = _blur(a * a), _blur(b * b), _blur(a * b)
    s11 = e11 - mu1 * mu1
    s22 = e22 - mu2 * mu2
    s12 = e12 - mu1 * mu2
    A1 = 2 * mu1 * mu2 + C1
    A2 = 2 * s12 + C2
    B1 = mu1 * mu1 + mu2 * mu2 + C1
    B2 = s11 + s22 + C2
    S = A1 * A2 / (B1 * B2)
    n = S.size
    d_mu1 = (2 * mu2 * A2 - 2 * mu2 * A1) / (B1 * B2) - S * (2 * mu1 / B1 - 2 * mu1 / B2)
    d_e11 = -S / B2
    d_e12 = 2 * A1 / (B1 * B2)
    grad = (_blur(d_mu1) + 2 * a * _blur(d_e11) + b * _blur(d_e12)) / n
    return float(S.mean()), grad


def ssim(a, b):
    return ssim_and_grad(a, b)[0]


def ssim_map(a, b):
    """Per-pixel (and per-channel) SSIM values."""
    a, b = _check(a, b)
    mu1, mu2 = _blur(a), _blur(b)
    s11 = _blur(a * a) - mu1 * mu1
    s22 = _blur(b * b) - mu2 * mu2
    s12 = _blur(a * b) - mu1 * mu2
    return (2 * mu1 * mu2 + C1) * (2 * s12 + C2) / ((mu1 * mu1 + mu2 * mu2 + C1) * (s11 + s22 + C2))


def l1_and_grad(a, b):
    a, b = _check(a, b)
    d = a - b
    return float(np.abs(d).mean()), np.sign(d) / d.size


def mse_and_grad(a, b):
    a, b = _check(a, b)
    d = a - b
    return float(np.mean(d * d)), 2.0 * d / d.size


def loss_gs_and_grad(render, gt, cfg=None):
    """``(1 - w) * L1 + w * (1 - SSIM)`` with ``w = cfg.ssim_weight``."""
    w = 0.2 if cfg is None else cfg.ssim_weight
    l1, g1 = l1_and_grad(render, gt)
    s, gs = ssim_and_grad(render, gt)
    return (1 - w) * l1 + w * (1 - s), (1 - w) * g1 - w * gs


def loss_gs(render, gt, cfg=None):
    return loss_gs_and_grad(render, gt, cfg)[0]


def loss_tgt_and_grad(render, gt, cfg=None, perceptual_hook=None):
    """``(1 - w) * MSE + w * (1 - SSIM) + w_p * hook(render, gt)``.

    ``perceptual_hook`` returns ``(value, grad_wrt_render)``; a bare float is
    accepted and treated as having zero gradient.
    """
    w = 0.02 if cfg is None else cfg.target_ssim_weight
    wp = 0.02 if cfg is None else cfg.lpips_weight
    l2, g2 = mse_and_grad(render, gt)
    s, gs = ssim_and_grad(render, gt)
    value = (1 - w) * l2 + w * (1 - s)
    grad = (1 - w) * g2 - w * gs
    if perceptual_hook is not None:
        out = perceptual_hook(render, gt)
        if isinstance(out, tuple):
            hv, hg = out
            grad = grad + wp * np.asarray(hg)
        else:
            hv = out
        value += wp * float(hv)
    return value, grad


def loss_tgt(render, gt, cfg=None, perceptual_hook=None):
    return loss_tgt_and_grad(render, gt, cfg, perceptual_hook)[0]


def psnr(a, b, cap=99.0):
    a, b = _check(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse <= 0.0:
        return cap
    return min(cap, 10.0 * np.log10(1.0 / mse))
