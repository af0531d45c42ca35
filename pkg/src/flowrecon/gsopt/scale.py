import numpy as np


class NoValidPixels(ValueError):
    pass


def align_metric_scale(recon_depths, mono_depths, confidences):
    """Scale ``beta`` minimizing ``sum W * |beta * D - D_mono|``.

    Writing the objective as ``sum (W * D) * |beta - D_mono / D|`` shows the
    minimizer is the weighted median of the depth ratios with weights ``W * D``.
    """
    D = np.concatenate([np.asarray(d, dtype=np.float64).ravel() for d in recon_depths])
    Dm = np.concatenate([np.asarray(d, dtype=np.float64).ravel() for d in mono_depths])
    Wt = np.concatenate([np.asarray(w, dtype=np.float64).ravel() for w in confidences])
    if not (D.shape == Dm.shape == Wt.shape):
        raise ValueError("depth and confidence buffers must have matching shapes")
    ok = (Wt > 0) & (D > 0) & np.isfinite(D) & np.isfinite(Dm) & np.isfinite(Wt)
    if not np.any(ok):
        raise NoValidPixels("no pixel has positive confidence and positive depth")
    ratio = Dm[ok] / D[ok]
    weight = Wt[ok] * D[ok]
    order = np.argsort(ratio, kind="stable")
    ratio, weight = ratio[order], weight[order]
    cum = np.cumsum(weight)
    i = int(np.searchsorted(cum, 0.5 * cum[-1], side="left"))
    return float(ratio[min(i, len(ratio) - 1)])
