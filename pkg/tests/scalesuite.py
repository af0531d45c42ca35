"""Random scale-alignment instances checked against a 1-D search oracle."""

import numpy as np

from flowrecon.gsopt import align_metric_scale
from oracles import golden_section_min


def _beta_objective(D, Dm, W):
    return lambda b: float(np.sum(W * np.abs(b * D - Dm)))


def beta_case(seed, n=1000):
    """Weighted median vs golden-section search on the raw objective."""
    rng = np.random.default_rng(seed)
    D = rng.uniform(0.5, 5, n)
    Dm = D * rng.uniform(0.5, 3) * np.exp(rng.normal(0, 0.3, n))
    W = rng.uniform(0, 1, n)
    beta = align_metric_scale([D], [Dm], [W])
    f = _beta_objective(D, Dm, W)
    r = Dm / D
    ref = golden_section_min(f, r.min(), r.max())
    # objective is piecewise linear: compare the argmin, falling back to the value for flat optima
    return abs(beta - ref), (f(beta) - f(ref)) / max(f(ref), 1e-300)
