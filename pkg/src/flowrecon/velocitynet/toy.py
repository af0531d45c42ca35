"""Low-dimensional flow matching: an MLP velocity field and a sample-based metric."""

from __future__ import annotations

import math

import numpy as np

from .. import flowcore
from ..autodiff import Tensor, concat, mse, no_grad
from ..gsopt.optim import Adam
from .layers import Linear, Module, sinusoidal


class ToyVelocityMLP(Module):
    def __init__(self, dim=2, hidden=128, depth=3, t_dim=16, seed=0, dtype=np.float64):
        rng = np.random.default_rng(seed)
        self.t_dim = t_dim
        sizes = [dim + t_dim] + [hidden] * depth
        self.layers = [Linear(a, b, rng, dtype=dtype) for a, b in zip(sizes[:-1], sizes[1:])]
        self.out = Linear(hidden, dim, rng, dtype=dtype)

    def __call__(self, z, t):
        z = z if isinstance(z, Tensor) else Tensor(np.asarray(z, dtype=self.out.weight.data.dtype))
        t = np.broadcast_to(np.asarray(t, dtype=np.float64), z.shape[:1])
        tf = Tensor(sinusoidal(t * 100.0, self.t_dim).astype(z.data.dtype))
        h = concat([z, tf], -1)
        for layer in self.layers:
            h = layer(h).silu()
        return self.out(h)

    def velocity(self, z, cond=None, t=0.0):
        with no_grad():
            return self(z, t).data.astype(np.float64)


def train_mlp_flow(model, sample_target, steps=3000, batch_size=256, lr=2e-3, seed=0, sampler=None):
    """Gaussian-source CFM training; ``sample_target(rng, n)`` draws targets."""
    rng = np.random.default_rng(seed)
    sampler = sampler or flowcore.TimeSampler()
    named = dict(model.named_parameters())
    params = {k: p.data for k, p in named.items()}
    opt = Adam({k: lr for k in params}, 0.9, 0.999, 1e-8)
    losses = []
    for step in range(steps):
        z1 = sample_target(rng, batch_size)
        z0 = rng.normal(size=z1.shape)
        t = flowcore.sample_time(sampler, batch_size, rng)
        zt = flowcore.interpolate_state(z0, z1, t)
        model.zero_grad()
        loss = mse(model(zt, t), Tensor(flowcore.target_velocity(z0, z1)))
        loss.backward()
        rate = lr * 0.5 * (1 + math.cos(math.pi * step / steps))
        opt.lrs = {k: rate for k in params}
        opt.step(params, {k: p.grad for k, p in named.items()})
        losses.append(float(loss.data))
    return model, losses


def energy_distance(x, y, chunk=2048):
    """``2 E|X - Y| - E|X - X'| - E|Y - Y'|`` with V-statistic means."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)

    def mean_dist(a, b):
        total = 0.0
        for i in range(0, len(a), chunk):
            d = a[i : i + chunk, None, :] - b[None, :, :]
            total += np.sqrt(np.einsum("ijk,ijk->ij", d, d)).sum()
        return total / (len(a) * len(b))

    return 2 * mean_dist(x, y) - mean_dist(x, x) - mean_dist(y, y)
