"""Conditional flow-matching training and sampling for :class:`VelocityNet`."""

from __future__ import annotations

import logging
import math

import numpy as np

from .. import flowcore
from ..autodiff import Tensor, mse
from ..flowcore import FlowBatch, TimeSampler
from ..gsopt.optim import Adam

logger = logging.getLogger(__name__)

CONDITIONAL = "conditional"
GAUSSIAN = "gaussian"


def stack_batches(items):
    """Concatenate a list of :class:`FlowBatch` along the batch axis."""
    z0 = np.concatenate([b.z0 for b in items], 0)
    z1 = np.concatenate([b.z1 for b in items], 0)
    cond = {}
    for key in items[0].cond:
        cond[key] = np.concatenate([b.cond[key] for b in items], 0)
    return FlowBatch(z0, z1, cond)


def source_inputs(model, batch, source, rng):
    """Source sample ``z0`` and conditioning for one batch.

    With ``source="gaussian"`` the renderings move into the extra channels
    and ``z0`` is noise; ``"conditional"`` starts the flow at the renderings.
    """
    cond = dict(batch.cond)
    if model.cfg.cond_channels:
        frames = batch.z0 if "src" not in cond else np.concatenate([batch.z0, cond["src"]], 1)
        cond["extra"] = frames
    if source == GAUSSIAN:
        z0 = rng.normal(size=batch.z0.shape)
    elif source == CONDITIONAL:
        z0 = batch.z0
    else:
        raise ValueError(f"unknown source distribution {source!r}")
    return z0, cond


def cosine_lr(base, warmup, total):
    def lr(step):
        if step < warmup:
            return base * (step + 1) / warmup
        frac = (step - warmup) / max(total - warmup, 1)
        return base * 0.5 * (1 + math.cos(math.pi * min(frac, 1.0)))

    return lr


def cfm_step_loss(model, z0, z1, cond, t, sigma_min=flowcore.SIGMA_MIN):
    zt = flowcore.interpolate_state(z0, z1, t, sigma_min)
    v = flowcore.target_velocity(z0, z1, sigma_min)
    pred = model(zt, cond.get("src"), cond.get("raymaps"), cond.get("indices"), t, cond.get("extra"))
    return mse(pred, Tensor(v.astype(model.dtype)))


def validation_loss(model, batch, source=CONDITIONAL, seed=0, sampler=None):
    """CFM loss at fixed random times and noise (for comparable curves)."""
    rng = np.random.default_rng(seed)
    sampler = sampler or TimeSampler()
    z0, cond = source_inputs(model, batch, source, rng)
    B, N = batch.z1.shape[:2]
    t = flowcore.sample_time(sampler, N, rng, batch=B)
    zt = flowcore.interpolate_state(z0, batch.z1, t)
    pred = model.velocity(zt, cond, t)
    return flowcore.cfm_loss(pred, z0, batch.z1)


def train_toy(model, dataset, steps=2000, lr=1e-3, batch_size=8, seed=0, sampler=None, source=CONDITIONAL,
              warmup=100, clip=1.0, history=None, log_interval=50):
    """Train ``model`` with the CFM objective on a list of ``FlowBatch``.

    ``lr`` is a float (cosine decay after a linear warmup) or a callable of
    the step.  Returns ``(model, history)``; history rows are
    ``{"step", "loss"}``.
    """
    if not dataset:
        raise ValueError("dataset is empty")
    rng = np.random.default_rng(seed)
    sampler = sampler or TimeSampler()
    schedule = lr if callable(lr) else cosine_lr(lr, warmup, steps)
    named = dict(model.named_parameters())
    params = {k: p.data for k, p in named.items()}
    opt = Adam({k: 0.0 for k in params}, 0.9, 0.999, 1e-8)
    history = [] if history is None else history
    for step in range(steps):
        pick = rng.choice(len(dataset), size=min(batch_size, len(dataset)), replace=False)
        batch = stack_batches([dataset[i] for i in pick])
        z0, cond = source_inputs(model, batch, source, rng)
        B, N = batch.z1.shape[:2]
        t = flowcore.sample_time(sampler, N, rng, batch=B)
        model.zero_grad()
        loss = cfm_step_loss(model, z0, batch.z1, cond, t)
        if not np.isfinite(loss.data):
            raise FloatingPointError(f"non-finite CFM loss at step {step}")
        loss.backward()
        grads = {k: (p.grad if p.grad is not None else np.zeros_like(p.data)) for k, p in named.items()}
        if clip:
            norm = math.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads.values()))
            if norm > clip:
                grads = {k: g * (clip / norm) for k, g in grads.items()}
        rate = schedule(step)
        opt.lrs = {k: rate for k in params}
        opt.step(params, grads)
        if step % log_interval == 0 or step == steps - 1:
            history.append({"step": step, "loss": float(loss.data)})
            logger.debug("step %d loss %.5f", step, float(loss.data))
    return model, history


def integrate(model, batch, n_steps=20, schedule=flowcore.DECREASING, source=CONDITIONAL, seed=0):
    """Push the batch's sources through the learned flow."""
    rng = np.random.default_rng(seed)
    z0, cond = source_inputs(model, batch, source, rng)
    return flowcore.integrate_euler(model.velocity, z0, cond, n_steps, schedule)
