"""Synthetic corruption task shared by the flow acceptance checks.

Both source distributions use the same architecture: the renderings enter
the Gaussian-source model through its extra input channels.  Trained models
are cached per process since one training run takes minutes.
"""

from functools import lru_cache

import numpy as np

from flowrecon.flowcore import FlowBatch
from flowrecon.pipeline.toydata import make_corruption_dataset
from flowrecon.velocitynet import VelocityNet, VelocityNetConfig, train_toy
from flowrecon.velocitynet.train import integrate, stack_batches

TRAIN_ITEMS = 1000
VAL_ITEMS = 60
STEPS = 3000
EULER_STEPS = 20


def model_config():
    return VelocityNetConfig(dim=64, depth=2, heads=4, cond_channels=3, seed=0)


@lru_cache(maxsize=None)
def validation_batch():
    return stack_batches(make_corruption_dataset(1, VAL_ITEMS).items())


@lru_cache(maxsize=None)
def trained_model(source):
    train = make_corruption_dataset(0, TRAIN_ITEMS, fresh=True)
    model, _ = train_toy(VelocityNet(model_config()), train, steps=STEPS, lr=1e-3, batch_size=8, source=source)
    return model


def corruption_mse():
    vb = validation_batch()
    return float(np.mean((vb.z0 - vb.z1) ** 2))


def heldout_mse(source):
    vb = validation_batch()
    out = integrate(trained_model(source), vb, EULER_STEPS, source=source)
    return float(np.mean((out - vb.z1) ** 2))


def identity_mse(source="conditional"):
    """Integrate from clean inputs (``z0 = z1``) and measure the drift."""
    vb = validation_batch()
    clean = FlowBatch(vb.z1.copy(), vb.z1, vb.cond)
    out = integrate(trained_model(source), clean, EULER_STEPS, source=source)
    return float(np.mean((out - vb.z1) ** 2))
