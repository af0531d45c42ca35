"""Transformer building blocks on top of :mod:`flowrecon.autodiff`."""

from __future__ import annotations

import math

import numpy as np

from ..autodiff import Tensor


class Parameter(Tensor):
    __slots__ = ()

    def __init__(self, data, dtype=np.float32):
        super().__init__(np.array(data, dtype=dtype), requires_grad=True)


class Module:
    """Parameters are discovered in attribute-assignment order."""

    def named_parameters(self, prefix=""):
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(value, Parameter):
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def astype(self, dtype):
        for p in self.parameters():
            p.data = p.data.astype(dtype)
        return self

    def num_parameters(self):
        return sum(p.data.size for p in self.parameters())


class Linear(Module):
    def __init__(self, d_in, d_out, rng, bias=True, zero=False, dtype=np.float32):
        if zero:
            w = np.zeros((d_in, d_out))
        else:
            # xavier-uniform
            lim = math.sqrt(6.0 / (d_in + d_out))
            w = rng.uniform(-lim, lim, size=(d_in, d_out))
        self.weight = Parameter(w, dtype)
        self.bias = Parameter(np.zeros(d_out), dtype) if bias else None

    def __call__(self, x):
        y = x @ self.weight
        return y + self.bias if self.bias is not None else y


class LayerNorm(Module):
    """Affine-free normalization over the last axis."""

    def __init__(self, eps=1e-6):
        self.eps = eps

    def __call__(self, x):
        return x.layer_norm(self.eps)


def modulate(x, shift, scale):
    """``x * (1 + scale) + shift`` with ``shift``/``scale`` broadcast over tokens."""
    return x * (scale + 1.0) + shift


class Attention(Module):
    def __init__(self, dim, heads, rng, dtype=np.float32):
        if dim % heads:
            raise ValueError("dim must be divisible by heads")
        self.heads = heads
        self.qkv = Linear(dim, 3 * dim, rng, dtype=dtype)
        self.proj = Linear(dim, dim, rng, dtype=dtype)

    def __call__(self, x):
        # x: (B, T, D)
        B, T, D = x.shape
        H = self.heads
        dh = D // H
        qkv = self.qkv(x).reshape(B, T, 3, H, dh).transpose(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        att = ((q @ k.swapaxes(-1, -2)) * (1.0 / math.sqrt(dh))).softmax(-1)
        out = (att @ v).transpose(0, 2, 1, 3).reshape(B, T, D)
        return self.proj(out)


class MLP(Module):
    def __init__(self, dim, hidden, rng, d_out=None, dtype=np.float32):
        self.fc1 = Linear(dim, hidden, rng, dtype=dtype)
        self.fc2 = Linear(hidden, d_out or dim, rng, dtype=dtype)

    def __call__(self, x):
        return self.fc2(self.fc1(x).gelu())


def sinusoidal(x, dim, max_period=10000.0):
    """Interleaved ``[sin, cos]`` pairs at geometric frequencies."""
    x = np.asarray(x, dtype=np.float64)
    half = dim // 2
    freqs = np.exp(-math.log(max_period) * np.arange(half) / half)
    args = x[..., None] * freqs
    out = np.zeros(x.shape + (dim,))
    out[..., 0 : 2 * half : 2] = np.sin(args)
    out[..., 1 : 2 * half : 2] = np.cos(args)
    return out


class TimestepEmbedder(Module):
    def __init__(self, dim, rng, freq_dim=64, dtype=np.float32):
        self.freq_dim = freq_dim
        self.fc1 = Linear(freq_dim, dim, rng, dtype=dtype)
        self.fc2 = Linear(dim, dim, rng, dtype=dtype)

    def __call__(self, t):
        dtype = self.fc1.weight.data.dtype
        f = Tensor(sinusoidal(np.asarray(t) * 1000.0, self.freq_dim).astype(dtype))
        return self.fc2(self.fc1(f).silu())
