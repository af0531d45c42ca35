"""Multi-view velocity network and its checkpoint format."""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass

import numpy as np

from ..autodiff import Tensor, concat, no_grad
from .encoding import (
    patchify,
    patchify_tensor,
    positional_encoding_2d,
    unpatchify_tensor,
    view_index_encoding,
)
from .layers import MLP, Attention, LayerNorm, Linear, Module, TimestepEmbedder, modulate

MAGIC = b"FLWRNET1"


class ShapeMismatch(ValueError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass
class VelocityNetConfig:
    latent_channels: int = 3
    patch_size: int = 2
    dim: int = 128
    depth: int = 4
    heads: int = 4
    mlp_ratio: float = 4.0
    multiview: bool = True
    cond_channels: int = 0
    freq_dim: int = 64
    seed: int = 0


class MultiViewBlock(Module):
    """Per-view attention, then attention over all views, then a feed-forward.

    Per-view attention and the MLP are gated by time modulation (adaLN-Zero);
    the multi-view branch sees the state plus the view-index encoding,
    concatenated with the ray embedding, and ends in a zero linear so it is
    inert at initialization.
    """

    def __init__(self, dim, heads, mlp_ratio, rng, multiview=True, dtype=np.float32):
        self.dim = dim
        self.norm1 = LayerNorm()
        self.attn = Attention(dim, heads, rng, dtype)
        self.norm2 = LayerNorm()
        self.mlp = MLP(dim, int(dim * mlp_ratio), rng, dtype=dtype)
        self.ada = Linear(dim, 6 * dim, rng, zero=True, dtype=dtype)
        self.multiview = multiview
        if multiview:
            self.mv_in = Linear(2 * dim, dim, rng, dtype=dtype)
            self.mv_norm = LayerNorm()
            self.mv_attn = Attention(dim, heads, rng, dtype)
            self.mv_out = Linear(dim, dim, rng, zero=True, dtype=dtype)

    def __call__(self, x, c, gamma, ray, use_multiview=True):
        B, V, T, D = x.shape
        mod = self.ada(c.silu())
        sh1, sc1, g1, sh2, sc2, g2 = (mod[..., k * D : (k + 1) * D] for k in range(6))
        h = modulate(self.norm1(x), sh1, sc1).reshape(B * V, T, D)
        x = x + g1 * self.attn(h).reshape(B, V, T, D)
        if self.multiview and use_multiview:
            h = self.mv_in(concat([x + gamma, ray], -1))
            h = self.mv_norm(h).reshape(B, V * T, D)
            x = x + self.mv_out(self.mv_attn(h)).reshape(B, V, T, D)
        h = modulate(self.norm2(x), sh2, sc2)
        return x + g2 * self.mlp(h)


class VelocityNet(Module):
    def __init__(self, cfg=None, dtype=np.float32):
        cfg = cfg or VelocityNetConfig()
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        p, D = cfg.patch_size, cfg.dim
        self.x_embed = Linear(p * p * (cfg.latent_channels + cfg.cond_channels), D, rng, dtype=dtype)
        self.t_embed = TimestepEmbedder(D, rng, cfg.freq_dim, dtype)
        if cfg.multiview:
            self.ray_embed = Linear(p * p * 6, D, rng, dtype=dtype)
        self.blocks = [MultiViewBlock(D, cfg.heads, cfg.mlp_ratio, rng, cfg.multiview, dtype) for _ in range(cfg.depth)]
        self.final_norm = LayerNorm()
        self.final_ada = Linear(D, 2 * D, rng, zero=True, dtype=dtype)
        self.final = Linear(D, p * p * cfg.latent_channels, rng, zero=True, dtype=dtype)

    @property
    def dtype(self):
        return self.final.weight.data.dtype

    def forward(self, z, src=None, raymaps=None, indices=None, t=None, extra=None, use_multiview=True):
        """Velocities for the ``N`` target frames of ``z`` ``(B, N, h, w, C)``.

        ``src`` are ``M`` clean source frames; ``raymaps`` ``(B, N+M, h, w, 6)``
        and ``indices`` ``(B, N+M)`` cover targets first, then sources.
        ``t`` is per target frame; sources are modulated with ``t = 1``.
        """
        cfg = self.cfg
        dt = self.dtype
        z = z if isinstance(z, Tensor) else Tensor(np.asarray(z, dtype=dt))
        if z.ndim != 5 or z.shape[-1] != cfg.latent_channels:
            raise ShapeMismatch(f"expected (B, N, h, w, {cfg.latent_channels}) frames, got {z.shape}")
        B, N, h, w, C = z.shape
        frames = z
        M = 0
        if src is not None:
            src = src if isinstance(src, Tensor) else Tensor(np.asarray(src, dtype=dt))
            if src.shape[0] != B or src.shape[2:] != (h, w, C):
                raise ShapeMismatch(f"source frames {src.shape} do not match targets {z.shape}")
            M = src.shape[1]
            frames = concat([z, src], 1)
        V = N + M
        if cfg.cond_channels:
            if extra is None:
                raise ShapeMismatch("this model expects extra conditioning channels")
            extra = np.asarray(extra, dtype=dt)
            if extra.shape != (B, V, h, w, cfg.cond_channels):
                raise ShapeMismatch(f"extra channels {extra.shape} vs {(B, V, h, w, cfg.cond_channels)}")
            frames = concat([frames, Tensor(extra)], -1)
        p = cfg.patch_size
        tokens = patchify_tensor(frames, p)
        x = self.x_embed(tokens) + Tensor(positional_encoding_2d(h // p, w // p, cfg.dim).astype(dt))

        t = np.broadcast_to(np.asarray(1.0 if t is None else t, dtype=np.float64), (B, N))
        t_all = np.concatenate([t, np.ones((B, M))], 1)
        c = self.t_embed(t_all).reshape(B, V, 1, cfg.dim)

        if indices is None:
            indices = np.broadcast_to(np.arange(V), (B, V))
        indices = np.asarray(indices)
        if indices.shape != (B, V):
            raise ShapeMismatch(f"indices {indices.shape} vs {(B, V)}")
        gamma = Tensor(view_index_encoding(indices, cfg.dim).astype(dt)[:, :, None, :])
        ray = None
        if cfg.multiview:
            if raymaps is None:
                raymaps = np.zeros((B, V, h, w, 6))
            raymaps = np.asarray(raymaps, dtype=dt)
            if raymaps.shape != (B, V, h, w, 6):
                raise ShapeMismatch(f"raymaps {raymaps.shape} vs {(B, V, h, w, 6)}")
            ray = self.ray_embed(Tensor(patchify(raymaps, p)))

        for blk in self.blocks:
            x = blk(x, c, gamma, ray, use_multiview)
        mod = self.final_ada(c.silu())
        shift, scale = mod[..., : cfg.dim], mod[..., cfg.dim :]
        out = self.final(modulate(self.final_norm(x), shift, scale))
        out = out[:, :N]
        return unpatchify_tensor(out, h, w, p)

    __call__ = forward

    def velocity(self, z, cond=None, t=1.0, use_multiview=True):
        """Numpy in, numpy out, no graph: the ``velocity_fn`` for Euler sampling."""
        cond = cond or {}
        with no_grad():
            out = self.forward(
                z,
                cond.get("src"),
                cond.get("raymaps"),
                cond.get("indices"),
                t,
                cond.get("extra"),
                use_multiview,
            )
        return out.data.astype(np.float64)


def save_model(model, path):
    names, arrays = zip(*[(n, p.data) for n, p in model.named_parameters()])
    meta = {
        "config": asdict(model.cfg),
        "params": [[n, list(a.shape)] for n, a in zip(names, arrays)],
    }
    blob = json.dumps(meta).encode()
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        for a in arrays:
            f.write(np.ascontiguousarray(a, dtype="<f4").tobytes())


def load_model(path):
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:8] != MAGIC:
        raise CheckpointError("not a velocity-net checkpoint")
    (n,) = struct.unpack_from("<I", raw, 8)
    meta = json.loads(raw[12 : 12 + n].decode())
    model = VelocityNet(VelocityNetConfig(**meta["config"]))
    params = dict(model.named_parameters())
    off = 12 + n
    for name, shape in meta["params"]:
        if name not in params:
            raise CheckpointError(f"unexpected parameter {name}")
        size = int(np.prod(shape)) * 4
        if off + size > len(raw):
            raise CheckpointError("truncated checkpoint")
        params[name].data = np.frombuffer(raw, "<f4", count=size // 4, offset=off).reshape(shape).astype(np.float32)
        off += size
    if off != len(raw):
        raise CheckpointError("trailing bytes in checkpoint")
    return model
