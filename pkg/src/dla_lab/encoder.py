"""Hybrid encoder: channel unification, self-attention on the coarsest map, and
GELAN-style cross-scale fusion whose parallel 3x3 / 1x3 / 3x1 / 1x1 branches
collapse into one 3x3 kernel for deployment.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .layers import Conv2d, Module, MultiHeadAttention, relu, relu_backward
from .numerics import DTYPE, ShapeError, conv2d

__all__ = [
    "GelanBranchParams",
    "fuse_kernels",
    "RepBlock",
    "GelanFusion",
    "HybridEncoder",
    "project_channels",
    "self_attention_smallest",
    "gelan_forward",
    "upsample2x",
    "conv_flops",
    "gelan_block_flops",
    "gelan_flops",
    "BRANCH_SHAPES",
]

BRANCH_SHAPES = {"3x3": (3, 3), "1x3": (1, 3), "3x1": (3, 1), "1x1": (1, 1)}


@dataclass
class GelanBranchParams:
    k3x3: np.ndarray
    b3x3: np.ndarray
    k1x3: np.ndarray
    b1x3: np.ndarray
    k3x1: np.ndarray
    b3x1: np.ndarray
    k1x1: np.ndarray
    b1x1: np.ndarray

    def __post_init__(self):
        c = self.k3x3.shape[0]
        for name, (kh, kw) in BRANCH_SHAPES.items():
            k = getattr(self, "k" + name)
            if k.shape != (c, c, kh, kw):
                raise ShapeError(f"branch {name} kernel has shape {k.shape}, expected {(c, c, kh, kw)}")

    @property
    def hidden_dim(self) -> int:
        return self.k3x3.shape[0]

    @classmethod
    def random(cls, c: int, rng: np.random.Generator, scale: float = 1.0) -> "GelanBranchParams":
        kw = {}
        for name, (kh, kwd) in BRANCH_SHAPES.items():
            kw["k" + name] = rng.normal(0.0, scale, size=(c, c, kh, kwd))
            kw["b" + name] = rng.normal(0.0, scale, size=c)
        return cls(**kw)


def _pad_to_3x3(k: np.ndarray) -> np.ndarray:
    kh, kw = k.shape[-2:]
    ph, pw = (3 - kh) // 2, (3 - kw) // 2
    return np.pad(k, ((0, 0), (0, 0), (ph, ph), (pw, pw)))


def fuse_kernels(params: GelanBranchParams) -> tuple[np.ndarray, np.ndarray]:
    """Center-pad every branch to 3x3 and sum kernels and biases."""
    kernel = sum(_pad_to_3x3(getattr(params, "k" + n)) for n in BRANCH_SHAPES)
    bias = sum(getattr(params, "b" + n) for n in BRANCH_SHAPES)
    return kernel, bias


class RepBlock(Module):
    """x + relu(k3x3(x) + k1x3(x) + k3x1(x) + k1x1(x)); fusable to one 3x3 conv."""

    def __init__(self, c: int, rng: np.random.Generator | None, scale: float = 0.5):
        self.branches = [Conv2d(c, c, BRANCH_SHAPES[n], rng) for n in BRANCH_SHAPES]
        if rng is not None:
            for conv in self.branches:
                conv.weight.value *= scale
        self._fused = None

    def branch_params(self) -> GelanBranchParams:
        kw = {}
        for n, conv in zip(BRANCH_SHAPES, self.branches):
            kw["k" + n] = conv.weight.value
            kw["b" + n] = conv.bias.value
        return GelanBranchParams(**kw)

    def deploy(self) -> None:
        self._fused = fuse_kernels(self.branch_params())

    def train(self) -> None:
        self._fused = None

    def forward(self, x: np.ndarray, mode: str = "train"):
        if mode == "deploy":
            k, b = self._fused if self._fused is not None else fuse_kernels(self.branch_params())
            s = conv2d(x, k, b, padding=(1, 1))
            return x + relu(s), None
        if mode != "train":
            raise ValueError(f"unknown mode {mode!r}")
        s = 0.0
        for conv in self.branches:
            s = s + conv.forward(x)[0]
        return x + relu(s), (x, s)

    def backward(self, grad: np.ndarray, cache):
        if cache is None:
            raise RuntimeError("deploy-mode blocks have no backward")
        x, s = cache
        gs = relu_backward(s, grad)
        gx = grad.copy()
        for conv in self.branches:
            gx += conv.backward(gs, x)
        return gx


def upsample2x(x: np.ndarray) -> np.ndarray:
    return x.repeat(2, axis=-2).repeat(2, axis=-1)


def downsample2x_grad(g: np.ndarray) -> np.ndarray:
    """Adjoint of nearest 2x upsampling."""
    *lead, h, w = g.shape
    return g.reshape(*lead, h // 2, 2, w // 2, 2).sum(axis=(-3, -1))


class GelanFusion(Module):
    """Fuses a fine map with its 2x-coarser neighbour.

    concat(hi, up2(lo)) -> 1x1 conv to hidden width -> ``depth`` RepBlocks ->
    1x1 conv back to ``d``.
    """

    def __init__(self, d: int, hidden: int, depth: int, rng: np.random.Generator | None):
        self.in_proj = Conv2d(2 * d, hidden, 1, rng)
        self.blocks = [RepBlock(hidden, rng) for _ in range(depth)]
        self.out_proj = Conv2d(hidden, d, 1, rng)
        self.d, self.hidden, self.depth = d, hidden, depth

    def deploy(self) -> None:
        for blk in self.blocks:
            blk.deploy()

    def train(self) -> None:
        for blk in self.blocks:
            blk.train()

    def forward(self, hi: np.ndarray, lo: np.ndarray, mode: str = "train"):
        up = upsample2x(lo)
        if up.shape[-2:] != hi.shape[-2:]:
            raise ShapeError(f"upsampled {lo.shape[-2:]} -> {up.shape[-2:]} does not match {hi.shape[-2:]}")
        x = np.concatenate([hi, up], axis=-3)
        x, c_in = self.in_proj.forward(x)
        caches = []
        for blk in self.blocks:
            x, c = blk.forward(x, mode)
            caches.append(c)
        out, c_out = self.out_proj.forward(x)
        return out, (c_in, caches, c_out)

    def backward(self, grad: np.ndarray, cache):
        c_in, caches, c_out = cache
        g = self.out_proj.backward(grad, c_out)
        for blk, c in zip(reversed(self.blocks), reversed(caches)):
            g = blk.backward(g, c)
        g = self.in_proj.backward(g, c_in)
        d = self.d
        return g[..., :d, :, :], downsample2x_grad(g[..., d:, :, :])


def project_channels(maps: Sequence[np.ndarray], projs) -> list[np.ndarray]:
    """Per-level 1x1 projection so all levels share one channel count.

    projs: one Conv2d or (kernel (d, C_l, 1, 1), bias (d,)) pair per level.
    """
    if len(maps) != len(projs):
        raise ShapeError(f"{len(maps)} maps but {len(projs)} projections")
    out = []
    for x, p in zip(maps, projs):
        if isinstance(p, Conv2d):
            out.append(p.forward(x)[0])
        else:
            k, b = p
            if k.shape[-2:] != (1, 1):
                raise ShapeError(f"projection kernel must be 1x1, got {k.shape}")
            out.append(conv2d(x, k, b))
    d = {o.shape[-3] for o in out}
    if len(d) > 1:
        raise ShapeError(f"projected maps disagree on channels: {sorted(d)}")
    return out


def _attend_map(x: np.ndarray, mha: MultiHeadAttention):
    b, d, h, w = x.shape
    tokens = x.reshape(b, d, h * w).transpose(0, 2, 1)
    y, cache = mha.forward(tokens, tokens, tokens)
    out = (tokens + y).transpose(0, 2, 1).reshape(b, d, h, w)
    return out, cache


def _attend_map_backward(grad: np.ndarray, cache, mha: MultiHeadAttention) -> np.ndarray:
    b, d, h, w = grad.shape
    g = grad.reshape(b, d, h * w).transpose(0, 2, 1)
    gq, gk, gv = mha.backward(g, cache)
    gt = g + gq + gk + gv
    return gt.transpose(0, 2, 1).reshape(b, d, h, w)


def self_attention_smallest(fmap: np.ndarray, mha: MultiHeadAttention) -> np.ndarray:
    """Multi-head self-attention over the H*W tokens of a (d, H, W) map, plus residual."""
    single = fmap.ndim == 3
    x = np.asarray(fmap, dtype=DTYPE)
    x = x[None] if single else x
    if x.shape[1] != mha.d:
        raise ShapeError(f"map has {x.shape[1]} channels, attention width is {mha.d}")
    out, _ = _attend_map(x, mha)
    return out[0] if single else out


def gelan_forward(hi: np.ndarray, lo: np.ndarray, params: GelanFusion, mode: str = "train") -> np.ndarray:
    single = hi.ndim == 3
    h = hi[None] if single else hi
    lw = lo[None] if single else lo
    out, _ = params.forward(h, lw, mode)
    return out[0] if single else out


class HybridEncoder(Module):
    """1x1 projections -> attention on the coarsest level -> top-down GELAN fusion.

    Levels are ordered fine to coarse; each level is 2x the size of the next.
    """

    def __init__(self, in_channels: Sequence[int], d: int, hidden: int, depth: int, n_heads: int,
                 rng: np.random.Generator):
        self.proj = [Conv2d(c, d, 1, rng) for c in in_channels]
        self.attn = MultiHeadAttention(d, n_heads, rng)
        self.fuse = [GelanFusion(d, hidden, depth, rng) for _ in range(len(in_channels) - 1)]
        self.mode = "train"

    def deploy(self) -> None:
        self.mode = "deploy"
        for f in self.fuse:
            f.deploy()

    def train(self) -> None:
        self.mode = "train"
        for f in self.fuse:
            f.train()

    def forward(self, maps: Sequence[np.ndarray]):
        proj_caches = []
        xs = []
        for x, p in zip(maps, self.proj):
            y, c = p.forward(x)
            xs.append(y)
            proj_caches.append(c)
        top, attn_cache = _attend_map(xs[-1], self.attn)
        outs = [None] * len(xs)
        outs[-1] = top
        fuse_caches = [None] * len(self.fuse)
        for lvl in range(len(xs) - 2, -1, -1):
            outs[lvl], fuse_caches[lvl] = self.fuse[lvl].forward(xs[lvl], outs[lvl + 1], self.mode)
        return outs, (proj_caches, attn_cache, fuse_caches)

    def backward(self, grads: Sequence[np.ndarray], cache) -> list[np.ndarray]:
        proj_caches, attn_cache, fuse_caches = cache
        g_out = [g.copy() for g in grads]
        g_x = [None] * len(g_out)
        for lvl in range(len(self.fuse)):
            g_hi, g_lo = self.fuse[lvl].backward(g_out[lvl], fuse_caches[lvl])
            g_x[lvl] = g_hi
            g_out[lvl + 1] += g_lo
        g_x[-1] = _attend_map_backward(g_out[-1], attn_cache, self.attn)
        return [p.backward(g, c) for p, g, c in zip(self.proj, g_x, proj_caches)]


# ---------------------------------------------------------------------------
# FLOP accounting
# ---------------------------------------------------------------------------


def conv_flops(c_in: int, c_out: int, kh: int, kw: int, h: int, w: int) -> int:
    return 2 * c_in * c_out * kh * kw * h * w


def gelan_block_flops(c: int, h: int, w: int, mode: str, branches: Sequence[str] = tuple(BRANCH_SHAPES)) -> int:
    """Multiply-add FLOPs of one RepBlock; deploy mode is a single 3x3 conv."""
    if mode == "deploy":
        return conv_flops(c, c, 3, 3, h, w)
    return sum(conv_flops(c, c, *BRANCH_SHAPES[b], h, w) for b in branches)


def gelan_flops(d: int, hidden: int, depth: int, h: int, w: int, mode: str,
                branches: Sequence[str] = tuple(BRANCH_SHAPES)) -> int:
    return (conv_flops(2 * d, hidden, 1, 1, h, w)
            + depth * gelan_block_flops(hidden, h, w, mode, branches)
            + conv_flops(hidden, d, 1, 1, h, w))
