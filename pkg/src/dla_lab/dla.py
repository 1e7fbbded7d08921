"""Deformable line attention.

Each query carries a line (ep1, ep2). For every head m and every sample slot
t (levels concatenated, ``points_per_level[l]`` slots on level l) a scalar
steplength alpha places the sample at ``mid + alpha * (ep1 - ep2)``, so every
sample lies on the line through the two endpoints; alpha = +1/2 and -1/2 hit
ep1 and ep2. Samples are bilinearly read from the head's channel slice of the
level's value map and combined with per-head softmax weights.

Sampling tensors use the flattened layout (..., M, T, 2) with T the total
sample count, because levels may carry different point counts (e.g. 4, 1, 1).
A uniform (M, L, P, 2) tensor is accepted wherever a single query is handled.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import LineSegment
from .layers import Linear, Module, Param
from .numerics import (
    DTYPE,
    ShapeError,
    bilinear_gather,
    bilinear_gather_backward,
    softmax_over_samples,
    softmax_over_samples_backward,
)

__all__ = [
    "DlaConfig",
    "DeformableLineAttention",
    "DlaSaved",
    "UsageError",
    "sampling_points",
    "dla_aggregate",
    "dla_aggregate_backward",
    "dla_forward",
    "dla_attention",
    "dla_backward",
    "count_flops",
    "count_mda_flops",
]


class UsageError(RuntimeError):
    pass


@dataclass(frozen=True)
class DlaConfig:
    n_heads: int = 8
    points_per_level: tuple[int, ...] = (4, 1, 1)
    d_model: int = 256

    def __post_init__(self):
        object.__setattr__(self, "points_per_level", tuple(int(p) for p in self.points_per_level))
        if self.n_heads < 1 or self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} must be divisible by n_heads={self.n_heads}")
        if not self.points_per_level or min(self.points_per_level) < 1:
            raise ValueError(f"points_per_level entries must be >= 1, got {self.points_per_level}")

    @property
    def n_levels(self) -> int:
        return len(self.points_per_level)

    @property
    def total_points(self) -> int:
        return sum(self.points_per_level)

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    @property
    def level_slices(self) -> list[slice]:
        edges = np.concatenate([[0], np.cumsum(self.points_per_level)])
        return [slice(int(a), int(b)) for a, b in zip(edges[:-1], edges[1:])]


def initial_steplengths(config: DlaConfig) -> np.ndarray:
    """Per-slot alpha bias: evenly spaced over [-1/2, 1/2] within each level.

    Single-point levels sample the midpoint. Shape (M * T,), head-major.
    """
    per_level = [np.linspace(-0.5, 0.5, p) if p > 1 else np.zeros(1) for p in config.points_per_level]
    return np.tile(np.concatenate(per_level), config.n_heads)


# ---------------------------------------------------------------------------
# pure operator pieces
# ---------------------------------------------------------------------------


def sampling_points(line, alpha) -> np.ndarray:
    """Sample locations ``alpha * (ep1 - ep2) + (ep1 + ep2) / 2``.

    ``line`` is a LineSegment or a pair ``(ep1, ep2)`` of arrays with shape
    lead + (2,). ``alpha`` has shape lead + extra; the result has shape
    lead + extra + (2,).
    """
    if isinstance(line, LineSegment):
        ep1, ep2 = np.asarray(line.ep1, dtype=DTYPE), np.asarray(line.ep2, dtype=DTYPE)
    else:
        ep1, ep2 = (np.asarray(e, dtype=DTYPE) for e in line)
    alpha = np.asarray(alpha, dtype=DTYPE)
    lead = ep1.ndim - 1
    extra = alpha.ndim - lead
    if extra < 0 or alpha.shape[:lead] != ep1.shape[:-1]:
        raise ShapeError(f"alpha shape {alpha.shape} incompatible with endpoints {ep1.shape}")
    shape = ep1.shape[:-1] + (1,) * extra + (2,)
    mid = ((ep1 + ep2) / 2.0).reshape(shape)
    delta = (ep1 - ep2).reshape(shape)
    return alpha[..., None] * delta + mid


def _level_points(points: np.ndarray, sl: slice) -> np.ndarray:
    b, q, m = points.shape[:3]
    p = points[:, :, :, sl, :].transpose(0, 2, 1, 3, 4)  # (B, M, Q, P, 2)
    return p.reshape(b * m, -1, 2)


def dla_aggregate(values: list[np.ndarray], points: np.ndarray, weights: np.ndarray, config: DlaConfig):
    """Weighted sum of bilinear samples per head.

    values[l]: (B, M, hd, H_l, W_l); points: (B, Q, M, T, 2); weights:
    (B, Q, M, T). Returns ((B, Q, M, hd), per-level samples for backward).
    """
    if len(values) != config.n_levels:
        raise ShapeError(f"expected {config.n_levels} feature levels, got {len(values)}")
    b, q, m, t = weights.shape
    if points.shape != (b, q, m, t, 2) or t != config.total_points or m != config.n_heads:
        raise ShapeError(f"points {points.shape} / weights {weights.shape} disagree with {config}")
    hd = config.head_dim
    out = np.zeros((b, m, q, hd), dtype=DTYPE)
    samples = []
    for v, sl in zip(values, config.level_slices):
        h, w = v.shape[-2:]
        s = bilinear_gather(v.reshape(b * m, hd, h, w), _level_points(points, sl))
        s = s.reshape(b, m, q, sl.stop - sl.start, hd)
        wl = weights[:, :, :, sl].transpose(0, 2, 1, 3)
        out += np.einsum("bmqp,bmqpc->bmqc", wl, s)
        samples.append(s)
    return out.transpose(0, 2, 1, 3), samples


def dla_aggregate_backward(values, points, weights, samples, grad_out, config: DlaConfig, need_values: bool = True):
    """Returns (grad_values list, grad_points, grad_weights) for dla_aggregate."""
    b, q, m, t = weights.shape
    hd = config.head_dim
    g = grad_out.transpose(0, 2, 1, 3)  # (B, M, Q, hd)
    grad_points = np.zeros_like(points)
    grad_weights = np.zeros_like(weights)
    grad_values = []
    for v, sl, s in zip(values, config.level_slices, samples):
        h, w = v.shape[-2:]
        npts = sl.stop - sl.start
        grad_weights[:, :, :, sl] = np.einsum("bmqpc,bmqc->bqmp", s, g)
        wl = weights[:, :, :, sl].transpose(0, 2, 1, 3)
        gs = (wl[..., None] * g[:, :, :, None, :]).reshape(b * m, q * npts, hd)
        gv, gp = bilinear_gather_backward(v.reshape(b * m, hd, h, w), _level_points(points, sl), gs, need_values)
        grad_values.append(gv.reshape(v.shape) if gv is not None else None)
        grad_points[:, :, :, sl, :] = gp.reshape(b, m, q, npts, 2).transpose(0, 2, 1, 3, 4)
    return grad_values, grad_points, grad_weights


# ---------------------------------------------------------------------------
# layer
# ---------------------------------------------------------------------------


class DeformableLineAttention(Module):
    """Parameter groups and batched forward/backward of deformable line attention.

    alpha_head and attn_head map a query to M*T steplengths / attention
    logits (head-major). value_proj holds one channel projection per level.
    """

    def __init__(self, config: DlaConfig, in_channels: list[int] | int, rng: np.random.Generator | None = None):
        if isinstance(in_channels, int):
            in_channels = [in_channels] * config.n_levels
        if len(in_channels) != config.n_levels:
            raise ShapeError(f"{len(in_channels)} channel counts for {config.n_levels} levels")
        d, mt = config.d_model, config.n_heads * config.total_points
        self.config = config
        self.alpha_head = Linear(d, mt)
        self.alpha_head.bias.value[...] = initial_steplengths(config)
        self.attn_head = Linear(d, mt)
        self.value_proj = [Linear(c, d, rng) for c in in_channels]
        self.out_proj = Linear(d, d, rng)

    def project_values(self, features: list[np.ndarray]):
        """(B, C_l, H, W) maps -> (B, M, hd, H, W) head-split value maps."""
        cfg = self.config
        vals, caches = [], []
        for x, proj in zip(features, self.value_proj):
            b, _, h, w = x.shape
            v, c = proj.forward(x.transpose(0, 2, 3, 1))
            vals.append(np.ascontiguousarray(v.transpose(0, 3, 1, 2)).reshape(b, cfg.n_heads, cfg.head_dim, h, w))
            caches.append(c)
        return vals, caches

    def forward(self, query: np.ndarray, ep1: np.ndarray, ep2: np.ndarray, features: list[np.ndarray]):
        """query (B, Q, d); ep1, ep2 (B, Q, 2); features[l] (B, C_l, H_l, W_l)."""
        cfg = self.config
        if len(features) != cfg.n_levels:
            raise ShapeError(f"expected {cfg.n_levels} feature levels, got {len(features)}")
        b, q, _ = query.shape
        m, t = cfg.n_heads, cfg.total_points
        alpha_flat, ca = self.alpha_head.forward(query)
        logits, cl = self.attn_head.forward(query)
        alpha = alpha_flat.reshape(b, q, m, t)
        weights = softmax_over_samples(logits.reshape(b, q, m, t), sample_axes=1)
        points = sampling_points((ep1, ep2), alpha)
        values, cv = self.project_values(features)
        agg, samples = dla_aggregate(values, points, weights, cfg)
        out, co = self.out_proj.forward(agg.reshape(b, q, cfg.d_model))
        cache = dict(ca=ca, cl=cl, alpha=alpha, weights=weights, points=points, values=values,
                     cv=cv, samples=samples, co=co, ep1=ep1, ep2=ep2)
        return out, cache

    def backward(self, grad: np.ndarray, cache, need_features: bool = True):
        """Returns (grad_query, grad_ep1, grad_ep2, grad_features)."""
        cfg = self.config
        b, q, _ = grad.shape
        m, t, hd = cfg.n_heads, cfg.total_points, cfg.head_dim
        gagg = self.out_proj.backward(grad, cache["co"]).reshape(b, q, m, hd)
        gvals, gpts, gw = dla_aggregate_backward(
            cache["values"], cache["points"], cache["weights"], cache["samples"], gagg, cfg, need_features
        )
        ep1, ep2, alpha = cache["ep1"], cache["ep2"], cache["alpha"]
        delta = (ep1 - ep2)[:, :, None, None, :]
        galpha = (gpts * delta).sum(axis=-1)
        gmid = gpts.sum(axis=(2, 3))
        gdelta = (gpts * alpha[..., None]).sum(axis=(2, 3))
        gep1 = 0.5 * gmid + gdelta
        gep2 = 0.5 * gmid - gdelta
        glogits = softmax_over_samples_backward(cache["weights"], gw, sample_axes=1)
        gq = self.alpha_head.backward(galpha.reshape(b, q, m * t), cache["ca"])
        gq = gq + self.attn_head.backward(glogits.reshape(b, q, m * t), cache["cl"])
        gfeat = None
        if need_features:
            gfeat = []
            for gv, proj, c in zip(gvals, self.value_proj, cache["cv"]):
                _, _, _, h, w = gv.shape
                gvt = gv.reshape(b, cfg.d_model, h, w).transpose(0, 2, 3, 1)
                gfeat.append(proj.backward(gvt, c).transpose(0, 3, 1, 2))
        return gq, gep1, gep2, gfeat


# ---------------------------------------------------------------------------
# single-query functional surface
# ---------------------------------------------------------------------------


def _flatten_samples(S: np.ndarray, A: np.ndarray, points_per_level):
    S = np.asarray(S, dtype=DTYPE)
    A = np.asarray(A, dtype=DTYPE)
    if S.ndim == 4:  # uniform (M, L, P, 2)
        m, l, p, _ = S.shape
        if A.shape != (m, l, p):
            raise ShapeError(f"attention {A.shape} does not match sampling {S.shape}")
        return S.reshape(m, l * p, 2), A.reshape(m, l * p), (p,) * l
    if points_per_level is None:
        raise ShapeError("flattened (M, T, 2) sampling needs points_per_level")
    if A.shape != S.shape[:2]:
        raise ShapeError(f"attention {A.shape} does not match sampling {S.shape}")
    return S, A, tuple(points_per_level)


def dla_forward(features, S, A, out_proj=None, points_per_level=None) -> np.ndarray:
    """Aggregate one query's samples from value-projected maps.

    features: L arrays (d, H_l, W_l) whose d channels split into M contiguous
    head slices. S: (M, L, P, 2) or (M, T, 2); A: matching weights. out_proj
    is a Linear, a (weight, bias) pair, or None to return the concatenated
    head outputs before projection.
    """
    S, A, ppl = _flatten_samples(S, A, points_per_level)
    m = S.shape[0]
    if len(features) != len(ppl):
        raise ShapeError(f"{len(features)} feature maps for {len(ppl)} levels")
    d = features[0].shape[0]
    cfg = DlaConfig(n_heads=m, points_per_level=ppl, d_model=d)
    values = [np.asarray(f, dtype=DTYPE).reshape(1, m, d // m, *f.shape[-2:]) for f in features]
    agg, _ = dla_aggregate(values, S[None, None], A[None, None], cfg)
    head_out = agg.reshape(d)
    if out_proj is None:
        return head_out
    if isinstance(out_proj, Linear):
        return out_proj.forward(head_out)[0]
    w, b = out_proj
    return head_out @ np.asarray(w).T + np.asarray(b)


@dataclass
class DlaSaved:
    params: DeformableLineAttention
    cache: dict = field(repr=False)


def dla_attention(query, line: LineSegment, features, params: DeformableLineAttention, return_saved: bool = False):
    """One query against L raw feature maps (C_l, H_l, W_l); returns a length-d vector."""
    q = np.asarray(query, dtype=DTYPE)[None, None]
    ep1 = np.asarray(line.ep1, dtype=DTYPE)[None, None]
    ep2 = np.asarray(line.ep2, dtype=DTYPE)[None, None]
    feats = [np.asarray(f, dtype=DTYPE)[None] for f in features]
    out, cache = params.forward(q, ep1, ep2, feats)
    if return_saved:
        return out[0, 0], DlaSaved(params, cache)
    return out[0, 0]


def dla_backward(upstream_grad, saved: DlaSaved | None) -> dict[str, np.ndarray]:
    """Analytic gradients of ``<upstream_grad, dla_attention(...)>``.

    Returns a dict with keys query, ep1, ep2, features.<l> and every named
    parameter of the layer. Overwrites the layer's Param.grad buffers.
    """
    if saved is None or not isinstance(saved, DlaSaved):
        raise UsageError("dla_backward needs the saved state from dla_attention(..., return_saved=True)")
    layer = saved.params
    layer.zero_grad()
    g = np.asarray(upstream_grad, dtype=DTYPE)[None, None]
    gq, gep1, gep2, gfeat = layer.backward(g, saved.cache)
    grads = {"query": gq[0, 0], "ep1": gep1[0, 0], "ep2": gep2[0, 0]}
    for i, gf in enumerate(gfeat):
        grads[f"features.{i}"] = gf[0]
    for name, p in layer.named_parameters():
        grads[name] = p.grad.copy()
    return grads


# ---------------------------------------------------------------------------
# FLOP model
# ---------------------------------------------------------------------------

BILINEAR_OPS_PER_CHANNEL = 4 + 2 * 7  # 4 corner reads + 7 multiply-adds (2 flops each)


def count_flops(config: DlaConfig, num_queries: int) -> int:
    """Per-query cost of deformable line attention times ``num_queries``.

    Per query: steplength and attention heads 2*d*M*T each; sample placement
    6*M*T (mid, delta and the scaled add for both coordinates); bilinear
    reads 18 ops per sampled channel (M*T*head_dim channels); output
    projection 2*d*d. Value projection is per pixel, not per query, and is
    excluded.
    """
    d, m, t, hd = config.d_model, config.n_heads, config.total_points, config.head_dim
    per_query = 2 * (2 * d * m * t) + 6 * m * t + m * t * hd * BILINEAR_OPS_PER_CHANNEL + 2 * d * d
    return int(num_queries) * per_query


def count_mda_flops(config: DlaConfig, num_queries: int) -> int:
    """Same accounting for multi-scale deformable attention (comparator only).

    Offsets are free 2D vectors: the offset head emits 2*M*T values and
    placement costs 4*M*T (scale and add per coordinate).
    """
    d, m, t, hd = config.d_model, config.n_heads, config.total_points, config.head_dim
    per_query = 2 * d * (2 * m * t) + 2 * d * m * t + 4 * m * t + m * t * hd * BILINEAR_OPS_PER_CHANNEL + 2 * d * d
    return int(num_queries) * per_query
