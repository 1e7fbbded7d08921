"""Toy LINEA-style line detector with hand-written backward passes.

Pipeline: strided conv backbone (three levels at 1/4, 1/8, 1/16) -> hybrid
encoder -> top-k query selection -> decoder layers with deformable line
attention and logit-space anchor refinement.

Anchors entering each decoder layer are treated as constants (no gradient
flows back through the reference line), as in iterative box refinement.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from ..dla import DeformableLineAttention
from ..encoder import HybridEncoder
from ..geometry import AnchorSet, ConfigError, get_norm_coords, inverse_sigmoid, sigmoid, topk_indices
from ..layers import MLP, Conv2d, LayerNorm, Linear, Module, MultiHeadAttention, Param, relu, relu_backward
from ..numerics import DTYPE, ShapeError
from .config import DetectorConfig

__all__ = [
    "Backbone",
    "QuerySet",
    "QuerySelector",
    "DecoderLayer",
    "LineDetector",
    "DetectorOutput",
    "select_queries",
    "decoder_layer",
    "level_shapes_for",
    "coord_channels",
]

CLASS_PRIOR = 0.01


def level_shapes_for(image_size: tuple[int, int], n_levels: int = 3) -> list[tuple[int, int]]:
    h, w = image_size
    shapes = []
    for i in range(n_levels):
        f = 4 * 2**i
        if h % f or w % f:
            raise ConfigError(f"image size {image_size} is not divisible by {f}")
        shapes.append((h // f, w // f))
    return shapes


def coord_channels(b: int, h: int, w: int) -> np.ndarray:
    """Normalized pixel-center x/y maps, (B, 2, H, W)."""
    xs = (np.arange(w) + 0.5) / w
    ys = (np.arange(h) + 0.5) / h
    grid = np.stack([np.broadcast_to(xs[None, :], (h, w)), np.broadcast_to(ys[:, None], (h, w))])
    return np.broadcast_to(grid[None], (b, 2, h, w))


class Backbone(Module):
    """Stride-2 conv stages; returns maps at 1/4, 1/8 and 1/16 resolution.

    The image is extended with two coordinate channels before the stem.
    """

    def __init__(self, in_channels: int, channels: tuple[int, ...], rng: np.random.Generator):
        c0, c1, c2, c3 = channels
        self.stem = Conv2d(in_channels + 2, c0, 3, rng, stride=2)
        self.down1 = Conv2d(c0, c1, 3, rng, stride=2)
        self.conv1 = Conv2d(c1, c1, 3, rng)
        self.down2 = Conv2d(c1, c2, 3, rng, stride=2)
        self.conv2 = Conv2d(c2, c2, 3, rng)
        self.down3 = Conv2d(c2, c3, 3, rng, stride=2)

    def _seq(self):
        return [self.stem, self.down1, self.conv1, self.down2, self.conv2, self.down3]

    def forward(self, images: np.ndarray):
        b, _, h, w = images.shape
        x = np.concatenate([images, coord_channels(b, h, w)], axis=1)
        caches, taps = [], []
        for i, conv in enumerate(self._seq()):
            pre, c = conv.forward(x)
            caches.append((c, pre))
            x = relu(pre)
            if i in (2, 4, 5):
                taps.append(x)
        return taps, caches

    def backward(self, grads: list[np.ndarray], caches) -> None:
        tap_of = {2: 0, 4: 1, 5: 2}
        g = None
        for i in reversed(range(len(caches))):
            if i in tap_of:
                g = grads[tap_of[i]] if g is None else g + grads[tap_of[i]]
            c, pre = caches[i]
            g = relu_backward(pre, g)
            g = self._seq()[i].backward(g, c, need_input=i > 0)


@dataclass
class QuerySet:
    content: np.ndarray  # (k, d) or (B, k, d)
    anchors: np.ndarray  # (k, 4) or (B, k, 4), logit space

    def __post_init__(self):
        if self.content.shape[:-1] != self.anchors.shape[:-1]:
            raise ShapeError(f"content {self.content.shape} and anchors {self.anchors.shape} disagree")

    def lines(self) -> np.ndarray:
        return sigmoid(self.anchors)


class QuerySelector(Module):
    """Pixel probability head, anchor offset head and the learnable content table."""

    def __init__(self, d: int, num_queries: int, rng: np.random.Generator):
        self.prob_head = Linear(d, 1, rng)
        self.prob_head.bias.value[...] = -np.log((1 - CLASS_PRIOR) / CLASS_PRIOR)
        self.offset_head = Linear(d, 4, rng)
        self.offset_head.weight.value *= 0.1
        self.offset_head.bias.value[...] = [-0.5, -0.5, 0.5, 0.5]
        self.content = Param(rng.normal(0.0, 1.0, size=(num_queries, d)))
        self.num_queries = num_queries

    def forward(self, tokens: np.ndarray, level_shapes, indices: np.ndarray | None = None):
        """tokens (B, N, d) -> anchors (B, k, 4), proposal logits (B, k), indices (B, k)."""
        b, n, d = tokens.shape
        k = self.num_queries
        if k > n:
            raise ConfigError(f"{k} queries exceed the {n} available pixels")
        logits, c_prob = self.prob_head.forward(tokens)
        logits = logits[..., 0]
        if indices is None:
            indices = topk_indices(logits, k)
        rows = np.arange(b)[:, None]
        sel = tokens[rows, indices]
        offsets, c_off = self.offset_head.forward(sel)
        coords = inverse_sigmoid(get_norm_coords(indices.reshape(-1), level_shapes)).reshape(b, k, 2)
        anchors = np.concatenate([coords, coords], axis=-1) + offsets
        return anchors, logits[rows, indices], indices, (c_prob, c_off, indices, tokens.shape)

    def backward(self, g_anchors: np.ndarray, g_proposals: np.ndarray, cache) -> np.ndarray:
        c_prob, c_off, indices, shape = cache
        b, n, d = shape
        rows = np.arange(b)[:, None]
        g_tokens = np.zeros(shape, dtype=DTYPE)
        g_tokens[rows, indices] += self.offset_head.backward(g_anchors, c_off)
        g_logits = np.zeros((b, n, 1), dtype=DTYPE)
        g_logits[rows, indices, 0] = g_proposals
        g_tokens += self.prob_head.backward(g_logits, c_prob)
        return g_tokens


def sine_embedding(lines: np.ndarray, d: int) -> np.ndarray:
    """Fixed sin/cos features of the four endpoint coordinates, width d."""
    nf = d // 8
    freqs = np.pi * 2.0 ** np.linspace(0.0, 6.0, nf)
    ang = lines[..., :, None] * freqs  # (..., 4, nf)
    emb = np.concatenate([np.sin(ang), np.cos(ang)], axis=-1)
    return emb.reshape(*lines.shape[:-1], 8 * nf)


def sine_embedding_backward(lines: np.ndarray, grad: np.ndarray) -> np.ndarray:
    nf = grad.shape[-1] // 8
    freqs = np.pi * 2.0 ** np.linspace(0.0, 6.0, nf)
    ang = lines[..., :, None] * freqs
    g = grad.reshape(*lines.shape, 2 * nf)
    return (g[..., :nf] * np.cos(ang) * freqs - g[..., nf:] * np.sin(ang) * freqs).sum(axis=-1)


class DecoderLayer(Module):
    def __init__(self, cfg: DetectorConfig, rng: np.random.Generator):
        d = cfg.d_model
        self.self_attn = MultiHeadAttention(d, cfg.self_attn_heads, rng)
        self.norm1 = LayerNorm(d)
        self.cross_attn = DeformableLineAttention(cfg.dla, [d] * cfg.dla.n_levels, rng)
        self.norm2 = LayerNorm(d)
        self.ffn = MLP([d, cfg.ffn_dim, d], rng)
        self.norm3 = LayerNorm(d)
        self.delta_head = MLP([d, d, 4], rng)
        last = self.delta_head.layers[-1]
        last.weight.value[...] = 0.0
        last.bias.value[...] = 0.0
        self.class_head = Linear(d, 1, rng)
        self.class_head.bias.value[...] = -np.log((1 - CLASS_PRIOR) / CLASS_PRIOR)

    def forward(self, content: np.ndarray, anchors: np.ndarray, pos: np.ndarray, maps: list[np.ndarray]):
        lines = sigmoid(anchors)
        q = content + pos
        sa, c_sa = self.self_attn.forward(q, q, content)
        x1, c_n1 = self.norm1.forward(content + sa)
        ca, c_ca = self.cross_attn.forward(x1 + pos, lines[..., :2], lines[..., 2:], maps)
        x2, c_n2 = self.norm2.forward(x1 + ca)
        ff, c_ff = self.ffn.forward(x2)
        x3, c_n3 = self.norm3.forward(x2 + ff)
        delta, c_dh = self.delta_head.forward(x3)
        logits, c_cls = self.class_head.forward(x3)
        cache = (c_sa, c_n1, c_ca, c_n2, c_ff, c_n3, c_dh, c_cls, lines)
        return x3, anchors + delta, logits[..., 0], cache

    def backward(self, g_content: np.ndarray, g_anchors: np.ndarray, g_logits: np.ndarray, cache):
        """Returns (grad content_in, grad pos, grad maps, grad anchors_in)."""
        c_sa, c_n1, c_ca, c_n2, c_ff, c_n3, c_dh, c_cls, lines = cache
        g3 = g_content + self.delta_head.backward(g_anchors, c_dh)
        g3 = g3 + self.class_head.backward(g_logits[..., None], c_cls)
        g = self.norm3.backward(g3, c_n3)
        g2 = g + self.ffn.backward(g, c_ff)
        g = self.norm2.backward(g2, c_n2)
        gq, gep1, gep2, g_maps = self.cross_attn.backward(g, c_ca)
        g_anchors_in = g_anchors + np.concatenate([gep1, gep2], axis=-1) * lines * (1.0 - lines)
        g1 = g + gq
        g_pos = gq.copy()
        g = self.norm1.backward(g1, c_n1)
        g_q, g_k, g_v = self.self_attn.backward(g, c_sa)
        g_pos += g_q + g_k
        return g + g_q + g_k + g_v, g_pos, g_maps, g_anchors_in


@dataclass
class DetectorOutput:
    """Predictions of the query selector (index 0) and of each decoder layer."""

    anchors: list[np.ndarray]  # each (B, k, 4), logit space
    logits: list[np.ndarray]  # each (B, k)
    indices: np.ndarray  # (B, k) selected pixel indices

    @property
    def lines(self) -> list[np.ndarray]:
        return [sigmoid(a) for a in self.anchors]

    def final(self) -> tuple[np.ndarray, np.ndarray]:
        return sigmoid(self.anchors[-1]), sigmoid(self.logits[-1])


class LineDetector(Module):
    def __init__(self, cfg: DetectorConfig, image_size: tuple[int, int], seed: int = 0):
        rng = np.random.default_rng(seed)
        self.cfg = cfg
        self.image_size = tuple(image_size)
        self.level_shapes = level_shapes_for(self.image_size, cfg.dla.n_levels)
        n_pixels = sum(h * w for h, w in self.level_shapes)
        # the query count is capped by the number of selectable pixels
        self.num_queries = min(cfg.num_queries, n_pixels)
        d = cfg.d_model
        self.backbone = Backbone(cfg.image_channels, cfg.backbone_channels, rng)
        self.encoder = HybridEncoder(cfg.level_channels, d, cfg.gelan_hidden, cfg.gelan_depth, cfg.encoder_heads, rng)
        self.selector = QuerySelector(d, self.num_queries, rng)
        self.pos_mlp = MLP([d, d, d], rng)
        self.decoder = [DecoderLayer(cfg, rng) for _ in range(cfg.decoder_layers)]

    def deploy(self) -> None:
        self.encoder.deploy()

    def train(self) -> None:
        self.encoder.train()

    def backbone_parameters(self) -> list[Param]:
        return self.backbone.parameters()

    def _flatten(self, maps: list[np.ndarray]) -> np.ndarray:
        b, d = maps[0].shape[:2]
        return np.concatenate([m.reshape(b, d, -1) for m in maps], axis=2).transpose(0, 2, 1)

    def _unflatten(self, tokens: np.ndarray) -> list[np.ndarray]:
        b, _, d = tokens.shape
        out, start = [], 0
        for h, w in self.level_shapes:
            out.append(np.ascontiguousarray(tokens[:, start : start + h * w].transpose(0, 2, 1)).reshape(b, d, h, w))
            start += h * w
        return out

    def forward(self, images: np.ndarray, indices: np.ndarray | None = None, timings: dict | None = None):
        """images (B, C, H, W). Returns (DetectorOutput, cache).

        ``indices`` pins the query selection (used by gradient checks).
        """
        if images.shape[-2:] != self.image_size:
            raise ShapeError(f"model built for {self.image_size}, got images {images.shape[-2:]}")
        t0 = time.perf_counter()
        feats, c_bb = self.backbone.forward(images)
        t1 = time.perf_counter()
        maps, c_enc = self.encoder.forward(feats)
        t2 = time.perf_counter()
        tokens = self._flatten(maps)
        anchors, proposals, indices, c_sel = self.selector.forward(tokens, self.level_shapes, indices)
        b = images.shape[0]
        content = np.broadcast_to(self.selector.content.value, (b,) + self.selector.content.shape)
        out_anchors, out_logits, dec_caches = [anchors], [proposals], []
        ref = anchors
        for layer in self.decoder:
            ref_lines = sigmoid(ref)
            pos, c_pos = self.pos_mlp.forward(sine_embedding(ref_lines, self.cfg.d_model))
            content, ref, logits, c = layer.forward(content, ref, pos, maps)
            out_anchors.append(ref)
            out_logits.append(logits)
            dec_caches.append((c_pos, c, ref_lines))
        t3 = time.perf_counter()
        if timings is not None:
            timings["backbone"] = t1 - t0
            timings["encoder"] = t2 - t1
            timings["decoder"] = t3 - t2
        cache = (c_bb, c_enc, c_sel, dec_caches, [m.shape for m in maps])
        return DetectorOutput(out_anchors, out_logits, indices), cache

    def backward(self, g_anchors: list[np.ndarray], g_logits: list[np.ndarray], cache) -> None:
        """Accumulate parameter gradients given d loss / d (anchors, logits) per output set."""
        c_bb, c_enc, c_sel, dec_caches, map_shapes = cache
        g_maps = [np.zeros(s, dtype=DTYPE) for s in map_shapes]
        g_content = np.zeros((g_anchors[0].shape[0], self.num_queries, self.cfg.d_model), dtype=DTYPE)
        detach = self.cfg.detach_anchors
        g_ref = np.zeros_like(g_anchors[-1])  # gradient reaching an output set from later layers
        for i in reversed(range(len(self.decoder))):
            c_pos, c, ref_lines = dec_caches[i]
            g_out = g_anchors[i + 1] + g_ref
            g_content, g_pos, gm, g_in = self.decoder[i].backward(g_content, g_out, g_logits[i + 1], c)
            g_emb = self.pos_mlp.backward(g_pos, c_pos, need_input=not detach)
            for acc, g in zip(g_maps, gm):
                acc += g
            if detach:
                continue
            g_lines = sine_embedding_backward(ref_lines, g_emb)
            g_ref = g_in + g_lines * ref_lines * (1.0 - ref_lines)
        self.selector.content.grad += g_content.sum(axis=0)
        g_tokens = self.selector.backward(g_anchors[0] + g_ref, g_logits[0], c_sel)
        for acc, g in zip(g_maps, self._unflatten(g_tokens)):
            acc += g
        g_feats = self.encoder.backward(g_maps, c_enc)
        self.backbone.backward(g_feats, c_bb)

    def predict(self, images: np.ndarray, batch_size: int = 64) -> tuple[np.ndarray, np.ndarray]:
        """Final-layer lines (B, k, 4) and scores (B, k)."""
        lines, scores = [], []
        for s in range(0, images.shape[0], batch_size):
            out, _ = self.forward(images[s : s + batch_size])
            li, sc = out.final()
            lines.append(li)
            scores.append(sc)
        return np.concatenate(lines), np.concatenate(scores)


def select_queries(encoder_maps: list[np.ndarray], k: int, selector: QuerySelector) -> QuerySet:
    """Single-image query selection from (d, H_l, W_l) encoder maps."""
    shapes = [m.shape[-2:] for m in encoder_maps]
    n = sum(h * w for h, w in shapes)
    if k > n:
        raise ConfigError(f"k={k} exceeds the {n} available pixels")
    if k > selector.content.shape[0]:
        raise ConfigError(f"k={k} exceeds the content table size {selector.content.shape[0]}")
    d = encoder_maps[0].shape[0]
    tokens = np.concatenate([m.reshape(d, -1) for m in encoder_maps], axis=1).T[None]
    saved_k = selector.num_queries
    selector.num_queries = k
    try:
        anchors, _, _, _ = selector.forward(tokens, shapes)
    finally:
        selector.num_queries = saved_k
    return QuerySet(content=selector.content.value[:k].copy(), anchors=anchors[0])


def anchor_set(encoder_maps: list[np.ndarray], k: int, selector: QuerySelector) -> AnchorSet:
    shapes = [m.shape[-2:] for m in encoder_maps]
    d = encoder_maps[0].shape[0]
    tokens = np.concatenate([m.reshape(d, -1) for m in encoder_maps], axis=1).T[None]
    saved_k = selector.num_queries
    selector.num_queries = k
    try:
        anchors, proposals, idx, _ = selector.forward(tokens, shapes)
    finally:
        selector.num_queries = saved_k
    return AnchorSet(anchors[0], idx[0], proposals[0])


def decoder_layer(queries: QuerySet, features: list[np.ndarray], layer: DecoderLayer, pos_mlp: MLP) -> tuple[QuerySet, np.ndarray]:
    """Single-image decoder step; returns the refined queries and class logits."""
    content = queries.content[None]
    anchors = queries.anchors[None]
    d = content.shape[-1]
    pos, _ = pos_mlp.forward(sine_embedding(sigmoid(anchors), d))
    maps = [f[None] for f in features]
    x, new_anchors, logits, _ = layer.forward(content, anchors, pos, maps)
    return QuerySet(content=x[0], anchors=new_anchors[0]), logits[0]
