"""Line segments, logit-space coordinates and top-k anchor generation."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .numerics import DTYPE, ShapeError

__all__ = [
    "ConfigError",
    "LineSegment",
    "AnchorSet",
    "midpoint_delta",
    "sigmoid",
    "inverse_sigmoid",
    "get_norm_coords",
    "topk_indices",
    "generate_anchors",
]

INV_SIGMOID_EPS = 1e-5


class ConfigError(ValueError):
    """Inconsistent sizes or settings (e.g. more queries than pixels)."""


@dataclass(frozen=True)
class LineSegment:
    """Two normalized endpoints; the unordered pair is the segment's identity."""

    ep1: tuple[float, float]
    ep2: tuple[float, float]

    def __post_init__(self):
        vals = (*self.ep1, *self.ep2)
        if len(vals) != 4 or not all(np.isfinite(vals)):
            raise ValueError(f"line endpoints must be 4 finite numbers, got {vals}")

    @classmethod
    def from_array(cls, arr: Sequence[float]) -> "LineSegment":
        a = [float(v) for v in arr]
        return cls((a[0], a[1]), (a[2], a[3]))

    def as_array(self) -> np.ndarray:
        return np.array([*self.ep1, *self.ep2], dtype=DTYPE)

    def swapped(self) -> "LineSegment":
        return LineSegment(self.ep2, self.ep1)


@dataclass
class AnchorSet:
    anchors: np.ndarray  # (k, 4), logit space
    source_indices: np.ndarray  # (k,), flat pixel indices into the concatenation
    proposals: np.ndarray  # (k,), class logits of the selected pixels

    def __post_init__(self):
        k = self.anchors.shape[0]
        if self.source_indices.shape[0] != k or self.proposals.shape[0] != k:
            raise ShapeError("anchor set fields disagree on k")

    def __len__(self) -> int:
        return self.anchors.shape[0]

    def lines(self) -> np.ndarray:
        return sigmoid(self.anchors)


def midpoint_delta(line: LineSegment) -> tuple[np.ndarray, np.ndarray]:
    p1 = np.asarray(line.ep1, dtype=DTYPE)
    p2 = np.asarray(line.ep2, dtype=DTYPE)
    return (p1 + p2) / 2.0, p1 - p2


def sigmoid(x):
    x = np.asarray(x, dtype=DTYPE)
    # split by sign so large |x| never overflows exp
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def inverse_sigmoid(x, eps: float = INV_SIGMOID_EPS):
    x = np.clip(np.asarray(x, dtype=DTYPE), eps, 1.0 - eps)
    return np.log(x / (1.0 - x))


def get_norm_coords(indices, level_shapes: Sequence[tuple[int, int]]) -> np.ndarray:
    """Pixel-center coordinates ((col + 0.5) / W, (row + 0.5) / H) for flat indices.

    Levels are concatenated in list order, each flattened row-major.
    """
    idx = np.asarray(indices, dtype=np.int64).reshape(-1)
    sizes = np.array([h * w for h, w in level_shapes], dtype=np.int64)
    starts = np.concatenate([[0], np.cumsum(sizes)])
    if idx.size and (idx.min() < 0 or idx.max() >= starts[-1]):
        raise IndexError(f"pixel index out of range [0, {starts[-1]})")
    level = np.searchsorted(starts, idx, side="right") - 1
    local = idx - starts[level]
    hs = np.array([h for h, _ in level_shapes], dtype=DTYPE)[level]
    ws = np.array([w for _, w in level_shapes], dtype=np.int64)[level]
    row = local // ws
    col = local - row * ws
    return np.stack([(col + 0.5) / ws, (row + 0.5) / hs], axis=-1)


def topk_indices(scores: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k largest scores, descending; ties go to the lower index."""
    n = scores.shape[-1]
    if k > n:
        raise ConfigError(f"k={k} exceeds the {n} available pixels")
    # stable sort on the negated score keeps ties in index order
    return np.argsort(-scores, axis=-1, kind="stable")[..., :k]


def generate_anchors(
    concat_features: np.ndarray,
    k: int,
    level_shapes: Sequence[tuple[int, int]],
    prob_head,
    offset_head,
) -> AnchorSet:
    """Top-k pixel selection and anchor initialization.

    ``prob_head`` maps (N, d) -> (N, 1) logits and ``offset_head`` maps
    (k, d) -> (k, 4) logit-space offsets. Either may be a callable or an
    object with a ``forward`` returning ``(out, cache)``.
    """
    feats = np.asarray(concat_features, dtype=DTYPE)
    n = feats.shape[0]
    if n != sum(h * w for h, w in level_shapes):
        raise ShapeError(f"{n} feature rows do not match level shapes {list(level_shapes)}")
    if k > n:
        raise ConfigError(f"k={k} exceeds the {n} available pixels")
    logits = _apply(prob_head, feats).reshape(n)
    idx = topk_indices(logits, k)
    coords = inverse_sigmoid(get_norm_coords(idx, level_shapes))
    offsets = _apply(offset_head, feats[idx])
    anchors = np.tile(coords, (1, 2)) + offsets
    return AnchorSet(anchors=anchors, source_indices=idx, proposals=logits[idx])


def _apply(head, x):
    if hasattr(head, "forward"):
        return head.forward(x)[0]
    return head(x)
