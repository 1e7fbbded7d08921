"""One-to-one assignment of predicted lines to ground truth."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment

from ..geometry import sigmoid

__all__ = ["Assignment", "swap_endpoints", "line_l1_distances", "match_cost", "bipartite_match"]


def swap_endpoints(lines: np.ndarray) -> np.ndarray:
    return np.concatenate([lines[..., 2:4], lines[..., 0:2]], axis=-1)


def line_l1_distances(pred: np.ndarray, gt: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Order-minimized L1 distance between (n, 4) and (m, 4) endpoint arrays.

    Returns (distances (n, m), swapped (n, m) bool: True where the reversed
    ground-truth ordering is the closer one).
    """
    direct = np.abs(pred[:, None, :] - gt[None, :, :]).sum(-1)
    flipped = np.abs(pred[:, None, :] - swap_endpoints(gt)[None, :, :]).sum(-1)
    swapped = flipped < direct
    return np.where(swapped, flipped, direct), swapped


def match_cost(lines: np.ndarray, scores: np.ndarray, gt: np.ndarray, w_line: float, w_class: float) -> np.ndarray:
    dist, _ = line_l1_distances(lines, gt)
    return w_line * dist - w_class * scores[:, None]


@dataclass
class Assignment:
    """pred_idx[i] is matched to gt_idx[i]; every other prediction is background."""

    pred_idx: np.ndarray
    gt_idx: np.ndarray
    swapped: np.ndarray
    num_preds: int

    @property
    def labels(self) -> np.ndarray:
        lab = np.zeros(self.num_preds)
        lab[self.pred_idx] = 1.0
        return lab

    def as_dict(self) -> dict[int, int]:
        return {int(p): int(g) for p, g in zip(self.pred_idx, self.gt_idx)}


def bipartite_match(lines: np.ndarray, logits_or_scores: np.ndarray, gt: np.ndarray,
                    w_line: float = 5.0, w_class: float = 1.0, scores_are_logits: bool = True) -> Assignment:
    """Minimum-cost assignment (Hungarian) of ``lines`` (n, 4) to ``gt`` (m, 4).

    Cost is ``w_line * min_order_L1 - w_class * score``; the endpoint order of
    each ground-truth line is free.
    """
    lines = np.asarray(lines, dtype=float).reshape(-1, 4)
    gt = np.asarray(gt, dtype=float).reshape(-1, 4)
    n = lines.shape[0]
    empty = np.zeros(0, dtype=np.int64)
    if gt.shape[0] == 0 or n == 0:
        return Assignment(empty, empty, np.zeros(0, dtype=bool), n)
    scores = sigmoid(logits_or_scores) if scores_are_logits else np.asarray(logits_or_scores, dtype=float)
    cost = match_cost(lines, scores, gt, w_line, w_class)
    rows, cols = linear_sum_assignment(cost)
    _, swapped = line_l1_distances(lines[rows], gt[cols])
    return Assignment(rows.astype(np.int64), cols.astype(np.int64), swapped[np.arange(len(rows)), np.arange(len(rows))], n)
