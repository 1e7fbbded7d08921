"""Set-prediction loss: order-minimized L1 on endpoints plus focal classification."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import LossWeights
from .matching import Assignment, bipartite_match, swap_endpoints

__all__ = ["focal_loss", "LossResult", "compute_loss", "match_and_loss"]

FOCAL_GAMMA = 2.0
FOCAL_ALPHA = 0.25


def _softplus(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def focal_loss(logits: np.ndarray, labels: np.ndarray, gamma: float = FOCAL_GAMMA, alpha: float = FOCAL_ALPHA):
    """Sigmoid focal loss per element and its derivative w.r.t. the logits."""
    x = np.asarray(logits, dtype=float)
    y = np.asarray(labels, dtype=float)
    log_p = -_softplus(-x)
    log_q = -_softplus(x)
    p, q = np.exp(log_p), np.exp(log_q)
    pos = -alpha * q**gamma * log_p
    neg = -(1 - alpha) * p**gamma * log_q
    loss = y * pos + (1 - y) * neg
    d_pos = alpha * gamma * q**gamma * p * log_p - alpha * q ** (gamma + 1)
    d_neg = -(1 - alpha) * (gamma * p**gamma * q * log_q - p ** (gamma + 1))
    grad = y * d_pos + (1 - y) * d_neg
    return loss, grad


@dataclass
class LossResult:
    total: float
    line_term: float
    class_term: float
    grad_lines: np.ndarray
    grad_logits: np.ndarray


def compute_loss(lines: np.ndarray, logits: np.ndarray, truths: np.ndarray, assignment: Assignment,
                 weights: LossWeights) -> LossResult:
    """Loss of one prediction set against one image's ground truth.

    lines (n, 4) are sigmoid-space endpoints, logits (n,) line-vs-background.
    The regression term sums L1 over matched pairs using the closer endpoint
    order of each ground-truth line.
    """
    truths = np.asarray(truths, dtype=float).reshape(-1, 4)
    grad_lines = np.zeros_like(lines)
    line_term = 0.0
    if len(assignment.pred_idx):
        pred = lines[assignment.pred_idx]
        gt = truths[assignment.gt_idx]
        flip = np.abs(pred - swap_endpoints(gt)).sum(-1) < np.abs(pred - gt).sum(-1)
        diff = pred - np.where(flip[:, None], swap_endpoints(gt), gt)
        line_term = float(np.abs(diff).sum())
        grad_lines[assignment.pred_idx] = weights.w_line * np.sign(diff)
    fl, dfl = focal_loss(logits, assignment.labels)
    class_term = float(fl.sum())
    total = weights.w_line * line_term + weights.w_class * class_term
    return LossResult(total, line_term, class_term, grad_lines, weights.w_class * dfl)


def match_and_loss(lines: np.ndarray, logits: np.ndarray, truths: np.ndarray, weights: LossWeights,
                   assignment: Assignment | None = None) -> tuple[LossResult, Assignment]:
    if assignment is None:
        assignment = bipartite_match(lines, logits, truths, weights.w_line, weights.w_class)
    return compute_loss(lines, logits, truths, assignment, weights), assignment
