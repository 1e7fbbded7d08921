"""Structural AP, precision-recall export and latency measurement.

sAP convention: endpoints are rescaled to a 128x128 frame; predictions from
all images are swept in descending score order; a prediction is a true
positive when the nearest still-unmatched ground-truth line of its image has
``min over endpoint orderings of (|p1-g1|^2 + |p2-g2|^2) <= theta``; each
ground-truth line matches at most once. AP is the area under the
monotone-envelope precision-recall curve, times 100.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .numerics import DomainError

__all__ = [
    "SAP_FRAME",
    "SAP_THRESHOLDS",
    "EvalResult",
    "structural_distances",
    "tp_flags",
    "sap",
    "pr_curve",
    "evaluate",
    "interpolated_ap",
    "write_pr_csv",
    "read_pr_csv",
    "write_pr_svg",
    "latency_stats",
    "bench_latency",
]

SAP_FRAME = 128.0
SAP_THRESHOLDS = (5.0, 10.0, 15.0)


@dataclass
class EvalResult:
    sap: dict[float, float]
    pr_points: dict[float, list[tuple[float, float]]] = field(repr=False)

    def to_dict(self) -> dict:
        return {"sap": {f"{k:g}": v for k, v in self.sap.items()},
                "pr_points": {f"{k:g}": [list(p) for p in v] for k, v in self.pr_points.items()}}


def structural_distances(pred: np.ndarray, gt: np.ndarray) -> np.ndarray:
    """(n, m) squared endpoint distance, minimized over the two orderings; 128-frame units."""
    p = np.asarray(pred, dtype=float).reshape(-1, 2, 2) * SAP_FRAME
    g = np.asarray(gt, dtype=float).reshape(-1, 2, 2) * SAP_FRAME
    direct = ((p[:, None, 0] - g[None, :, 0]) ** 2).sum(-1) + ((p[:, None, 1] - g[None, :, 1]) ** 2).sum(-1)
    flipped = ((p[:, None, 0] - g[None, :, 1]) ** 2).sum(-1) + ((p[:, None, 1] - g[None, :, 0]) ** 2).sum(-1)
    return np.minimum(direct, flipped)


def _unpack(predictions):
    lines, scores = [], []
    for item in predictions:
        li, sc = item
        li = np.asarray(li, dtype=float).reshape(-1, 4)
        sc = np.asarray(sc, dtype=float).reshape(-1)
        if li.shape[0] != sc.shape[0]:
            raise ValueError(f"{li.shape[0]} lines but {sc.shape[0]} scores")
        if not np.all(np.isfinite(sc)):
            raise DomainError("prediction scores must be finite")
        lines.append(li)
        scores.append(sc)
    return lines, scores


def tp_flags(predictions, truths, theta: float) -> tuple[np.ndarray, int]:
    """True-positive flag per prediction in sweep order, and the ground-truth count."""
    if not theta > 0:
        raise DomainError(f"threshold must be positive, got {theta}")
    lines, scores = _unpack(predictions)
    gts = [np.asarray(t, dtype=float).reshape(-1, 4) for t in truths]
    if len(gts) != len(lines):
        raise ValueError(f"{len(lines)} prediction sets for {len(gts)} images")
    n_gt = sum(g.shape[0] for g in gts)
    if not lines:
        return np.zeros(0, dtype=bool), n_gt
    all_scores = np.concatenate(scores)
    img_of = np.concatenate([np.full(len(s), i) for i, s in enumerate(scores)]).astype(np.int64)
    local = np.concatenate([np.arange(len(s)) for s in scores]).astype(np.int64)
    # stable sort keeps (image, index) order among tied scores
    order = np.argsort(-all_scores, kind="stable")
    dists = [structural_distances(li, g) if g.shape[0] else np.zeros((li.shape[0], 0)) for li, g in zip(lines, gts)]
    taken = [np.zeros(g.shape[0], dtype=bool) for g in gts]
    tp = np.zeros(order.size, dtype=bool)
    for rank, j in enumerate(order):
        img = img_of[j]
        row = np.where(taken[img], np.inf, dists[img][local[j]])
        if row.size == 0:
            continue
        best = int(np.argmin(row))
        if row[best] <= theta:
            taken[img][best] = True
            tp[rank] = True
    return tp, n_gt


def interpolated_ap(tp: np.ndarray, n_gt: int) -> float:
    if n_gt == 0 or tp.size == 0:
        return 0.0
    ctp = np.cumsum(tp)
    recall = ctp / n_gt
    precision = ctp / np.arange(1, tp.size + 1)
    rec = np.concatenate([[0.0], recall, [1.0]])
    prec = np.concatenate([[0.0], precision, [0.0]])
    prec = np.maximum.accumulate(prec[::-1])[::-1]
    i = np.nonzero(rec[1:] != rec[:-1])[0]
    return float(np.sum((rec[i + 1] - rec[i]) * prec[i + 1]) * 100.0)


def sap(predictions, truths, theta: float) -> float:
    """Structural AP in [0, 100].

    predictions: per image a pair (lines (n, 4), scores (n,)) in normalized
    coordinates; truths: per image an (m, 4) array.
    """
    tp, n_gt = tp_flags(predictions, truths, theta)
    return interpolated_ap(tp, n_gt)


def pr_curve(predictions, truths, theta: float) -> list[tuple[float, float]]:
    """(recall, precision) after each prefix of the score-sorted sweep."""
    tp, n_gt = tp_flags(predictions, truths, theta)
    if tp.size == 0:
        return []
    ctp = np.cumsum(tp)
    recall = ctp / n_gt if n_gt else np.zeros(tp.size)
    precision = ctp / np.arange(1, tp.size + 1)
    return [(float(r), float(p)) for r, p in zip(recall, precision)]


def evaluate(predictions, truths, thresholds: Sequence[float] = SAP_THRESHOLDS) -> EvalResult:
    aps, curves = {}, {}
    for th in thresholds:
        tp, n_gt = tp_flags(predictions, truths, th)
        aps[float(th)] = interpolated_ap(tp, n_gt)
        ctp = np.cumsum(tp)
        rec = ctp / n_gt if n_gt else np.zeros(tp.size)
        prec = ctp / np.arange(1, tp.size + 1) if tp.size else np.zeros(0)
        curves[float(th)] = [(float(r), float(p)) for r, p in zip(rec, prec)]
    return EvalResult(aps, curves)


# ---------------------------------------------------------------------------
# export
# ---------------------------------------------------------------------------


def write_pr_csv(path, points: Sequence[tuple[float, float]]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["recall", "precision"])
        for r, p in points:
            w.writerow([f"{r:.9g}", f"{p:.9g}"])
    return path


def read_pr_csv(path) -> list[tuple[float, float]]:
    with Path(path).open(newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0] != ["recall", "precision"]:
        raise ValueError(f"{path}: expected a recall,precision header")
    return [(float(r), float(p)) for r, p in rows[1:]]


def write_pr_svg(path, points: Sequence[tuple[float, float]], title: str = "", size: int = 320) -> Path:
    """Minimal static precision-recall plot."""
    pad = 40
    inner = size - 2 * pad

    def xy(r, p):
        return pad + r * inner, size - pad - p * inner

    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" viewBox="0 0 {size} {size}">',
             f'<rect x="0" y="0" width="{size}" height="{size}" fill="white"/>',
             f'<rect x="{pad}" y="{pad}" width="{inner}" height="{inner}" fill="none" stroke="black"/>']
    for t in (0.0, 0.5, 1.0):
        x, _ = xy(t, 0)
        _, y = xy(0, t)
        parts.append(f'<text x="{x:.1f}" y="{size - pad + 14}" font-size="10" text-anchor="middle">{t:g}</text>')
        parts.append(f'<text x="{pad - 6}" y="{y + 3:.1f}" font-size="10" text-anchor="end">{t:g}</text>')
    parts.append(f'<text x="{size / 2}" y="{size - 8}" font-size="11" text-anchor="middle">recall</text>')
    parts.append(f'<text x="12" y="{size / 2}" font-size="11" text-anchor="middle" '
                 f'transform="rotate(-90 12 {size / 2})">precision</text>')
    if title:
        parts.append(f'<text x="{size / 2}" y="20" font-size="12" text-anchor="middle">{title}</text>')
    if points:
        coords = " ".join("{:.2f},{:.2f}".format(*xy(r, p)) for r, p in points)
        parts.append(f'<polyline points="{coords}" fill="none" stroke="#1f5fbf" stroke-width="1.5"/>')
    parts.append("</svg>")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("\n".join(parts) + "\n")
    return path


# ---------------------------------------------------------------------------
# latency
# ---------------------------------------------------------------------------


def latency_stats(samples_ms: Sequence[float]) -> dict[str, float]:
    a = np.asarray(samples_ms, dtype=float)
    if a.size == 0:
        raise ValueError("no latency samples")
    return {"mean": float(a.mean()), "p50": float(np.percentile(a, 50)), "p95": float(np.percentile(a, 95))}


def bench_latency(model_config, input_size: tuple[int, int], warmup: int = 2, reps: int = 10, seed: int = 0,
                  batch: int = 1, deploy: bool = True) -> dict:
    """Wall-clock forward latency in ms (total and per stage) of a freshly built detector."""
    from .detector.model import LineDetector

    if reps < 1:
        raise ValueError(f"reps must be >= 1, got {reps}")
    model = LineDetector(model_config, input_size, seed=seed)
    if deploy:
        model.deploy()
    rng = np.random.default_rng(seed)
    images = rng.uniform(0.0, 1.0, size=(batch, model_config.image_channels, *input_size))
    samples = {"total": [], "backbone": [], "encoder": [], "decoder": []}
    for i in range(warmup + reps):
        stages = {}
        t0 = time.perf_counter()
        model.forward(images, timings=stages)
        total = time.perf_counter() - t0
        if i >= warmup:
            samples["total"].append(total * 1e3)
            for k in ("backbone", "encoder", "decoder"):
                samples[k].append(stages[k] * 1e3)
    return {k: latency_stats(v) for k, v in samples.items()}
