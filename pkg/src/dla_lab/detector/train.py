"""Deterministic toy training: deep-supervised set loss and AdamW."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from ..data import DatasetRecord, augment, save_checkpoint, stack_images
from ..evaluation import sap
from ..geometry import sigmoid
from .config import DetectorConfig, LossWeights
from .loss import match_and_loss
from .model import DetectorOutput, LineDetector

__all__ = ["AdamW", "TrainingDiverged", "TrainResult", "detection_loss", "train_toy", "evaluate_model", "batch_loss"]

log = logging.getLogger(__name__)


class TrainingDiverged(FloatingPointError):
    pass


class AdamW:
    """Adam with decoupled weight decay; per-group learning rates."""

    def __init__(self, groups: Sequence[tuple[list, float]], weight_decay: float, betas=(0.9, 0.999), eps: float = 1e-8):
        self.groups = [(list(params), lr) for params, lr in groups]
        self.weight_decay = weight_decay
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = {id(p): np.zeros_like(p.value) for ps, _ in self.groups for p in ps}
        self.v = {id(p): np.zeros_like(p.value) for ps, _ in self.groups for p in ps}

    def step(self, lr_scale: float = 1.0) -> None:
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for params, base_lr in self.groups:
            lr = base_lr * lr_scale
            for p in params:
                m, v = self.m[id(p)], self.v[id(p)]
                m *= self.b1
                m += (1.0 - self.b1) * p.grad
                v *= self.b2
                v += (1.0 - self.b2) * p.grad * p.grad
                if lr == 0.0:
                    continue
                if p.value.ndim > 1:
                    p.value *= 1.0 - lr * self.weight_decay
                p.value -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def detection_loss(out: DetectorOutput, truths: Sequence[np.ndarray], weights: LossWeights,
                   assignments=None, layers: Sequence[int] | None = None):
    """Deep-supervised loss averaged over images.

    Every output set (query selection plus each decoder layer) is matched and
    scored independently. Returns (loss, grad_anchors, grad_logits,
    assignments, parts) where the gradients are per output set.
    """
    n_sets = len(out.anchors)
    b = out.anchors[0].shape[0]
    use = range(n_sets) if layers is None else layers
    total = 0.0
    g_anchors = [np.zeros_like(a) for a in out.anchors]
    g_logits = [np.zeros_like(lg) for lg in out.logits]
    new_assign = {}
    parts = {"line": 0.0, "class": 0.0}
    for s in use:
        lines = sigmoid(out.anchors[s])
        for i in range(b):
            a = None if assignments is None else assignments[(s, i)]
            res, a = match_and_loss(lines[i], out.logits[s][i], truths[i], weights, a)
            new_assign[(s, i)] = a
            total += res.total / b
            parts["line"] += weights.w_line * res.line_term / b
            parts["class"] += weights.w_class * res.class_term / b
            g_anchors[s][i] = res.grad_lines * lines[i] * (1.0 - lines[i]) / b
            g_logits[s][i] = res.grad_logits / b
    return total, g_anchors, g_logits, new_assign, parts


def batch_loss(model: LineDetector, records: Sequence[DatasetRecord], backward: bool = True):
    images = stack_images(records)
    out, cache = model.forward(images)
    if not all(np.isfinite(a).all() for a in out.anchors + out.logits):
        # matching is undefined on NaN costs; let the caller report the batch
        return float("nan"), {}
    loss, ga, gl, _, parts = detection_loss(out, [r.lines for r in records], model.cfg.loss)
    if backward:
        model.backward(ga, gl, cache)
    return loss, parts


def evaluate_model(model: LineDetector, records: Sequence[DatasetRecord], theta: float = 10.0,
                   batch_size: int = 32) -> dict:
    """Validation loss and sAP at ``theta`` on un-augmented records."""
    preds, losses = [], []
    for s in range(0, len(records), batch_size):
        chunk = records[s : s + batch_size]
        out, _ = model.forward(stack_images(chunk))
        loss, *_ = detection_loss(out, [r.lines for r in chunk], model.cfg.loss)
        losses.append(loss * len(chunk))
        lines, scores = out.final()
        preds.extend(zip(lines, scores))
    return {"loss": float(np.sum(losses) / len(records)),
            f"sap{theta:g}": sap(preds, [r.lines for r in records], theta)}


@dataclass
class TrainResult:
    model: LineDetector
    log: list[dict] = field(default_factory=list)

    @property
    def initial_loss(self) -> float:
        return self.log[0]["train_loss"]

    @property
    def final_loss(self) -> float:
        return self.log[-1]["train_loss"]


def _dump_batch(path: Path | None, epoch: int, step: int, records: Sequence[DatasetRecord], loss: float) -> str:
    info = {"epoch": epoch, "step": step, "loss": repr(loss), "record_ids": [r.id for r in records],
            "lines": [r.lines.tolist() for r in records]}
    if path is not None:
        path.mkdir(parents=True, exist_ok=True)
        (path / "diverged_batch.json").write_text(json.dumps(info, indent=1) + "\n")
    return json.dumps(info)


def train_toy(train: Sequence[DatasetRecord], val: Sequence[DatasetRecord], config: DetectorConfig, seed: int = 0,
              epochs: int | None = None, out_dir=None, image_size: tuple[int, int] | None = None,
              progress=None) -> TrainResult:
    """Train a LineDetector; deterministic given ``seed``.

    The log holds an epoch-0 entry (untrained model, train loss measured
    without augmentation) followed by one entry per epoch with the mean
    training loss over that epoch and validation loss / sAP^10.
    """
    epochs = config.epochs if epochs is None else epochs
    image_size = image_size or tuple(train[0].image.shape[-2:])
    model = LineDetector(config, image_size, seed=seed)
    backbone_ids = {id(p) for p in model.backbone_parameters()}
    rest = [p for p in model.parameters() if id(p) not in backbone_ids]
    opt = AdamW([(model.backbone_parameters(), config.backbone_lr), (rest, config.lr)], config.weight_decay)
    out_path = Path(out_dir) if out_dir is not None else None

    init_train = evaluate_model(model, train)
    init_val = evaluate_model(model, val)
    result = TrainResult(model)
    result.log.append({"epoch": 0, "train_loss": init_train["loss"], "val_loss": init_val["loss"],
                       "val_sap10": init_val["sap10"]})
    if progress:
        progress(result.log[-1])

    bs = config.batch_size
    steps_per_epoch = (len(train) + bs - 1) // bs
    total_steps = epochs * steps_per_epoch
    step = 0
    for epoch in range(1, epochs + 1):
        order = np.random.Generator(np.random.Philox(key=[seed, epoch])).permutation(len(train))
        aug_rng = np.random.Generator(np.random.Philox(key=[seed, 2**32 + epoch]))
        running = []
        for s in range(steps_per_epoch):
            batch = [train[i] for i in order[s * bs : (s + 1) * bs]]
            if config.augment:
                batch = [augment(r, aug_rng) for r in batch]
            model.zero_grad()
            loss, _ = batch_loss(model, batch)
            if not np.isfinite(loss):
                dump = _dump_batch(out_path, epoch, s, batch, loss)
                raise TrainingDiverged(f"non-finite loss at epoch {epoch} step {s}: {dump}")
            _clip_grads(model, config.grad_clip)
            # cosine decay after a short warmup
            warm = min(1.0, (step + 1) / max(1, steps_per_epoch))
            cos = 0.5 * (1.0 + np.cos(np.pi * step / max(1, total_steps)))
            opt.step(lr_scale=warm * (0.05 + 0.95 * cos))
            step += 1
            running.append(loss)
        ev = evaluate_model(model, val)
        result.log.append({"epoch": epoch, "train_loss": float(np.mean(running)), "val_loss": ev["loss"],
                           "val_sap10": ev["sap10"]})
        if progress:
            progress(result.log[-1])
    if out_path is not None:
        out_path.mkdir(parents=True, exist_ok=True)
        save_checkpoint(out_path / "model.ckpt", model.named_parameters(), config.name, config.to_dict(),
                        extra={"image_size": list(image_size), "seed": seed, "epochs": epochs})
        with (out_path / "metrics.jsonl").open("w") as fh:
            for row in result.log:
                fh.write(json.dumps(row, sort_keys=True) + "\n")
    return result


def _clip_grads(model: LineDetector, max_norm: float) -> float:
    params = model.parameters()
    norm = float(np.sqrt(sum(float((p.grad * p.grad).sum()) for p in params)))
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for p in params:
            p.grad *= scale
    return norm
