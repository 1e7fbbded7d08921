"""Gradient and fusion verification suites used by the ``gradcheck`` and ``fuse-verify`` commands.

Each analytic gradient is compared with a central finite difference of the
same scalar objective. The error of a parameter group is norm-wise:
``max|analytic - numeric| / max(max|analytic|, max|numeric|)``.
"""

from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .dla import DeformableLineAttention, DlaConfig
from .encoder import GelanFusion, RepBlock
from .layers import Module
from .numerics import finite_difference_gradient

__all__ = [
    "GROUP_TOLERANCE",
    "FUSE_TOLERANCE",
    "GroupError",
    "CheckReport",
    "relative_error",
    "random_dla_config",
    "gradcheck_dla",
    "gradcheck_detector",
    "fuse_verify",
]

GROUP_TOLERANCE = 1e-4
FUSE_TOLERANCE = 1e-10


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 0.0) -> float:
    """Norm-wise relative error; ``floor`` bounds the denominator from below."""
    a = np.asarray(analytic, dtype=float).ravel()
    n = np.asarray(numeric, dtype=float).ravel()
    scale = max(np.abs(a).max(initial=0.0), np.abs(n).max(initial=0.0), floor)
    if scale == 0.0:
        return 0.0
    return float(np.abs(a - n).max() / scale)


@dataclass
class GroupError:
    suite: str
    case: int
    group: str
    error: float


@dataclass
class CheckReport:
    tolerance: float
    rows: list[GroupError] = field(default_factory=list)

    @property
    def max_error(self) -> float:
        return max((r.error for r in self.rows), default=0.0)

    @property
    def passed(self) -> bool:
        return all(r.error < self.tolerance for r in self.rows)

    def per_group(self) -> dict[str, float]:
        """Worst error of every (suite, group) over all cases."""
        out: dict[str, float] = {}
        for r in self.rows:
            key = f"{r.suite}:{r.group}"
            out[key] = max(out.get(key, 0.0), r.error)
        return out

    def to_dict(self) -> dict:
        return {"tolerance": self.tolerance, "passed": self.passed, "max_error": self.max_error,
                "per_group": self.per_group(),
                "cases": [vars(r) for r in self.rows]}


def _randomize(module: Module, rng: np.random.Generator, scale: float = 0.3) -> None:
    for _, p in module.named_parameters():
        p.value[...] = rng.normal(0.0, scale, size=p.value.shape)


def _probe(size: int, limit: int | None, rng: np.random.Generator):
    if limit is None or size <= limit:
        return None
    return np.sort(rng.choice(size, limit, replace=False))


def _compare(analytic: np.ndarray, numeric: np.ndarray, probe, floor: float) -> float:
    if probe is None:
        return relative_error(analytic, numeric, floor)
    return relative_error(analytic.ravel()[probe], numeric.ravel()[probe], floor)


def random_dla_config(rng: np.random.Generator, max_heads: int = 4, max_levels: int = 3, max_points: int = 4,
                      max_d: int = 32) -> DlaConfig:
    heads = [m for m in (1, 2, 4) if m <= max_heads]
    m = int(rng.choice(heads))
    hd = int(rng.integers(1, max_d // m + 1))
    n_levels = int(rng.integers(1, max_levels + 1))
    ppl = tuple(int(v) for v in rng.integers(1, max_points + 1, size=n_levels))
    return DlaConfig(n_heads=m, points_per_level=ppl, d_model=m * hd)


def _dla_case(seed: int, case: int, step: float) -> list[GroupError]:
    rng = np.random.default_rng([seed, case])
    cfg = random_dla_config(rng)
    chans = [int(c) for c in rng.integers(1, 5, size=cfg.n_levels)]
    layer = DeformableLineAttention(cfg, chans, rng)
    _randomize(layer, rng)
    b, q = 1, int(rng.integers(1, 3))
    query = rng.normal(size=(b, q, cfg.d_model))
    ep1 = rng.uniform(0.05, 0.95, size=(b, q, 2))
    ep2 = rng.uniform(0.05, 0.95, size=(b, q, 2))
    feats = [rng.normal(size=(b, c, int(rng.integers(2, 7)), int(rng.integers(2, 7)))) for c in chans]
    upstream = rng.normal(size=(b, q, cfg.d_model))

    def objective() -> float:
        out, _ = layer.forward(query, ep1, ep2, feats)
        return float((out * upstream).sum())

    layer.zero_grad()
    _, cache = layer.forward(query, ep1, ep2, feats)
    gq, gep1, gep2, gfeat = layer.backward(upstream, cache)
    inputs = [("query", query, gq), ("ep1", ep1, gep1), ("ep2", ep2, gep2)]
    inputs += [(f"features.{i}", f, gfeat[i]) for i, f in enumerate(feats)]
    inputs += [(name, p.value, p.grad.copy()) for name, p in layer.named_parameters()]
    rows = []
    for name, arr, analytic in inputs:
        numeric = _fd_inplace(objective, arr, step)
        rows.append(GroupError("dla", case, name, relative_error(analytic, numeric)))
    return rows


def gradcheck_dla(seed: int = 0, n_configs: int = 20, step: float = 1e-6, jobs: int = 1,
                  report: CheckReport | None = None) -> CheckReport:
    """All DLA gradient groups on ``n_configs`` random configurations.

    Groups: query, ep1, ep2, every feature map and every layer parameter.
    Case ``i`` draws from a generator keyed by (seed, i), so results do not
    depend on ``jobs``.
    """
    report = report or CheckReport(GROUP_TOLERANCE)
    cases = range(n_configs)
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_dla_case, [seed] * n_configs, cases, [step] * n_configs))
    else:
        results = [_dla_case(seed, c, step) for c in cases]
    for rows in results:
        report.rows.extend(rows)
    return report


def _fd_inplace(objective, arr: np.ndarray, step: float, indices=None) -> np.ndarray:
    """Finite differences of ``objective()`` w.r.t. entries of ``arr``, mutated in place."""

    def fn(x):
        saved = arr.copy()
        arr[...] = x
        try:
            return objective()
        finally:
            arr[...] = saved

    return finite_difference_gradient(fn, arr.copy(), step, indices)


def gradcheck_detector(seed: int = 0, step: float = 1e-6, probes_per_param: int = 6, floor: float = 1e-3,
                       report: CheckReport | None = None) -> CheckReport:
    """End-to-end detector gradients with the query selection and matching held fixed.

    A tiny detector is built on 16x16 images; for every parameter tensor a
    few random entries are probed. Anchors are not detached between layers
    here, since a stop-gradient is invisible to finite differences. The loss
    is O(10), so central differences resolve gradients only to about 1e-8;
    ``floor`` keeps groups whose true gradient is zero (for example key
    biases under softmax shift invariance) from dividing noise by noise.
    The loss is only piecewise smooth, so a group that fails at ``step`` is
    re-probed at ``step / 10`` and the better agreement is kept.
    """
    from .detector.config import DetectorConfig
    from .detector.model import LineDetector
    from .detector.train import detection_loss

    report = report or CheckReport(GROUP_TOLERANCE)
    rng = np.random.default_rng(seed)
    cfg = DetectorConfig(name="gradcheck", d_model=16, ffn_dim=24, gelan_hidden=6, gelan_depth=1, decoder_layers=2,
                         num_queries=6, points_per_level=(2, 1, 1), dla_heads=2, self_attn_heads=2, encoder_heads=2,
                         backbone_channels=(4, 6, 8, 8), detach_anchors=False)
    model = LineDetector(cfg, (16, 16), seed=seed)
    for name, p in model.named_parameters():
        # zero biases over a dead receptive field put pre-activations exactly on the relu kink
        if name.endswith("bias") and not p.value.any():
            p.value[...] = rng.normal(0.0, 0.1, size=p.value.shape)
    images = rng.uniform(0.0, 1.0, size=(2, 1, 16, 16))
    truths = [rng.uniform(0.1, 0.9, size=(int(n), 4)) for n in rng.integers(1, 4, size=2)]
    out, cache = model.forward(images)
    indices = out.indices
    _, ga, gl, assignments, _ = detection_loss(out, truths, cfg.loss)

    def objective() -> float:
        o, _ = model.forward(images, indices=indices)
        return detection_loss(o, truths, cfg.loss, assignments=assignments)[0]

    model.zero_grad()
    model.backward(ga, gl, cache)
    for name, p in model.named_parameters():
        probe = _probe(p.value.size, probes_per_param, rng)
        numeric = _fd_inplace(objective, p.value, step, probe)
        err = _compare(p.grad, numeric, probe, floor)
        if err >= report.tolerance:
            # a relu or bilinear kink within `step` of the point spoils the central difference;
            # a wrong analytic gradient still disagrees at the smaller step
            numeric = _fd_inplace(objective, p.value, step / 10, probe)
            err = min(err, _compare(p.grad, numeric, probe, floor))
        report.rows.append(GroupError("detector", 0, name, err))
    return report


def fuse_verify(seed: int = 0, draws: int = 100) -> CheckReport:
    """Train-mode (parallel branches) vs deploy-mode (one fused 3x3) outputs.

    Half of the draws exercise a single RepBlock, the other half a full
    fusion block of stacked RepBlocks.
    """
    report = CheckReport(FUSE_TOLERANCE)
    rng = np.random.default_rng(seed)
    for case in range(draws):
        h, w = (int(v) for v in rng.integers(1, 9, size=2))
        if case % 2 == 0:
            c = int(rng.integers(1, 7))
            block = RepBlock(c, rng, scale=1.0)
            _randomize(block, rng, 1.0)
            x = rng.normal(size=(int(rng.integers(1, 3)), c, h, w))
            y_train, _ = block.forward(x, mode="train")
            y_deploy, _ = block.forward(x, mode="deploy")
            group = "repblock"
        else:
            d, hidden, depth = int(rng.integers(1, 7)), int(rng.integers(1, 7)), int(rng.integers(1, 4))
            fusion = GelanFusion(d, hidden, depth, rng)
            _randomize(fusion, rng, 1.0)
            hi = rng.normal(size=(1, d, 2 * h, 2 * w))
            lo = rng.normal(size=(1, d, h, w))
            y_train, _ = fusion.forward(hi, lo, mode="train")
            y_deploy, _ = fusion.forward(hi, lo, mode="deploy")
            group = "gelan"
        report.rows.append(GroupError("fuse", case, group, float(np.abs(y_deploy - y_train).max())))
    return report
