"""Acceptance gate: one test per criterion, each reporting a PASS/FAIL line.

The summary lines are printed at the end of the pytest run (see conftest).
"""

import json
import time

import numpy as np

from dla_lab import cli
from dla_lab import encoder as enc
from dla_lab import layers
from dla_lab.data import gen_synthetic
from dla_lab.detector import get_preset
from dla_lab.detector.train import train_toy
from dla_lab.dla import DeformableLineAttention, DlaConfig, count_flops, sampling_points
from dla_lab.encoder import BRANCH_SHAPES, GelanFusion, gelan_flops
from dla_lab.evaluation import sap
from dla_lab.verify import CheckReport, GROUP_TOLERANCE, fuse_verify, gradcheck_dla, random_dla_config
from test_evaluation import oracle_sap, random_instance


def _cross(u, v):
    return u[..., 0] * v[..., 1] - u[..., 1] * v[..., 0]


def _random_layer(rng, cfg, chans, scale=0.5):
    layer = DeformableLineAttention(cfg, chans, rng)
    for _, p in layer.named_parameters():
        p.value[...] = rng.normal(0, scale, size=p.value.shape)
    return layer


def test_gradient_fidelity(verdict):
    start = time.perf_counter()
    report = gradcheck_dla(seed=0, n_configs=20, step=1e-6, report=CheckReport(GROUP_TOLERANCE))
    elapsed = time.perf_counter() - start
    cases = {r.case for r in report.rows}
    groups = {r.group.split(".")[0] for r in report.rows}
    # every parameter group of the operator is exercised
    needed = {"query", "ep1", "ep2", "features", "alpha_head", "attn_head", "value_proj", "out_proj"}
    ok = report.passed and len(cases) >= 20 and needed <= groups and elapsed < 120
    verdict("gradient fidelity", ok,
            f"{len(cases)} configs, max rel err {report.max_error:.2e} (< 1e-4), {elapsed:.1f}s (< 120s)")
    assert ok


def test_collinearity(verdict):
    start = time.perf_counter()
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(10):
        cfg = random_dla_config(rng, max_heads=8, max_points=4, max_d=64)
        layer = _random_layer(rng, cfg, [4] * cfg.n_levels, scale=1.0)
        q = rng.normal(size=(1, 100, cfg.d_model))
        ep1, ep2 = rng.uniform(0, 1, size=(2, 1, 100, 2))
        feats = [rng.normal(size=(1, 4, 5, 5)) for _ in range(cfg.n_levels)]
        _, cache = layer.forward(q, ep1, ep2, feats)
        mid = ((ep1 + ep2) / 2)[:, :, None, None]
        delta = (ep1 - ep2)[:, :, None, None]
        worst = max(worst, float(np.abs(_cross(cache["points"] - mid, delta)).max()))
    elapsed = time.perf_counter() - start
    ok = worst < 1e-9 and elapsed < 5.0
    verdict("collinearity", ok, f"1000 queries, max |cross| {worst:.1e} (< 1e-9), {elapsed:.2f}s (< 5s)")
    assert ok


def test_attention_normalization(verdict):
    rng = np.random.default_rng(1)
    worst = 0.0
    for scale in (0.1, 1.0, 30.0, 1e3):
        for _ in range(5):
            cfg = random_dla_config(rng, max_heads=8)
            layer = _random_layer(rng, cfg, [3] * cfg.n_levels, scale=scale)
            q = rng.normal(size=(2, 7, cfg.d_model))
            ep1, ep2 = rng.uniform(0, 1, size=(2, 2, 7, 2))
            feats = [rng.normal(size=(2, 3, 4, 4)) for _ in range(cfg.n_levels)]
            _, cache = layer.forward(q, ep1, ep2, feats)
            w = cache["weights"]
            assert w.shape[-2:] == (cfg.n_heads, cfg.total_points)
            worst = max(worst, float(np.abs(w.sum(axis=-1) - 1.0).max()))
    ok = worst <= 1e-12
    verdict("attention normalization", ok, f"max |sum - 1| {worst:.1e} (<= 1e-12)")
    assert ok


def test_fusion_equivalence(verdict):
    start = time.perf_counter()
    report = fuse_verify(seed=0, draws=100)
    elapsed = time.perf_counter() - start
    ok = report.passed and len(report.rows) == 100 and elapsed < 30
    verdict("fusion equivalence", ok, f"100 draws, max |train - deploy| {report.max_error:.1e} (< 1e-10), "
                                      f"{elapsed:.1f}s (< 30s)")
    assert ok


def test_endpoint_anchoring(verdict):
    rng = np.random.default_rng(2)
    ep1, ep2 = rng.uniform(-1, 2, size=(2, 1000, 2))
    eps = np.finfo(float).eps
    worst = 0.0
    for a, target in ((0.5, ep1), (-0.5, ep2), (0.0, (ep1 + ep2) / 2)):
        pts = sampling_points((ep1, ep2), np.full((1000, 1, 1), a))[:, 0, 0]
        # a few units in the last place, relative to the coordinate magnitudes
        ulps = np.abs(pts - target) / (eps * np.maximum(np.abs(ep1) + np.abs(ep2), 1.0))
        worst = max(worst, float(ulps.max()))
    ok = worst <= 2.0
    verdict("endpoint anchoring", ok, f"1000 segments, worst error {worst:.2f} ulp (<= 2)")
    assert ok


def test_sap_oracle(verdict):
    rng = np.random.default_rng(3)
    mismatches, non_monotone = 0, 0
    for _ in range(200):
        preds, truths = random_instance(rng, n_images=1)
        values = []
        for theta in (5.0, 10.0, 15.0):
            v = sap(preds, truths, theta)
            mismatches += v != oracle_sap(preds, truths, theta)
            values.append(v)
        non_monotone += values != sorted(values)
    ok = mismatches == 0 and non_monotone == 0
    verdict("sAP oracle equivalence", ok, f"200 instances, {mismatches} oracle mismatches, "
                                          f"{non_monotone} non-monotone in theta")
    assert ok


def _measured_conv_flops(monkeypatch, run):
    """FLOPs of every conv2d issued by ``run()``, from the actual kernel and output shapes."""
    total = [0]

    def wrap(fn):
        def counted(x, k, *args, **kwargs):
            y = fn(x, k, *args, **kwargs)
            total[0] += 2 * k.shape[1] * k.shape[2] * k.shape[3] * int(np.prod(y.shape[-3:])) * y.shape[0]
            return y
        return counted

    monkeypatch.setattr(enc, "conv2d", wrap(enc.conv2d))
    monkeypatch.setattr(layers, "conv2d", wrap(layers.conv2d))
    run()
    return total[0]


def test_flop_direction(verdict, monkeypatch):
    m, d, k = 8, 256, 1100
    slim = count_flops(DlaConfig(m, (4, 1, 1), d), k)
    full = count_flops(DlaConfig(m, (4, 4, 4), d), k)

    rng = np.random.default_rng(4)
    dd, hidden, depth, h, w = 6, 5, 2, 4, 4
    fusion = GelanFusion(dd, hidden, depth, rng)
    hi, lo = rng.normal(size=(1, dd, h, w)), rng.normal(size=(1, dd, h // 2, w // 2))
    deploy = _measured_conv_flops(monkeypatch, lambda: fusion.forward(hi, lo, mode="deploy"))
    train = _measured_conv_flops(monkeypatch, lambda: fusion.forward(hi, lo, mode="train"))
    names = list(BRANCH_SHAPES)
    subsets = [names[:i] for i in range(1, len(names) + 1)]
    deploy_by_branches = {len(s): gelan_flops(dd, hidden, depth, h, w, "deploy", s) for s in subsets}
    train_by_branches = {len(s): gelan_flops(dd, hidden, depth, h, w, "train", s) for s in subsets}
    ok = (slim < full
          and len(set(deploy_by_branches.values())) == 1
          and deploy == deploy_by_branches[4]
          and train == train_by_branches[4] > deploy)
    verdict("FLOP direction", ok, f"DLA (4,1,1) {slim} < (4,4,4) {full}; deploy GELAN {deploy} for 1..4 branches "
                                  f"(train {sorted(train_by_branches.values())})")
    assert ok


def test_toy_learning(verdict, tmp_path):
    start = time.perf_counter()
    records = gen_synthetic(576, (32, 32), 3, seed=0)
    result = train_toy(records[:512], records[512:], get_preset("linea-n-toy"), seed=0, out_dir=tmp_path)
    elapsed = time.perf_counter() - start
    first, last = result.log[0], result.log[-1]
    drop = 1.0 - last["train_loss"] / first["train_loss"]
    gain = last["val_sap10"] - first["val_sap10"]
    ok = drop >= 0.5 and gain >= 30.0 and elapsed < 600
    verdict("toy end-to-end learning", ok,
            f"loss {first['train_loss']:.2f} -> {last['train_loss']:.2f} ({drop:.0%} drop, need >= 50%); "
            f"val sAP10 {first['val_sap10']:.1f} -> {last['val_sap10']:.1f} (+{gain:.1f}, need >= +30); "
            f"{elapsed:.0f}s (< 600s)")
    assert ok


def _tree(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_cli_determinism(verdict, tmp_path, capsys):
    runs = {
        "gradcheck": ["gradcheck", "--configs", "3"],
        "fuse-verify": ["fuse-verify", "--draws", "10"],
        "gen-data": ["gen-data", "--n", "6", "--start", "3"],
        "train-toy": ["train-toy", "--epochs", "1", "--n-train", "8", "--n-val", "4", "--queries", "16"],
        "flops": ["flops", "--points", "4,2,1"],
    }
    differing = []
    for name, argv in runs.items():
        trees = []
        for rep in ("a", "b"):
            out = tmp_path / name / rep
            assert cli.run(argv + ["--seed", "7", "--out", str(out)]) == 0
            trees.append(_tree(out))
        if not trees[0] or trees[0] != trees[1]:
            differing.append(name)
    # artifacts that consume other artifacts
    ckpt = tmp_path / "train-toy" / "a" / "model.ckpt"
    data = tmp_path / "gen-data" / "a" / "dataset"
    trees = []
    for rep in ("a", "b"):
        out = tmp_path / "eval" / rep
        assert cli.run(["eval-sap", "--checkpoint", str(ckpt), "--data", str(data), "--out", str(out)]) == 0
        assert cli.run(["plot", "--out", str(out)]) == 0
        trees.append(_tree(out))
    if trees[0] != trees[1]:
        differing.append("eval-sap/plot")
    stdout = capsys.readouterr().out
    configs = [json.loads(line[len("config: "):]) for line in stdout.splitlines() if line.startswith("config: ")]
    ok = not differing and len(configs) == 2 * len(runs) + 4
    verdict("CLI determinism", ok, f"{len(runs) + 1} artifact sets compared across repeated runs, "
                                   f"differing: {differing or 'none'}")
    assert ok
