import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dla_lab.detector import DetectorConfig
from dla_lab.evaluation import (
    bench_latency,
    evaluate,
    latency_stats,
    pr_curve,
    read_pr_csv,
    sap,
    tp_flags,
    write_pr_csv,
    write_pr_svg,
)
from dla_lab.numerics import DomainError


def oracle_sap(predictions, truths, theta):
    """Greedy score-order matching and envelope AP, spelled out with plain loops."""
    items = []
    for img, (lines, scores) in enumerate(predictions):
        for j in range(len(scores)):
            items.append((-float(scores[j]), img, j))
    items.sort()
    n_gt = sum(len(t) for t in truths)
    taken = [[False] * len(t) for t in truths]
    flags = []
    for _, img, j in items:
        p = [float(v) * 128.0 for v in predictions[img][0][j]]
        best, best_d = None, math.inf
        for k, g in enumerate(truths[img]):
            if taken[img][k]:
                continue
            g = [float(v) * 128.0 for v in g]
            direct = ((p[0] - g[0]) ** 2 + (p[1] - g[1]) ** 2) + ((p[2] - g[2]) ** 2 + (p[3] - g[3]) ** 2)
            flipped = ((p[0] - g[2]) ** 2 + (p[1] - g[3]) ** 2) + ((p[2] - g[0]) ** 2 + (p[3] - g[1]) ** 2)
            d = min(direct, flipped)
            if d < best_d:
                best, best_d = k, d
        hit = best is not None and best_d <= theta
        if hit:
            taken[img][best] = True
        flags.append(hit)
    if n_gt == 0 or not flags:
        return 0.0
    recall, precision, count = [], [], 0
    for i, f in enumerate(flags):
        count += f
        recall.append(count / n_gt)
        precision.append(count / (i + 1))
    rec = [0.0] + recall + [1.0]
    prec = [0.0] + precision + [0.0]
    for i in range(len(prec) - 2, -1, -1):
        prec[i] = max(prec[i], prec[i + 1])
    steps = [(rec[i + 1] - rec[i]) * prec[i + 1] for i in range(len(rec) - 1) if rec[i + 1] != rec[i]]
    return float(np.sum(steps) * 100.0)


def random_instance(rng, n_images=None):
    n_images = n_images or int(rng.integers(1, 4))
    preds, truths = [], []
    for _ in range(n_images):
        m = int(rng.integers(0, 6))
        n = int(rng.integers(0, 11))
        gt = rng.uniform(0, 1, size=(m, 4))
        lines = rng.uniform(0, 1, size=(n, 4))
        for i in range(n):
            if m and rng.random() < 0.7:
                # near a ground-truth line: a few pixels of noise in the 128 frame
                src = gt[rng.integers(m)]
                if rng.random() < 0.5:
                    src = src[[2, 3, 0, 1]]
                lines[i] = src + rng.normal(0, rng.choice([0.5, 1.5, 3.0]) / 128, size=4)
        scores = rng.choice([0.1, 0.3, 0.5, 0.7, 0.9], size=n) if rng.random() < 0.5 else rng.uniform(size=n)
        preds.append((lines, scores))
        truths.append(gt)
    return preds, truths


class TestSap:
    def test_oracle_on_random_instances(self):
        rng = np.random.default_rng(0)
        for _ in range(200):
            preds, truths = random_instance(rng)
            for theta in (5.0, 10.0, 15.0):
                assert sap(preds, truths, theta) == oracle_sap(preds, truths, theta)

    @settings(max_examples=200, deadline=None)
    @given(st.integers(0, 2**31))
    def test_monotone_in_threshold(self, seed):
        preds, truths = random_instance(np.random.default_rng(seed))
        values = [sap(preds, truths, t) for t in (5.0, 10.0, 15.0, 40.0)]
        assert values == sorted(values)

    def test_perfect_predictions(self):
        rng = np.random.default_rng(1)
        truths = [rng.uniform(size=(3, 4)), rng.uniform(size=(2, 4))]
        preds = [(t.copy(), rng.uniform(size=len(t))) for t in truths]
        assert sap(preds, truths, 5.0) == 100.0

    def test_no_predictions(self):
        truths = [np.random.default_rng(2).uniform(size=(2, 4))]
        assert sap([(np.zeros((0, 4)), np.zeros(0))], truths, 10.0) == 0.0

    @pytest.mark.parametrize("theta", [5.0, 10.0, 15.0])
    def test_threshold_boundary(self, theta):
        gt = [np.array([[0.0, 0.0, 1.0, 1.0]])]
        eps = 1e-6
        for offset, expected in [(theta + eps, 0.0), (theta - eps, 100.0)]:
            pred = gt[0].copy()
            pred[0, 0] = math.sqrt(offset) / 128
            assert sap([(pred, np.ones(1))], gt, theta) == expected

    @settings(max_examples=60, deadline=None)
    @given(st.integers(0, 2**31))
    def test_endpoint_order_invariance(self, seed):
        rng = np.random.default_rng(seed)
        preds, truths = random_instance(rng)
        base = sap(preds, truths, 10.0)
        preds2 = [(li[:, [2, 3, 0, 1]], sc) for li, sc in preds]
        truths2 = [t[:, [2, 3, 0, 1]] for t in truths]
        assert sap(preds2, truths2, 10.0) == base

    @settings(max_examples=60, deadline=None)
    @given(st.integers(0, 2**31))
    def test_rank_statistic(self, seed):
        rng = np.random.default_rng(seed)
        preds, truths = random_instance(rng)
        base = sap(preds, truths, 10.0)
        moved = [(li, np.exp(3 * sc) - 7.0) for li, sc in preds]
        assert sap(moved, truths, 10.0) == base

    def test_bad_threshold(self):
        with pytest.raises(DomainError):
            sap([(np.zeros((1, 4)), np.ones(1))], [np.zeros((1, 4))], 0.0)

    def test_non_finite_score(self):
        with pytest.raises(DomainError):
            sap([(np.zeros((1, 4)), np.array([np.nan]))], [np.zeros((1, 4))], 5.0)

    def test_result_range(self):
        rng = np.random.default_rng(3)
        for _ in range(50):
            preds, truths = random_instance(rng)
            res = evaluate(preds, truths)
            assert all(0.0 <= v <= 100.0 for v in res.sap.values())
            for pts in res.pr_points.values():
                r = [p[0] for p in pts]
                assert r == sorted(r)


class TestPrCurve:
    def test_perfect(self):
        truths = [np.random.default_rng(4).uniform(size=(4, 4))]
        curve = pr_curve([(truths[0], np.linspace(0.2, 0.8, 4))], truths, 5.0)
        assert [p for _, p in curve] == [1.0] * 4
        assert [r for r, _ in curve] == [0.25, 0.5, 0.75, 1.0]

    def test_all_wrong(self):
        truths = [np.array([[0.1, 0.1, 0.2, 0.2]])]
        preds = [(np.array([[0.8, 0.8, 0.9, 0.9]] * 3), np.array([0.9, 0.5, 0.1]))]
        assert all(p == 0.0 for _, p in pr_curve(preds, truths, 15.0))

    def test_hand_enumerated_prefixes(self):
        g1, g2 = [0.1, 0.1, 0.5, 0.1], [0.2, 0.6, 0.2, 0.9]
        truths = [np.array([g1, g2])]
        # scores 0.9, 0.6, 0.3: hit g1, miss, hit g2
        preds = [(np.array([g1, [0.9, 0.9, 0.95, 0.95], g2]), np.array([0.9, 0.6, 0.3]))]
        assert pr_curve(preds, truths, 10.0) == [(0.5, 1.0), (0.5, 0.5), (1.0, 2 / 3)]
        assert tp_flags(preds, truths, 10.0)[0].tolist() == [True, False, True]

    def test_duplicate_only_counts_once(self):
        g = np.array([[0.1, 0.1, 0.5, 0.5]])
        preds = [(np.vstack([g, g]), np.array([0.9, 0.8]))]
        assert pr_curve(preds, [g], 5.0) == [(1.0, 1.0), (1.0, 0.5)]

    def test_csv_round_trip(self, tmp_path):
        pts = [(0.5, 1.0), (0.5, 0.5), (1.0, 2 / 3)]
        path = write_pr_csv(tmp_path / "pr.csv", pts)
        assert path.read_text().splitlines()[0] == "recall,precision"
        np.testing.assert_allclose(read_pr_csv(path), pts, rtol=1e-9)

    def test_svg(self, tmp_path):
        text = write_pr_svg(tmp_path / "pr.svg", [(0.0, 1.0), (1.0, 0.5)], title="theta 10").read_text()
        assert text.startswith("<svg") and "polyline" in text and "theta 10" in text


class TestLatency:
    cfg = DetectorConfig(name="bench", d_model=16, ffn_dim=24, gelan_hidden=6, gelan_depth=1, decoder_layers=1,
                         num_queries=8, points_per_level=(2, 1, 1), dla_heads=2, self_attn_heads=2, encoder_heads=2,
                         backbone_channels=(4, 6, 8, 8))

    def test_single_rep(self):
        stats = bench_latency(self.cfg, (16, 16), warmup=0, reps=1)
        for s in stats.values():
            assert s["mean"] == s["p50"] == s["p95"]

    def test_ordering(self):
        stats = bench_latency(self.cfg, (16, 16), warmup=1, reps=5)
        for s in stats.values():
            assert s["mean"] >= 0 and s["p95"] >= s["p50"]

    def test_more_decoder_layers_cost_more(self):
        one = bench_latency(self.cfg, (16, 16), warmup=1, reps=7)["decoder"]["p50"]
        four = bench_latency(self.cfg.replace(decoder_layers=4), (16, 16), warmup=1, reps=7)["decoder"]["p50"]
        assert four > one

    def test_stats_helper(self):
        assert latency_stats([1.0, 2.0, 3.0]) == {"mean": 2.0, "p50": 2.0, "p95": pytest.approx(2.9)}
        with pytest.raises(ValueError):
            latency_stats([])

    def test_reps_must_be_positive(self):
        with pytest.raises(ValueError):
            bench_latency(self.cfg, (16, 16), reps=0)
