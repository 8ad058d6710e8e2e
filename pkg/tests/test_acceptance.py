"""Acceptance gate: one test per criterion, each reporting a PASS/FAIL line."""
import math

import numpy as np
import pytest

from hcnn.bayes import GaussianCrackModel, linear_weights, posterior
from hcnn.checkpoint import dumps, loads
from hcnn.data import AugmentConfig, Sample, augment, augment_rng, expand, synth_crack
from hcnn.metrics import confusion, f_score, q_measure
from hcnn.network import NetworkConfig, SideOutputs, build_network
from hcnn.tensor import max_unpool2x2, maxpool2x2
from hcnn.training import (
    OptimizerState,
    TrainingLog,
    dataset_loss,
    grad_check_report,
    image_loss,
    jitter_biases,
    train,
)

from conftest import TINY, record
from test_metrics import brute_counts, scalar_q


def test_1_gradient_fidelity():
    net = jitter_biases(build_network(TINY, rng=0, dtype=np.float64), 0.1, rng=1)
    report = grad_check_report(net, synth_crack(0, 32, 0.05), 200, 1e-5, rng=2)
    ok = report.n_checked == 200 and report.max_error < 1e-4
    record("1 gradient fidelity", ok,
           f"max rel err {report.max_error:.2e} over {report.n_checked} params "
           f"({report.n_skipped} redrawn at kinks), tol 1e-4")
    assert ok


def test_2_topology():
    net = build_network(NetworkConfig(), rng=0)
    out, cache = net.forward(np.random.default_rng(0).random((1, 3, 32, 32)))
    n_enc = len(net.encoder_layers())
    maps = out.maps()
    mirrored = all(cache.unpool_indices[k] is cache.pool_indices[k] for k in range(1, 6))
    ok = (n_enc == 13 and net.n_pool == 5 and net.n_unpool == 5 and len(cache.pool_indices) == 5
          and mirrored and len(maps) == 6 and all(m.shape == (1, 1, 32, 32) for m in maps))
    record("2 topology", ok, f"{n_enc} encoder convs, {len(cache.pool_indices)} pool/unpool pairs, "
                             f"{len(maps)} maps at {maps[0].shape[2:]}")
    assert ok


def _naive_loss(maps, y):
    total = 0.0
    for m in maps:
        for i in range(m.shape[2]):
            for j in range(m.shape[3]):
                f, t = float(m[0, 0, i, j]), int(y[0, 0, i, j])
                p = 1.0 / (1.0 + math.exp(-f))
                total += -(t * math.log(p) + (1 - t) * math.log(1.0 - p))
    return total


def test_3_loss_identity():
    rng = np.random.default_rng(3)
    worst = 0.0
    for _ in range(50):
        out = SideOutputs(tuple(rng.normal(0, 3, (1, 1, 8, 8)) for _ in range(5)), rng.normal(0, 3, (1, 1, 8, 8)))
        y = rng.integers(0, 2, (1, 1, 8, 8))
        ref = _naive_loss(out.maps(), y)
        worst = max(worst, abs(image_loss(out, y) - ref) / ref)
    z = np.zeros((1, 1, 8, 8))
    zero = image_loss(SideOutputs((z,) * 5, z), rng.integers(0, 2, z.shape))
    ok = worst < 1e-9 and zero == 6 * 64 * math.log(2)
    record("3 loss identity", ok, f"max rel err {worst:.1e} (tol 1e-9); zero logits {zero!r} == 6*m*ln2")
    assert ok


def test_4_linearity():
    rng = np.random.default_rng(4)
    worst = 0.0
    for _ in range(1000):
        mu0, mu1 = rng.uniform(0, 255, 2)
        sigma2 = rng.uniform(100, 2500)
        prior1 = rng.uniform(0.01, 0.99)
        m = GaussianCrackModel(mu0, mu1, sigma2, 1 - prior1, prior1)
        s = math.sqrt(sigma2)
        x = np.linspace(min(mu0, mu1) - 4 * s, max(mu0, mu1) + 4 * s, 10_000)
        n1 = np.exp(-(x - mu1) ** 2 / (2 * sigma2)) / math.sqrt(2 * math.pi * sigma2)
        n0 = np.exp(-(x - mu0) ** 2 / (2 * sigma2)) / math.sqrt(2 * math.pi * sigma2)
        direct = prior1 * n1 / (prior1 * n1 + (1 - prior1) * n0)
        w, w0 = linear_weights(m)
        logistic = 1.0 / (1.0 + np.exp(-(w * x + w0)))
        worst = max(worst, np.abs(logistic - direct).max(), np.abs(posterior(x, m) - direct).max())
    ok = worst < 1e-12
    record("4 linearity", ok, f"max |sigmoid(w x + w0) - Bayes| {worst:.1e} over 1000 models x 1e4 points")
    assert ok


def test_5_overfit_convergence():
    data = [synth_crack(s, 32, 0.01) for s in range(8)]
    net = build_network(TINY, rng=0)
    initial = dataset_loss(net, data)
    records = train(net, data, epochs=150, batch_size=2, rng=0,
                    state=OptimizerState(learning_rate=4e-5, momentum=0.9, weight_decay=0.0005))
    final = dataset_loss(net, data)
    total = sum((confusion(net.predict(s.image), s.mask) for s in data[1:]),
                confusion(net.predict(data[0].image), data[0].mask))
    f = f_score(total)[2]
    ratio = final / initial
    ok = len(records) <= 600 and ratio < 0.1 and f >= 0.95
    record("5 overfit convergence", ok,
           f"{len(records)} steps, loss {initial:.0f} -> {final:.0f} (ratio {ratio:.3f}, tol 0.1), F {f:.4f} (tol 0.95)")
    assert ok


def test_6_metric_oracles():
    rng = np.random.default_rng(6)
    counts_ok = True
    for _ in range(1000):
        pred = rng.integers(0, 2, (16, 16))
        gt = rng.integers(0, 2, (16, 16))
        c = confusion(pred, gt)
        tp, fp, fn, tn = brute_counts(pred, gt)
        p = tp / (tp + fp) if tp + fp else 0.0
        r = tp / (tp + fn) if tp + fn else 0.0
        f = 2 * p * r / (p + r) if p + r else 0.0
        counts_ok &= (c.tp, c.fp, c.fn, c.tn) == (tp, fp, fn, tn) and f_score(c) == (p, r, f)
    q_worst = 0.0
    for _ in range(200):
        h, w = rng.integers(4, 17, 2)
        img = rng.integers(0, 256, (h, w)).astype(float)
        seg = rng.integers(0, 2, (h, w))
        seg[0, 0], seg[-1, -1] = 0, 1
        ref = scalar_q(img.tolist(), seg.tolist())
        q_worst = max(q_worst, abs(q_measure(img, seg) - ref) / ref)
    img = np.full((100, 100), 180.0)
    seg = np.zeros((100, 100), int)
    seg[:, :1] = 1
    img[seg == 1] = 30.0
    hand = q_measure(img, seg)
    hand_rel = abs(hand - 1.4157e-12) / 1.4157e-12
    ok = counts_ok and q_worst < 1e-12 and hand_rel < 1e-3
    record("6 metric oracles", ok, f"counts/F exact: {counts_ok}; Q max rel err {q_worst:.1e}; "
                                   f"hand value {hand:.5e} (rel {hand_rel:.1e} vs 1.4157e-12)")
    assert ok


def test_7_pool_and_augment_invariants():
    rng = np.random.default_rng(7)
    pool_ok = True
    for _ in range(10_000):
        shape = (int(rng.integers(1, 3)), int(rng.integers(1, 4)), 2 * int(rng.integers(1, 5)), 2 * int(rng.integers(1, 5)))
        x = rng.normal(size=shape)
        pooled, idx = maxpool2x2(x)
        up = max_unpool2x2(pooled, idx, x.shape)
        win = up.reshape(shape[0], shape[1], shape[2] // 2, 2, shape[3] // 2, 2)
        pool_ok &= bool((np.count_nonzero(win, axis=(3, 5)) <= 1).all()) and math.isclose(
            up.sum(), pooled.sum(), rel_tol=1e-12, abs_tol=1e-12)
    src = Sample(rng.random((1, 3, 96, 96)), (rng.random((1, 1, 96, 96)) > 0.8).astype(np.uint8))
    cfg = AugmentConfig(crop_size=(32, 32))
    binary_ok = all(set(np.unique(augment(src, cfg, augment_rng(7, 0, j)).mask).tolist()) <= {0, 1}
                    for j in range(1000))
    sources = [Sample(rng.random((1, 3, 64, 64)), (rng.random((1, 1, 64, 64)) > 0.9).astype(np.uint8))
               for _ in range(118)]
    count = sum(1 for _ in expand(sources, AugmentConfig(crop_size=(32, 32), expansion_factor=100), 7))
    ok = pool_ok and binary_ok and count == 11800
    record("7 pool/augment invariants", ok, f"unpool round trip on 1e4 tensors: {pool_ok}; "
                                            f"1e3 masks binary: {binary_ok}; 118 x 100 -> {count}")
    assert ok


def test_8_determinism(tmp_path):
    data = [synth_crack(s, 32, 0.05) for s in range(4)]
    logs = []
    for run in ("a", "b"):
        net = build_network(TINY, rng=8)
        log = TrainingLog(tmp_path / run / "train.log")
        train(net, data, epochs=3, batch_size=2, rng=9, log=log, seed=8)
        logs.append(((tmp_path / run / "train.log").read_bytes(), (tmp_path / run / "train.jsonl").read_bytes()))
    same_logs = logs[0] == logs[1] and len(logs[0][0].splitlines()) == 6
    loaded, _ = loads(dumps(net))
    x = np.random.default_rng(8).random((2, 3, 32, 32))
    a, _ = net.forward(x)
    b, _ = loaded.forward(x)
    diff = max(float(np.abs(u - v).max()) for u, v in zip(a.maps(), b.maps()))
    ok = same_logs and diff == 0.0
    record("8 determinism", ok, f"identical loss logs: {same_logs}; checkpoint forward max diff {diff}")
    assert ok
