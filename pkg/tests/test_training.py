import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hcnn.data import synth_crack
from hcnn.exceptions import ShapeError
from hcnn.network import SideOutputs, build_network
from hcnn.tensor import ConvParams, conv2d, conv2d_backward, sigmoid_map
from hcnn.training import (
    DEFAULT_EPOCHS,
    DEFAULT_LR,
    DEFAULT_MOMENTUM,
    DEFAULT_WEIGHT_DECAY,
    OptimizerState,
    StepRecord,
    TrainingLog,
    flat_params,
    grad_check,
    grad_check_report,
    image_loss,
    image_loss_grad,
    jitter_biases,
    pixel_bce,
    relative_error,
    sgd_step,
    train,
)

from conftest import TINY, max_rel_error, numeric_grad


def _outputs(rng, shape=(1, 1, 8, 8), scale=3.0):
    return SideOutputs(tuple(rng.normal(scale=scale, size=shape) for _ in range(5)),
                       rng.normal(scale=scale, size=shape))


def _naive_bce(f, y):
    p = 1.0 / (1.0 + math.exp(-f))
    return -(y * math.log(p) + (1 - y) * math.log(1 - p))


# -- pixel loss --------------------------------------------------------------


def test_bce_at_zero_logit():
    assert pixel_bce(0.0, 0) == pytest.approx(math.log(2), abs=1e-15)
    assert pixel_bce(0.0, 1) == pytest.approx(math.log(2), abs=1e-15)


def test_bce_ln3():
    assert pixel_bce(math.log(3), 1) == pytest.approx(math.log(4 / 3), rel=1e-14)


def test_bce_saturated_logits():
    assert pixel_bce(50.0, 1) < 1e-20
    assert pixel_bce(-50.0, 1) == pytest.approx(50.0)
    assert np.isfinite(pixel_bce(np.array([1e4, -1e4]), np.array([0, 1]))).all()


@given(st.floats(-12, 12), st.integers(0, 1))
def test_bce_matches_textbook_form(f, y):
    assert pixel_bce(f, y) == pytest.approx(_naive_bce(f, y), rel=1e-9, abs=1e-12)


# -- image loss --------------------------------------------------------------


def test_image_loss_all_zero_logits():
    z = np.zeros((1, 1, 8, 8))
    y = np.random.default_rng(0).integers(0, 2, z.shape)
    m = 64
    assert image_loss(SideOutputs((z,) * 5, z), y) == pytest.approx(6 * m * math.log(2), rel=1e-15)


def test_image_loss_saturated_is_tiny(rng):
    y = rng.integers(0, 2, (1, 1, 8, 8))
    f = np.where(y == 1, 50.0, -50.0)
    assert image_loss(SideOutputs((f,) * 5, f), y) < 1e-10 * 64


def test_image_loss_matches_scalar_oracle(rng):
    out = _outputs(rng)
    y = rng.integers(0, 2, (1, 1, 8, 8))
    ref = 0.0
    for m in out.maps():
        for i in range(8):
            for j in range(8):
                ref += _naive_bce(float(m[0, 0, i, j]), int(y[0, 0, i, j]))
    assert image_loss(out, y) == pytest.approx(ref, rel=1e-9)


def test_image_loss_every_map_contributes(rng):
    out = _outputs(rng)
    y = rng.integers(0, 2, (1, 1, 8, 8))
    total = image_loss(out, y)
    assert total > 0
    for k in range(6):
        partial = sum(pixel_bce(m, y).sum() for i, m in enumerate(out.maps()) if i != k)
        assert partial < total


def test_image_loss_sums_over_batch(rng):
    out = _outputs(rng, (3, 1, 8, 8))
    y = rng.integers(0, 2, (3, 1, 8, 8))
    parts = [image_loss(SideOutputs(tuple(m[i:i + 1] for m in out.side), out.fused[i:i + 1]), y[i:i + 1])
             for i in range(3)]
    assert image_loss(out, y) == pytest.approx(sum(parts), rel=1e-12)


def test_image_loss_shape_and_label_errors(rng):
    out = _outputs(rng)
    with pytest.raises(ShapeError):
        image_loss(out, np.zeros((1, 1, 4, 4)))
    with pytest.raises(ValueError):
        image_loss(out, np.full((1, 1, 8, 8), 0.5))


def test_fused_gradient_is_p_minus_y(rng):
    out = _outputs(rng)
    y = rng.integers(0, 2, (1, 1, 8, 8))
    side, fused = image_loss_grad(out, y)
    np.testing.assert_array_equal(fused, sigmoid_map(out.fused) - y)
    for g, m in zip(side, out.side):
        np.testing.assert_array_equal(g, sigmoid_map(m) - y)


def test_loss_gradient_finite_differences(rng):
    out = _outputs(rng, (1, 1, 3, 3), scale=1.0)
    y = rng.integers(0, 2, (1, 1, 3, 3))
    _, fused = image_loss_grad(out, y)
    num = numeric_grad(lambda: image_loss(out, y), out.fused)
    assert max_rel_error(fused, num) < 1e-6


def test_single_conv_sigmoid_bce_grad_check(rng):
    x = rng.normal(size=(1, 1, 4, 4))
    p = ConvParams(rng.normal(size=(1, 1, 3, 3)), rng.normal(size=1))
    y = rng.integers(0, 2, (1, 1, 4, 4))
    loss = lambda: float(pixel_bce(conv2d(x, p), y).sum())
    f = conv2d(x, p)
    _, gw, gb = conv2d_backward(x, p, sigmoid_map(f) - y)
    assert max_rel_error(gw, numeric_grad(loss, p.weight)) < 1e-6
    assert max_rel_error(gb, numeric_grad(loss, p.bias)) < 1e-6


# -- optimiser ---------------------------------------------------------------


def test_defaults():
    s = OptimizerState()
    assert (s.learning_rate, s.momentum, s.weight_decay) == (1e-5, 0.9, 0.0005)
    assert (DEFAULT_LR, DEFAULT_MOMENTUM, DEFAULT_WEIGHT_DECAY, DEFAULT_EPOCHS) == (1e-5, 0.9, 0.0005, 20)


def test_sgd_vanilla(rng):
    w = rng.normal(size=(3, 2))
    g = rng.normal(size=(3, 2))
    out = sgd_step({"w": w}, {"w": g}, OptimizerState(0.1, 0.0, 0.0))
    np.testing.assert_allclose(out["w"], w - 0.1 * g, rtol=1e-15)


def test_sgd_momentum_hand_iteration():
    state = OptimizerState(0.1, 0.9, 0.0)
    p = {"w": np.array([1.0])}
    g = {"w": np.array([1.0])}
    p = sgd_step(p, g, state)
    assert state.velocity["w"][0] == pytest.approx(1.0)
    assert p["w"][0] == pytest.approx(0.9)
    p = sgd_step(p, g, state)
    assert state.velocity["w"][0] == pytest.approx(1.9)
    assert p["w"][0] == pytest.approx(0.71)


def test_sgd_decay_only():
    out = sgd_step({"w": np.array([1.0])}, {"w": np.array([0.0])}, OptimizerState())
    assert out["w"][0] == pytest.approx(1 - 5e-9, abs=1e-16)


def test_sgd_zero_lr_is_bit_exact(rng):
    w = rng.normal(size=(4, 3, 3, 3)).astype(np.float32)
    out = sgd_step({"w": w}, {"w": rng.normal(size=w.shape)}, OptimizerState(0.0))
    assert out["w"].dtype == np.float32
    np.testing.assert_array_equal(out["w"], w)


def test_sgd_velocity_mirrors_shape(rng):
    state = OptimizerState()
    params = {"a": rng.normal(size=(2, 3)), "b": rng.normal(size=5)}
    sgd_step(params, {k: np.ones_like(v) for k, v in params.items()}, state)
    assert {k: v.shape for k, v in state.velocity.items()} == {"a": (2, 3), "b": (5,)}


def test_sgd_shape_mismatch():
    with pytest.raises(ShapeError):
        sgd_step({"w": np.zeros(3)}, {"w": np.zeros(4)}, OptimizerState())


# -- training loop -----------------------------------------------------------


@pytest.fixture(scope="module")
def dataset():
    return [synth_crack(s, 32, 0.05) for s in range(3)]


def test_zero_epochs_changes_nothing(dataset):
    net = build_network(TINY, rng=0)
    before = {k: v.copy() for k, v in flat_params(net).items()}
    assert train(net, dataset, epochs=0) == []
    for k, v in flat_params(net).items():
        np.testing.assert_array_equal(v, before[k])


def test_same_seed_same_losses(dataset):
    runs = []
    for _ in range(2):
        net = build_network(TINY, rng=5)
        runs.append([r.loss for r in train(net, dataset, epochs=2, batch_size=2, rng=11)])
    assert runs[0] == runs[1]
    assert len(runs[0]) == 4


def test_log_and_checkpoints(dataset, tmp_path):
    net = build_network(TINY, rng=0)
    log = TrainingLog(tmp_path / "train.log")
    log.header(lr=1e-5)
    records = train(net, dataset, epochs=2, rng=0, checkpoint_dir=tmp_path / "ck", log=log, seed=0)
    lines = (tmp_path / "train.log").read_text().splitlines()
    assert lines[0] == "# lr=1e-05"
    assert lines[1:] == [r.line() for r in records]
    assert lines[1].startswith("step 1 epoch 1 loss ")
    side = [json.loads(x) for x in (tmp_path / "train.jsonl").read_text().splitlines()]
    assert side == [{"step": r.step, "epoch": r.epoch, "loss": r.loss} for r in records]
    assert sorted(p.name for p in (tmp_path / "ck").iterdir()) == ["epoch_001.hcnn", "epoch_002.hcnn"]


def test_step_record_line():
    assert StepRecord(3, 1, 0.5).line() == "step 3 epoch 1 loss 0.5"


def test_bad_sample_is_named(dataset):
    bad = list(dataset) + [(np.zeros((1, 3, 30, 32)), np.zeros((1, 1, 30, 32)))]
    with pytest.raises(ShapeError, match="sample 3"):
        train(build_network(TINY, rng=0), bad, epochs=1)


def test_empty_dataset():
    with pytest.raises(ValueError):
        train(build_network(TINY, rng=0), [], epochs=1)


# -- gradient check ----------------------------------------------------------


def test_relative_error_floor():
    assert relative_error(0.0, 0.0) == 0.0
    assert relative_error(1e-10, 3e-10) == pytest.approx(2e-10)
    assert relative_error(1.0, 1.1) == pytest.approx(0.1 / 1.1)


def test_grad_check_small_net(crack_sample):
    net = jitter_biases(build_network(TINY, rng=3, dtype=np.float64), rng=4)
    report = grad_check_report(net, crack_sample, 40, 1e-5, rng=5)
    assert report.n_checked == 40
    assert report.max_error < 1e-4
    assert grad_check(net, crack_sample, 10, rng=6) < 1e-4


def test_grad_check_does_not_modify_network(crack_sample):
    net = jitter_biases(build_network(TINY, rng=3, dtype=np.float64), rng=4)
    before = {k: v.copy() for k, v in flat_params(net).items()}
    grad_check(net, crack_sample, 5, rng=0)
    for k, v in flat_params(net).items():
        np.testing.assert_array_equal(v, before[k])


def test_jitter_biases_returns_copy():
    net = build_network(TINY, rng=0)
    j = jitter_biases(net, 0.1, rng=1)
    assert np.all(net.params["fuse"].bias == 0)
    assert np.any(j.params["enc1.conv1"].bias != 0)
    np.testing.assert_array_equal(j.params["enc1.conv1"].weight, net.params["enc1.conv1"].weight)


@settings(max_examples=30, deadline=None)
@given(st.floats(-5, 5), st.integers(0, 1))
def test_bce_nonnegative(f, y):
    assert pixel_bce(f, y) >= 0


def test_four_sample_overfit():
    data = [synth_crack(s, 32, 0.01) for s in range(4)]
    net = build_network(TINY, rng=0)
    from hcnn.training import dataset_loss

    initial = dataset_loss(net, data)
    records = train(net, data, epochs=150, batch_size=2, rng=0, state=OptimizerState(6e-5))
    assert len(records) == 300
    assert dataset_loss(net, data) < 0.1 * initial
