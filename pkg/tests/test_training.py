import csv
import io
import re

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bcdnet import codec, training
from bcdnet import tensor as T
from bcdnet.codec import CodecConfig, CodecModel
from bcdnet.metrics import l1_distortion
from bcdnet.tensor import Tensor
from bcdnet.training import Adam, LossWeights, OptimizerState, TrainSchedule

TINY = CodecConfig(branches=3, code_channels=2, channels=(4, 4, 4, 4))


def _patches(seed, n=2, size=16):
    return np.random.default_rng(seed).integers(0, 256, (n, size, size, 3), dtype=np.uint8)


def _boundary_recurrent(name: str, n: int) -> bool:
    """Hidden kernels that only ever see the zero boundary state."""
    return bool(re.fullmatch(rf"(encoder|decoder)\.\d+\.gates\.(0\.forward|{n - 1}\.backward)\.wh", name))


def test_single_level_loss_is_plain_distortion():
    cfg = TINY.replace(branches=1)
    model = CodecModel.init(cfg, seed=0)
    p = _patches(0)
    loss, per_level = training.scalable_loss(p, model, binarizer="deterministic")
    codes = codec.code_tensors(p, model, "deterministic")
    est = codec.reconstruct_levels(codes, model)[0]
    expected = l1_distortion(est, training.image_tensor(p)).item()
    assert loss.item() == pytest.approx(expected, abs=1e-6)
    assert per_level == [pytest.approx(expected, abs=1e-6)]


def test_two_level_loss_is_weighted_sum():
    cfg = TINY.replace(branches=2)
    model = CodecModel.init(cfg, seed=1)
    p = _patches(1)
    weights = LossWeights((0.3, 0.7))
    loss, _ = training.scalable_loss(p, model, weights, binarizer="deterministic")
    parts = []
    for level in (1, 2):
        d = []
        for i in range(len(p)):
            rec = codec.decode(codec.encode(p[i], model), model, level).raw
            d.append(np.abs(rec - p[i] / 255.0).mean())
        parts.append(np.mean(d))
    assert loss.item() == pytest.approx(0.3 * parts[0] + 0.7 * parts[1], abs=1e-6)


def test_perfect_reconstruction_has_zero_loss():
    x = Tensor(np.random.default_rng(2).random((1, 3, 16, 16)))
    assert training.distortion("l1", x, x).item() == 0.0
    assert training.distortion("ms_ssim", x, x).item() == pytest.approx(0.0, abs=1e-12)
    with pytest.raises(ValueError):
        training.distortion("l2", x, x)


@settings(max_examples=15)
@given(seed=st.integers(0, 10_000), kind=st.sampled_from(["l1", "ms_ssim"]))
def test_loss_is_non_negative(seed, kind):
    model = CodecModel.init(TINY, seed=seed % 7)
    patch = _patches(seed, n=1, size=32 if kind == "ms_ssim" else 16)
    loss, per_level = training.scalable_loss(patch, model, kind=kind, binarizer="deterministic")
    assert loss.item() >= 0 and all(d >= 0 for d in per_level)


def test_loss_weights_validation():
    with pytest.raises(ValueError):
        LossWeights((0.5, -0.1))
    with pytest.raises(ValueError):
        training.scalable_loss(_patches(0), CodecModel.init(TINY), LossWeights((1.0,)))
    assert LossWeights.uniform(4).beta == (0.25,) * 4


def test_adam_first_step_by_hand():
    p = Tensor(np.array([1.0, -2.0, 0.5]))
    g = np.array([0.2, -0.4, 0.0])
    state = OptimizerState(lr=0.1)
    training.adam_step([p], [g], state)
    # bias-corrected moments equal g and g**2 after one step
    expected = np.array([1.0, -2.0, 0.5]) - 0.1 * g / (np.abs(g) + 1e-8)
    np.testing.assert_allclose(p.data, expected, rtol=1e-12)
    assert state.step == 1


def test_adam_zero_gradient_leaves_parameters():
    p = Tensor(np.array([1.0, 2.0]))
    state = OptimizerState(lr=0.1)
    for _ in range(3):
        training.adam_step([p], [np.zeros(2)], state)
    np.testing.assert_array_equal(p.data, [1.0, 2.0])
    with pytest.raises(T.ShapeError):
        training.adam_step([p], [np.zeros(3)], state)


def test_adam_minimises_quadratic():
    w = Tensor(np.array([0.0]), requires_grad=True)
    opt = Adam([w], lr=0.1)
    for _ in range(100):
        opt.zero_grad()
        T.backward(T.tsum(T.square(w - 3.0)))
        opt.step()
    assert abs(w.data[0] - 3.0) < 0.5


def test_weight_decay_shrinks_parameters():
    p = Tensor(np.array([2.0]))
    training.adam_step([p], [np.zeros(1)], OptimizerState(lr=0.1, weight_decay=0.5))
    assert p.data[0] == pytest.approx(2.0 - 0.1 * 0.5 * 2.0)


def test_training_is_deterministic_for_a_seed():
    p = _patches(3, n=3)
    sched = TrainSchedule(steps=4, lr=1e-3, batch_size=2, seed=11)
    m1, log1 = training.train_toy(p, TINY, sched)
    m2, log2 = training.train_toy(p, TINY, sched)
    assert log1.to_csv() == log2.to_csv()
    assert codec.model_to_bytes(m1) == codec.model_to_bytes(m2)
    _, log3 = training.train_toy(p, TINY, TrainSchedule(steps=4, lr=1e-3, batch_size=2, seed=12))
    assert log3.to_csv() != log1.to_csv()


def test_empty_or_misshapen_dataset_rejected():
    with pytest.raises(ValueError):
        training.train_toy(np.zeros((0, 16, 16, 3), np.uint8), TINY, TrainSchedule(steps=1))
    with pytest.raises(ValueError):
        training.train_toy(np.zeros((1, 12, 16, 3), np.uint8), TINY, TrainSchedule(steps=1))


def test_first_level_only_weights_cut_gradients_of_later_branches():
    model = CodecModel.init(TINY, seed=4)
    loss, _ = training.scalable_loss(_patches(4), model, LossWeights((1.0, 0.0, 0.0)), binarizer="deterministic")
    T.backward(loss)
    grads = {n: p.grad for n, p in model.named_parameters()}
    last = TINY.num_layers - 1
    later_only = [n for n in grads if re.fullmatch(rf"(exit|quantizer)\.[12]\..*|entry\.[12]\.w|decoder\.{last}\.branches\.[12]\..*", n)]
    assert later_only
    for name in later_only:
        assert grads[name] is None or not grads[name].any(), name
    assert grads["exit.0.w"].any() and grads["quantizer.0.w"].any()


def test_every_parameter_receives_gradient():
    model = CodecModel.init(TINY, seed=5)
    loss, _ = training.scalable_loss(_patches(5), model, binarizer="deterministic")
    T.backward(loss)
    dead = [n for n, p in model.named_parameters() if p.grad is None or not p.grad.any()]
    assert all(_boundary_recurrent(n, TINY.branches) for n in dead), dead
    assert len(dead) == 2 * 2 * TINY.num_layers


def test_encoder_receives_gradient_through_binarizer():
    model = CodecModel.init(TINY, seed=6)
    rng = np.random.default_rng(0)
    loss, _ = training.scalable_loss(_patches(6), model, binarizer="stochastic", rng=rng)
    T.backward(loss)
    for name, p in model.named_parameters():
        if name.startswith(("first.", "quantizer.")) and name.endswith("w"):
            assert np.abs(p.grad).sum() > 0, name


def test_training_reduces_loss_on_one_patch():
    p = _patches(7, n=1)
    _, log = training.train_toy(p, TINY, TrainSchedule(steps=60, lr=5e-3, seed=0))
    losses = log.loss_series()
    assert losses[-5:].mean() < losses[:5].mean()


def test_log_csv_schema():
    _, log = training.train_toy(_patches(8, n=1), TINY, TrainSchedule(steps=2, seed=0))
    rows = list(csv.reader(io.StringIO(log.to_csv())))
    assert tuple(rows[0]) == training.LOG_FIELDS
    body = rows[1:]
    assert len(body) == 2 * TINY.branches
    assert [(int(r[0]), int(r[1])) for r in body] == [(s, l) for s in range(2) for l in (1, 2, 3)]
    basic = codec.basic_bitrate(TINY)
    for r in body:
        assert float(r[4]) == pytest.approx(basic * int(r[1]))
    assert TrainSchedule().steps == 2000 and training.TrainLog().to_csv().strip() == ",".join(training.LOG_FIELDS)


def test_evaluate_levels_shape_and_range():
    model = CodecModel.init(TINY, seed=9)
    d = training.evaluate_levels(_patches(9, n=2), model)
    assert d.shape == (3,) and np.all((d >= 0) & (d <= 1))
