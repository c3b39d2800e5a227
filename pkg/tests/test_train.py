import csv
import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from connseg import tensor as T
from connseg.checkpoint import load_weights
from connseg.codec import encode, hflip_cube
from connseg.data import SyntheticSpec, synth_sample
from connseg.grid import Pattern, shift
from connseg.model import PredictorConfig
from connseg.tensor import Tensor
from connseg.train import (
    AdamState,
    DivergenceError,
    TrainRun,
    adam_step,
    augment,
    bce_loss,
    center_crop,
    exponential_lr,
    hflip,
    random_crop,
    rescale,
    targets_for,
    train,
)

SMALL = dict(widths=(4, 8, 8, 8), fusion_width=8, reduce_width=8)


def test_uniform_prediction_loss_is_ln2():
    y = (np.random.default_rng(0).random((2, 8, 5, 5)) < 0.3).astype(float)
    loss = bce_loss(Tensor(np.zeros(y.shape)), y)
    assert abs(loss.item() - math.log(2)) < 1e-6


def test_confident_correct_prediction_loss_vanishes():
    loss = bce_loss(Tensor(np.full((1, 4, 2, 2), 40.0)), np.ones((1, 4, 2, 2)))
    assert 0 <= loss.item() < 1e-6


def test_loss_gradient_matches_formula_and_differences():
    rng = np.random.default_rng(1)
    z = rng.uniform(-3, 3, (1, 2, 2, 2))
    y = (rng.random(z.shape) < 0.5).astype(float)
    logits = Tensor(z.copy(), requires_grad=True)
    bce_loss(logits, y).backward()
    expected = (1 / (1 + np.exp(-z)) - y) / y.size
    np.testing.assert_allclose(logits.grad, expected, rtol=1e-12)

    eps = 1e-5
    numeric = np.empty_like(z)
    for idx in np.ndindex(z.shape):
        zp, zm = z.copy(), z.copy()
        zp[idx] += eps
        zm[idx] -= eps
        numeric[idx] = (bce_loss(Tensor(zp), y).item() - bce_loss(Tensor(zm), y).item()) / (2 * eps)
    rel = np.abs(numeric - expected) / np.maximum(np.abs(numeric), np.abs(expected))
    assert rel.max() < 1e-8


def test_loss_errors():
    with pytest.raises(ValueError):
        bce_loss(Tensor(np.zeros((1, 2, 2, 2))), np.zeros((1, 2, 2, 1)))
    with pytest.raises(ValueError):
        bce_loss(Tensor(np.zeros((1, 1, 2, 2))), np.full((1, 1, 2, 2), 0.5))


def test_double_flip_is_identity():
    rng = np.random.default_rng(2)
    image, mask = rng.random((3, 6, 7)), rng.random((6, 7)) < 0.5
    once = hflip(image, mask)
    np.testing.assert_array_equal(once[1], mask[:, ::-1])
    back = hflip(*once)
    np.testing.assert_array_equal(back[0], image)
    np.testing.assert_array_equal(back[1], mask)


def test_unit_scale_full_crop_is_identity():
    rng = np.random.default_rng(3)
    image, mask = rng.random((3, 10, 10)).astype(np.float32), rng.random((10, 10)) < 0.5
    out = center_crop(*rescale(image, mask, 1.0), 10)
    np.testing.assert_array_equal(out[0], image)
    np.testing.assert_array_equal(out[1], mask)


def test_rescale_nearest_mask():
    mask = np.zeros((4, 4), bool)
    mask[:2, :2] = True
    _, big = rescale(np.zeros((3, 4, 4)), mask, 2.0)
    expected = np.zeros((8, 8), bool)
    expected[:4, :4] = True
    np.testing.assert_array_equal(big, expected)


def test_crop_errors():
    rng = np.random.default_rng(0)
    with pytest.raises(ValueError, match="larger"):
        random_crop(np.zeros((3, 5, 5)), np.zeros((5, 5), bool), 6, rng)
    with pytest.raises(ValueError):
        center_crop(np.zeros((3, 5, 4)), np.zeros((5, 4), bool), 5)


class _ForcedFlip:
    """Generator stand-in: flips always, scale 1, crop at the origin."""

    def random(self):
        return 0.0

    def uniform(self, lo, hi):
        return 1.0

    def integers(self, n):
        return 0


def test_augment_forced_flip_twice():
    rng = np.random.default_rng(4)
    image, mask = rng.random((3, 8, 8)).astype(np.float32), rng.random((8, 8)) < 0.5
    once = augment(image, mask, _ForcedFlip(), 8)
    twice = augment(*once, _ForcedFlip(), 8)
    np.testing.assert_array_equal(twice[0], image)
    np.testing.assert_array_equal(twice[1], mask)


def test_augment_shapes_and_determinism():
    image, mask, _ = synth_sample(SyntheticSpec(size=48), 0)
    a = [augment(image, mask, np.random.default_rng(9), 40) for _ in range(2)]
    np.testing.assert_array_equal(a[0][0], a[1][0])
    np.testing.assert_array_equal(a[0][1], a[1][1])
    for seed in range(20):
        im, m = augment(image, mask, np.random.default_rng(seed), 40)
        assert im.shape == (3, 40, 40) and m.shape == (40, 40) and m.dtype == bool


@settings(max_examples=60, deadline=None)
@given(st.sampled_from(list(Pattern)), st.integers(1, 12), st.integers(1, 12), st.integers(0, 2**31 - 1))
def test_encode_commutes_with_flip(pattern, h, w, seed):
    m = np.random.default_rng(seed).random((h, w)) < 0.5
    assert encode(m[:, ::-1], pattern) == hflip_cube(encode(m, pattern))


@pytest.mark.parametrize("pattern", ["n4", "n8", "n12"])
def test_training_targets_are_symmetric(pattern):
    cfg = PredictorConfig(pattern=pattern)
    p = cfg.pattern_kind
    rng = np.random.default_rng(5)
    image, mask, _ = synth_sample(SyntheticSpec(size=32), 1)
    ims, ms = zip(*(augment(image, mask, rng, 32) for _ in range(4)))
    y = targets_for(ms, cfg)
    assert y.shape == (4, p.channels, 32, 32)
    for cube in y:
        for c, (dr, dc) in enumerate(p.offsets):
            other = shift(cube[p.opposite[c]], dr, dc, 0)
            np.testing.assert_array_equal(cube[c], cube[c] * other)
            np.testing.assert_array_equal(cube[c] * shift(np.ones_like(cube[c]), dr, dc, 0), cube[c])


def test_segmentation_targets_are_masks():
    m = np.eye(4, dtype=bool)
    y = targets_for([m], PredictorConfig(head="segmentation"))
    np.testing.assert_array_equal(y, m[None, None].astype(np.float32))


def test_adam_zero_gradient_keeps_weights():
    w = [np.array([1.0, -2.0]), np.ones((2, 2))]
    before = [a.copy() for a in w]
    state = AdamState.zeros_like(w)
    for _ in range(5):
        adam_step(w, [np.zeros(2), np.zeros((2, 2))], state, lr=0.1)
    for a, b in zip(w, before):
        np.testing.assert_array_equal(a, b)


def test_adam_first_and_second_step_by_hand():
    lr, b1, b2, eps = 0.01, 0.9, 0.999, 1e-8
    g1, g2 = 0.3, -0.1
    w = [np.array([2.0])]
    state = AdamState.zeros_like(w)
    adam_step(w, [np.array([g1])], state, lr)
    # first step: m_hat = g, v_hat = g^2
    assert w[0][0] == pytest.approx(2.0 - lr * g1 / (abs(g1) + eps), rel=1e-15)
    adam_step(w, [np.array([g2])], state, lr)
    m = b1 * (1 - b1) * g1 + (1 - b1) * g2
    v = b2 * (1 - b2) * g1 ** 2 + (1 - b2) * g2 ** 2
    step2 = lr * (m / (1 - b1 ** 2)) / (math.sqrt(v / (1 - b2 ** 2)) + eps)
    assert w[0][0] == pytest.approx(2.0 - lr * g1 / (abs(g1) + eps) - step2, rel=1e-14)
    assert state.t == 2


def test_adam_errors_and_frozen_entries():
    w = [np.zeros(2), np.zeros(3)]
    state = AdamState.zeros_like(w)
    with pytest.raises(DivergenceError):
        adam_step(w, [np.array([np.nan, 0.0]), np.zeros(3)], state, 0.1)
    with pytest.raises(ValueError):
        adam_step(w, [np.zeros(3), np.zeros(3)], state, 0.1)
    adam_step(w, [np.ones(2), np.ones(3)], state, 0.1, active=[False, True])
    assert not w[0].any() and not state.m[0].any()
    assert (w[1] < 0).all()


def test_exponential_schedule_endpoints():
    assert exponential_lr(0, 100) == pytest.approx(1e-3)
    assert exponential_lr(99, 100) == pytest.approx(1e-5)
    assert exponential_lr(50, 101) == pytest.approx(1e-4)
    lrs = [exponential_lr(s, 10) for s in range(10)]
    assert all(a > b for a, b in zip(lrs, lrs[1:]))


def test_train_run_config():
    run = TrainRun.from_dict({"epochs": 3, "model": {"head": "segmentation"}})
    assert run.model.head == "segmentation"
    assert TrainRun.from_dict(run.to_dict()) == run
    assert run.total_steps(20) == 3 * 3
    with pytest.raises(ValueError):
        TrainRun.from_dict({"epoch": 3})
    with pytest.raises(ValueError):
        TrainRun(scale_range=(1.2, 0.8))


def _one_image(size=32, seed=1):
    image, mask, _ = synth_sample(SyntheticSpec(size=size, seed=seed), 0)
    return [image], [mask]


@pytest.mark.parametrize("head,limit", [("connectivity", 0.01), ("segmentation", 0.05)])
def test_overfits_single_image(head, limit):
    images, masks = _one_image()
    run = TrainRun(model=PredictorConfig(head=head), epochs=500, batch_size=1, augment=False,
                   lr_decay="constant")
    result = train(images, masks, run)
    assert len(result.losses) == 500
    assert all(math.isfinite(v) for v in result.losses)
    assert min(result.losses) < limit


def test_train_outputs_and_determinism(tmp_path):
    spec = SyntheticSpec(size=32, seed=3)
    data = [synth_sample(spec, i) for i in range(6)]
    images, masks = [d[0] for d in data], [d[1] for d in data]
    run = TrainRun(model=PredictorConfig(**SMALL), epochs=2, batch_size=2, train_size=32,
                   log_every=1, val_every=2, seed=5)
    a = train(images[:4], masks[:4], run, tmp_path / "a", images[4:], masks[4:])
    b = train(images[:4], masks[:4], run, tmp_path / "b", images[4:], masks[4:])
    for k, v in a.model.state_dict().items():
        np.testing.assert_array_equal(v, b.model.state_dict()[k])
    assert (tmp_path / "a" / "best.cnw1").read_bytes() == (tmp_path / "b" / "best.cnw1").read_bytes()

    rows = list(csv.reader(open(tmp_path / "a" / "metrics.csv")))
    assert rows[0] == ["step", "loss", "val_maxF"]
    assert [int(r[0]) for r in rows[1:]] == [1, 2, 3, 4]
    assert rows[2][2] and rows[4][2] and not rows[1][2]
    assert json.loads((tmp_path / "a" / "config.json").read_text())["seed"] == 5
    best = load_weights(tmp_path / "a" / "best.cnw1")
    for k, v in a.best_weights.items():
        np.testing.assert_array_equal(best[k], v)
    assert a.best_val_maxF == max(v for _, v in a.val_history)


def test_freeze_backbone_steps():
    images, masks = _one_image(16)
    run = TrainRun(model=PredictorConfig(**SMALL), epochs=3, batch_size=1, train_size=16,
                   freeze_backbone_steps=3)
    from connseg.model import init_params
    start = init_params(run.model, seed=run.seed)
    after = train(images, masks, run).model.state_dict()
    for k, v in start.items():
        if k.startswith("backbone."):
            np.testing.assert_array_equal(after[k], v)
    assert not np.array_equal(after["head.r1.out.weight"], start["head.r1.out.weight"])


def test_divergence_aborts():
    images, masks = _one_image(16)
    images[0] = images[0].copy()
    images[0][0, 0, 0] = np.nan
    run = TrainRun(model=PredictorConfig(**SMALL), epochs=2, batch_size=1, train_size=16, augment=False)
    with pytest.raises(DivergenceError, match="step 0"):
        train(images, masks, run)
