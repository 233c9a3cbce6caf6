import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tpskg.suppression import build_mask, build_masks, locate_peaks, suppressed_step
from tpskg.tensor import Tape, count_macs
from tpskg.vit import ModelConfig, forward, init_encoder_params


@pytest.fixture
def setup():
    cfg = ModelConfig(image_h=8, image_w=8, channels=1, patch=2, embed_dim=8, layers=2, heads=2, classes=3, seed=2)
    params = init_encoder_params(cfg, dtype=np.float64)
    images = np.random.default_rng(0).normal(size=(3, 8, 8, 1))
    return cfg, params, images


def test_mask_example():
    assert build_mask([0.1, 0.9, 0.2]).tolist() == [1, 1, 0, 1]


def test_ties_go_to_lowest_index():
    assert build_mask([0.5, 0.5, 0.1]).tolist() == [1, 0, 1, 1]


def test_top_k():
    assert build_mask([0.3, 0.9, 0.2, 0.8], top_k=2).tolist() == [1, 1, 0, 1, 0]


def test_invalid_inputs():
    with pytest.raises(ValueError):
        build_mask([])
    with pytest.raises(ValueError):
        build_mask([0.1, 0.2], top_k=3)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(0, 1, allow_nan=False), min_size=1, max_size=40))
def test_mask_matches_linear_scan(values):
    best = 0
    for i, v in enumerate(values):
        if v > values[best]:
            best = i
    bits = build_mask(values)
    assert bits[0] == 1
    assert bits.sum() == len(values)
    assert bits[best + 1] == 0


def test_batch_masks_are_boolean():
    m = build_masks(np.array([[0.1, 0.9], [0.7, 0.2]]))
    assert m.dtype == bool
    assert m.tolist() == [[True, True, False], [True, False, True]]


def test_inference_mode_is_plain_forward(setup):
    cfg, params, images = setup
    y, masks, _ = suppressed_step(images, params, cfg, training=False)
    y_ref, _ = forward(images, params, cfg)
    np.testing.assert_array_equal(y.data, y_ref.data)
    assert masks.all()


def test_training_masks_exactly_one_patch(setup):
    cfg, params, images = setup
    _, masks, maps = suppressed_step(images, params, cfg)
    assert (~masks).sum(axis=1).tolist() == [1, 1, 1]
    assert masks[:, 0].all()
    np.testing.assert_array_equal(np.argmin(masks[:, 1:], axis=1), np.argmax(maps, axis=1))


def test_training_costs_two_inference_passes(setup):
    cfg, params, images = setup
    with count_macs() as inf:
        suppressed_step(images, params, cfg, training=False)
    with count_macs() as tr:
        suppressed_step(images, params, cfg, training=True)
    assert tr.macs == 2 * inf.macs


def test_first_pass_contributes_no_gradient(setup):
    cfg, params, images = setup

    def grads(run):
        for t in params.values():
            t.grad = None
        with Tape() as tape:
            y = run()
            tape.backward((y * y).sum())
        return {k: t.grad.copy() for k, t in params.items()}

    masks, _ = locate_peaks(images, params, cfg)
    two_pass = grads(lambda: suppressed_step(images, params, cfg)[0])
    one_pass = grads(lambda: forward(images, params, cfg, mask=masks)[0])
    for k in params:
        assert two_pass[k].tobytes() == one_pass[k].tobytes(), k
