import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tpskg.knowledge import (
    DEFAULT_MU,
    fuse,
    init_knowledge_params,
    kg_forward,
    knowledge_loss,
    knowledge_representation,
    respond,
    similarity,
    total_loss,
)
from tpskg.model import TPSKGModel
from tpskg.tensor import Tape, Tensor
from tpskg.training import SGD
from tpskg.vit import ModelConfig


def T(a, grad=False):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=grad)


def _softmax(v):
    e = np.exp(v - v.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def _ln(v, eps=1e-6):
    mu = v.mean(axis=-1, keepdims=True)
    return (v - mu) / np.sqrt(((v - mu) ** 2).mean(axis=-1, keepdims=True) + eps)


def _head(dim=4, classes=3, seed=0):
    return init_knowledge_params(dim, classes, np.random.default_rng(seed), np.float64)


class TestResponse:
    def test_orthonormal_saturates(self):
        k = np.eye(3, 4) * 50.0
        r = respond(T(np.eye(3, 4) * 1.0), T(k)).data
        np.testing.assert_allclose(r, np.eye(3), atol=1e-12)

    def test_identical_embeddings_give_uniform(self):
        k = np.tile(np.random.default_rng(0).normal(size=4), (5, 1))
        r = respond(T(np.random.default_rng(1).normal(size=(2, 4))), T(k)).data
        np.testing.assert_allclose(r, 0.2, atol=1e-15)

    def test_random_matches_oracle(self):
        rng = np.random.default_rng(2)
        y, k = rng.normal(size=(3, 6)), rng.normal(size=(4, 6))
        s = np.array([[sum(y[b, d] * k[g, d] for d in range(6)) for g in range(4)] for b in range(3)])
        np.testing.assert_allclose(similarity(T(y), T(k)).data, s, atol=1e-12)
        np.testing.assert_allclose(respond(T(y), T(k)).data, _softmax(s), atol=1e-9)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(1, 6), st.integers(1, 8), st.integers(0, 2**31 - 1))
    def test_simplex_and_hull(self, classes, dim, seed):
        rng = np.random.default_rng(seed)
        y, k = rng.normal(size=(2, dim)), rng.normal(size=(classes, dim))
        r = respond(T(y), T(k)).data
        assert np.all(r >= 0)
        np.testing.assert_allclose(r.sum(axis=-1), 1.0, atol=1e-12)
        delta = knowledge_representation(T(r), T(k)).data
        lo, hi = k.min(axis=0), k.max(axis=0)
        assert np.all(delta >= lo - 1e-12) and np.all(delta <= hi + 1e-12)

    def test_width_mismatch(self):
        with pytest.raises(ValueError):
            similarity(T(np.zeros((1, 3))), T(np.zeros((2, 4))))


class TestKnowledgeLoss:
    def test_uniform_is_log_g(self):
        assert knowledge_loss(T(np.zeros((2, 5))), np.array([0, 3])).item() == pytest.approx(np.log(5), abs=1e-12)

    def test_peaked_is_small(self):
        logits = np.array([[30.0, 0.0, 0.0]])
        assert knowledge_loss(T(logits), np.array([0])).item() < 1e-12

    def test_is_negative_log_response(self):
        rng = np.random.default_rng(3)
        y, k = rng.normal(size=(4, 5)), rng.normal(size=(3, 5))
        labels = np.array([0, 2, 1, 2])
        r = _softmax(y @ k.T)
        expected = -np.mean(np.log(r[np.arange(4), labels]))
        got = knowledge_loss(similarity(T(y), T(k)), labels).item()
        assert got == pytest.approx(expected, abs=1e-12)


class TestDelta:
    def test_one_hot_selects_row(self):
        k = np.random.default_rng(4).normal(size=(3, 4))
        np.testing.assert_array_equal(knowledge_representation(T([[0.0, 1.0, 0.0]]), T(k)).data[0], k[1])

    def test_uniform_is_mean(self):
        k = np.random.default_rng(5).normal(size=(4, 3))
        np.testing.assert_allclose(knowledge_representation(T(np.full((1, 4), 0.25)), T(k)).data[0], k.mean(axis=0))

    def test_loop_oracle(self):
        rng = np.random.default_rng(6)
        r, k = _softmax(rng.normal(size=(2, 3))), rng.normal(size=(3, 5))
        expected = np.array([[sum(r[b, g] * k[g, d] for g in range(3)) for d in range(5)] for b in range(2)])
        np.testing.assert_allclose(knowledge_representation(T(r), T(k)).data, expected, atol=1e-12)


class TestFuse:
    def test_zero_delta_and_zero_y(self):
        head = _head()
        rng = np.random.default_rng(7)
        y, d = rng.normal(size=(2, 4)), rng.normal(size=(2, 4))
        w, b = head["fc.weight"].data, head["fc.bias"].data
        np.testing.assert_allclose(fuse(T(y), T(np.zeros_like(y)), head).data, _ln(y) @ w + b, atol=1e-12)
        np.testing.assert_allclose(fuse(T(np.zeros_like(d)), T(d), head).data, _ln(d) @ w + b, atol=1e-12)

    def test_composed_oracle(self):
        head = _head(seed=1)
        rng = np.random.default_rng(8)
        y = rng.normal(size=(3, 4))
        k = head["knowledge"].data
        art = kg_forward(T(y), head, np.array([0, 1, 2]))
        r = _softmax(y @ k.T)
        u = _ln(y + r @ k) @ head["fc.weight"].data + head["fc.bias"].data
        np.testing.assert_allclose(art.u_logits.data, u, atol=1e-12)
        rep = -np.mean(np.log(_softmax(u)[np.arange(3), [0, 1, 2]]))
        assert art.loss_rep.item() == pytest.approx(rep, abs=1e-12)


class TestTotalLoss:
    @pytest.mark.parametrize("mu", [0.0, 1.0, 2.0])
    def test_identity(self, mu):
        head = _head(seed=2)
        art = kg_forward(T(np.random.default_rng(9).normal(size=(3, 4))), head, np.array([2, 0, 1]), mu)
        assert art.loss_total.item() == pytest.approx(art.loss_kl.item() + mu * art.loss_rep.item(), abs=1e-12)

    def test_default_mu(self):
        assert DEFAULT_MU == 2.0
        head = _head(seed=3)
        y = T(np.random.default_rng(10).normal(size=(2, 4)))
        art = kg_forward(y, head, np.array([0, 1]))
        assert art.loss_total.item() == pytest.approx(art.loss_kl.item() + 2.0 * art.loss_rep.item(), abs=1e-12)

    def test_negative_mu_rejected(self):
        with pytest.raises(ValueError):
            total_loss(T(1.0), T(1.0), -0.5)


def test_scale_covariance():
    rng = np.random.default_rng(11)
    y, k = rng.normal(size=(2, 4)), rng.normal(size=(3, 4))
    a = respond(T(2.0 * y), T(k)).data
    b = respond(T(y), T(2.0 * k)).data
    np.testing.assert_allclose(a, b, atol=1e-12)


def test_knowledge_gradient_has_two_paths():
    head = _head(seed=4)
    y = T(np.random.default_rng(12).normal(size=(3, 4)))
    labels = np.array([0, 1, 2])

    def grad_of(which):
        head.zero_grad()
        with Tape() as tape:
            art = kg_forward(y, head, labels)
            tape.backward(getattr(art, which))
        return head["knowledge"].grad.copy()

    g_kl, g_rep = grad_of("loss_kl"), grad_of("loss_rep")
    assert np.abs(g_kl).max() > 0 and np.abs(g_rep).max() > 0
    assert not np.allclose(g_kl, g_rep)


def test_joint_update_moves_encoder_and_knowledge():
    cfg = ModelConfig(image_h=4, image_w=4, channels=1, patch=2, embed_dim=8, layers=1, heads=2, classes=3, seed=1)
    model = TPSKGModel(cfg, "full", np.float64)
    before = {k: t.data.copy() for k, t in model.params.items()}
    images = np.random.default_rng(13).normal(size=(3, 4, 4, 1))
    with Tape() as tape:
        art, _ = model.train_forward(images, np.array([0, 1, 2]))
        tape.backward(art.loss_total)
    SGD(model.params, momentum=0.9).step(0.1)
    after = model.params
    assert not np.array_equal(before["knowledge"], after["knowledge"].data)
    assert not np.array_equal(before["patch_proj"], after["patch_proj"].data)
    assert not np.array_equal(before["blocks.0.attn.wq"], after["blocks.0.attn.wq"].data)


def test_predict_is_deterministic():
    cfg = ModelConfig(image_h=4, image_w=4, channels=1, patch=2, embed_dim=8, layers=1, heads=2, classes=3, seed=1)
    model = TPSKGModel(cfg, "full", np.float64)
    images = np.random.default_rng(14).normal(size=(5, 4, 4, 1))
    np.testing.assert_array_equal(model.predict(images), model.predict(images))
    with pytest.raises(ValueError):
        TPSKGModel(cfg, "baseline").knowledge_predict(images)
