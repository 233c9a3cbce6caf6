import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from tpskg.gradcheck import numerical_grad, relative_error
from tpskg.tensor import (
    ShapeError,
    Tape,
    TapeError,
    Tensor,
    add,
    broadcast_to,
    concat,
    count_macs,
    cross_entropy,
    gelu,
    getitem,
    layernorm,
    matmul,
    mul,
    no_grad,
    reshape,
    softmax,
    transpose,
)


def triple_loop_matmul(a, b):
    m, k = a.shape
    n = b.shape[1]
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            s = 0.0
            for t in range(k):
                s += a[i, t] * b[t, j]
            out[i, j] = s
    return out


class TestMatmul:
    def test_identity(self):
        out = matmul(Tensor([[1.0, 0.0], [0.0, 1.0]]), Tensor([[3.0, 4.0], [5.0, 6.0]]))
        np.testing.assert_array_equal(out.data, [[3, 4], [5, 6]])

    def test_hand_arithmetic(self):
        out = matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]]))
        assert out.data.tolist() == [[11.0]]

    def test_random_against_triple_loop(self):
        rng = np.random.default_rng(3)
        a, b = rng.normal(size=(4, 5)), rng.normal(size=(5, 3))
        np.testing.assert_allclose(matmul(Tensor(a), Tensor(b)).data, triple_loop_matmul(a, b), rtol=0, atol=1e-12)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(1, 8), st.integers(1, 8), st.integers(1, 8), st.integers(0, 2**32 - 1))
    def test_shapes_up_to_8(self, m, k, n, seed):
        rng = np.random.default_rng(seed)
        a, b = rng.normal(size=(m, k)), rng.normal(size=(k, n))
        np.testing.assert_allclose(matmul(Tensor(a), Tensor(b)).data, triple_loop_matmul(a, b), rtol=0, atol=1e-12)

    def test_mismatch_names_both_shapes(self):
        with pytest.raises(ShapeError, match=r"\(2, 3\).*\(4, 5\)"):
            matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 5))))

    def test_batched_with_shared_weight(self):
        rng = np.random.default_rng(0)
        a, w = rng.normal(size=(3, 4, 5)), rng.normal(size=(5, 2))
        out = matmul(Tensor(a), Tensor(w)).data
        for i in range(3):
            np.testing.assert_allclose(out[i], triple_loop_matmul(a[i], w), atol=1e-12)

    def test_mac_count(self):
        with count_macs() as c:
            matmul(Tensor(np.ones((2, 3, 4))), Tensor(np.ones((4, 5))))
        assert c.macs == 2 * 3 * 4 * 5


class TestSoftmax:
    def test_uniform(self):
        np.testing.assert_allclose(softmax(Tensor([0.0, 0.0, 0.0])).data, [1 / 3] * 3, atol=1e-15)

    def test_saturation_no_overflow(self):
        with np.errstate(over="raise"):
            out = softmax(Tensor([1000.0, 0.0, 0.0])).data
        np.testing.assert_allclose(out, [1.0, 0.0, 0.0], atol=1e-300)

    def test_direct_formula(self):
        e = [math.exp(v) for v in (1.0, 2.0, 3.0)]
        expected = [v / sum(e) for v in e]
        np.testing.assert_allclose(softmax(Tensor([1.0, 2.0, 3.0])).data, expected, rtol=1e-14)

    def test_axis_zero(self):
        x = np.random.default_rng(1).normal(size=(4, 3))
        out = softmax(Tensor(x), axis=0).data
        np.testing.assert_allclose(out.sum(axis=0), 1.0, atol=1e-12)

    @settings(max_examples=50, deadline=None)
    @given(arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(1, 9)),
                  elements=st.floats(-50, 50)))
    def test_rows_on_simplex(self, x):
        out = softmax(Tensor(x)).data
        assert np.all(out >= 0) and np.all(out <= 1)
        np.testing.assert_allclose(out.sum(axis=-1), 1.0, atol=1e-6)

    def test_constant_bias_masks_columns(self):
        x = np.zeros((2, 4))
        bias = np.array([0.0, -1e9, 0.0, 0.0])
        out = softmax(Tensor(x), bias=bias).data
        assert np.all(out[:, 1] <= 1e-30)
        np.testing.assert_allclose(out.sum(axis=-1), 1.0)


class TestLayernorm:
    def _ln(self, x, eps=1e-6):
        d = x.shape[-1]
        return layernorm(Tensor(x), Tensor(np.ones(d)), Tensor(np.zeros(d)), eps).data

    def test_constant_row(self):
        np.testing.assert_array_equal(self._ln(np.full((1, 5), 3.7)), np.zeros((1, 5)))

    def test_two_point(self):
        np.testing.assert_allclose(self._ln(np.array([[1.0, 3.0]]), eps=1e-12), [[-1.0, 1.0]], atol=1e-10)

    def test_direct_oracle(self):
        rng = np.random.default_rng(7)
        x = rng.normal(size=(3, 10))
        g, b = rng.normal(size=10), rng.normal(size=10)
        mean = x.mean(axis=1, keepdims=True)
        var = ((x - mean) ** 2).mean(axis=1, keepdims=True)
        expected = (x - mean) / np.sqrt(var + 1e-6) * g + b
        out = layernorm(Tensor(x), Tensor(g), Tensor(b), 1e-6).data
        np.testing.assert_allclose(out, expected, atol=1e-6)

    def test_standardized_rows(self):
        x = np.random.default_rng(8).normal(3.0, 2.0, size=(6, 16))
        out = self._ln(x)
        np.testing.assert_allclose(out.mean(axis=1), 0.0, atol=1e-5)
        np.testing.assert_allclose(out.var(axis=1), 1.0, atol=1e-5)

    def test_width_mismatch(self):
        with pytest.raises(ShapeError):
            layernorm(Tensor(np.ones((2, 3))), Tensor(np.ones(4)), Tensor(np.zeros(4)))


class TestElementwise:
    def test_cross_entropy_uniform_two_class(self):
        assert cross_entropy(Tensor([0.0, 0.0]), 0).item() == pytest.approx(math.log(2), abs=1e-15)

    def test_gelu_origin(self):
        assert gelu(Tensor([0.0])).data[0] == 0.0

    def test_gelu_reference_value(self):
        # x * Phi(x) at x = 1
        assert gelu(Tensor([1.0])).data[0] == pytest.approx(0.5 * (1 + math.erf(1 / math.sqrt(2))), rel=1e-14)

    def test_cross_entropy_label_out_of_range(self):
        with pytest.raises(IndexError):
            cross_entropy(Tensor([0.0, 1.0, 2.0]), 3)
        with pytest.raises(IndexError):
            cross_entropy(Tensor(np.zeros((2, 3))), np.array([0, -1]))

    def test_cross_entropy_gradient_fd(self):
        rng = np.random.default_rng(11)
        z = Tensor(rng.normal(size=5), requires_grad=True)
        with Tape() as tape:
            loss = cross_entropy(z, 2)
        tape.backward(loss)
        num = numerical_grad(lambda: cross_entropy(z, 2).item(), z.data)
        assert relative_error(z.grad, num) <= 1e-4

    def test_add_rejects_trailing_broadcast(self):
        with pytest.raises(ShapeError):
            add(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 1))))


class TestTape:
    def test_non_scalar_loss(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with Tape() as tape:
            y = mul(x, 2.0)
        with pytest.raises(TapeError):
            tape.backward(y)

    def test_double_backward(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with Tape() as tape:
            loss = mul(x, 2.0).sum()
        tape.backward(loss)
        with pytest.raises(TapeError):
            tape.backward(loss)

    def test_no_recording_outside_tape(self):
        x = Tensor(np.ones(3), requires_grad=True)
        assert not mul(x, 2.0).requires_grad

    def test_no_grad_inside_tape(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with Tape() as tape:
            with no_grad():
                mul(x, 2.0)
        assert len(tape) == 0

    def test_every_reachable_tensor_gets_grad(self):
        a = Tensor(np.ones((2, 2)), requires_grad=True)
        b = Tensor(np.ones((2, 2)), requires_grad=True)
        with Tape() as tape:
            c = matmul(a, b)
            loss = gelu(c).sum()
        tape.backward(loss)
        assert a.grad is not None and b.grad is not None and c.grad is not None

    def test_repeat_runs_bit_identical(self):
        rng = np.random.default_rng(5)
        x0, w0 = rng.normal(size=(3, 4, 6)), rng.normal(size=(6, 6))

        def run():
            x, w = Tensor(x0.copy(), requires_grad=True), Tensor(w0.copy(), requires_grad=True)
            g, b = Tensor(np.ones(6), requires_grad=True), Tensor(np.zeros(6), requires_grad=True)
            with Tape() as tape:
                h = layernorm(matmul(x, w), g, b)
                loss = cross_entropy(reshape(softmax(h), (12, 6)), np.arange(12) % 6)
            tape.backward(loss)
            return loss.data.tobytes(), w.grad.tobytes(), x.grad.tobytes()

        assert run() == run()


# ----------------------------------------------------------- gradient sweep

def _fd_trial(build, shapes, seed):
    """Random inputs, loss = sum(op(...) * fixed random weights); FD vs tape."""
    rng = np.random.default_rng(seed)
    inputs = [Tensor(rng.normal(size=s), requires_grad=True) for s in shapes]
    out_probe = build(*inputs)
    weights = rng.normal(size=out_probe.shape)

    def loss_fn():
        return mul(build(*inputs), weights).sum()

    with Tape() as tape:
        loss = loss_fn()
    tape.backward(loss)
    worst = 0.0
    for t in inputs:
        num = numerical_grad(lambda: loss_fn().item(), t.data)
        worst = max(worst, relative_error(t.grad, num))
    return worst


OPS = {
    "matmul": (lambda a, b: matmul(a, b), [(3, 4), (4, 2)]),
    "matmul_batched": (lambda a, b: matmul(a, b), [(2, 3, 4), (4, 2)]),
    "matmul_bb": (lambda a, b: matmul(a, b), [(2, 3, 4), (2, 4, 2)]),
    "add_bias": (lambda a, b: add(a, b), [(2, 3, 4), (4,)]),
    "mul": (lambda a, b: mul(a, b), [(3, 4), (3, 4)]),
    "gelu": (lambda a: gelu(a), [(3, 5)]),
    "softmax": (lambda a: softmax(a, axis=-1), [(3, 5)]),
    "softmax_axis0": (lambda a: softmax(a, axis=0), [(4, 3)]),
    "layernorm": (lambda x, g, b: layernorm(x, g, b, 1e-6), [(3, 6), (6,), (6,)]),
    "transpose": (lambda a: transpose(a, (1, 0, 2)), [(2, 3, 4)]),
    "getitem": (lambda a: getitem(a, (slice(None), 0)), [(3, 4, 2)]),
    "concat": (lambda a, b: concat([a, b], axis=1), [(2, 1, 3), (2, 4, 3)]),
    "broadcast": (lambda a: broadcast_to(a, (3, 1, 4)), [(1, 4)]),
    "cross_entropy": (lambda a: cross_entropy(a, np.array([0, 2, 1])), [(3, 4)]),
}


@pytest.mark.parametrize("name", sorted(OPS))
def test_gradients_match_finite_differences(name):
    build, shapes = OPS[name]
    worst = max(_fd_trial(build, shapes, seed) for seed in range(100 // len(OPS) + 1))
    assert worst <= 1e-4, f"{name}: relative error {worst:.2e}"


def test_hundred_random_trials_across_ops():
    rng = np.random.default_rng(2024)
    names = sorted(OPS)
    worst = 0.0
    for trial in range(100):
        name = names[rng.integers(len(names))]
        build, shapes = OPS[name]
        worst = max(worst, _fd_trial(build, shapes, 1000 + trial))
    assert worst <= 1e-4
