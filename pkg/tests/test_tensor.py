import io

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import gradcheck, rand_tensor
from samic import tensor as T

RNG = np.random.default_rng(2024)


class TestConv2d:
    def test_identity_1x1_kernel(self):
        x = rand_tensor(RNG, (3, 5, 7), requires_grad=False)
        k = T.Tensor(np.eye(3).reshape(3, 3, 1, 1))
        out = T.conv2d(x, k)
        np.testing.assert_array_equal(out.data, x.data)

    def test_constant_input_ones_kernel_interior(self):
        c = 0.37
        x = T.Tensor(np.full((1, 6, 6), c))
        k = T.Tensor(np.ones((1, 1, 3, 3)))
        out = T.conv2d(x, k)
        # hand-summed: nine taps of value c at any interior pixel
        np.testing.assert_allclose(out.data[0, 2, 3], 9 * c, rtol=1e-12)

    def test_checkerboard_mask_zeroes_centre_tap(self):
        mask = np.ones((3, 3))
        mask[1, 1] = 0
        delta = np.zeros((1, 5, 5))
        delta[0, 2, 2] = 1.0
        out = T.conv2d(T.Tensor(delta), T.Tensor(np.ones((1, 1, 3, 3))), mask=mask)
        assert out.data[0, 2, 2] == 0.0

    def test_even_kernel_rejected(self):
        with pytest.raises(T.ShapeError):
            T.conv2d(T.Tensor(np.zeros((1, 4, 4))),
                     T.Tensor(np.zeros((1, 1, 2, 2))))

    def test_channel_mismatch_rejected(self):
        with pytest.raises(T.ShapeError):
            T.conv2d(T.Tensor(np.zeros((2, 4, 4))),
                     T.Tensor(np.zeros((1, 3, 3, 3))))

    def test_masked_kernel_receives_no_masked_gradient(self):
        mask = np.ones((3, 3))
        mask[1, 1] = 0
        x = rand_tensor(RNG, (2, 4, 4))
        k = rand_tensor(RNG, (2, 2, 3, 3))
        loss = T.reduce_sum(T.conv2d(x, k, mask=mask))
        T.backward(loss)
        assert np.all(k.grad[:, :, 1, 1] == 0.0)


class TestSilu:
    def test_zero(self):
        assert T.silu(T.Tensor(np.zeros(1))).data[0] == 0.0

    def test_saturation(self):
        t = 50.0
        assert abs(T.silu(T.Tensor(np.array([t]))).data[0] - t) < 1e-12

    def test_scalar_oracle(self):
        # silu(1) = 1 / (1 + e^-1)
        got = T.silu(T.Tensor(np.ones(1))).data[0]
        np.testing.assert_allclose(got, 0.7310585786300049, atol=1e-9)


class TestSoftmax:
    def test_symmetry(self):
        out = T.softmax(T.Tensor(np.zeros(2)), axis=0)
        np.testing.assert_allclose(out.data, [0.5, 0.5])

    def test_scalar_oracle(self):
        out = T.softmax(T.Tensor(np.array([1.0, 0.0])), axis=0)
        e = np.exp(1.0)
        np.testing.assert_allclose(out.data, [e / (e + 1), 1 / (e + 1)], atol=1e-9)

    def test_no_overflow(self):
        out = T.softmax(T.Tensor(np.array([1000.0, 0.0])), axis=0)
        np.testing.assert_allclose(out.data, [1.0, 0.0], atol=1e-12)

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.floats(min_value=-1e3, max_value=1e3), min_size=2,
                    max_size=12))
    def test_rows_sum_to_one(self, values):
        out = T.softmax(T.Tensor(np.array(values)), axis=0)
        assert abs(out.data.sum() - 1.0) <= 1e-6
        assert np.all(out.data >= 0) and np.all(out.data <= 1)
        # strict interior only holds while the logit spread stays inside
        # float64 resolution; beyond that the limit values are exact
        if np.ptp(values) < 30:
            assert np.all(out.data > 0) and np.all(out.data < 1)


class TestGatherRows:
    def test_identity(self):
        x = rand_tensor(RNG, (6, 3), requires_grad=False)
        out = T.gather_rows(x, np.arange(6))
        np.testing.assert_array_equal(out.data, x.data)

    def test_definition(self):
        x = T.Tensor(np.arange(6, dtype=float).reshape(3, 2))
        out = T.gather_rows(x, [2, 0, 1])
        np.testing.assert_array_equal(out.data, x.data[[2, 0, 1]])

    def test_roundtrip_bit_exact(self):
        x = rand_tensor(RNG, (40, 5), requires_grad=False)
        perm = RNG.permutation(40)
        back = T.gather_rows(T.gather_rows(x, perm), np.argsort(perm))
        assert np.array_equal(back.data, x.data)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(min_value=1, max_value=64), st.integers(0, 2**31))
    def test_roundtrip_property(self, n, seed):
        rng = np.random.default_rng(seed)
        x = T.Tensor(rng.normal(size=(n, 3)))
        perm = rng.permutation(n)
        back = T.gather_rows(T.gather_rows(x, perm), np.argsort(perm))
        assert np.array_equal(back.data, x.data)

    def test_non_bijective_rejected(self):
        with pytest.raises(ValueError):
            T.gather_rows(T.Tensor(np.zeros((3, 1))), [0, 0, 1])

    def test_backward_is_scatter(self):
        x = rand_tensor(RNG, (8, 4))
        perm = RNG.permutation(8)
        weights = RNG.normal(size=(8, 4))
        loss = T.reduce_sum(T.gather_rows(x, perm) * T.Tensor(weights))
        T.backward(loss)
        # gradient of a gather is exactly the permuted upstream grad
        assert np.array_equal(x.grad[perm], weights)


class TestBackward:
    def test_square_gradient(self):
        x = T.Tensor(np.array(3.0), requires_grad=True)
        T.backward(x * x)
        np.testing.assert_allclose(x.grad, 6.0)

    def test_silu_gradient_at_zero(self):
        x = T.Tensor(np.zeros(5), requires_grad=True)
        T.backward(T.reduce_sum(T.silu(x)))
        np.testing.assert_allclose(x.grad, 0.5)

    def test_non_scalar_loss_rejected(self):
        x = T.Tensor(np.zeros(3), requires_grad=True)
        with pytest.raises(T.ShapeError):
            T.backward(x + x)

    def test_detached_loss_rejected(self):
        with pytest.raises(T.TensorError):
            T.backward(T.Tensor(np.array(1.0)))

    def test_double_backward_rejected(self):
        x = T.Tensor(np.array(2.0), requires_grad=True)
        loss = x * x
        T.backward(loss)
        with pytest.raises(T.TensorError):
            T.backward(loss)

    def test_no_grad_detaches(self):
        x = T.Tensor(np.ones(3), requires_grad=True)
        with T.no_grad():
            y = T.reduce_sum(x * x)
        assert not y.requires_grad


def _mk(shape):
    return rand_tensor(np.random.default_rng(7), shape)


OP_CASES = [
    ("add", lambda a, b: a + b, [(3, 4), (3, 4)]),
    ("add_broadcast", lambda a, b: a + b, [(3, 4), (1, 4)]),
    ("sub", lambda a, b: a - b, [(3, 4), (3, 4)]),
    ("mul", lambda a, b: a * b, [(2, 5), (2, 5)]),
    ("div", lambda a, b: a / (b * b + 1.0), [(2, 5), (2, 5)]),
    ("matmul", lambda a, b: T.matmul(a, b), [(3, 4), (4, 2)]),
    ("exp", lambda a: T.exp(a), [(3, 3)]),
    ("log", lambda a: T.log(a * a + 0.5), [(3, 3)]),
    ("sqrt", lambda a: T.sqrt(a * a + 0.3), [(3, 3)]),
    ("pow", lambda a: T.pow_const(a * a + 0.5, 1.7), [(3, 3)]),
    ("sigmoid", lambda a: T.sigmoid(a), [(4, 3)]),
    ("silu", lambda a: T.silu(a), [(4, 3)]),
    ("tanh", lambda a: T.tanh(a), [(4, 3)]),
    ("softplus", lambda a: T.softplus(a), [(4, 3)]),
    ("erf", lambda a: T.erf(a), [(4, 3)]),
    ("softmax", lambda a: T.softmax(a, axis=1), [(3, 5)]),
    ("reduce_sum", lambda a: T.reduce_sum(a, axis=1), [(3, 5)]),
    ("reduce_mean", lambda a: T.reduce_mean(a, axis=0, keepdims=True), [(3, 5)]),
    ("reshape", lambda a: T.reshape(a, (5, 3)), [(3, 5)]),
    ("transpose", lambda a: T.transpose(a, (1, 0, 2)), [(2, 3, 4)]),
    ("concat", lambda a, b: T.concat([a, b], axis=0), [(2, 4), (3, 4)]),
    ("slice_channels", lambda a: T.slice_channels(a, 1, 3), [(4, 5)]),
    ("clamp", lambda a: T.clamp(a, lo=-0.7, hi=0.9), [(4, 4)]),
    ("conv2d_3x3", lambda a, k: T.conv2d(a, k), [(2, 5, 5), (3, 2, 3, 3)]),
    ("conv2d_1x1", lambda a, k: T.conv2d(a, k), [(3, 4, 4), (2, 3, 1, 1)]),
    ("subsample2x", lambda a: T.subsample2x(a), [(2, 6, 6)]),
    ("upsample2x", lambda a: T.upsample_nearest2x(a), [(2, 3, 3)]),
    ("avgpool2x2", lambda a: T.avgpool2x2(a), [(2, 4, 4)]),
    ("gather", lambda a: T.gather_rows(a, [3, 1, 0, 2]), [(4, 3)]),
]


@pytest.mark.parametrize("name,fn,shapes", OP_CASES, ids=[c[0] for c in OP_CASES])
def test_gradcheck_every_op(name, fn, shapes):
    rng = np.random.default_rng(abs(hash(name)) % 2**32)
    tensors = [rand_tensor(rng, s) for s in shapes]
    probe = fn(*tensors)
    weights = T.Tensor(rng.normal(size=probe.shape))

    def f():
        return T.reduce_sum(fn(*tensors) * weights)
    gradcheck(f, tensors, tol=1e-4)


def test_gradcheck_blur2d():
    rng = np.random.default_rng(11)
    x = rand_tensor(rng, (2, 6, 6))
    taps = np.array([0.25, 0.5, 0.25])
    w = rng.normal(size=(2, 6, 6))

    def f():
        return T.reduce_sum(T.blur2d(x, taps) * T.Tensor(w))
    gradcheck(f, [x], tol=1e-4)


def test_gradcheck_composition():
    rng = np.random.default_rng(13)
    x = rand_tensor(rng, (2, 4, 4))
    k = rand_tensor(rng, (2, 2, 3, 3))
    b = rand_tensor(rng, (2,))

    def f():
        h = T.silu(T.conv2d(x, k, b))
        h = T.softmax(T.reshape(h, (2, 16)), axis=1)
        return T.reduce_sum(h * h)
    gradcheck(f, [x, k, b], tol=1e-4)


class TestInvariants:
    def test_non_finite_is_an_error(self):
        x = T.Tensor(np.array([700.0, 800.0]))
        with pytest.raises(T.NonFiniteError):
            T.exp(T.exp(x))

    def test_non_finite_init_rejected(self):
        with pytest.raises(T.NonFiniteError):
            T.Tensor(np.array([1.0, np.nan]))

    def test_grad_shape_matches(self):
        x = rand_tensor(RNG, (3, 4))
        T.backward(T.reduce_sum(x * x))
        assert x.grad.shape == x.data.shape


class TestSerialization:
    def test_roundtrip(self):
        arr = RNG.normal(size=(2, 3, 4)).astype(np.float32)
        buf = io.BytesIO()
        T.write_tensor(buf, arr)
        buf.seek(0)
        back = T.read_tensor(buf)
        assert back.shape == (2, 3, 4)
        np.testing.assert_array_equal(back.astype(np.float32), arr)

    def test_layout(self):
        buf = io.BytesIO()
        T.write_tensor(buf, np.array([[1.0, 2.0]], dtype=np.float32))
        raw = buf.getvalue()
        # rank, extents, then little-endian f32 payload
        assert raw[:4] == (2).to_bytes(4, "little")
        assert raw[4:8] == (1).to_bytes(4, "little")
        assert raw[8:12] == (2).to_bytes(4, "little")
        assert np.frombuffer(raw[12:], dtype="<f4").tolist() == [1.0, 2.0]

    def test_truncated_rejected(self):
        buf = io.BytesIO()
        T.write_tensor(buf, np.ones(4, dtype=np.float32))
        blob = buf.getvalue()[:-3]
        with pytest.raises(T.TensorError):
            T.read_tensor(io.BytesIO(blob))
