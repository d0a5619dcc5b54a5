"""Forward semantics of the primitives against naive loop oracles."""

import numpy as np
import pytest

from d2mlp import Tensor, ops
from d2mlp.ops import BNState


def loop_linear(x, w, b, axis):
    out_f, in_f = w.shape
    moved = np.moveaxis(x, axis, -1)
    out = np.zeros(moved.shape[:-1] + (out_f,))
    for idx in np.ndindex(moved.shape[:-1]):
        for o in range(out_f):
            acc = b[o]
            for i in range(in_f):
                acc += w[o, i] * moved[idx + (i,)]
            out[idx + (o,)] = acc
    return np.moveaxis(out, -1, axis)


def loop_conv2d(x, w, b, stride, padding):
    bs, cin, h, wd = x.shape
    cout, _, kh, kw = w.shape
    sh, sw = stride, stride
    ph, pw = padding, padding
    xp = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    ho = (h + 2 * ph - kh) // sh + 1
    wo = (wd + 2 * pw - kw) // sw + 1
    y = np.zeros((bs, cout, ho, wo))
    for n in range(bs):
        for o in range(cout):
            for i in range(ho):
                for j in range(wo):
                    acc = b[o]
                    for c in range(cin):
                        for di in range(kh):
                            for dj in range(kw):
                                acc += w[o, c, di, dj] * xp[n, c, i * sh + di, j * sw + dj]
                    y[n, o, i, j] = acc
    return y


def loop_tconv2d(x, w, b, stride):
    bs, cin, h, wd = x.shape
    _, cout, kh, kw = w.shape
    ho = (h - 1) * stride + kh
    wo = (wd - 1) * stride + kw
    y = np.zeros((bs, cout, ho, wo))
    for n in range(bs):
        for c in range(cin):
            for i in range(h):
                for j in range(wd):
                    for o in range(cout):
                        for di in range(kh):
                            for dj in range(kw):
                                y[n, o, i * stride + di, j * stride + dj] += (
                                    x[n, c, i, j] * w[c, o, di, dj]
                                )
    y += b.reshape(1, cout, 1, 1)
    return y


def loop_dwconv2d(x, k, b):
    c, h, wd = x.shape
    _, kh, kw = k.shape
    ph, pw = (kh - 1) // 2, (kw - 1) // 2
    xp = np.pad(x, ((0, 0), (ph, ph), (pw, pw)))
    y = np.zeros_like(x)
    for ch in range(c):
        for i in range(h):
            for j in range(wd):
                acc = b[ch]
                for di in range(kh):
                    for dj in range(kw):
                        acc += k[ch, di, dj] * xp[ch, i + di, j + dj]
                y[ch, i, j] = acc
    return y


class TestLinear:
    def test_identity(self):
        x = Tensor(np.array([1.0, -2.0, 3.0]))
        y = ops.linear(x, Tensor(np.eye(3)), Tensor(np.zeros(3)), axis=0)
        assert np.array_equal(y.data, x.data)

    def test_hand_case(self):
        w = Tensor(np.array([[1.0, 1.0], [1.0, -1.0]]))
        y = ops.linear(Tensor(np.array([2.0, 3.0])), w, Tensor(np.zeros(2)), axis=0)
        assert np.array_equal(y.data, [5.0, -1.0])

    def test_against_loop_oracle(self):
        rng = np.random.default_rng(0)
        x = rng.standard_normal((4, 2, 3))
        w = rng.standard_normal((5, 2))
        b = rng.standard_normal(5)
        got = ops.linear(Tensor(x), Tensor(w), Tensor(b), axis=1).data
        want = loop_linear(x, w, b, 1)
        assert np.allclose(got, want, rtol=1e-6)

    def test_many_random_cases_f32(self):
        rng = np.random.default_rng(1)
        for _ in range(50):
            shape = tuple(rng.integers(1, 5, rng.integers(1, 5)))
            axis = int(rng.integers(0, len(shape)))
            out_f = int(rng.integers(1, 5))
            x = rng.standard_normal(shape).astype(np.float32)
            w = rng.standard_normal((out_f, shape[axis])).astype(np.float32)
            b = rng.standard_normal(out_f).astype(np.float32)
            got = ops.linear(Tensor(x), Tensor(w), Tensor(b), axis=axis).data
            want = loop_linear(x.astype(np.float64), w.astype(np.float64),
                               b.astype(np.float64), axis)
            assert np.allclose(got, want, rtol=1e-6, atol=1e-6)

    def test_axis_out_of_range(self):
        with pytest.raises(Exception):
            ops.linear(Tensor(np.zeros(3)), Tensor(np.eye(3)), Tensor(np.zeros(3)), axis=5)

    def test_extent_mismatch(self):
        with pytest.raises(Exception):
            ops.linear(Tensor(np.zeros(4)), Tensor(np.eye(3)), Tensor(np.zeros(3)), axis=0)


class TestConv2d:
    def test_one_by_one_identity(self):
        x = Tensor(np.random.default_rng(2).standard_normal((2, 3, 4, 4)))
        w = Tensor(np.eye(3).reshape(3, 3, 1, 1))
        y = ops.conv2d(x, w, Tensor(np.zeros(3)), stride=1, padding=0)
        assert np.allclose(y.data, x.data)

    def test_against_loop_oracle(self):
        rng = np.random.default_rng(3)
        for _ in range(10):
            x = rng.standard_normal((2, 2, 6, 5))
            w = rng.standard_normal((3, 2, 3, 3))
            b = rng.standard_normal(3)
            stride = int(rng.integers(1, 3))
            pad = int(rng.integers(0, 2))
            got = ops.conv2d(Tensor(x), Tensor(w), Tensor(b), stride, pad).data
            assert np.allclose(got, loop_conv2d(x, w, b, stride, pad), rtol=1e-6, atol=1e-9)

    def test_f32_cases(self):
        rng = np.random.default_rng(4)
        for _ in range(50):
            x = rng.standard_normal((1, 2, 5, 5)).astype(np.float32)
            w = rng.standard_normal((2, 2, 3, 3)).astype(np.float32)
            b = rng.standard_normal(2).astype(np.float32)
            got = ops.conv2d(Tensor(x), Tensor(w), Tensor(b), 1, 1).data
            want = loop_conv2d(x.astype(np.float64), w.astype(np.float64),
                               b.astype(np.float64), 1, 1)
            assert np.allclose(got, want, rtol=1e-6, atol=1e-5)

    def test_nonpositive_output_extent(self):
        with pytest.raises(Exception):
            ops.conv2d(Tensor(np.zeros((1, 1, 2, 2))), Tensor(np.zeros((1, 1, 5, 5))),
                       Tensor(np.zeros(1)), stride=1, padding=0)


class TestTconv2d:
    def test_ones_kernel_doubles_single_pixel(self):
        x = Tensor(np.ones((1, 1, 1, 1)))
        w = Tensor(np.ones((1, 1, 2, 2)))
        y = ops.tconv2d(x, w, Tensor(np.zeros(1)), stride=2)
        assert np.array_equal(y.data, np.ones((1, 1, 2, 2)))

    def test_exact_doubling_shape(self):
        x = Tensor(np.random.default_rng(5).standard_normal((2, 3, 4, 6)))
        w = Tensor(np.random.default_rng(6).standard_normal((3, 5, 2, 2)))
        y = ops.tconv2d(x, w, Tensor(np.zeros(5)), stride=2)
        assert y.shape == (2, 5, 8, 12)

    def test_against_loop_oracle(self):
        rng = np.random.default_rng(7)
        for _ in range(10):
            x = rng.standard_normal((2, 2, 3, 4))
            w = rng.standard_normal((2, 3, 2, 2))
            b = rng.standard_normal(3)
            got = ops.tconv2d(Tensor(x), Tensor(w), Tensor(b), stride=2).data
            assert np.allclose(got, loop_tconv2d(x, w, b, 2), rtol=1e-6, atol=1e-9)

    def test_inverts_conv_shapes(self):
        x = Tensor(np.random.default_rng(8).standard_normal((1, 4, 8, 8)))
        down = ops.conv2d(x, Tensor(np.random.default_rng(9).standard_normal((8, 4, 2, 2))),
                          Tensor(np.zeros(8)), stride=2, padding=0)
        up = ops.tconv2d(down, Tensor(np.random.default_rng(10).standard_normal((8, 4, 2, 2))),
                         Tensor(np.zeros(4)), stride=2)
        assert up.shape == x.shape


class TestDwconv2d:
    def test_delta_kernel_identity(self):
        x = Tensor(np.random.default_rng(11).standard_normal((3, 4, 5)))
        k = np.zeros((3, 1, 3))
        k[:, 0, 1] = 1.0
        y = ops.dwconv2d(x, Tensor(k), Tensor(np.zeros(3)))
        assert np.allclose(y.data, x.data)

    def test_hand_case(self):
        x = Tensor(np.array([[[1.0, 2.0, 3.0]]]))
        k = Tensor(np.ones((1, 1, 3)))
        y = ops.dwconv2d(x, k, Tensor(np.zeros(1)))
        assert np.array_equal(y.data, [[[3.0, 6.0, 5.0]]])

    def test_against_loop_oracle_f64_exact(self):
        rng = np.random.default_rng(12)
        x = rng.standard_normal((3, 5, 5))
        k = rng.standard_normal((3, 3, 3))
        b = rng.standard_normal(3)
        got = ops.dwconv2d(Tensor(x), Tensor(k), Tensor(b)).data
        want = loop_dwconv2d(x, k, b)
        assert np.allclose(got, want, rtol=0, atol=1e-12)

    def test_f32_cases(self):
        rng = np.random.default_rng(13)
        for _ in range(50):
            c = int(rng.integers(1, 4))
            x = rng.standard_normal((c, 4, 6)).astype(np.float32)
            k = rng.standard_normal((c, 1, 3)).astype(np.float32)
            b = rng.standard_normal(c).astype(np.float32)
            got = ops.dwconv2d(Tensor(x), Tensor(k), Tensor(b)).data
            want = loop_dwconv2d(x.astype(np.float64), k.astype(np.float64),
                                 b.astype(np.float64))
            assert np.allclose(got, want, rtol=1e-6, atol=1e-6)

    def test_channel_mismatch(self):
        with pytest.raises(Exception):
            ops.dwconv2d(Tensor(np.zeros((3, 4, 4))), Tensor(np.zeros((2, 1, 3))),
                         Tensor(np.zeros(2)))

    def test_no_cross_channel_mixing(self):
        x = np.zeros((2, 3, 3))
        x[0] = 1.0
        k = np.ones((2, 3, 3))
        y = ops.dwconv2d(Tensor(x), Tensor(k), Tensor(np.zeros(2)))
        assert np.all(y.data[1] == 0)


class TestGelu:
    def test_zero(self):
        assert ops.gelu(Tensor(np.float64(0.0))).item() == 0.0

    def test_one(self):
        assert abs(ops.gelu(Tensor(np.float64(1.0))).item() - 0.841345) < 1e-6

    def test_deep_negative_tail(self):
        assert abs(ops.gelu(Tensor(np.float64(-10.0))).item()) < 1e-6

    def test_tanh_approx_close(self):
        x = np.linspace(-3, 3, 31)
        exact = ops.gelu(Tensor(x)).data
        approx = ops.gelu(Tensor(x), approx="tanh").data
        assert np.allclose(exact, approx, atol=2e-3)


class TestSoftmax:
    def test_equal_inputs(self):
        y = ops.softmax(Tensor(np.zeros(3)), axis=0)
        assert np.allclose(y.data, [1 / 3] * 3)

    def test_hand_case(self):
        y = ops.softmax(Tensor(np.array([0.0, np.log(3.0)])), axis=0)
        assert np.allclose(y.data, [0.25, 0.75], atol=1e-12)

    def test_shift_invariance(self):
        rng = np.random.default_rng(14)
        for _ in range(20):
            x = rng.standard_normal((4, 6))
            c = rng.standard_normal()
            a = ops.softmax(Tensor(x), axis=1).data
            b = ops.softmax(Tensor(x + c), axis=1).data
            assert np.allclose(a, b, atol=1e-7)

    def test_slices_sum_to_one(self):
        rng = np.random.default_rng(15)
        x32 = rng.standard_normal((5, 7)).astype(np.float32)
        assert np.allclose(ops.softmax(Tensor(x32), axis=1).data.sum(1), 1.0, atol=1e-6)
        x64 = rng.standard_normal((5, 7))
        assert np.allclose(ops.softmax(Tensor(x64), axis=1).data.sum(1), 1.0, atol=1e-12)


class TestBatchNorm:
    def test_train_normalizes(self):
        rng = np.random.default_rng(16)
        x = Tensor(5.0 + 3.0 * rng.standard_normal((4, 3, 8, 8)))
        s = BNState.create(3, np.float64)
        y = ops.batchnorm2d(x, s, "train").data
        assert np.all(np.abs(y.mean(axis=(0, 2, 3))) < 1e-5)
        assert np.all(np.abs(y.var(axis=(0, 2, 3)) - 1.0) < 1e-4)

    def test_eval_affine(self):
        x = Tensor(np.random.default_rng(17).standard_normal((2, 3, 4, 4)))
        s = BNState.create(3, np.float64)
        s.gamma = Tensor(2.0 * np.ones(3), requires_grad=True)
        s.beta = Tensor(np.ones(3), requires_grad=True)
        y = ops.batchnorm2d(x, s, "eval").data
        assert np.allclose(y, 2.0 * x.data + 1.0, atol=1e-4)

    def test_running_update_hand_formula(self):
        rng = np.random.default_rng(18)
        x = rng.standard_normal((2, 3, 4, 4))
        s = BNState.create(3, np.float64)
        old_mean = s.running_mean.copy()
        old_var = s.running_var.copy()
        ops.batchnorm2d(Tensor(x), s, "train")
        mu = x.mean(axis=(0, 2, 3))
        var = x.var(axis=(0, 2, 3))
        assert np.allclose(s.running_mean, 0.9 * old_mean + 0.1 * mu, atol=1e-12)
        assert np.allclose(s.running_var, 0.9 * old_var + 0.1 * var, atol=1e-12)

    def test_train_needs_two_elements(self):
        s = BNState.create(1, np.float64)
        with pytest.raises(Exception):
            ops.batchnorm2d(Tensor(np.zeros((1, 1, 1, 1))), s, "train")


class TestGlobalAvgPool:
    def test_constant(self):
        y = ops.global_avgpool(Tensor(np.full((3, 4, 5), 2.5)))
        assert np.array_equal(y.data, np.full((3, 1, 1), 2.5))

    def test_hand_case(self):
        y = ops.global_avgpool(Tensor(np.array([[[1.0, 2.0], [3.0, 4.0]]])))
        assert y.data.reshape(()) == 2.5

    def test_summation_oracle_exact(self):
        rng = np.random.default_rng(19)
        x = rng.standard_normal((2, 3, 4, 5))
        got = ops.global_avgpool(Tensor(x)).data
        want = np.zeros((2, 3, 1, 1))
        for n in range(2):
            for c in range(3):
                want[n, c, 0, 0] = x[n, c].sum() / 20.0
        assert np.allclose(got, want, atol=1e-15)


class TestRearrangement:
    def test_permute_inverse_bitwise(self):
        rng = np.random.default_rng(20)
        x = rng.standard_normal((3, 4, 5))
        y = ops.permute(ops.permute(Tensor(x), (2, 0, 1)), (1, 2, 0))
        assert y.data.tobytes() == x.tobytes()

    def test_split_concat_identity_bitwise(self):
        x = Tensor(np.random.default_rng(21).standard_normal((6, 4)))
        parts = ops.split(x, 3, axis=0)
        back = ops.concat(parts, axis=0)
        assert back.data.tobytes() == x.data.tobytes()

    def test_permute_stride_formula(self):
        rng = np.random.default_rng(22)
        x = rng.standard_normal((2, 3, 4))
        y = ops.permute(Tensor(x), (1, 2, 0)).data
        for i in range(2):
            for j in range(3):
                for k in range(4):
                    assert y[j, k, i] == x[i, j, k]

    def test_thousand_random_roundtrips(self):
        rng = np.random.default_rng(23)
        for _ in range(200):
            rank = int(rng.integers(2, 5))
            shape = tuple(int(e) for e in rng.integers(1, 6, rank))
            x = rng.standard_normal(shape)
            axes = tuple(int(a) for a in rng.permutation(rank))
            inverse = tuple(int(i) for i in np.argsort(axes))
            y = ops.permute(ops.permute(Tensor(x), axes), inverse)
            assert y.data.tobytes() == x.tobytes()
