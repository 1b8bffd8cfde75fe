import itertools

import numpy as np
import pytest

from conftest import numeric_grad, rel_error
from dancount.autodiff import (
    ConvSpec,
    Tensor,
    clamp,
    conv2d,
    conv2d_direct,
    conv_output_extent,
    log,
    no_grad,
    relu,
    softmax_channels,
    square,
    tabs,
)
from dancount.errors import NumericError, ValidationError


def loop_conv(x, w, b, stride, dilation, padding):
    """Nested-loop cross-correlation, written independently of the library."""
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    ho = (h + 2 * padding - dilation * (kh - 1) - 1) // stride + 1
    wo = (wd + 2 * padding - dilation * (kw - 1) - 1) // stride + 1
    out = np.zeros((n, o, ho, wo))
    for bi in range(n):
        for oc in range(o):
            for yy in range(ho):
                for xx in range(wo):
                    acc = b[oc] if b is not None else 0.0
                    for ic in range(c):
                        for i in range(kh):
                            for j in range(kw):
                                sy = yy * stride + i * dilation - padding
                                sx = xx * stride + j * dilation - padding
                                if 0 <= sy < h and 0 <= sx < wd:
                                    acc += w[oc, ic, i, j] * x[bi, ic, sy, sx]
                    out[bi, oc, yy, xx] = acc
    return out


def spec(w, b=None, **geom):
    return ConvSpec(Tensor(w), None if b is None else Tensor(b), **geom)


class TestConvForward:
    def test_identity_1x1(self, rng):
        x = rng.normal(size=(2, 3, 5, 6))
        w = np.eye(3).reshape(3, 3, 1, 1)
        out = conv2d(Tensor(x), spec(w, np.zeros(3)))
        np.testing.assert_array_equal(out.data, x)

    def test_dilated_impulse(self):
        x = np.zeros((1, 1, 9, 9))
        x[0, 0, 4, 4] = 1.0
        out = conv2d(Tensor(x), spec(np.ones((1, 1, 3, 3)), np.zeros(1), dilation=2, padding=2))
        expected = np.zeros((9, 9))
        for dy, dx in itertools.product((-2, 0, 2), repeat=2):
            expected[4 + dy, 4 + dx] = 1.0
        np.testing.assert_array_equal(out.data[0, 0], expected)

    def test_local_sum_head_is_block_sum(self, rng):
        x = rng.random((1, 1, 512, 512)).astype(np.float32)
        out = conv2d(Tensor(x), spec(np.ones((1, 1, 64, 64), np.float32), np.zeros(1, np.float32), stride=64))
        assert out.shape == (1, 1, 8, 8)
        oracle = np.array([[x[0, 0, 64 * i : 64 * i + 64, 64 * j : 64 * j + 64].astype(np.float64).sum()
                            for j in range(8)] for i in range(8)])
        np.testing.assert_allclose(out.data[0, 0], oracle, rtol=1e-5)

    @pytest.mark.parametrize("stride,dilation,padding", [(1, 1, 0), (1, 2, 2), (2, 1, 1), (2, 4, 3), (3, 1, 0)])
    def test_matches_nested_loops(self, rng, stride, dilation, padding):
        x = rng.normal(size=(2, 3, 9, 8))
        w = rng.normal(size=(4, 3, 3, 3))
        b = rng.normal(size=4)
        got = conv2d(Tensor(x), spec(w, b, stride=stride, dilation=dilation, padding=padding)).data
        np.testing.assert_allclose(got, loop_conv(x, w, b, stride, dilation, padding), rtol=1e-10, atol=1e-12)

    def test_im2col_matches_direct_path(self, rng):
        x = rng.normal(size=(2, 24, 20, 20)).astype(np.float32)
        for d in (1, 2, 4):
            w = rng.normal(size=(12, 24, 3, 3)).astype(np.float32)
            b = rng.normal(size=12).astype(np.float32)
            fast = conv2d(Tensor(x), spec(w, b, dilation=d, padding=d)).data
            ref = conv2d_direct(x.astype(np.float64), w.astype(np.float64), b, dilation=d, padding=d)
            assert np.linalg.norm(fast - ref) / np.linalg.norm(ref) < 1e-5

    def test_output_shape_enumeration(self, rng):
        for size, k, d, s in itertools.product(range(1, 17), (1, 3), (1, 2, 4), (1, 2)):
            for pad in (0, d * (k - 1) // 2):
                expected = (size + 2 * pad - d * (k - 1) - 1) // s + 1
                assert conv_output_extent(size, k, s, d, pad) == expected
                cs = spec(np.ones((1, 1, k, k)), stride=s, dilation=d, padding=pad)
                x = Tensor(np.ones((1, 1, size, size)))
                if expected < 1:
                    with pytest.raises(ValidationError):
                        conv2d(x, cs)
                else:
                    assert conv2d(x, cs).shape == (1, 1, expected, expected)

    def test_linear_in_input(self, rng):
        w = rng.normal(size=(5, 3, 3, 3))
        cs = spec(w, np.zeros(5), dilation=2, padding=2)
        x, y = rng.normal(size=(2, 1, 3, 10, 10))
        a, b = 1.7, -0.4
        lhs = conv2d(Tensor(a * x + b * y), cs).data
        rhs = a * conv2d(Tensor(x), cs).data + b * conv2d(Tensor(y), cs).data
        assert np.linalg.norm(lhs - rhs) / np.linalg.norm(rhs) < 1e-6

    def test_channel_mismatch_names_both_shapes(self):
        with pytest.raises(ValidationError, match=r"\(1, 2, 5, 5\).*\(4, 3, 3, 3\)"):
            conv2d(Tensor(np.zeros((1, 2, 5, 5))), spec(np.zeros((4, 3, 3, 3))))


class TestElementwise:
    def test_relu_negative_and_positive(self, rng):
        neg = -rng.random((1, 2, 3, 3)) - 0.1
        np.testing.assert_array_equal(relu(Tensor(neg)).data, 0)
        pos = rng.random((1, 2, 3, 3))
        np.testing.assert_array_equal(relu(Tensor(pos)).data, pos)

    def test_softmax_uniform_and_limit(self):
        eq = softmax_channels(Tensor(np.zeros((1, 2, 3, 3)))).data
        np.testing.assert_allclose(eq, 0.5)
        big = np.zeros((1, 2, 1, 1))
        big[0, 0], big[0, 1] = 1e4, -1e4
        out = softmax_channels(Tensor(big)).data
        assert np.isfinite(out).all()
        np.testing.assert_allclose(out[0, :, 0, 0], [1.0, 0.0])

    def test_softmax_sums_to_one(self, rng):
        out = softmax_channels(Tensor(rng.normal(scale=5, size=(3, 4, 5, 5)))).data
        np.testing.assert_allclose(out.sum(axis=1), 1.0, atol=1e-6)

    def test_softmax_needs_two_channels(self):
        with pytest.raises(ValidationError):
            softmax_channels(Tensor(np.zeros((1, 1, 2, 2))))


class TestBackward:
    def test_sum_gives_ones(self, rng):
        x = Tensor(rng.normal(size=(2, 3, 4, 4)), requires_grad=True)
        x.sum().backward()
        np.testing.assert_array_equal(x.grad, np.ones((2, 3, 4, 4)))

    def test_non_scalar_rejected(self):
        x = Tensor(np.ones((2, 2)), requires_grad=True)
        with pytest.raises(ValidationError):
            (x * 2.0).backward()

    def test_non_finite_loss_rejected(self):
        x = Tensor(np.array([0.0]), requires_grad=True)
        with pytest.raises(NumericError):
            log(x).sum().backward()

    def test_conv_weight_grad(self, rng):
        x = rng.normal(size=(2, 3, 8, 8))
        w = rng.normal(size=(4, 3, 3, 3))
        wt = Tensor(w, requires_grad=True)
        conv2d(Tensor(x), ConvSpec(wt, None, dilation=2, padding=2)).sum().backward()
        num = numeric_grad(lambda: conv2d(Tensor(x), spec(w, None, dilation=2, padding=2)).data.sum(), w)
        assert rel_error(wt.grad, num) < 1e-4

    def test_shared_parameter_accumulates(self, rng):
        x = rng.normal(size=(1, 2, 6, 6))
        w = rng.normal(size=(2, 2, 3, 3))
        wt = Tensor(w, requires_grad=True)

        def loss_fn(wa, wb):
            a = conv2d(Tensor(x), ConvSpec(wa, None, padding=1))
            b = conv2d(relu(a), ConvSpec(wb, None, dilation=2, padding=2))
            return square(a).sum() + tabs(b).sum()

        loss_fn(wt, wt).backward()
        wa, wb = w.copy(), w.copy()
        fd_a = numeric_grad(lambda: loss_fn(Tensor(wa), Tensor(wb)).item(), wa)
        fd_b = numeric_grad(lambda: loss_fn(Tensor(wa), Tensor(wb)).item(), wb)
        assert rel_error(wt.grad, fd_a + fd_b) < 1e-4

    def test_repeated_backward_accumulates(self, rng):
        x = Tensor(rng.normal(size=(1, 1, 2, 2)), requires_grad=True)
        x.sum().backward()
        x.sum().backward()
        np.testing.assert_array_equal(x.grad, 2.0)

    def test_no_grad_records_nothing(self, rng):
        x = Tensor(rng.normal(size=(1, 1, 2, 2)), requires_grad=True)
        with no_grad():
            y = relu(x)
        assert not y.requires_grad

    def test_clamp_grad_zero_outside(self):
        x = Tensor(np.array([-1.0, 0.5, 2.0]), requires_grad=True)
        clamp(x, 0.0, 1.0).sum().backward()
        np.testing.assert_array_equal(x.grad, [0.0, 1.0, 0.0])
