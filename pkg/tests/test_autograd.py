"""Tape semantics, forward values and finite-difference gradients of the ops."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from numpy.testing import assert_allclose, assert_array_equal

from geoalign import autograd as ag
from geoalign.autograd import ShapeError, Tape, TapeError, Tensor
from oracles import finite_diff, max_rel_err


def grad_of(fn, x):
    with Tape() as tape:
        t = Tensor(x, requires_grad=True)
        out = fn(t)
    return tape.backward(out)[t]


def fd_check(fn, x, tol=1e-6):
    """Analytic vs central-difference gradient of sum(w * fn(x))."""
    x = np.asarray(x, dtype=np.float64)
    w = np.random.default_rng(7).standard_normal(fn(Tensor(x)).shape)
    scalar = lambda t: ag.sum(ag.mul(fn(t), Tensor(w)))
    analytic = grad_of(scalar, x)
    numeric = finite_diff(lambda v: float(scalar(Tensor(v)).data), x)
    assert max_rel_err(analytic, numeric) <= tol


class TestMatmul:
    def test_identity(self):
        assert_array_equal(ag.matmul(Tensor(np.eye(2)), Tensor(np.eye(2))).data, np.eye(2))

    def test_hand_arithmetic(self):
        out = ag.matmul(Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([[1.0], [1.0]]))
        assert_array_equal(out.data, [[3.0], [7.0]])

    def test_gradient(self):
        rng = np.random.default_rng(0)
        A, B = rng.standard_normal((3, 4)), rng.standard_normal((4, 2))
        fd_check(lambda a: ag.matmul(a, Tensor(B)), A)
        fd_check(lambda b: ag.matmul(Tensor(A), b), B)

    def test_shape_error_names_both_shapes(self):
        with pytest.raises(ShapeError, match=r"\(3, 4\).*\(3, 2\)"):
            ag.matmul(Tensor(np.zeros((3, 4))), Tensor(np.zeros((3, 2))))


class TestL2Normalize:
    def test_three_four_five(self):
        assert_allclose(ag.l2_normalize(Tensor([3.0, 4.0])).data, [0.6, 0.8], atol=1e-15)

    def test_zero_vector_preserved(self):
        assert_array_equal(ag.l2_normalize(Tensor([0.0, 0.0]), eps=1e-8).data, [0.0, 0.0])

    def test_gradient(self):
        fd_check(ag.l2_normalize, np.random.default_rng(1).standard_normal((2, 5)))

    @settings(max_examples=50, deadline=None)
    @given(arrays(np.float64, (3, 4), elements=st.floats(-5, 5)).filter(lambda a: (np.abs(a).sum(1) > 1e-3).all()),
           st.floats(1e-3, 1e3))
    def test_scale_invariance(self, x, alpha):
        assert_allclose(ag.l2_normalize(Tensor(alpha * x)).data, ag.l2_normalize(Tensor(x)).data,
                        atol=1e-10, rtol=0)


class TestLogSoftmax:
    def test_symmetric_row(self):
        assert_allclose(ag.log_softmax_rows(Tensor([[0.0, 0.0]])).data, [[-np.log(2)] * 2], atol=1e-15)

    def test_no_overflow(self):
        out = ag.log_softmax_rows(Tensor([[1000.0, 0.0]])).data
        assert np.all(np.isfinite(out))
        assert_allclose(out, [[0.0, -1000.0]], atol=1e-12)

    def test_rows_normalize(self):
        out = ag.log_softmax_rows(Tensor(np.random.default_rng(2).standard_normal((4, 6)))).data
        assert_allclose(np.exp(out).sum(axis=1), 1.0, atol=1e-14)

    def test_gradient(self):
        fd_check(ag.log_softmax_rows, np.random.default_rng(3).standard_normal((4, 4)))

    def test_masked_entries_excluded(self):
        x = np.array([[1.0, 2.0, 3.0]])
        mask = np.array([[True, False, True]])
        out = ag.log_softmax_rows(Tensor(x), mask).data
        assert_allclose(out[0, [0, 2]], x[0, [0, 2]] - np.log(np.exp(1) + np.exp(3)), atol=1e-14)

    @settings(max_examples=50, deadline=None)
    @given(arrays(np.float64, (3, 5), elements=st.floats(-30, 30)), st.floats(-100, 100))
    def test_shift_invariance(self, x, c):
        assert_allclose(ag.log_softmax_rows(Tensor(x + c)).data, ag.log_softmax_rows(Tensor(x)).data,
                        atol=1e-10, rtol=0)


class TestBilinearSample:
    def test_constant_map(self):
        fm = Tensor(np.full((3, 4, 5), 2.5))
        for y, x in [(0.3, 1.7), (3.0, 0.0), (-1.0, 9.0)]:
            assert_allclose(ag.bilinear_sample(fm, y, x).data, [2.5] * 3, atol=1e-15)

    def test_lattice_point(self):
        fm = np.random.default_rng(4).standard_normal((2, 4, 5))
        assert_allclose(ag.bilinear_sample(Tensor(fm), 2.0, 3.0).data, fm[:, 2, 3], atol=1e-15)

    def test_ramp(self):
        fm = np.broadcast_to(np.arange(5.0), (1, 4, 5))
        assert_allclose(ag.bilinear_sample(Tensor(fm), 1.0, 1.5).data, [1.5], atol=1e-15)

    def test_gradient(self):
        fd_check(lambda f: ag.bilinear_sample(f, 1.3, 2.6), np.random.default_rng(5).standard_normal((2, 3, 4)))


class TestBackward:
    def test_sum_gives_ones(self):
        assert_array_equal(grad_of(ag.sum, np.arange(6.0).reshape(2, 3)), np.ones((2, 3)))

    def test_square(self):
        assert float(grad_of(lambda t: ag.mul(t, t), 3.0)) == 6.0

    def test_fan_out_accumulates(self):
        # x used three times: d/dx (x*x + x) = 2x + 1
        g = grad_of(lambda t: ag.add(ag.mul(t, t), t), 2.0)
        assert float(g) == 5.0

    def test_repeated_backward_is_error(self):
        with Tape() as tape:
            x = Tensor(1.0, requires_grad=True)
            y = ag.mul(x, x)
        tape.backward(y)
        with pytest.raises(TapeError):
            tape.backward(y)

    def test_non_scalar_root_is_error(self):
        with Tape() as tape:
            y = ag.scale(Tensor([1.0, 2.0], requires_grad=True), 2.0)
        with pytest.raises(TapeError, match="scalar"):
            tape.backward(y)

    def test_linearity(self):
        rng = np.random.default_rng(6)
        x = rng.standard_normal((3, 4))
        f = lambda t: ag.sum(ag.exp(ag.scale(t, 0.3)))
        g = lambda t: ag.sum(ag.log_softmax_rows(t))
        both = grad_of(lambda t: ag.add(f(t), g(t)), x)
        assert_allclose(both, grad_of(f, x) + grad_of(g, x), atol=1e-12, rtol=0)

    def test_untracked_outside_tape(self):
        x = Tensor(2.0, requires_grad=True)
        with Tape() as tape:
            pass
        y = ag.mul(x, x)
        with pytest.raises(TapeError):
            tape.backward(y)


class TestElementwise:
    rng = np.random.default_rng(8)

    @pytest.mark.parametrize("op", [ag.exp, ag.gelu, ag.neg, lambda t: ag.scale(t, -1.7),
                                    lambda t: ag.add_scalar(t, 0.4), lambda t: ag.clamp(t, -0.5, 0.5)])
    def test_unary(self, op):
        fd_check(op, self.rng.standard_normal((3, 4)) + 0.01)

    def test_log(self):
        fd_check(ag.log, self.rng.uniform(0.2, 3.0, (3, 4)))

    @pytest.mark.parametrize("op", [ag.add, ag.sub, ag.mul, ag.div])
    def test_binary_and_bias_broadcast(self, op):
        a = self.rng.uniform(0.5, 2.0, (3, 4))
        b = self.rng.uniform(0.5, 2.0, (3, 4))
        bias = self.rng.uniform(0.5, 2.0, (4,))
        fd_check(lambda t: op(t, Tensor(b)), a)
        fd_check(lambda t: op(Tensor(a), t), b)
        fd_check(lambda t: op(Tensor(a), t), bias)
        fd_check(lambda t: op(Tensor(a), t), np.array(1.3))

    def test_other_broadcasts_rejected(self):
        with pytest.raises(ShapeError):
            ag.add(Tensor(np.zeros((3, 4))), Tensor(np.zeros((3, 1))))

    def test_gelu_values(self):
        assert_allclose(ag.gelu(Tensor([0.0, 10.0, -10.0])).data, [0.0, 10.0, 0.0], atol=1e-12)


class TestStructural:
    rng = np.random.default_rng(9)

    def test_layer_norm(self):
        x = self.rng.standard_normal((2, 3, 6))
        g, b = self.rng.standard_normal(6), self.rng.standard_normal(6)
        out = ag.layer_norm(Tensor(x), Tensor(np.ones(6)), Tensor(np.zeros(6))).data
        assert_allclose(out.mean(-1), 0.0, atol=1e-12)
        fd_check(lambda t: ag.layer_norm(t, Tensor(g), Tensor(b)), x)
        fd_check(lambda t: ag.layer_norm(Tensor(x), t, Tensor(b)), g)
        fd_check(lambda t: ag.layer_norm(Tensor(x), Tensor(g), t), b)

    @pytest.mark.parametrize("axis", [None, 0, 1, (1, 2)])
    def test_reductions(self, axis):
        x = self.rng.standard_normal((2, 3, 4))
        fd_check(lambda t: ag.sum(t, axis=axis), x)
        fd_check(lambda t: ag.mean(t, axis=axis), x)
        assert_allclose(ag.mean(Tensor(x), axis=axis).data, x.mean(axis=axis), atol=1e-15)

    def test_transpose_reshape_concat(self):
        x = self.rng.standard_normal((2, 3, 4))
        fd_check(lambda t: ag.transpose(t, (2, 0, 1)), x)
        fd_check(lambda t: ag.reshape(t, (6, 4)), x)
        fd_check(lambda t: ag.concat([t, ag.scale(t, 2.0)], axis=1), x)
        assert_array_equal(ag.concat([Tensor(x), Tensor(x)], axis=0).data, np.concatenate([x, x]))

    def test_slice_and_take(self):
        x = self.rng.standard_normal((5, 4))
        fd_check(lambda t: t[1:4, ::2], x)
        fd_check(lambda t: ag.take(t, [0, 3, 3, 1], axis=0), x)

    def test_batched_matmul(self):
        a, b = self.rng.standard_normal((2, 3, 4)), self.rng.standard_normal((2, 4, 5))
        fd_check(lambda t: ag.matmul(t, Tensor(b)), a)
        fd_check(lambda t: ag.matmul(Tensor(a), t), b)

    def test_average_pool(self):
        x = self.rng.standard_normal((3, 5, 6))
        out = ag.average_pool(Tensor(x), [1, 2, 3], [0, 4])
        assert_allclose(out.data, x[:, 1:4][:, :, [0, 4]].mean(axis=(1, 2)), atol=1e-14)
        fd_check(lambda t: ag.average_pool(t, [1, 2], [2, 3, 5]), x)

    def test_tensors_are_read_only(self):
        t = Tensor(np.zeros(3))
        with pytest.raises(ValueError):
            t.data[0] = 1.0


def test_finite_outputs_on_extreme_inputs():
    x = Tensor([[-800.0, 0.0, 800.0]])
    for op in (ag.log_softmax_rows, ag.softmax, ag.l2_normalize, ag.gelu):
        assert np.all(np.isfinite(op(x).data))
    assert np.all(np.isfinite(ag.log(Tensor([0.0, 1.0])).data))
