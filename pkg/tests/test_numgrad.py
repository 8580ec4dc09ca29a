import zlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from mvpseg import numgrad as ng
from oracles import assert_grad_close, central_diff


def fd_check(build, x0, rtol=1e-4):
    """Compare backward of ``build(node)`` with central differences."""
    p = ng.parameter(x0)
    ng.backward(build(p))
    numeric = central_diff(lambda v: build(ng.constant(v)).item(), x0)
    assert_grad_close(p.grad, numeric, rtol=rtol)


class TestSoftmax:
    def test_symmetric(self):
        np.testing.assert_allclose(ng.softmax_axis([0.0, 0.0], 0).value, [0.5, 0.5], atol=1e-15)

    def test_closed_form(self):
        y = ng.softmax_axis([np.log(3.0), np.log(1.0)], 0).value
        np.testing.assert_allclose(y, [0.75, 0.25], atol=1e-15)

    def test_matches_direct_formula(self):
        x = np.random.default_rng(0).normal(size=5)
        np.testing.assert_allclose(ng.softmax_axis(x, 0).value, np.exp(x) / np.exp(x).sum(), atol=1e-14)

    def test_large_inputs_stay_finite(self):
        y = ng.softmax_axis([1000.0, 1000.0, -1000.0], 0).value
        assert np.all(np.isfinite(y))
        np.testing.assert_allclose(y, [0.5, 0.5, 0.0], atol=1e-15)

    def test_empty_axis(self):
        with pytest.raises(ValueError, match="empty softmax axis"):
            ng.softmax_axis(np.zeros((3, 0)), 1)

    @settings(max_examples=50, deadline=None)
    @given(arrays(np.float64, (3, 4), elements=st.floats(-30, 30)), st.floats(-50, 50), st.integers(0, 1))
    def test_sums_to_one_and_shift_invariant(self, x, c, axis):
        y = ng.softmax_axis(x, axis).value
        np.testing.assert_allclose(y.sum(axis=axis), 1.0, atol=1e-12)
        np.testing.assert_allclose(ng.softmax_axis(x + c, axis).value, y, atol=1e-12)
        assert np.all(y > 0)


class TestL2Normalize:
    def test_three_four_five(self):
        np.testing.assert_allclose(ng.l2_normalize([3.0, 4.0]).value, [0.6, 0.8], atol=1e-15)

    def test_unit_passthrough(self):
        np.testing.assert_array_equal(ng.l2_normalize([1.0, 0.0, 0.0]).value, [1.0, 0.0, 0.0])

    def test_random_norm(self):
        y = ng.l2_normalize(np.random.default_rng(1).normal(size=8)).value
        assert abs(np.linalg.norm(y) - 1.0) < 1e-12

    def test_degenerate(self):
        with pytest.raises(ValueError, match="degenerate vector"):
            ng.l2_normalize([1e-13, 0.0])

    def test_gradient(self):
        fd_check(lambda x: ng.dot(ng.l2_normalize(x), ng.constant([0.3, -1.0, 2.0])), np.array([0.5, 1.5, -0.7]))


class TestBackward:
    def test_power_rule(self):
        x = ng.parameter(3.0)
        ng.backward(x * x)
        assert x.grad == 6.0

    def test_sigmoid_at_zero(self):
        x = ng.parameter(0.0)
        ng.backward(ng.sigmoid(x))
        assert x.grad == 0.25

    def test_non_scalar_rejected(self):
        with pytest.raises(ValueError, match="backward requires scalar"):
            ng.backward(ng.parameter([1.0, 2.0]))

    def test_accumulates_across_calls(self):
        x = ng.parameter(2.0)
        y = x * x
        ng.backward(y)
        ng.backward(y)
        assert x.grad == 8.0
        x.zero_grad()
        assert x.grad == 0.0

    def test_shared_subexpression(self):
        """A node used twice gets both contributions."""
        x = ng.parameter(1.5)
        t = ng.tanh(x)
        ng.backward(t * t + t)
        th = np.tanh(1.5)
        np.testing.assert_allclose(x.grad, (2 * th + 1) * (1 - th**2), rtol=1e-14)

    def test_composite_graph(self):
        rng = np.random.default_rng(2)
        W = rng.normal(size=(4, 3))
        b = rng.normal(size=(5, 3))

        def loss(x):
            z = ng.tanh(ng.matmul(x, ng.constant(W)))
            s = ng.softmax_axis(ng.add(z, ng.constant(b)), 1)
            return ng.mean_axis(ng.log_eps(s))

        fd_check(loss, rng.normal(size=(5, 4)))

    def test_constants_untouched(self):
        c = ng.constant([1.0, 2.0])
        before = c.value.copy()
        p = ng.parameter([0.5, 0.5])
        ng.backward(ng.sum_axis(ng.mul(c, p)))
        np.testing.assert_array_equal(c.value, before)
        np.testing.assert_array_equal(c.grad, 0.0)
        assert not c.requires_grad

    def test_tape_is_topological(self):
        x = ng.parameter([1.0, 2.0])
        y = ng.tanh(x)
        z = ng.sum_axis(ng.mul(y, x))
        order = ng.tape(z)
        pos = {n.id: i for i, n in enumerate(order)}
        for n in order:
            for parent in n.parents:
                if parent.requires_grad:
                    assert pos[parent.id] < pos[n.id]


class TestPrimitives:
    def test_matmul_identity(self):
        A = np.random.default_rng(3).normal(size=(3, 4))
        np.testing.assert_array_equal(ng.matmul(np.eye(3), A).value, A)

    def test_mean(self):
        assert ng.mean_axis([2.0, 4.0]).item() == 3.0

    def test_log_eps_clamps(self):
        assert ng.log_eps(0.0).item() == np.log(1e-12)

    def test_shape_error_names_op(self):
        with pytest.raises(ValueError, match=r"matmul.*\(2, 3\).*\(2, 3\)"):
            ng.matmul(np.ones((2, 3)), np.ones((2, 3)))
        with pytest.raises(ValueError, match=r"add.*\(2,\).*\(3,\)"):
            ng.add(np.ones(2), np.ones(3))

    @pytest.mark.parametrize(
        "name, build, shape",
        [
            ("add", lambda x: ng.sum_axis(ng.add(x, ng.tanh(x))), (3, 2)),
            ("sub", lambda x: ng.sum_axis(ng.sub(ng.tanh(x), x)), (4,)),
            ("mul", lambda x: ng.sum_axis(ng.mul(x, ng.sigmoid(x))), (2, 3)),
            ("mul_scalar", lambda x: ng.sum_axis(ng.mul_scalar(ng.tanh(x), 2.5)), (3,)),
            ("scalar_node_scale", lambda x: ng.sum_axis(ng.mul_scalar(x, ng.sum_axis(x))), (3,)),
            ("div_scalar", lambda x: ng.sum_axis(ng.div_scalar(ng.tanh(x), ng.sum_axis(ng.exp(x)))), (3,)),
            ("mean_axis", lambda x: ng.sum_axis(ng.tanh(ng.mean_axis(x, 0))), (3, 4)),
            ("sum_axis", lambda x: ng.sum_axis(ng.tanh(ng.sum_axis(x, 1))), (3, 4)),
            ("concat_axis", lambda x: ng.sum_axis(ng.tanh(ng.concat_axis([x, ng.mul(x, x)], 1))), (2, 3)),
            ("slice_axis", lambda x: ng.sum_axis(ng.tanh(ng.slice_axis(x, 1, 3, 1))), (2, 4)),
            ("tanh", lambda x: ng.sum_axis(ng.mul(ng.tanh(x), x)), (5,)),
            ("sigmoid", lambda x: ng.sum_axis(ng.mul(ng.sigmoid(x), x)), (5,)),
            ("log_eps", lambda x: ng.sum_axis(ng.log_eps(ng.sigmoid(x))), (5,)),
            ("exp", lambda x: ng.sum_axis(ng.exp(ng.tanh(x))), (5,)),
            ("dot", lambda x: ng.dot(ng.tanh(x), x), (5,)),
            ("matmul_vec", lambda x: ng.sum_axis(ng.tanh(ng.matmul(x, ng.sum_axis(x, 0)))), (3, 3)),
            ("transpose", lambda x: ng.sum_axis(ng.mul(ng.transpose(x), ng.constant(np.arange(6.0).reshape(3, 2)))), (2, 3)),
            ("reshape", lambda x: ng.sum_axis(ng.tanh(ng.matmul(ng.reshape(x, (3, 2)), ng.constant(np.ones(2))))), (6,)),
            ("expand", lambda x: ng.sum_axis(ng.tanh(ng.mul(ng.expand(x, (4, 3)), ng.constant(np.arange(12.0).reshape(4, 3))))), (3,)),
            ("stack", lambda x: ng.sum_axis(ng.tanh(ng.stack([x, ng.mul(x, x)], 1))), (3,)),
            ("softmax", lambda x: ng.dot(ng.softmax_axis(x, 0), ng.constant([1.0, -2.0, 0.5])), (3,)),
            ("abs", lambda x: ng.sum_axis(ng.abs_(ng.tanh(x))), (4,)),
        ],
    )
    def test_backward_matches_finite_differences(self, name, build, shape):
        x0 = np.random.default_rng(zlib.crc32(name.encode())).normal(size=shape)
        fd_check(build, x0)


class TestGradcheckHelper:
    def test_detects_wrong_gradient(self):
        p = ng.parameter([0.3, -0.2])

        def bad_square(x):
            # forward x^2, backward claims 3x
            return ng._make(x.value**2, "bad", (x,), lambda g: (g * 3 * x.value,))

        err = ng.gradcheck(lambda: ng.sum_axis(bad_square(p)), [p])
        assert err > 0.1

    def test_passes_correct_graph(self):
        p = ng.parameter(np.random.default_rng(4).normal(size=(2, 3)))
        err = ng.gradcheck(lambda: ng.mean_axis(ng.log_eps(ng.softmax_axis(p, 1))), [p])
        assert err < 1e-6
