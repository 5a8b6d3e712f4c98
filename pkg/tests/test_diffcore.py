import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from dtfdmil import diffcore as dc
from dtfdmil.diffcore import Tensor

from conftest import numeric_grad, rel_err

F64 = np.float64


def t64(x, grad=True):
    return Tensor(np.asarray(x, dtype=F64), requires_grad=grad)


class TestTensor:
    def test_defaults_to_float32(self):
        assert Tensor([[1, 2]]).dtype == np.float32
        assert Tensor(np.zeros((2, 2))).dtype == np.float64

    def test_vector_becomes_row(self):
        assert Tensor([1.0, 2.0, 3.0]).shape == (1, 3)

    def test_empty_rejected(self):
        with pytest.raises(dc.DimensionError):
            Tensor(np.zeros((1, 0)))

    def test_three_dims_rejected(self):
        with pytest.raises(dc.DimensionError):
            Tensor(np.zeros((2, 2, 2)))


class TestMatmul:
    def test_identity(self):
        out = dc.matmul(Tensor(np.eye(2)), Tensor([[3.0, 4.0], [5.0, 6.0]]))
        np.testing.assert_array_equal(out.data, [[3, 4], [5, 6]])

    def test_dot(self):
        assert dc.matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]])).item() == 11.0

    def test_shape_error_names_both(self):
        with pytest.raises(dc.DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
            dc.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))

    def test_grad_vs_finite_differences(self, rng):
        A, B = rng.normal(size=(3, 3)), rng.normal(size=(3, 3))
        a, b = t64(A), t64(B)
        dc.backward(dc.reduce("sum", dc.matmul(a, b)))
        num = numeric_grad(lambda x, y: (x @ y).sum(), [A, B])
        assert rel_err(a.grad, num[0]) < 1e-6
        assert rel_err(b.grad, num[1]) < 1e-6


class TestElementwise:
    def test_sigmoid_zero(self):
        assert dc.sigmoid(Tensor([[0.0]])).item() == 0.5

    def test_tanh_zero(self):
        assert dc.tanh(Tensor([[0.0]])).item() == 0.0

    def test_mul(self):
        out = dc.elementwise("mul", Tensor([1.0, 2.0, 3.0]), Tensor([4.0, 5.0, 6.0]))
        np.testing.assert_array_equal(out.data, [[4, 10, 18]])

    def test_binary_shape_mismatch(self):
        with pytest.raises(dc.DimensionError):
            dc.add(Tensor([1.0, 2.0]), Tensor([1.0, 2.0, 3.0]))

    def test_log_domain(self):
        with pytest.raises(dc.DomainError):
            dc.log(Tensor([1.0, 0.0]))
        with pytest.raises(dc.DomainError):
            dc.log(Tensor([-1.0]))

    def test_unknown_tag(self):
        with pytest.raises(ValueError):
            dc.elementwise("cosh", Tensor([1.0]))

    def test_sigmoid_extremes_finite(self):
        y = dc.sigmoid(Tensor([[-800.0, 800.0]], dtype=F64)).data
        assert np.all(np.isfinite(y))
        assert y[0, 0] == 0.0 and y[0, 1] == 1.0

    @pytest.mark.parametrize("tag", ["tanh", "sigmoid", "exp"])
    def test_unary_grads(self, tag, rng):
        X = rng.normal(size=(3, 4))
        fns = {"tanh": np.tanh, "sigmoid": lambda v: 1 / (1 + np.exp(-v)), "exp": np.exp}
        x = t64(X)
        dc.backward(dc.reduce("sum", dc.elementwise(tag, x)))
        (num,) = numeric_grad(lambda v: fns[tag](v).sum(), [X])
        assert rel_err(x.grad, num) < 1e-6

    def test_log_grad(self, rng):
        X = rng.uniform(0.5, 3.0, size=(2, 3))
        x = t64(X)
        dc.backward(dc.reduce("sum", dc.log(x)))
        np.testing.assert_allclose(x.grad, 1 / X, rtol=1e-12)

    @pytest.mark.parametrize("tag", ["add", "sub", "mul"])
    def test_binary_grads(self, tag, rng):
        A, B = rng.normal(size=(2, 3)), rng.normal(size=(2, 3))
        fns = {"add": np.add, "sub": np.subtract, "mul": np.multiply}
        W = rng.normal(size=(2, 3))
        a, b = t64(A), t64(B)
        dc.backward(dc.reduce("sum", dc.mul(dc.elementwise(tag, a, b), t64(W, False))))
        num = numeric_grad(lambda x, y: (fns[tag](x, y) * W).sum(), [A, B])
        assert rel_err(a.grad, num[0]) < 1e-6
        assert rel_err(b.grad, num[1]) < 1e-6

    def test_scale(self):
        x = t64([[1.0, -2.0]])
        y = dc.elementwise("scale", x, 3.0)
        np.testing.assert_array_equal(y.data, [[3.0, -6.0]])
        dc.backward(dc.reduce("sum", y))
        np.testing.assert_array_equal(x.grad, [[3.0, 3.0]])


class TestSoftmax:
    def test_equal_logits(self):
        np.testing.assert_array_equal(dc.softmax_row(Tensor([[0.0, 0.0]])).data, [[0.5, 0.5]])

    def test_closed_form(self):
        x = Tensor([[math.log(1), math.log(2), math.log(3)]], dtype=F64)
        np.testing.assert_allclose(dc.softmax_row(x).data, [[1 / 6, 2 / 6, 3 / 6]], atol=1e-9)

    def test_shift_invariance_1000(self, rng):
        X = rng.normal(size=(1, 6))
        a = dc.softmax_row(Tensor(X, dtype=F64)).data
        b = dc.softmax_row(Tensor(X + 1000.0, dtype=F64)).data
        np.testing.assert_allclose(a, b, atol=1e-9)

    @settings(max_examples=100, deadline=None)
    @given(arrays(F64, st.integers(1, 12), elements=st.floats(-50, 50)), st.floats(-1e3, 1e3))
    def test_properties(self, x, c):
        y = dc.softmax_row(Tensor(x[None, :], dtype=F64)).data
        assert np.all(y > 0)
        assert abs(y.sum() - 1) < 1e-9
        y2 = dc.softmax_row(Tensor(x[None, :] + c, dtype=F64)).data
        np.testing.assert_allclose(y, y2, atol=1e-9)

    def test_grad(self, rng):
        X = rng.normal(size=(1, 5))
        W = rng.normal(size=(1, 5))

        def ref(v):
            e = np.exp(v - v.max())
            return float(((e / e.sum()) * W).sum())

        x = t64(X)
        dc.backward(dc.reduce("sum", dc.mul(dc.softmax_row(x), t64(W, False))))
        assert rel_err(x.grad, numeric_grad(ref, [X])[0]) < 1e-6


class TestReduce:
    def test_mean_rows(self):
        np.testing.assert_array_equal(dc.reduce("mean", Tensor([[1.0, 2.0], [3.0, 4.0]]), 0).data, [[2, 3]])

    def test_empty_row_errors(self):
        with pytest.raises(dc.DimensionError):
            dc.reduce("sum", Tensor(np.zeros((1, 0))))

    def test_invalid_axis(self):
        with pytest.raises(dc.DimensionError):
            dc.reduce("sum", Tensor([[1.0]]), axis=2)

    def test_mean_grad(self):
        x = t64(np.ones((3, 4)))
        dc.backward(dc.reduce("mean", x))
        np.testing.assert_allclose(x.grad, np.full((3, 4), 1 / 12))

    def test_mean_axis_grad(self):
        x = t64(np.ones((4, 2)))
        dc.backward(dc.reduce("sum", dc.reduce("mean", x, axis=0)))
        np.testing.assert_allclose(x.grad, np.full((4, 2), 0.25))


class TestBce:
    def test_confident_correct(self):
        assert dc.bce_loss(Tensor([[1 - 1e-7]], dtype=F64), 1).item() < 1e-6

    def test_half(self):
        assert abs(dc.bce_loss(Tensor([[0.5]], dtype=F64), 1).item() - math.log(2)) < 1e-9

    def test_clamped_zero(self):
        v = dc.bce_loss(Tensor([[0.0]], dtype=F64), 1).item()
        assert math.isfinite(v)
        assert abs(v + math.log(1e-7)) < 1e-9

    def test_clamped_one_negative_label(self):
        v = dc.bce_loss(Tensor([[1.0]], dtype=F64), 0).item()
        assert math.isfinite(v) and v > 15

    def test_bad_label(self):
        with pytest.raises(ValueError):
            dc.bce_loss(Tensor([[0.5]]), 2)

    @pytest.mark.parametrize("y", [0, 1])
    def test_grad(self, y):
        p = t64([[0.3]])
        dc.backward(dc.bce_loss(p, y))
        expected = -1 / 0.3 if y == 1 else 1 / 0.7
        assert abs(p.grad[0, 0] - expected) < 1e-9


class TestBackward:
    def test_sum_gives_ones(self, rng):
        x = t64(rng.normal(size=(3, 2)))
        dc.backward(dc.reduce("sum", x))
        np.testing.assert_array_equal(x.grad, np.ones((3, 2)))

    def test_square(self, rng):
        X = rng.normal(size=(2, 5))
        x = t64(X)
        dc.backward(dc.reduce("sum", dc.mul(x, x)))
        np.testing.assert_allclose(x.grad, 2 * X, rtol=1e-15)

    def test_non_scalar_root(self):
        with pytest.raises(dc.GraphError):
            dc.backward(t64(np.ones((2, 2))))

    def test_accumulates_and_resets(self, rng):
        x = t64(rng.normal(size=(2, 2)))
        loss = dc.reduce("sum", dc.mul(x, x))
        dc.backward(loss)
        first = x.grad.copy()
        dc.backward(loss)
        np.testing.assert_array_equal(x.grad, 2 * first)
        dc.zero_grad([x])
        assert x.grad is None

    def test_three_layer_composite(self, rng):
        X, W1, W2, W3 = (rng.normal(size=s) for s in [(4, 5), (5, 6), (6, 3), (3, 1)])

        def ref(x, a, b, c):
            h = np.tanh(x @ a)
            h = 1 / (1 + np.exp(-(h @ b)))
            return float(np.exp(h @ c * 0.1).sum())

        leaves = [t64(v) for v in (X, W1, W2, W3)]
        h = dc.tanh(leaves[0] @ leaves[1])
        h = dc.sigmoid(h @ leaves[2])
        out = dc.reduce("sum", dc.exp(dc.scale(h @ leaves[3], 0.1)))
        dc.backward(out)
        nums = numeric_grad(ref, [X, W1, W2, W3])
        for leaf, num in zip(leaves, nums):
            assert rel_err(leaf.grad, num) < 1e-6

    def test_additivity(self, rng):
        X = rng.normal(size=(3, 3))

        def f(x):
            return dc.reduce("sum", dc.tanh(x))

        def g(x):
            return dc.reduce("mean", dc.exp(x))

        x1 = t64(X)
        dc.backward(dc.add(f(x1), g(x1)))
        x2 = t64(X)
        dc.backward(f(x2))
        dc.backward(g(x2))
        np.testing.assert_array_equal(x1.grad, x2.grad)

    def test_additivity_multi_use(self, rng):
        # several contributions per subgraph: equal up to summation order
        X = rng.normal(size=(3, 3))

        def g(x):
            return dc.reduce("mean", dc.mul(x, x))

        x1 = t64(X)
        dc.backward(dc.add(dc.reduce("sum", dc.tanh(x1)), g(x1)))
        x2 = t64(X)
        dc.backward(dc.reduce("sum", dc.tanh(x2)))
        dc.backward(g(x2))
        np.testing.assert_allclose(x1.grad, x2.grad, rtol=0, atol=1e-15)

    def test_grad_function_leaves_dot_grad(self, rng):
        x = t64(rng.normal(size=(2, 3)))
        y = dc.tanh(x)
        root = dc.reduce("sum", dc.mul(y, y))
        (gy,) = dc.grad(root, [y])
        np.testing.assert_allclose(gy, 2 * y.data)
        assert x.grad is None and y.grad is None

    def test_index_and_transpose_grads(self, rng):
        X = rng.normal(size=(3, 4))
        x = t64(X)
        dc.backward(dc.reduce("sum", dc.mul(dc.transpose(x)[1:3, 0:2], dc.transpose(x)[1:3, 0:2])))
        expected = np.zeros_like(X)
        expected[0:2, 1:3] = 2 * X[0:2, 1:3]
        np.testing.assert_allclose(x.grad, expected)

    def test_broadcast_grad(self, rng):
        c = t64(rng.normal(size=(3, 1)))
        r = t64(rng.normal(size=(1, 4)))
        out = dc.reduce("sum", dc.mul(dc.broadcast_to(c, (3, 4)), dc.broadcast_to(r, (3, 4))))
        dc.backward(out)
        np.testing.assert_allclose(c.grad, np.full((3, 1), r.data.sum()))
        np.testing.assert_allclose(r.grad, np.full((1, 4), c.data.sum()))

    def test_determinism(self, rng):
        X = rng.normal(size=(5, 5)).astype(np.float32)

        def run():
            x = Tensor(X.copy(), requires_grad=True)
            dc.backward(dc.reduce("sum", dc.softmax_row(dc.tanh(x @ x))))
            return x.grad

        np.testing.assert_array_equal(run(), run())


class TestGradCheck:
    def test_sum_exact(self, rng):
        assert dc.grad_check(lambda x: dc.reduce("sum", x), Tensor(rng.normal(size=(3, 4)))) < 1e-10

    def test_bce_sigmoid(self, rng):
        for _ in range(20):
            x = Tensor(rng.normal(size=(1, 1)) * 2)
            err = dc.grad_check(lambda v: dc.bce_loss(dc.sigmoid(v), 1), x)
            assert err < 1e-6

    def test_detects_wrong_gradient(self):
        def bad(x):
            y = dc.tanh(x)
            y._backward = lambda g: (3 * g,)
            return dc.reduce("sum", y)

        assert dc.grad_check(bad, Tensor([[0.3, -0.2]])) > 0.5

    def test_multiple_inputs(self, rng):
        a, b = Tensor(rng.normal(size=(2, 3))), Tensor(rng.normal(size=(3, 2)))
        assert dc.grad_check(lambda x, y: dc.reduce("sum", dc.tanh(x @ y)), [a, b]) < 1e-6


class TestAdam:
    def test_zero_grad_no_change(self, rng):
        p = Tensor(rng.normal(size=(2, 2)), requires_grad=True)
        before = p.data.copy()
        state = dc.AdamState.for_params([p])
        dc.adam_step([p], [np.zeros((2, 2))], state, dc.AdamConfig(lr=0.1, weight_decay=0.0))
        np.testing.assert_array_equal(p.data, before)
        assert state.t == 1

    def test_first_step_oracle(self):
        # hand-rolled: m = 0.1, v = 0.001, m_hat = 1, v_hat = 1 -> step = lr / (1 + eps)
        p = Tensor(np.array([[1.0]]), requires_grad=True)
        state = dc.AdamState.for_params([p])
        dc.adam_step([p], [np.array([[1.0]])], state,
                     dc.AdamConfig(lr=0.1, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.0))
        assert abs((1.0 - p.data[0, 0]) - 0.1 / (1 + 1e-8)) < 1e-12

    def test_deterministic(self, rng):
        P, G = rng.normal(size=(3, 3)), rng.normal(size=(3, 3))
        results = []
        for _ in range(2):
            p = Tensor(P.copy(), requires_grad=True)
            st_ = dc.AdamState.for_params([p])
            for _ in range(3):
                dc.adam_step([p], [G], st_, dc.AdamConfig(lr=0.01))
            results.append(p.data.copy())
        np.testing.assert_array_equal(results[0], results[1])

    def test_weight_decay_added_to_gradient(self):
        p = Tensor(np.array([[2.0]]), requires_grad=True)
        state = dc.AdamState.for_params([p])
        dc.adam_step([p], [np.zeros((1, 1))], state, dc.AdamConfig(lr=0.1, weight_decay=0.5))
        assert p.data[0, 0] < 2.0
        np.testing.assert_allclose(state.m[0], [[0.1 * 0.5 * 2.0]])

    def test_shape_mismatch(self):
        p = Tensor(np.ones((2, 2)), requires_grad=True)
        with pytest.raises(dc.DimensionError):
            dc.adam_step([p], [np.ones((2, 3))], dc.AdamState.for_params([p]))

    def test_zero_lr_bitwise(self, rng):
        p = Tensor(rng.normal(size=(4, 4)).astype(np.float32), requires_grad=True)
        before = p.data.copy()
        dc.adam_step([p], [rng.normal(size=(4, 4)).astype(np.float32)], dc.AdamState.for_params([p]),
                     dc.AdamConfig(lr=0.0))
        assert p.data.tobytes() == before.tobytes()

    def test_counter_increments(self):
        p = Tensor(np.ones((1, 1)), requires_grad=True)
        opt = dc.Adam([p])
        for i in range(3):
            p.grad = np.ones((1, 1))
            opt.step()
            assert opt.state.t == i + 1


class TestRng:
    def test_same_seed_same_stream(self):
        a = dc.make_rng(7).standard_normal(5)
        b = dc.make_rng(7).standard_normal(5)
        np.testing.assert_array_equal(a, b)

    def test_named_generator(self):
        assert isinstance(dc.make_rng(1).bit_generator, np.random.Philox)

    def test_frozen_stream(self):
        # guards against accidental generator swaps
        assert dc.make_rng(0).integers(0, 2**31, size=3).tolist() == dc.make_rng(0).integers(0, 2**31, size=3).tolist()
        assert dc.derive_seed("a", 1) == dc.derive_seed("a", 1)
        assert dc.derive_seed("a", 1) != dc.derive_seed("a", 2)
