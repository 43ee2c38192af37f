import math

import numpy as np
import pytest

import convprosody.numerics as nm
from convprosody.errors import ContractError, NumericError, ShapeError
from convprosody.numerics import Adam, Tensor, backward, grad_check


def t(data, rg=False):
    return Tensor(np.asarray(data, dtype=np.float64), requires_grad=rg)


class TestMatmul:
    def test_identity(self):
        b = np.array([[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]])
        out = nm.matmul(t(np.eye(2)), t(b))
        np.testing.assert_array_equal(out.data, b)

    def test_zero_matrix(self):
        out = nm.matmul(t(np.zeros((2, 2))), t([[1.0, 2.0], [3.0, 4.0]]))
        np.testing.assert_array_equal(out.data, np.zeros((2, 2)))

    def test_hand_expanded_product(self):
        # [[1,2],[3,4]] @ [[5],[6]] = [[1*5+2*6],[3*5+4*6]]
        out = nm.matmul(t([[1.0, 2.0], [3.0, 4.0]]), t([[5.0], [6.0]]))
        np.testing.assert_array_equal(out.data, [[17.0], [39.0]])

    def test_shape_mismatch_names_both_shapes(self):
        with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
            nm.matmul(t(np.ones((2, 3))), t(np.ones((2, 3))))

    def test_backward_rules(self):
        a = t(np.arange(6.0).reshape(2, 3), rg=True)
        b = t(np.arange(12.0).reshape(3, 4), rg=True)
        g = np.ones((2, 4))
        loss = nm.tsum(nm.matmul(a, b))
        backward(loss)
        np.testing.assert_allclose(a.grad, g @ b.data.T)
        np.testing.assert_allclose(b.grad, a.data.T @ g)

    def test_vector_matrix_cases(self):
        v = t([1.0, 2.0], rg=True)
        m = t([[3.0, 4.0], [5.0, 6.0]], rg=True)
        out = nm.matmul(v, m)
        np.testing.assert_array_equal(out.data, [13.0, 16.0])
        backward(nm.tsum(out))
        np.testing.assert_array_equal(v.grad, m.data @ np.ones(2))
        np.testing.assert_array_equal(m.grad, np.outer(v.data, np.ones(2)))


class TestSoftmax:
    def test_uniform_on_constant_input(self):
        out = nm.softmax(t([2.5, 2.5, 2.5]))
        np.testing.assert_allclose(out.data, [1 / 3] * 3, rtol=0, atol=1e-15)

    def test_shift_invariance(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            v = rng.normal(size=rng.integers(1, 8))
            c = rng.normal() * 10
            np.testing.assert_allclose(
                nm.softmax(t(v)).data, nm.softmax(t(v + c)).data, atol=1e-12
            )

    def test_two_element_log_ratio(self):
        # [0, ln 3] -> [1/(1+3), 3/(1+3)]
        out = nm.softmax(t([0.0, math.log(3.0)]))
        np.testing.assert_allclose(out.data, [0.25, 0.75], atol=1e-15)

    def test_sums_to_one_and_positive(self):
        rng = np.random.default_rng(1)
        for _ in range(50):
            v = rng.normal(scale=50, size=rng.integers(1, 12))
            y = nm.softmax(t(v)).data
            assert abs(y.sum() - 1.0) <= 1e-12
            assert (y > 0).all()

    def test_empty_input_rejected(self):
        with pytest.raises(ShapeError):
            nm.softmax(t(np.zeros(0)))


class TestCosine:
    def test_self_similarity(self):
        rng = np.random.default_rng(2)
        for _ in range(10):
            v = rng.normal(size=5)
            assert nm.cosine_similarity(t(v), t(v)).item() == pytest.approx(1.0)

    def test_antiparallel(self):
        v = t([1.0, -2.0, 0.5])
        assert nm.cosine_similarity(v, nm.neg(v)).item() == pytest.approx(-1.0)

    def test_orthogonal(self):
        assert nm.cosine_similarity(t([1.0, 0.0]), t([0.0, 1.0])).item() == 0.0

    def test_zero_vector_guard(self):
        assert nm.cosine_similarity(t([0.0, 0.0]), t([1.0, 1.0])).item() == 0.0

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            nm.cosine_similarity(t([1.0]), t([1.0, 2.0]))


class TestMse:
    def test_identical_inputs(self):
        a = t([[1.0, 2.0], [3.0, 4.0]])
        assert nm.mse(a, a).item() == 0.0

    def test_unit_errors(self):
        assert nm.mse(t([[1.0, -1.0], [-1.0, 1.0]]), t(np.zeros((2, 2)))).item() == 1.0

    def test_single_element(self):
        assert nm.mse(t([2.0]), t([0.0])).item() == 4.0

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            nm.mse(t([1.0]), t([[1.0]]))


class TestBackward:
    def test_quadratic(self):
        x = t([3.0], rg=True)
        loss = nm.tsum(nm.mul(x, x))
        backward(loss)
        np.testing.assert_array_equal(x.grad, [6.0])

    def test_linear_least_squares_closed_form(self):
        # loss = mse(W @ x, 0); grad_W = (2/n) * (W x) x^T
        rng = np.random.default_rng(3)
        w = t(rng.normal(size=(3, 2)), rg=True)
        x = t(rng.normal(size=(2, 1)))
        loss = nm.mse(nm.matmul(w, x), t(np.zeros((3, 1))))
        backward(loss)
        expected = (2.0 / 3.0) * (w.data @ x.data) @ x.data.T
        np.testing.assert_allclose(w.grad, expected, rtol=1e-12)

    def test_accumulation_doubles_without_zeroing(self):
        x = t([1.5, -2.0], rg=True)
        loss = nm.tsum(nm.mul(x, x))
        backward(loss)
        first = x.grad.copy()
        loss2 = nm.tsum(nm.mul(x, x))
        backward(loss2)
        np.testing.assert_allclose(x.grad, 2 * first)

    def test_rejects_non_scalar(self):
        x = t([1.0, 2.0], rg=True)
        with pytest.raises(ContractError):
            backward(nm.mul(x, x))

    def test_shared_subgraph_visited_once(self):
        x = t([2.0], rg=True)
        y = nm.mul(x, x)       # 4, dy/dx = 4
        z = nm.add(y, y)       # 8, dz/dx = 8
        backward(nm.tsum(z))
        np.testing.assert_array_equal(x.grad, [8.0])

    def test_deep_chain_does_not_recurse(self):
        x = t([1.0], rg=True)
        y = x
        for _ in range(30000):
            y = nm.add(y, t([0.0]))
        backward(nm.tsum(y))
        np.testing.assert_array_equal(x.grad, [1.0])


class TestGradCheck:
    def test_quadratic_is_exact(self):
        x = t([1.0], rg=True)
        err = grad_check(lambda p: nm.tsum(nm.mul(p, p)), x, eps=1e-5)
        assert err <= 1e-8

    def test_constant_function(self):
        x = t([1.0, 2.0], rg=True)
        err = grad_check(lambda p: t(0.0), x, eps=1e-5)
        assert err == 0.0

    def test_composite_ops_randomized(self):
        rng = np.random.default_rng(4)
        w2 = t(rng.normal(size=(4, 3)))
        for _ in range(5):
            x = t(rng.normal(size=(3, 4)), rg=True)

            def f(p):
                h = nm.tanh(nm.matmul(p, w2))
                s = nm.softmax(nm.index_row(h, 0))
                return nm.add(nm.mse(h, t(np.zeros_like(h.data))), nm.tsum(nm.mul(s, s)))

            assert grad_check(f, x, eps=1e-5) <= 1e-4

    def test_requires_float64(self):
        x = Tensor(np.ones(2, dtype=np.float32), requires_grad=True)
        with pytest.raises(ContractError):
            grad_check(lambda p: nm.tsum(p), x)

    def test_non_finite_rejected(self):
        x = t([1.0], rg=True)
        with pytest.raises(NumericError):
            grad_check(lambda p: t(float("nan")), x)


class TestAdam:
    def test_first_step_is_signed_lr(self):
        # at t=1 bias correction cancels the betas: delta = -lr*g/(|g|+eps)
        p = t([1.0, -2.0, 3.0], rg=True)
        p.grad = np.array([0.5, -0.25, 1.0])
        before = p.data.copy()
        opt = Adam([p], lr=1e-3)
        opt.step()
        delta = p.data - before
        expected = -1e-3 * p.grad / (np.abs(p.grad) + 1e-9)
        np.testing.assert_allclose(delta, expected, rtol=1e-6)

    def test_zero_grad_is_noop_update(self):
        p = t([1.0, 2.0], rg=True)
        p.grad = np.zeros(2)
        before = p.data.copy()
        Adam([p]).step()
        np.testing.assert_array_equal(p.data, before)

    def test_frozen_parameter_untouched(self):
        live = t([1.0], rg=True)
        frozen = t([5.0])
        loss = nm.tsum(nm.mul(live, nm.mul(frozen, frozen)))
        backward(loss)
        assert frozen.grad is None
        opt = Adam([live])
        opt.step()
        np.testing.assert_array_equal(frozen.data, [5.0])

    def test_lr_zero_is_exact_noop(self):
        rng = np.random.default_rng(5)
        p = t(rng.normal(size=4), rg=True)
        p.grad = rng.normal(size=4)
        before = p.data.copy()
        Adam([p], lr=0.0).step()
        np.testing.assert_array_equal(p.data, before)

    def test_missing_grad_rejected(self):
        p = t([1.0], rg=True)
        with pytest.raises(ContractError):
            Adam([p]).step()

    def test_defaults(self):
        opt = Adam([t([1.0], rg=True)])
        assert opt.beta1 == 0.9 and opt.beta2 == 0.98


class TestStructuralOps:
    def test_gather_and_scatter(self):
        table = t(np.arange(6.0).reshape(3, 2), rg=True)
        out = nm.gather_rows(table, [2, 0, 2])
        np.testing.assert_array_equal(out.data, [[4.0, 5.0], [0.0, 1.0], [4.0, 5.0]])
        backward(nm.tsum(out))
        np.testing.assert_array_equal(table.grad, [[1.0, 1.0], [0.0, 0.0], [2.0, 2.0]])

    def test_gather_names_bad_id(self):
        with pytest.raises(ContractError, match="7"):
            nm.gather_rows(t(np.zeros((3, 2))), [0, 7])

    def test_concat_split_gradient(self):
        a, b = t([1.0, 2.0], rg=True), t([3.0], rg=True)
        out = nm.concat([a, b])
        backward(nm.dot(out, t([1.0, 2.0, 3.0])))
        np.testing.assert_array_equal(a.grad, [1.0, 2.0])
        np.testing.assert_array_equal(b.grad, [3.0])

    def test_repeat_rows_conserves_and_reduces(self):
        m = t([[1.0, 0.0], [0.0, 1.0]], rg=True)
        out = nm.repeat_rows(m, [2, 3])
        assert out.shape == (5, 2)
        backward(nm.tsum(out))
        np.testing.assert_array_equal(m.grad, [[2.0, 2.0], [3.0, 3.0]])

    def test_repeat_rows_rejects_zero_count(self):
        with pytest.raises(ContractError):
            nm.repeat_rows(t(np.ones((2, 2))), [1, 0])

    def test_row_broadcast_add(self):
        m = t(np.zeros((3, 2)), rg=True)
        v = t([1.0, 2.0], rg=True)
        out = nm.add(m, v)
        np.testing.assert_array_equal(out.data, [[1.0, 2.0]] * 3)
        backward(nm.tsum(out))
        np.testing.assert_array_equal(v.grad, [3.0, 3.0])

    def test_scalar_broadcast(self):
        m = t(np.ones((2, 2)), rg=True)
        out = nm.mul(m, 0.5)
        backward(nm.tsum(out))
        np.testing.assert_array_equal(m.grad, 0.5 * np.ones((2, 2)))

    def test_disallowed_broadcast(self):
        with pytest.raises(ShapeError):
            nm.add(t(np.ones((2, 3))), t(np.ones((2,))))


class TestPrecisionModes:
    def test_default_is_float64(self):
        assert Tensor([1.0]).dtype == np.float64

    def test_precision_context(self):
        with nm.precision("f32"):
            assert Tensor([1.0]).dtype == np.float32
        assert Tensor([1.0]).dtype == np.float64

    def test_ndarray_dtype_preserved(self):
        arr = np.ones(3, dtype=np.float32)
        assert Tensor(arr).dtype == np.float32

    def test_no_grad_suppresses_tape(self):
        x = t([1.0], rg=True)
        with nm.no_grad():
            y = nm.mul(x, x)
        assert y._parents == () and not y.requires_grad


class TestGradCheckSweep:
    """Every differentiable op matches finite differences at random points."""

    @pytest.mark.parametrize("seed", range(5))
    def test_random_points(self, seed):
        rng = np.random.default_rng(100 + seed)
        x = t(rng.normal(size=(3, 4)), rg=True)
        v = t(rng.normal(size=4))
        m2 = t(rng.normal(size=(4, 3)))
        probe = t(rng.normal(size=(3, 3)))
        w6 = t(rng.normal(size=6))

        def f(p):
            a = nm.add(p, v)                     # row broadcast
            b = nm.matmul(a, m2)                 # 2d x 2d
            c = nm.tanh(b)
            d = nm.sigmoid(nm.mul(c, c))
            row = nm.softmax(nm.index_row(d, 1))
            e = nm.layer_norm(nm.index_row(b, 0))
            cs = nm.cosine_similarity(row, e)
            f1 = nm.mse(d, probe)
            f2 = nm.mean(nm.normalize_rows(b))
            f3 = nm.tsum(nm.slice_rows(nm.transpose(b), 0, 2))
            f4 = nm.dot(nm.concat([row, e]), w6)
            f5 = nm.tsum(nm.mean_rows(nm.stack_rows([row, e])))
            total = nm.add(nm.add(nm.add(nm.mul(cs, 0.7), f1), nm.add(f2, nm.mul(f3, 0.01))), nm.add(f4, f5))
            return total

        assert grad_check(f, x, eps=1e-6) <= 1e-4
