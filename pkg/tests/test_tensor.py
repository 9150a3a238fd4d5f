import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from teslnet import tensor as T
from teslnet.gradcheck import grad_check
from teslnet.tensor import GradTape, Param, ShapeError, Tensor


class TestMatmul:
    def test_identity(self):
        out = T.matmul(Tensor([[1.0, 0.0], [0.0, 1.0]]), Tensor([[3.0, 4.0], [5.0, 6.0]]))
        np.testing.assert_array_equal(out.data, [[3.0, 4.0], [5.0, 6.0]])

    def test_row_times_column(self):
        out = T.matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]]))
        np.testing.assert_array_equal(out.data, [[11.0]])

    def test_matches_triple_loop(self):
        rng = np.random.default_rng(3)
        a = rng.standard_normal((3, 4))
        b = rng.standard_normal((4, 2))
        ref = np.zeros((3, 2))
        for i in range(3):
            for j in range(2):
                for k in range(4):
                    ref[i, j] += a[i, k] * b[k, j]
        out = T.matmul(Tensor(a), Tensor(b)).data
        assert np.abs(out - ref).max() < 1e-12

    def test_shape_mismatch_names_shapes(self):
        with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
            T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


class TestSoftmax:
    def test_symmetry(self):
        out = T.softmax_lastdim(Tensor([0.0, 0.0]))
        np.testing.assert_allclose(out.data, [0.5, 0.5])

    def test_large_inputs_no_overflow(self):
        out = T.softmax_lastdim(Tensor([1000.0, 1000.0, 1000.0]))
        assert np.isfinite(out.data).all()
        np.testing.assert_allclose(out.data, [1 / 3] * 3)

    def test_matches_direct_formula(self):
        x = np.array([1.0, 2.0, 3.0])
        ref = np.exp(x) / np.exp(x).sum()
        out = T.softmax_lastdim(Tensor(x)).data
        assert np.abs(out - ref).max() < 1e-12

    @given(st.integers(0, 2**31 - 1))
    @settings(max_examples=50, deadline=None)
    def test_rows_sum_to_one(self, seed):
        rng = np.random.default_rng(seed)
        x = rng.uniform(-50, 50, size=(3, 7))
        out = T.softmax_lastdim(Tensor(x)).data
        assert out.min() >= 0.0
        np.testing.assert_allclose(out.sum(axis=-1), 1.0, atol=1e-6)


class TestBackward:
    def test_sum_gives_ones(self):
        p = Param(np.array([1.0, 2.0, 3.0]))
        with GradTape() as tape:
            loss = p.sum()
            tape.backward(loss)
        np.testing.assert_array_equal(p.grad, [1.0, 1.0, 1.0])

    def test_quadratic(self):
        p = Param(np.array([1.0, 2.0]))
        with GradTape() as tape:
            loss = (p * p).sum()
            tape.backward(loss)
        np.testing.assert_allclose(p.grad, [2.0, 4.0])

    def test_non_scalar_loss_rejected(self):
        p = Param(np.array([1.0, 2.0]))
        with GradTape() as tape:
            y = p * 2.0
            with pytest.raises(ValueError, match="scalar"):
                tape.backward(y)

    def test_backward_twice_doubles(self):
        p = Param(np.array([1.0, -2.0, 0.5]))
        with GradTape() as tape:
            loss = (p * p * p).sum()
            tape.backward(loss)
            once = p.grad.copy()
            tape.backward(loss)
        np.testing.assert_allclose(p.grad, 2.0 * once)

    def test_constant_contributes_nothing(self):
        p = Param(np.array([1.0, 2.0]))
        c = Tensor(np.array([5.0, 5.0]))
        with GradTape() as tape:
            loss = (p * c).sum()
            tape.backward(loss)
        assert c.grad is None
        np.testing.assert_allclose(p.grad, [5.0, 5.0])

    def test_unreachable_param_untouched(self):
        p = Param(np.array([1.0]))
        q = Param(np.array([2.0]))
        with GradTape() as tape:
            loss = (p * 3.0).sum()
            tape.backward(loss)
        np.testing.assert_array_equal(q.grad, [0.0])

    def test_composite_graph_matches_fd(self):
        rng = np.random.default_rng(11)
        x = Tensor(rng.standard_normal((3, 4)))
        w = Tensor(rng.standard_normal((4, 4)))

        def f(v):
            y = T.tanh(v @ w)
            return (T.sigmoid(y) * y).sum()

        assert grad_check(f, x) < 1e-4


class TestGradCheckHarness:
    def test_linear_is_exact(self):
        # integer values and a power-of-two step keep every FD term exact
        x = Tensor(np.array([1.0, -3.0, 7.0, 0.0, 2.0]))
        assert grad_check(lambda v: v.sum(), x, epsilon=0.25) == 0.0

    def test_sigmoid_at_zero(self):
        x = Tensor(np.zeros(4))
        err = grad_check(lambda v: T.sigmoid(v).sum(), x)
        assert err < 1e-8
        with GradTape() as tape:
            v = Tensor(np.zeros(4), requires_grad=True)
            v.grad = np.zeros(4)
            tape.backward(T.sigmoid(v).sum())
        np.testing.assert_allclose(v.grad, 0.25)

    def test_rejects_float32(self):
        x = Tensor(np.zeros(3, dtype=np.float32))
        x.requires_grad = True
        with pytest.raises(TypeError):
            from teslnet.gradcheck import grad_check_wrt
            grad_check_wrt(lambda: x.sum(), x)


class TestIndexing:
    @given(st.lists(st.integers(1, 4), min_size=1, max_size=5), st.integers(0, 2**31 - 1))
    @settings(max_examples=60, deadline=None)
    def test_row_major_roundtrip(self, shape, seed):
        # row-major flat index <-> coordinates agree with numpy's layout
        arr = np.arange(np.prod(shape)).reshape(shape)
        rng = np.random.default_rng(seed)
        coord = tuple(rng.integers(0, s) for s in shape)
        strides = np.cumprod([1] + shape[:0:-1])[::-1]
        flat = int(sum(c * s for c, s in zip(coord, strides)))
        assert arr[coord] == arr.reshape(-1)[flat]
        assert np.unravel_index(flat, shape) == coord

    def test_shape_matches_data_length(self):
        t = Tensor(np.zeros((2, 3, 4)))
        assert np.prod(t.shape) == t.data.size


class TestMiscOps:
    def test_concat_and_narrow_roundtrip(self):
        rng = np.random.default_rng(5)
        a, b = Tensor(rng.standard_normal((2, 3))), Tensor(rng.standard_normal((2, 2)))
        cat = T.concat([a, b], axis=1)
        np.testing.assert_array_equal(T.narrow(cat, 1, 0, 3).data, a.data)
        np.testing.assert_array_equal(T.narrow(cat, 1, 3, 2).data, b.data)

    def test_roll_inverse(self):
        x = Tensor(np.arange(16.0).reshape(4, 4))
        rolled = T.roll(x, (1, -2), (0, 1))
        back = T.roll(rolled, (-1, 2), (0, 1))
        np.testing.assert_array_equal(back.data, x.data)

    def test_take_lastdim_grad(self):
        table = Tensor(np.random.default_rng(2).standard_normal((2, 9)))
        idx = np.array([[0, 3], [3, 8]])
        err = grad_check(lambda v: (T.take_lastdim(v, idx)
                                    * Tensor(np.ones((2, 2, 2)))).sum(), table)
        assert err < 1e-8

    def test_no_nan_from_basic_ops(self):
        rng = np.random.default_rng(9)
        x = Tensor(rng.uniform(-5, 5, (4, 4)))
        for fn in (T.relu, T.gelu, T.sigmoid, T.tanh, T.softmax_lastdim):
            assert np.isfinite(fn(x).data).all()
