import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from neighbor_transfer.diffcore import (PRIMITIVES, Graph, GraphError, apply, backward,
                                        finite_difference_check)

finite = st.floats(-3, 3, allow_nan=False, width=64)
# bounded away from zero so no gradient coordinate is vanishingly small
moderate = st.floats(0.2, 1.5, allow_nan=False, width=64)


def grads_of(f, *arrays):
    g = Graph()
    ts = [g.param(a) for a in arrays]
    backward(f(*ts))
    return [t.grad for t in ts]


class TestForward:
    def test_matmul_shapes(self, rng):
        g = Graph()
        a, b = g.param(rng.normal(size=(3, 4))), g.param(rng.normal(size=(4, 2)))
        assert (a @ b).shape == (3, 2)

    def test_matmul_shape_error_names_primitive(self):
        g = Graph()
        with pytest.raises(ValueError, match="matmul.*\\(3, 4\\).*\\(3, 2\\)"):
            g.param(np.ones((3, 4))) @ g.param(np.ones((3, 2)))

    def test_broadcast_error(self):
        g = Graph()
        with pytest.raises(ValueError, match="add"):
            g.param(np.ones(3)) + g.param(np.ones(4))

    def test_unknown_primitive(self):
        g = Graph()
        with pytest.raises(ValueError, match="softplus"):
            apply("softplus", g.param(np.ones(2)))

    def test_mixed_graphs_rejected(self):
        a, b = Graph().param(np.ones(2)), Graph().param(np.ones(2))
        with pytest.raises(GraphError):
            a + b

    def test_cosine_zero_norm(self):
        g = Graph()
        with pytest.raises(ValueError, match="zero-norm"):
            apply("cosine", g.param(np.zeros((1, 3))), g.param(np.ones((1, 3))))

    def test_log_softmax_normalizes(self, rng):
        g = Graph()
        z = g.param(rng.normal(size=(4, 6)) * 10)
        assert np.allclose(np.exp(z.log_softmax().value).sum(axis=1), 1.0)

    def test_primitive_registry_covers_core(self):
        for name in ("matmul", "add", "scale", "relu", "clamp_min", "sigmoid", "log_softmax",
                     "cosine", "sum", "mean", "gather_row"):
            assert name in PRIMITIVES


class TestBackward:
    def test_non_scalar_root(self):
        g = Graph()
        with pytest.raises(GraphError, match="scalar"):
            backward(g.param(np.ones(3)) * 2.0)

    def test_graph_used_once(self):
        g = Graph()
        x = g.param(np.ones(3))
        y = x.sum()
        backward(y)
        with pytest.raises(GraphError):
            backward(y)

    def test_known_gradients(self):
        x = np.array([1.0, -2.0, 3.0])
        (gx,) = grads_of(lambda t: t.square().sum(), x)
        assert np.array_equal(gx, 2 * x)
        (gx,) = grads_of(lambda t: t.relu().sum(), x)
        assert np.array_equal(gx, [1.0, 0.0, 1.0])

    def test_fan_out_accumulates(self):
        (gx,) = grads_of(lambda t: (t * t + t).sum(), np.array([2.0]))
        assert gx[0] == pytest.approx(5.0)

    def test_gather_row_duplicates_accumulate(self):
        (gx,) = grads_of(lambda t: apply("gather_row", t, index=np.array([0, 0, 2])).sum(),
                         np.arange(6.0).reshape(3, 2))
        assert np.array_equal(gx, [[2, 2], [0, 0], [1, 1]])

    def test_constants_get_no_grad(self):
        g = Graph()
        c = g.constant(np.ones(2))
        p = g.param(np.ones(2))
        backward((c * p).sum())
        assert c.grad is None and np.array_equal(p.grad, [1.0, 1.0])


class TestFiniteDifferences:
    @pytest.mark.parametrize("name,f", [
        ("tanh", lambda a: a.tanh().sum()),
        ("sigmoid", lambda a: a.sigmoid().square().sum()),
        ("exp", lambda a: (a * 0.3).exp().sum()),
        ("log_softmax", lambda a: apply("gather_row", a.log_softmax(axis=1).reshape(-1), index=np.array([1, 5])).sum()),
        ("log_sigmoid", lambda a: apply("log_sigmoid", a).sum()),
        ("mean", lambda a: a.mean(axis=0).square().sum()),
        ("concat", lambda a: apply("concat", a, a * 2.0, axis=1).square().sum()),
    ])
    def test_unary(self, rng, name, f):
        x = rng.normal(size=(3, 4))
        assert finite_difference_check(f, [x]) < 1e-6, name

    def test_cosine(self, rng):
        a, b = rng.normal(size=(4, 5)), rng.normal(size=(4, 5))
        err = finite_difference_check(lambda u, v: apply("cosine", u, v).sum(), [a, b])
        assert err < 1e-6

    def test_broadcast_mul_add(self, rng):
        a, b = rng.normal(size=(3, 4)), rng.normal(size=(4,))
        assert finite_difference_check(lambda u, v: ((u * v) + v).square().sum(), [a, b]) < 1e-6

    def test_relu_kinks_skipped(self):
        # coordinates sitting on the kink are skipped rather than reported
        x = np.array([0.0, 1.0, -1.0])
        assert finite_difference_check(lambda t: t.relu().sum(), [x]) < 1e-8

    def test_nonfinite_raises(self):
        with pytest.raises(FloatingPointError):
            finite_difference_check(lambda t: (t * 1e308).exp().sum(), [np.ones(2)])

    @given(arrays(np.float64, (3, 4), elements=moderate), arrays(np.float64, (4, 2), elements=moderate))
    def test_matmul_property(self, a, b):
        assert finite_difference_check(lambda u, v: (u @ v).square().sum(), [a, b]) < 1e-6

    @given(arrays(np.float64, 5, elements=finite))
    def test_sum_gradient_is_ones(self, x):
        (gx,) = grads_of(lambda t: t.sum(), x)
        assert np.array_equal(gx, np.ones(5))
