import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from milblock.autodiff import (Graph, add, clamp, grad_check, log, matmul_bias, mul, neg, relu,
                               relu_grad_mask, reshape, scale, sigmoid, softmax_rows, sub, take,
                               topk_mean_columns, total)
from milblock.errors import NonFiniteError, ShapeError, ValidationError


def values(f, *arrays):
    g = Graph()
    return f(*[g.leaf(a) for a in arrays]).data


class TestElementwise:
    def test_add(self):
        assert values(add, [1.0, 2.0], [3.0, 4.0]).tolist() == [4.0, 6.0]

    def test_add_constant(self):
        g = Graph()
        assert add(g.leaf([1.0, 2.0]), np.array([0.5, 0.5])).data.tolist() == [1.5, 2.5]

    def test_log_identity(self):
        assert values(log, [1.0]).tolist() == [0.0]

    def test_mul_matches_double_loop(self, rng):
        a, b = rng.normal(size=(2, 3)), rng.normal(size=(2, 3))
        out = values(mul, a, b)
        for i in range(2):
            for j in range(3):
                assert out[i, j] == a[i, j] * b[i, j]

    def test_sub_neg_scale(self):
        assert values(sub, [5.0], [2.0]).tolist() == [3.0]
        assert values(neg, [2.0]).tolist() == [-2.0]
        g = Graph()
        assert scale(g.leaf([2.0]), 1.5).data.tolist() == [3.0]

    def test_shape_mismatch(self):
        g = Graph()
        with pytest.raises(ShapeError):
            add(g.leaf([1.0, 2.0]), g.leaf([1.0, 2.0, 3.0]))

    def test_log_nonpositive(self):
        g = Graph()
        with pytest.raises(ValidationError):
            log(g.leaf([1.0, 0.0]))

    def test_mixed_graphs_rejected(self):
        a, b = Graph().leaf([1.0]), Graph().leaf([1.0])
        with pytest.raises(ValidationError):
            add(a, b)


class TestMatmulBias:
    def test_identity(self):
        out = values(matmul_bias, np.eye(2), [[2.0, 3.0]], [0.0, 0.0])
        assert out.tolist() == [[2.0, 3.0]]

    def test_arithmetic(self):
        assert values(matmul_bias, [[1.0, 2.0]], [[3.0, 4.0]], [1.0]).tolist() == [[12.0]]

    def test_triple_loop_oracle(self, rng):
        # 5x7 instances, 3x7 weights: row j = W z_j + b
        W, Z, b = rng.normal(size=(3, 7)), rng.normal(size=(5, 7)), rng.normal(size=3)
        ref = np.zeros((5, 3))
        for j in range(5):
            for c in range(3):
                ref[j, c] = sum(W[c, d] * Z[j, d] for d in range(7)) + b[c]
        np.testing.assert_allclose(values(matmul_bias, W, Z, b), ref, rtol=0, atol=1e-12)

    def test_dimension_mismatch(self, rng):
        g = Graph()
        with pytest.raises(ShapeError):
            matmul_bias(g.leaf(rng.normal(size=(2, 3))), g.leaf(rng.normal(size=(4, 2))), g.leaf(np.zeros(2)))
        with pytest.raises(ShapeError):
            matmul_bias(g.leaf(rng.normal(size=(2, 3))), g.leaf(rng.normal(size=(4, 3))), g.leaf(np.zeros(3)))


class TestActivations:
    def test_relu_values_and_mask(self):
        assert values(relu, [-1.0, 0.0, 2.0]).tolist() == [0.0, 0.0, 2.0]
        assert relu_grad_mask([-1.0, 0.0, 2.0]).tolist() == [0.0, 0.0, 1.0]

    def test_relu_backward_mask(self):
        g = Graph()
        x = g.leaf([-1.0, 0.0, 2.0])
        g.backward(total(relu(x)))
        assert x.grad.tolist() == [0.0, 0.0, 1.0]

    def test_relu_per_element(self, rng):
        x = rng.normal(size=(4, 5))
        out = values(relu, x)
        for v, o in zip(x.ravel(), out.ravel()):
            assert o == (v if v > 0 else 0.0)

    def test_sigmoid_values(self):
        assert values(sigmoid, [0.0]).tolist() == [0.5]
        assert abs(values(sigmoid, [100.0])[0] - 1.0) <= 1e-12
        assert values(sigmoid, [-1.0])[0] == pytest.approx(0.2689414213699951, abs=1e-16)

    def test_sigmoid_high_precision_oracle(self):
        mpmath = pytest.importorskip("mpmath")
        mpmath.mp.dps = 40
        for x in (-30.0, -1.0, 0.3, 7.5):
            ref = float(1 / (1 + mpmath.exp(-mpmath.mpf(x))))
            assert values(sigmoid, [x])[0] == pytest.approx(ref, rel=1e-15)

    def test_sigmoid_extremes_finite(self):
        out = values(sigmoid, [-1000.0, 1000.0])
        assert np.all(np.isfinite(out)) and out[0] >= 0.0 and out[1] == 1.0

    def test_softmax_symmetric_row(self):
        assert values(softmax_rows, [[0.0, 0.0]]).tolist() == [[0.5, 0.5]]

    def test_softmax_oracle(self):
        mpmath = pytest.importorskip("mpmath")
        mpmath.mp.dps = 40
        e = [mpmath.exp(v) for v in (1, 2, 3)]
        ref = [float(v / sum(e)) for v in e]
        np.testing.assert_allclose(values(softmax_rows, [[1.0, 2.0, 3.0]])[0], ref, rtol=0, atol=1e-14)

    def test_softmax_needs_two_columns(self):
        g = Graph()
        with pytest.raises(ShapeError):
            softmax_rows(g.leaf([[1.0]]))

    @given(st.lists(st.floats(-50, 50), min_size=2, max_size=6), st.floats(-100, 100))
    def test_softmax_shift_invariance(self, row, shift):
        a = values(softmax_rows, [row])
        b = values(softmax_rows, [[v + shift for v in row]])
        assert abs(a.sum() - 1.0) <= 1e-12
        np.testing.assert_allclose(a, b, rtol=0, atol=1e-12)


class TestTopk:
    col = np.array([[0.9], [0.5], [0.2], [0.1]])

    def test_k1_is_max(self):
        assert values(lambda x: topk_mean_columns(x, 1), self.col).tolist() == [0.9]

    def test_k_all_is_mean(self):
        assert values(lambda x: topk_mean_columns(x, 4), self.col)[0] == pytest.approx(0.425, abs=1e-15)

    def test_tie_break_lowest_index(self):
        g = Graph()
        out = topk_mean_columns(g.leaf([[1.0], [1.0], [0.0]]), 1)
        assert out.extra[:, 0].tolist() == [0]

    def test_k_out_of_range(self):
        g = Graph()
        with pytest.raises(ValidationError):
            topk_mean_columns(g.leaf(self.col), 0)
        with pytest.raises(ValidationError):
            topk_mean_columns(g.leaf(self.col), 5)

    def test_subgradient_routing(self):
        g = Graph()
        x = g.leaf([[0.9], [0.5], [0.2]])
        g.backward(reshape(topk_mean_columns(x, 2), ()))
        assert x.grad[:, 0].tolist() == [0.5, 0.5, 0.0]

    def test_per_column_selection(self):
        g = Graph()
        out = topk_mean_columns(g.leaf([[1.0, 0.0], [0.0, 2.0], [0.5, 1.0]]), 2)
        assert out.extra.tolist() == [[0, 1], [2, 2]]
        assert out.data.tolist() == [0.75, 1.5]

    @given(st.integers(1, 20), st.integers(1, 5), st.integers(0, 2**32 - 1))
    def test_identities(self, m, c, seed):
        x = np.random.default_rng(seed).normal(size=(m, c))
        assert np.array_equal(values(lambda t: topk_mean_columns(t, 1), x), x.max(axis=0))
        np.testing.assert_allclose(values(lambda t: topk_mean_columns(t, m), x), x.mean(axis=0), rtol=0, atol=1e-12)

    @given(st.integers(2, 20), st.integers(1, 4), st.integers(0, 2**32 - 1), st.data())
    def test_permutation_invariance(self, m, c, seed, data):
        gen = np.random.default_rng(seed)
        x = gen.normal(size=(m, c))
        k = data.draw(st.integers(1, m))
        perm = gen.permutation(m)
        g = Graph()
        a, b = topk_mean_columns(g.leaf(x), k), topk_mean_columns(g.leaf(x[perm]), k)
        np.testing.assert_allclose(a.data, b.data, rtol=0, atol=1e-12)
        for col in range(c):  # tie-free input: identical selected multisets
            assert sorted(x[a.extra[:, col], col]) == sorted(x[perm][b.extra[:, col], col])

    @given(st.integers(2, 12), st.integers(0, 2**32 - 1), st.data())
    def test_unselected_rows_get_zero_gradient(self, m, seed, data):
        x = np.random.default_rng(seed).normal(size=(m, 3))
        k = data.draw(st.integers(1, m - 1))
        g = Graph()
        leaf = g.leaf(x)
        out = topk_mean_columns(leaf, k)
        g.backward(total(out))
        for col in range(3):
            unselected = np.setdiff1d(np.arange(m), out.extra[:, col])
            assert np.all(leaf.grad[unselected, col] == 0.0)


class TestBackward:
    def test_sigmoid_at_zero(self):
        g = Graph()
        w, z = g.leaf([1.0]), g.leaf([0.0])
        g.backward(reshape(sigmoid(mul(w, z)), ()))
        assert z.grad.tolist() == [0.25]

    def test_untouched_leaf_gets_zero(self):
        g = Graph()
        a, unused = g.leaf([2.0]), g.leaf([[1.0, 2.0]])
        g.backward(reshape(scale(a, 3.0), ()))
        assert a.grad.tolist() == [3.0]
        assert unused.grad.tolist() == [[0.0, 0.0]]

    def test_accumulates_shared_input(self):
        g = Graph()
        a = g.leaf([3.0])
        g.backward(reshape(add(mul(a, a), a), ()))
        assert a.grad.tolist() == [7.0]

    def test_non_scalar_output(self):
        g = Graph()
        with pytest.raises(ShapeError):
            g.backward(g.leaf([1.0, 2.0]))

    def test_reverse_order_visit(self):
        g = Graph()
        a = g.leaf([1.0])
        seen = []
        def tagged(x, tag):
            return g.record(x.data.copy(), (x,), lambda grad: (seen.append(tag) or grad,))
        out = tagged(tagged(tagged(a, 1), 2), 3)
        g.backward(reshape(out, ()))
        assert seen == [3, 2, 1]

    def test_clamp_and_take(self):
        g = Graph()
        x = g.leaf([0.5, 2.0])
        g.backward(total(clamp(x, 0.0, 1.0)))
        assert x.grad.tolist() == [1.0, 0.0]
        g = Graph()
        x = g.leaf([[1.0, 2.0], [3.0, 4.0]])
        g.backward(take(x, (1, 0)))
        assert x.grad.tolist() == [[0.0, 0.0], [1.0, 0.0]]


class TestGradCheck:
    def test_linear_model(self, rng):
        err = grad_check(lambda g, w, z: reshape(matmul_bias(w, z, g.constant([0.0])), ()),
                         [rng.normal(size=(1, 4)), rng.normal(size=(1, 4))])
        assert err <= 1e-8

    def test_corrupted_rule_detected(self, rng):
        def doubled_square(x):
            return x.graph.record(x.data ** 2, (x,), lambda g: (2.0 * (2.0 * x.data * g),))
        err = grad_check(lambda g, x: total(doubled_square(x)), [rng.uniform(1.0, 2.0, 3)])
        assert err >= 0.4

    def test_constant_function(self):
        err = grad_check(lambda g, x: g.constant(4.0), [np.array([1.0, 2.0])])
        assert err == 0.0

    def test_non_finite(self):
        with pytest.raises(NonFiniteError):
            grad_check(lambda g, x: total(scale(x, math.inf)), [np.array([1.0])])

    @settings(max_examples=100, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_composite_property(self, seed):
        gen = np.random.default_rng(seed)
        M, D, C = gen.integers(1, 6), gen.integers(1, 5), gen.integers(2, 4)
        params = [gen.normal(size=(C, D)), gen.normal(size=(M, D)), gen.normal(size=C)]
        k = int(gen.integers(1, M + 1))

        def f(g, W, Z, b):
            p = softmax_rows(matmul_bias(W, relu(Z), b))
            pooled = topk_mean_columns(p, k)
            return neg(log(take(pooled, 0)))
        assert grad_check(f, params) <= 1e-6
