import numpy as np
import pytest

from stn3d.autograd import (
    DimensionError,
    TapeError,
    Tensor,
    add,
    add_bias,
    backward,
    clamp_away_from_zero,
    concat,
    div,
    expand_cols,
    finite_diff,
    frobenius_norm,
    gather_cols,
    leaky_relu,
    matmul,
    max_over_axis,
    mul,
    no_grad,
    relative_error,
    reshape,
    scale,
    slice_axis,
    softmax_cross_entropy,
    sub,
    sum_all,
)

FD_STEP = 1e-5
FD_TOL = 1e-4


def check_grads(build_loss, tensors, n_checks=None, seed=0):
    """Compare analytic gradients against central finite differences."""
    loss = build_loss()
    backward(loss)
    rng = np.random.default_rng(seed)
    worst = 0.0
    for t in tensors:
        size = t.data.size
        picks = range(size) if n_checks is None else rng.choice(size, size=min(n_checks, size), replace=False)
        for i in picks:
            num = finite_diff(lambda: float(build_loss().data), t, int(i), FD_STEP)
            ana = t.grad.flat[int(i)]
            worst = max(worst, relative_error(ana, num))
    assert worst < FD_TOL, f"max relative error {worst}"


class TestMatmul:
    def test_identity(self):
        p = np.arange(12.0).reshape(3, 4)
        out = matmul(Tensor(np.eye(3)), Tensor(p))
        np.testing.assert_array_equal(out.data, p)

    def test_hand_product(self):
        out = matmul(Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([[1.0], [1.0]]))
        np.testing.assert_array_equal(out.data, [[3.0], [7.0]])

    def test_shape_error_names_both_shapes(self):
        with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
            matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))

    def test_gradient_vs_finite_difference(self):
        rng = np.random.default_rng(42)
        a = Tensor(rng.normal(size=(4, 5)), requires_grad=True)
        b = Tensor(rng.normal(size=(5, 3)), requires_grad=True)
        w = Tensor(rng.normal(size=(4, 3)))  # fixed weighting so loss mixes entries

        def loss():
            return sum_all(mul(matmul(a, b), w))

        check_grads(loss, [a, b])


class TestConcat:
    def test_shape_arithmetic(self):
        out = concat([Tensor(np.ones((2, 3))), Tensor(np.ones((2, 5)))], axis=1)
        assert out.shape == (2, 8)

    def test_single_is_identity(self):
        x = np.arange(6.0).reshape(2, 3)
        out = concat([Tensor(x)], axis=0)
        np.testing.assert_array_equal(out.data, x)

    def test_empty_list_rejected(self):
        with pytest.raises(DimensionError):
            concat([], axis=0)

    def test_incompatible_shapes_rejected(self):
        with pytest.raises(DimensionError):
            concat([Tensor(np.zeros((2, 3))), Tensor(np.zeros((3, 3)))], axis=1)

    def test_backward_splits_upstream_gradient(self):
        rng = np.random.default_rng(1)
        a = Tensor(rng.normal(size=(2, 3)), requires_grad=True)
        b = Tensor(rng.normal(size=(2, 4)), requires_grad=True)
        w = Tensor(rng.normal(size=(2, 7)))

        def loss():
            return sum_all(mul(concat([a, b], axis=1), w))

        check_grads(loss, [a, b])


class TestGatherCols:
    def test_direct_lookup(self):
        src = Tensor([[1.0, 2.0, 3.0]])
        idx = np.array([[0], [0], [2]])
        out = gather_cols(src, idx)
        np.testing.assert_array_equal(out.data, [[[1.0], [1.0], [3.0]]])

    def test_scatter_add_counts(self):
        n = 5
        src = Tensor(np.zeros((1, n)), requires_grad=True)
        idx = np.zeros((n, 1), dtype=np.int64)  # every row gathers column 0
        backward(sum_all(gather_cols(src, idx)))
        expected = np.zeros((1, n))
        expected[0, 0] = n
        np.testing.assert_array_equal(src.grad, expected)

    def test_out_of_range_rejected(self):
        with pytest.raises(IndexError):
            gather_cols(Tensor(np.zeros((2, 3))), np.array([[3]]))

    def test_matches_naive_triple_loop(self):
        rng = np.random.default_rng(7)
        f, n, k = 4, 9, 3
        src = rng.normal(size=(f, n))
        idx = rng.integers(0, n, size=(n, k))
        out = gather_cols(Tensor(src), idx)
        naive = np.zeros((f, n, k))
        for a in range(f):
            for i in range(n):
                for j in range(k):
                    naive[a, i, j] = src[a, idx[i, j]]
        np.testing.assert_array_equal(out.data, naive)

    def test_gradient_mass_conserved(self):
        rng = np.random.default_rng(3)
        f, n, k = 3, 8, 2
        src = Tensor(rng.normal(size=(f, n)), requires_grad=True)
        idx = rng.integers(0, n, size=(n, k))
        w = Tensor(rng.normal(size=(f, n, k)))
        backward(sum_all(mul(gather_cols(src, idx), w)))
        assert src.grad.sum() == pytest.approx(w.data.sum(), rel=1e-12)

    def test_gradient_vs_finite_difference(self):
        rng = np.random.default_rng(11)
        src = Tensor(rng.normal(size=(3, 6)), requires_grad=True)
        idx = rng.integers(0, 6, size=(6, 2))
        w = Tensor(rng.normal(size=(3, 6, 2)))

        def loss():
            return sum_all(mul(gather_cols(src, idx), w))

        check_grads(loss, [src])


class TestEdgePairs:
    def test_matches_four_op_chain(self):
        from stn3d.autograd import edge_pairs, expand_cols, gather_cols
        rng = np.random.default_rng(21)
        x = rng.normal(size=(5, 12))
        idx = rng.integers(0, 12, size=(12, 3))
        fused = edge_pairs(Tensor(x), idx)
        centers = expand_cols(Tensor(x), 3)
        neighbors = gather_cols(Tensor(x), idx)
        chain = concat([centers, sub(neighbors, centers)], axis=0)
        np.testing.assert_array_equal(fused.data, chain.data)

    def test_gradient_vs_finite_difference(self):
        from stn3d.autograd import edge_pairs
        rng = np.random.default_rng(22)
        x = Tensor(rng.normal(size=(4, 8)), requires_grad=True)
        idx = rng.integers(0, 8, size=(8, 2))
        w = Tensor(rng.normal(size=(8, 8, 2)))

        def loss():
            return sum_all(mul(edge_pairs(x, idx), w))

        check_grads(loss, [x])

    def test_index_range_checked(self):
        from stn3d.autograd import edge_pairs
        with pytest.raises(IndexError):
            edge_pairs(Tensor(np.zeros((2, 3))), np.array([[5]]))


class TestElementwise:
    def test_frobenius_norm_identity(self):
        assert frobenius_norm(Tensor(np.eye(3))).data == pytest.approx(np.sqrt(3.0))

    def test_uniform_logits_give_log_c(self):
        for c in (2, 4, 7):
            logits = Tensor(np.zeros((c, 5)))
            labels = np.arange(5) % c
            out = softmax_cross_entropy(logits, labels)
            assert float(out.data) == pytest.approx(np.log(c))

    def test_leaky_relu_slope_below_zero(self):
        x = Tensor(np.array([-2.0, -0.5]), requires_grad=True)

        def loss():
            return sum_all(leaky_relu(x, slope=0.2))

        l = loss()
        backward(l)
        np.testing.assert_allclose(x.grad, [0.2, 0.2])
        num = finite_diff(lambda: float(loss().data), x, 0, FD_STEP)
        assert relative_error(0.2, num) < FD_TOL

    def test_scalar_broadcast_only(self):
        out = mul(Tensor(np.ones((2, 2))), Tensor(3.0))
        np.testing.assert_array_equal(out.data, 3.0 * np.ones((2, 2)))
        with pytest.raises(DimensionError):
            add(Tensor(np.ones((2, 2))), Tensor(np.ones(2)))

    def test_max_over_axis_tie_breaks_to_lowest_index(self):
        x = Tensor(np.array([[1.0, 5.0, 5.0]]), requires_grad=True)
        backward(sum_all(max_over_axis(x, axis=1)))
        np.testing.assert_array_equal(x.grad, [[0.0, 1.0, 0.0]])

    def test_max_empty_axis_rejected(self):
        with pytest.raises(DimensionError):
            max_over_axis(Tensor(np.zeros((2, 0))), axis=1)

    def test_softmax_label_range_checked(self):
        with pytest.raises(IndexError):
            softmax_cross_entropy(Tensor(np.zeros((2, 2))), np.array([0, 2]))

    def test_clamp_preserves_sign(self):
        x = Tensor(np.array([[-1e-9, 1e-9, -2.0, 0.0]]))
        out = clamp_away_from_zero(x, 1e-6)
        np.testing.assert_array_equal(out.data, [[-1e-6, 1e-6, -2.0, 1e-6]])

    def test_gradients_vs_finite_difference(self):
        rng = np.random.default_rng(5)
        x = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
        y = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
        b = Tensor(rng.normal(size=3), requires_grad=True)
        labels = rng.integers(0, 3, size=4)

        def loss():
            h = add_bias(add(mul(x, y), scale(x, 0.5)), b)
            h = leaky_relu(h, 0.2)
            return softmax_cross_entropy(h, labels)

        check_grads(loss, [x, y, b])

    def test_div_and_norm_gradients(self):
        rng = np.random.default_rng(9)
        a = Tensor(rng.normal(size=(3, 3)), requires_grad=True)
        w = Tensor(rng.normal(size=(3, 3)))

        def loss():
            return sum_all(mul(div(a, frobenius_norm(a)), w))

        check_grads(loss, [a])

    def test_structural_op_gradients(self):
        rng = np.random.default_rng(13)
        x = Tensor(rng.normal(size=(4, 5)), requires_grad=True)
        w = Tensor(rng.normal(size=(2, 5, 3)))

        def loss():
            s = slice_axis(x, 0, 1, 3)          # (2, 5)
            e = expand_cols(s, 3)                # (2, 5, 3)
            r = reshape(mul(e, w), (2, 15))
            return sum_all(max_over_axis(r, axis=1))

        check_grads(loss, [x])


class TestBackward:
    def test_sum_gives_ones(self):
        x = Tensor(np.random.default_rng(0).normal(size=(3, 4)), requires_grad=True)
        backward(sum_all(x))
        np.testing.assert_array_equal(x.grad, np.ones((3, 4)))

    def test_squared_norm_gives_two_x(self):
        x = Tensor(np.random.default_rng(1).normal(size=(2, 3)), requires_grad=True)
        n = frobenius_norm(x)
        backward(mul(n, n))
        np.testing.assert_allclose(x.grad, 2.0 * x.data, rtol=1e-12)

    def test_non_scalar_loss_rejected(self):
        x = Tensor(np.ones((2, 2)), requires_grad=True)
        with pytest.raises(TapeError):
            backward(add(x, x))

    def test_backward_twice_rejected(self):
        x = Tensor(np.ones(3), requires_grad=True)
        loss = sum_all(x)
        backward(loss)
        with pytest.raises(TapeError):
            backward(loss)

    def test_constant_loss_rejected(self):
        with pytest.raises(TapeError):
            backward(Tensor(1.0))

    def test_grads_accumulate_across_tapes(self):
        x = Tensor(np.ones(3), requires_grad=True)
        backward(sum_all(x))
        backward(sum_all(x))
        np.testing.assert_array_equal(x.grad, 2.0 * np.ones(3))

    def test_no_grad_suppresses_recording(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with no_grad():
            loss = sum_all(x)
        assert loss.tape is None and not loss.requires_grad

    def test_deterministic_forward_backward(self):
        def run():
            rng = np.random.default_rng(77)
            a = Tensor(rng.normal(size=(4, 4)), requires_grad=True)
            b = Tensor(rng.normal(size=(4, 4)), requires_grad=True)
            backward(sum_all(mul(matmul(a, b), matmul(a, b))))
            return a.data.copy(), a.grad.copy(), b.grad.copy()

        first, second = run(), run()
        for x, y in zip(first, second):
            np.testing.assert_array_equal(x, y)

    def test_reuse_of_tensor_accumulates(self):
        x = Tensor(np.array([2.0]), requires_grad=True)
        backward(sum_all(mul(x, x)))
        np.testing.assert_allclose(x.grad, [4.0])
