import numpy as np
import pytest
from oracles import conv2d_loops

from svddip.autodiff import Tensor, ops
from svddip.errors import InvalidArgumentError, NumericalFailureError
from svddip.svd import (
    SvdFactors,
    TruncationPolicy,
    apply_truncation,
    count_trainable,
    factor_kernels,
    factorize_conv,
    fold,
    svd_decompose,
    unfold,
    unfold_U,
    unfold_V,
)


def composed_conv(u, s, v, x):
    h = ops.conv2d(Tensor(x), Tensor(v))
    h = ops.channel_scale(h, Tensor(s))
    return ops.conv2d(h, Tensor(u)).data


# -- folding --------------------------------------------------------------------------


def test_fold_unfold_bit_exact(rng):
    w = rng.standard_normal((4, 3, 3, 3))
    f = fold(w)
    assert f.matrix.shape == (4, 27)
    np.testing.assert_array_equal(unfold_V(f.matrix, 3, 3), w)
    np.testing.assert_array_equal(unfold(f), w)
    perm = rng.permutation(27)
    np.testing.assert_array_equal(unfold(fold(w, perm)), w)


def test_fold_paper_scale_shape():
    assert fold(np.zeros((128, 128, 3, 3))).matrix.shape == (128, 1152)


def test_unfold_u_identity_is_passthrough(rng):
    k = unfold_U(np.eye(2))
    assert k.shape == (2, 2, 1, 1)
    x = rng.standard_normal((2, 5, 5))
    np.testing.assert_array_equal(ops.conv2d(Tensor(x), Tensor(k)).data, x)


def test_fold_shape_errors():
    with pytest.raises(InvalidArgumentError):
        fold(np.zeros((2, 3, 3)))
    with pytest.raises(InvalidArgumentError):
        unfold_V(np.zeros((2, 10)), 1, 3)
    with pytest.raises(InvalidArgumentError):
        fold(np.zeros((2, 1, 3, 3)), column_order=[0, 0, 1, 2, 3, 4, 5, 6, 7])


# -- decomposition --------------------------------------------------------------------


def check_factors(f: SvdFactors, w: np.ndarray):
    r = f.rank
    assert np.all(np.diff(f.s) <= 0) and np.all(f.s >= 0)
    np.testing.assert_allclose(f.U.T @ f.U, np.eye(r), atol=1e-8)
    np.testing.assert_allclose(f.V @ f.V.T, np.eye(r), atol=1e-8)
    assert np.linalg.norm(f.matrix() - w) <= 1e-8 * max(np.linalg.norm(w), 1e-300)


@pytest.mark.parametrize("shape", [(8, 18), (18, 8), (5, 5), (1, 9), (9, 1), (32, 288)])
def test_svd_invariants(rng, shape):
    w = rng.standard_normal(shape)
    f = svd_decompose(w)
    assert f.rank == min(shape)
    check_factors(f, w)
    np.testing.assert_allclose(f.s, np.linalg.svd(w, compute_uv=False), rtol=1e-10)


def test_svd_reconstruction_8x18(rng):
    w = rng.standard_normal((8, 18))
    assert np.linalg.norm(svd_decompose(w).matrix() - w) < 1e-10


def test_svd_diagonal():
    f = svd_decompose(np.diag([3.0, 1.0]))
    np.testing.assert_allclose(f.s, [3.0, 1.0], atol=1e-14)
    for m in (f.U, f.V):
        np.testing.assert_allclose(np.abs(m), np.eye(2), atol=1e-14)


def test_svd_rank_one(rng):
    u, v = rng.standard_normal(6), rng.standard_normal(10)
    f = svd_decompose(np.outer(u, v))
    assert f.s[0] == pytest.approx(np.linalg.norm(u) * np.linalg.norm(v), rel=1e-12)
    assert np.all(np.abs(f.s[1:]) < 1e-10)
    check_factors(f, np.outer(u, v))


def test_svd_zero_matrix():
    f = svd_decompose(np.zeros((3, 7)))
    assert np.all(f.s == 0)
    check_factors(f, np.zeros((3, 7)))


def test_svd_sign_convention(rng):
    f = svd_decompose(rng.standard_normal((6, 12)))
    pivots = f.U[np.argmax(np.abs(f.U), axis=0), np.arange(f.rank)]
    assert np.all(pivots > 0)


def test_svd_deterministic(rng):
    w = rng.standard_normal((7, 20))
    a, b = svd_decompose(w), svd_decompose(w)
    np.testing.assert_array_equal(a.U, b.U)
    np.testing.assert_array_equal(a.s, b.s)
    np.testing.assert_array_equal(a.V, b.V)


def test_singular_values_invariant_under_column_bijection(rng):
    w = rng.standard_normal((5, 4, 3, 3))
    perm = rng.permutation(36)
    s1 = svd_decompose(fold(w)).s
    s2 = svd_decompose(fold(w, perm)).s
    np.testing.assert_allclose(s1, s2, rtol=1e-12)
    # The permuted factorisation still unfolds to an equivalent kernel.
    u, s, v = factor_kernels(svd_decompose(fold(w, perm)))
    x = rng.standard_normal((4, 6, 6))
    np.testing.assert_allclose(composed_conv(u, s, v, x), conv2d_loops(x, w, None, 1, 1), atol=1e-10)


def test_svd_non_convergence_reported(rng):
    with pytest.raises(NumericalFailureError):
        svd_decompose(rng.standard_normal((20, 40)), max_sweeps=1)


def test_svd_rejects_non_finite():
    with pytest.raises(InvalidArgumentError):
        svd_decompose(np.array([[1.0, np.nan]]))


# -- factorised convolution -----------------------------------------------------------


def test_lemma_random_instances():
    rng = np.random.default_rng(2024)
    worst = 0.0
    for _ in range(100):
        cout, cin = rng.integers(1, 7, size=2)
        k = int(rng.choice([1, 3, 5]))
        w = rng.standard_normal((cout, cin, k, k))
        x = rng.standard_normal((cin, 7, 7))
        u, s, v = factorize_conv(w)
        direct = conv2d_loops(x, w, None, 1, (k - 1) // 2)
        worst = max(worst, float(np.abs(composed_conv(u, s, v, x) - direct).max()))
    assert worst < 1e-9


def test_lemma_4x3x3x3(rng):
    w = rng.standard_normal((4, 3, 3, 3))
    x = rng.standard_normal((3, 6, 6))
    u, s, v = factorize_conv(w)
    assert u.shape == (4, 4, 1, 1) and s.shape == (4,) and v.shape == (4, 3, 3, 3)
    assert np.abs(composed_conv(u, s, v, x) - ops.conv2d(Tensor(x), Tensor(w)).data).max() < 1e-10


def test_lemma_single_output_channel(rng):
    w = rng.standard_normal((1, 3, 3, 3))
    x = rng.standard_normal((3, 6, 6))
    u, s, v = factorize_conv(w)
    assert s.size == 1
    assert np.abs(composed_conv(u, s, v, x) - ops.conv2d(Tensor(x), Tensor(w)).data).max() < 1e-10


def test_identity_kernel_factorisation(rng):
    u, s, v = factorize_conv(np.ones((1, 1, 1, 1)))
    x = rng.standard_normal((1, 4, 4))
    np.testing.assert_array_equal(composed_conv(u, s, v, x), x)


def test_factorize_rejects_even_kernel():
    with pytest.raises(InvalidArgumentError):
        factorize_conv(np.zeros((2, 2, 2, 2)))


# -- truncation -----------------------------------------------------------------------


def diag_factors(s):
    s = np.asarray(s, dtype=float)
    return SvdFactors(np.eye(s.size), s, np.eye(s.size), s.size, 1)


def test_rank_fraction_example():
    out = apply_truncation(diag_factors([10, 5, 2, 0.5]), TruncationPolicy("rank_fraction", 0.5))
    np.testing.assert_array_equal(out.s, [10, 5])
    assert out.U.shape == (4, 2) and out.V.shape == (2, 4)
    assert out.full_rank == 4


def test_threshold_fraction_example():
    out = apply_truncation(diag_factors([10, 5, 2, 0.5]), TruncationPolicy("threshold_fraction", 0.1))
    np.testing.assert_array_equal(out.s, [10, 5, 2])


def test_no_truncation_is_identity():
    f = diag_factors([3, 2, 1])
    assert apply_truncation(f, TruncationPolicy()) is f


def test_truncation_keeps_at_least_one_value():
    for policy in (TruncationPolicy("rank_fraction", 0.01), TruncationPolicy("threshold_fraction", 0.99)):
        assert apply_truncation(diag_factors([4.0, 3.0, 2.0]), policy).rank == 1


def test_truncation_of_empty_factors_fails():
    empty = SvdFactors(np.zeros((2, 0)), np.zeros(0), np.zeros((0, 2)), 2, 1)
    with pytest.raises(InvalidArgumentError):
        apply_truncation(empty, TruncationPolicy("rank_fraction", 0.5))


def test_threshold_monotone(rng):
    s = np.sort(rng.random(40))[::-1]
    for t1, t2 in [(0.5, 0.1), (0.9, 0.3), (0.2, 0.0)]:
        m1 = TruncationPolicy("threshold_fraction", t1).keep_mask(s)
        m2 = TruncationPolicy("threshold_fraction", t2).keep_mask(s)
        assert np.all(m2[m1])


@pytest.mark.parametrize("text", ["none", "rank 0.5", "threshold 0.1"])
def test_policy_parse_roundtrip(text):
    assert str(TruncationPolicy.parse(text)) == text


@pytest.mark.parametrize("bad", ["rank 0", "rank 1.5", "threshold 1", "fraction 0.2", "rank"])
def test_policy_validation(bad):
    with pytest.raises(InvalidArgumentError):
        TruncationPolicy.parse(bad)


def test_count_trainable_paper_layer(rng):
    w = rng.standard_normal((128, 128, 3, 3))
    f = svd_decompose(fold(w))
    assert count_trainable(w) == 147456
    assert count_trainable(f) == 128
    assert count_trainable(w) / count_trainable(f) == 1152
    assert count_trainable(apply_truncation(f, TruncationPolicy("rank_fraction", 0.5))) == 64


def test_count_trainable_scalar_kernel():
    w = np.ones((1, 1, 1, 1))
    assert count_trainable(w) == 1
    assert count_trainable(svd_decompose(fold(w))) == 1
