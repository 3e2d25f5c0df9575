import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from robust_tucker.tensor_core import (
    ShapeError,
    TuckerFactors,
    as_tensor,
    dof,
    hosvd,
    incoherence,
    kron_others,
    l2inf,
    matricize,
    mode_product,
    multi_mode_product,
    norms,
    slice_mask,
    tensorize,
    tucker_reconstruct,
)

from conftest import random_ranks, random_shape, random_tucker


def brute_matricize(T, k):
    # column index enumerates the other modes with the last one fastest
    rest = [i for i in range(T.ndim) if i != k]
    cols = list(itertools.product(*[range(T.shape[i]) for i in rest]))
    M = np.zeros((T.shape[k], len(cols)))
    for j, c in enumerate(cols):
        for a in range(T.shape[k]):
            idx = list(c)
            idx.insert(k, a)
            M[a, j] = T[tuple(idx)]
    return M


def brute_mode_product(T, A, k):
    out_shape = list(T.shape)
    out_shape[k] = A.shape[0]
    out = np.zeros(out_shape)
    for idx in np.ndindex(*out_shape):
        s = 0.0
        for i in range(T.shape[k]):
            src = list(idx)
            src[k] = i
            s += A[idx[k], i] * T[tuple(src)]
        out[idx] = s
    return out


dims_strategy = st.lists(st.integers(1, 5), min_size=2, max_size=4).map(tuple)


class TestMatricize:
    def test_matches_brute_force_enumeration(self, rng):
        T = rng.standard_normal((2, 3, 4))
        for k in range(3):
            np.testing.assert_array_equal(matricize(T, k), brute_matricize(T, k))

    def test_order_four_column_order(self):
        T = np.arange(2 * 3 * 2 * 2, dtype=float).reshape(2, 3, 2, 2)
        M = matricize(T, 1)
        # second column: mode-0 index 0, mode-2 index 0, mode-3 index 1
        np.testing.assert_array_equal(M[:, 1], T[0, :, 0, 1])
        np.testing.assert_array_equal(M[:, 2], T[0, :, 1, 0])

    @given(dims=dims_strategy, data=st.data())
    @settings(max_examples=50, deadline=None)
    def test_tensorize_inverts(self, dims, data):
        T = data.draw(arrays(np.float64, dims, elements=st.floats(-1e3, 1e3)))
        k = data.draw(st.integers(0, len(dims) - 1))
        np.testing.assert_array_equal(tensorize(matricize(T, k), k, dims), T)

    def test_bad_mode(self):
        with pytest.raises(ShapeError):
            matricize(np.zeros((2, 2)), 2)

    def test_tensorize_shape_mismatch(self):
        with pytest.raises(ShapeError):
            tensorize(np.zeros((3, 5)), 0, (3, 2, 2))


class TestModeProduct:
    def test_matches_brute_force(self, rng):
        T = rng.standard_normal((3, 4, 2))
        A = rng.standard_normal((5, 4))
        np.testing.assert_allclose(mode_product(T, A, 1), brute_mode_product(T, A, 1), atol=1e-12)

    @pytest.mark.parametrize("trial", range(20))
    def test_unfolding_identity(self, rng, trial):
        dims = random_shape(rng)
        T = rng.standard_normal(dims)
        k = int(rng.integers(len(dims)))
        A = rng.standard_normal((int(rng.integers(1, 6)), dims[k]))
        np.testing.assert_allclose(matricize(mode_product(T, A, k), k), A @ matricize(T, k), atol=1e-12)

    def test_projection_convention(self, rng):
        # T x_k U^T is mode_product(T, U.T, k)
        T = rng.standard_normal((5, 4, 3))
        U, _ = np.linalg.qr(rng.standard_normal((4, 2)))
        P = mode_product(T, U.T, 1)
        assert P.shape == (5, 2, 3)
        np.testing.assert_allclose(P, np.einsum("ajb,jr->arb", T, U), atol=1e-12)

    def test_products_on_distinct_modes_commute(self, rng):
        T = rng.standard_normal((3, 4, 5))
        A, B = rng.standard_normal((2, 3)), rng.standard_normal((6, 5))
        np.testing.assert_allclose(
            mode_product(mode_product(T, A, 0), B, 2), mode_product(mode_product(T, B, 2), A, 0), atol=1e-12
        )

    def test_incompatible_matrix(self):
        with pytest.raises(ShapeError):
            mode_product(np.zeros((2, 3)), np.zeros((2, 2)), 1)


class TestTucker:
    def test_kron_identity(self, rng):
        F = random_tucker(rng, (5, 4, 3), (2, 3, 2))
        T = tucker_reconstruct(F)
        for k in range(3):
            rhs = F.factors[k] @ matricize(F.core, k) @ kron_others(F.factors, k).T
            np.testing.assert_allclose(matricize(T, k), rhs, atol=1e-12)

    def test_factor_shape_mismatch(self):
        with pytest.raises(ShapeError):
            TuckerFactors(np.zeros((2, 2)), (np.zeros((4, 2)), np.zeros((4, 3))))

    def test_rank_above_dimension(self):
        with pytest.raises(ShapeError):
            TuckerFactors(np.zeros((3, 1)), (np.zeros((2, 3)), np.zeros((4, 1))))

    @pytest.mark.parametrize("trial", range(25))
    def test_hosvd_exact_rank_recovery(self, rng, trial):
        dims = random_shape(rng)
        ranks = random_ranks(rng, dims)
        T = tucker_reconstruct(random_tucker(rng, dims, ranks))
        F = hosvd(T, ranks)
        assert np.linalg.norm(F.full() - T) <= 1e-10 * np.linalg.norm(T)
        assert F.orthonormality_error() < 1e-10

    def test_hosvd_full_rank_is_identity(self, rng):
        T = rng.standard_normal((3, 4, 2))
        np.testing.assert_allclose(hosvd(T, T.shape).full(), T, atol=1e-10)

    def test_hosvd_rank_larger_than_other_modes(self, rng):
        # d_1 = 6 > d_2 * d_3 = 4 while r_1 = 5 stays valid
        T = rng.standard_normal((6, 2, 2))
        F = hosvd(T, (4, 2, 2))
        assert F.factors[0].shape == (6, 4)
        assert F.orthonormality_error() < 1e-10
        np.testing.assert_allclose(F.full(), T, atol=1e-10)

    def test_hosvd_invalid_rank(self):
        with pytest.raises(ShapeError):
            hosvd(np.zeros((3, 3)), (4, 1))
        with pytest.raises(ShapeError):
            hosvd(np.zeros((3, 3)), (1,))

    def test_hosvd_subspace_matches_svd(self, rng):
        T = rng.standard_normal((4, 30, 3))
        F = hosvd(T, (2, 2, 2))
        for k in range(3):
            U = np.linalg.svd(matricize(T, k))[0][:, :2]
            # subspace agreement, independent of sign or rotation
            np.testing.assert_allclose(F.factors[k] @ F.factors[k].T, U @ U.T, atol=1e-8)

    def test_incoherence_rotation_invariant(self, rng):
        F = random_tucker(rng, (7, 6, 5), (2, 3, 2))
        Qs = [np.linalg.qr(rng.standard_normal((r, r)))[0] for r in F.ranks]
        G = TuckerFactors(
            multi_mode_product(F.core, [Q.T for Q in Qs]), tuple(U @ Q for U, Q in zip(F.factors, Qs))
        )
        np.testing.assert_allclose(G.full(), F.full(), atol=1e-10)
        assert abs(incoherence(G) - incoherence(F)) < 1e-10

    def test_incoherence_bounds(self, rng):
        F = random_tucker(rng, (8, 8, 8), (2, 2, 2))
        mu = incoherence(F)
        # each factor has squared row norms summing to r_k
        assert 1.0 - 1e-12 <= mu <= 8 / 2 + 1e-12
        e = np.zeros((8, 1))
        e[3] = 1.0
        spiky = TuckerFactors(np.ones((1, 1, 1)), (e, e, e))
        assert incoherence(spiky) == pytest.approx(8.0)

    def test_l2inf(self):
        assert l2inf(np.array([[3.0, 4.0], [1.0, 0.0]])) == pytest.approx(5.0)


class TestNorms:
    @pytest.mark.parametrize("trial", range(25))
    def test_norm_relations(self, rng, trial):
        dims = random_shape(rng)
        T = rng.standard_normal(dims) * rng.exponential(size=dims)
        n = norms(T)
        dstar = T.size
        assert n["l1"] <= np.sqrt(dstar) * n["fro"] * (1 + 1e-12)
        assert n["sup"] * n["l1"] >= n["fro"] ** 2 * (1 - 1e-12)
        assert n["sup"] <= n["fro"] + 1e-12

    def test_dof(self):
        assert dof((100, 100, 100), (2, 2, 2)) == 8 + 600

    def test_slice_mask(self, rng):
        T = rng.standard_normal((3, 4, 2))
        S = slice_mask(T, 1, 2)
        assert np.count_nonzero(S) == 6
        np.testing.assert_array_equal(S[:, 2, :], T[:, 2, :])
        with pytest.raises(ShapeError):
            slice_mask(T, 1, 4)


class TestAsTensor:
    def test_reshape_and_order(self):
        T = as_tensor(range(8), (2, 2, 2))
        assert T[1, 0, 1] == 5.0

    def test_rejects_vectors_and_bad_sizes(self):
        with pytest.raises(ShapeError):
            as_tensor([1.0, 2.0])
        with pytest.raises(ShapeError):
            as_tensor(range(7), (2, 2, 2))
