"""Sparse solves, block flattening, borders and the inf-sup proxy."""

import numpy as np
import pytest
import scipy.sparse as sp

from mhdfem.linalg import (
    BlockSystem,
    LinAlgError,
    SingularMatrixError,
    export_matrix_market,
    flatten,
    from_triplets,
    smallest_singular_value,
    solve_direct,
    unflatten,
)

RNG = np.random.default_rng(23)


# ----------------------------------------------------------------------
# triplet construction


def test_from_triplets_sums_duplicates():
    A = from_triplets([0, 0], [0, 0], [1.0, 2.0], (1, 1))
    assert A.toarray() == pytest.approx(np.array([[3.0]]))


def test_from_triplets_empty():
    A = from_triplets([], [], [], (3, 2))
    assert A.nnz == 0
    assert A.shape == (3, 2)


def test_from_triplets_order_invariant():
    rows = [2, 0, 1, 0, 2]
    cols = [1, 0, 2, 0, 1]
    vals = [4.0, 1.0, 2.0, 3.0, -1.0]
    A = from_triplets(rows, cols, vals, (3, 3))
    perm = [3, 1, 4, 0, 2]
    B = from_triplets(
        [rows[i] for i in perm], [cols[i] for i in perm], [vals[i] for i in perm], (3, 3)
    )
    assert np.array_equal(A.indptr, B.indptr)
    assert np.array_equal(A.indices, B.indices)
    assert np.array_equal(A.data, B.data)


# ----------------------------------------------------------------------
# direct solve contract


def test_solve_identity():
    A = sp.identity(5, format="csr")
    b = np.arange(5.0)
    assert solve_direct(A, b) == pytest.approx(b, abs=1e-14)


def test_solve_indefinite_2x2():
    A = sp.csr_matrix(np.array([[0.0, 1.0], [1.0, 0.0]]))
    x = solve_direct(A, np.array([1.0, 2.0]))
    assert x == pytest.approx([2.0, 1.0], abs=1e-14)


def test_solve_spd_50_matches_dense_oracle():
    M = RNG.standard_normal((50, 50))
    A = sp.csr_matrix(M @ M.T + 50.0 * np.eye(50))
    b = RNG.standard_normal(50)
    x = solve_direct(A, b)
    assert np.linalg.norm(A @ x - b) <= 1e-10 * np.linalg.norm(b)
    assert x == pytest.approx(np.linalg.solve(A.toarray(), b), rel=1e-10, abs=1e-12)


def test_solve_zero_rhs():
    A = sp.identity(4, format="csr")
    assert np.abs(solve_direct(A, np.zeros(4))).max() == 0.0


def test_solve_reports_singularity_with_pivot():
    A = sp.csr_matrix(np.array([[1.0, 0.0], [0.0, 0.0]]))
    with pytest.raises(SingularMatrixError) as err:
        solve_direct(A, np.array([1.0, 1.0]))
    assert err.value.pivot == 1


def test_solve_shape_mismatch():
    A = sp.identity(3, format="csr")
    with pytest.raises(LinAlgError, match="shape"):
        solve_direct(A, np.ones(4))


# ----------------------------------------------------------------------
# block systems


def _two_field_system():
    Auu = sp.csr_matrix(np.array([[2.0, 1.0], [1.0, 3.0]]))
    Aee = sp.csr_matrix(np.array([[4.0]]))
    Aue = sp.csr_matrix(np.array([[0.5], [0.0]]))
    return BlockSystem(
        field_order=("u", "E"),
        sizes={"u": 2, "E": 1},
        blocks={("u", "u"): Auu, ("E", "E"): Aee, ("u", "E"): Aue, ("E", "u"): Aue.T},
        rhs={"u": np.array([1.0, 0.0]), "E": np.array([2.0])},
        transpose_pairs=[(("u", "E"), ("E", "u"), 1.0)],
    )


def test_flatten_single_block_is_identity_map():
    A0 = sp.csr_matrix(np.array([[2.0, -1.0], [-1.0, 2.0]]))
    system = BlockSystem(
        field_order=("u",), sizes={"u": 2}, blocks={("u", "u"): A0}, rhs={"u": np.ones(2)}
    )
    A, b, imap = flatten(system)
    assert A.toarray() == pytest.approx(A0.toarray())
    assert b == pytest.approx([1.0, 1.0])
    assert imap.slices["u"] == slice(0, 2)
    assert imap.total == 2


def test_flatten_layout_and_round_trip():
    A, b, imap = flatten(_two_field_system())
    assert A.shape == (3, 3)
    assert imap.slices["u"] == slice(0, 2)
    assert imap.slices["E"] == slice(2, 3)
    expected = np.array([[2.0, 1.0, 0.5], [1.0, 3.0, 0.0], [0.5, 0.0, 4.0]])
    assert A.toarray() == pytest.approx(expected)
    x = solve_direct(A, b)
    parts = unflatten(x, imap)
    assert np.concatenate([parts["u"], parts["E"]]) == pytest.approx(x)
    assert parts["_borders"].size == 0


def test_flatten_border_goes_last():
    M = sp.csr_matrix(np.diag([1.0, 2.0, 4.0]))
    w = np.array([0.25, 0.5, 0.25])
    system = BlockSystem(
        field_order=("p",),
        sizes={"p": 3},
        blocks={("p", "p"): M},
        rhs={"p": np.array([1.0, 1.0, 1.0])},
        borders=[("p", w)],
    )
    A, b, imap = flatten(system)
    assert A.shape == (4, 4)
    dense = A.toarray()
    assert dense[:3, 3] == pytest.approx(w)
    assert dense[3, :3] == pytest.approx(w)
    assert dense[3, 3] == 0.0
    x = solve_direct(A, b)
    parts = unflatten(x, imap)
    # the border enforces the weighted zero-mean constraint
    assert abs(parts["p"] @ w) <= 1e-12
    assert parts["_borders"].shape == (1,)
    resid = M @ parts["p"] + parts["_borders"][0] * w - b[:3]
    assert np.abs(resid).max() <= 1e-12


def test_validate_rejects_bad_blocks():
    system = _two_field_system()
    system.blocks[("u", "q")] = sp.csr_matrix((2, 1))
    with pytest.raises(LinAlgError, match="unknown field"):
        system.validate()
    del system.blocks[("u", "q")]
    system.blocks[("u", "E")] = sp.csr_matrix((2, 2))
    with pytest.raises(LinAlgError, match="shape"):
        system.validate()


def test_validate_rejects_broken_transpose_pair():
    system = _two_field_system()
    system.blocks[("E", "u")] = sp.csr_matrix(np.array([[0.5, 1e-3]]))
    with pytest.raises(LinAlgError, match="transpose"):
        system.validate()


def test_validate_rejects_bad_border_length():
    system = _two_field_system()
    system.borders = [("u", np.ones(3))]
    with pytest.raises(LinAlgError, match="border"):
        system.validate()


# ----------------------------------------------------------------------
# smallest singular value


def test_smallest_singular_value_against_dense_svd():
    M = RNG.standard_normal((40, 40)) + 5.0 * np.eye(40)
    A = sp.csr_matrix(M)
    sigma = smallest_singular_value(A)
    exact = np.linalg.svd(M, compute_uv=False).min()
    assert sigma == pytest.approx(exact, rel=1e-5)


def test_smallest_singular_value_weighted():
    # diagonal weights admit a closed-form whitened matrix for the oracle
    M = RNG.standard_normal((30, 30)) + 4.0 * np.eye(30)
    A = sp.csr_matrix(M)
    d1 = RNG.uniform(0.5, 2.0, 30)
    d2 = RNG.uniform(0.5, 2.0, 30)
    Wt = sp.diags(d1).tocsr()
    Wtr = sp.diags(d2).tocsr()
    sigma = smallest_singular_value(A, w_test=Wt, w_trial=Wtr)
    whitened = M / np.sqrt(d1)[:, None] / np.sqrt(d2)[None, :]
    exact = np.linalg.svd(whitened, compute_uv=False).min()
    assert sigma == pytest.approx(exact, rel=1e-5)


def test_smallest_singular_value_of_singular_matrix_raises():
    A = sp.csr_matrix(np.array([[1.0, 1.0], [1.0, 1.0]]))
    with pytest.raises(SingularMatrixError):
        smallest_singular_value(A)


# ----------------------------------------------------------------------
# export


def test_matrix_market_round_trip(tmp_path):
    from scipy.io import mmread

    A = sp.random(12, 9, density=0.3, random_state=3, format="csr")
    path = tmp_path / "block.mtx"
    export_matrix_market(A, str(path))
    B = mmread(str(path)).tocsr()
    assert (A - B).nnz == 0 or np.abs((A - B).data).max() <= 1e-15
