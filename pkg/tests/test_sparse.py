import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given
from hypothesis import strategies as st

from sstep_ecg.sparse import (
    MatrixError,
    SparseSpd,
    gen_poisson2d,
    gen_synthetic3d,
    load_matrix_market,
    spmm,
    write_matrix_market,
)

from conftest import diag_matrix


@pytest.mark.parametrize("nx, n, nnz", [(100, 10000, 49600), (2, 4, 12), (3, 9, 33)])
def test_poisson_sizes(nx, n, nnz):
    A = gen_poisson2d(nx)
    assert (A.n, A.nnz) == (n, nnz)


def test_poisson_stencil_values():
    A = gen_poisson2d(5)
    d = A.diagonal()
    assert np.all(d == 4.0)
    off = A.csr - sp.diags(d)
    assert set(np.unique(off.data)) == {-1.0}
    # Gershgorin discs inside [0, 8]
    radius = np.asarray(abs(off).sum(axis=1)).ravel()
    assert np.all(d - radius >= 0) and np.all(d + radius <= 8)


def test_poisson_rejects_tiny_grid():
    with pytest.raises(ValueError):
        gen_poisson2d(1)


def test_spmm_identity_and_diag():
    I2 = diag_matrix(1, 1)
    X = np.array([[1.5, -2.0], [3.0, 0.25]])
    assert np.array_equal(spmm(I2, X), X)
    D = diag_matrix(4, 3)
    assert np.array_equal(spmm(D, np.eye(2)), np.array([[4.0, 0], [0, 3.0]]))


def test_spmm_poisson2_ones():
    assert np.array_equal(spmm(gen_poisson2d(2), np.ones((4, 1))), np.full((4, 1), 2.0))


def test_spmm_dimension_mismatch():
    with pytest.raises(ValueError, match="dimension mismatch"):
        spmm(gen_poisson2d(2), np.ones(5))


@given(st.integers(0, 2**31 - 1))
def test_spmm_symmetry_property(seed):
    A = gen_poisson2d(6)
    rng = np.random.default_rng(seed)
    u, v = rng.standard_normal((2, A.n))
    lhs, rhs = u @ spmm(A, v), v @ spmm(A, u)
    assert abs(lhs - rhs) <= 1e-13 * max(1.0, abs(lhs))


def test_validate_errors():
    with pytest.raises(MatrixError, match="asymmetric structure"):
        SparseSpd.from_scipy(sp.csr_matrix(np.array([[2.0, 1.0], [0.0, 2.0]])))
    with pytest.raises(MatrixError, match="asymmetric values"):
        SparseSpd.from_scipy(sp.csr_matrix(np.array([[2.0, 1.0], [1.5, 2.0]])))
    with pytest.raises(MatrixError, match="nonpositive diagonal"):
        SparseSpd.from_scipy(sp.csr_matrix(np.array([[-1.0, 0.0], [0.0, 2.0]])))
    with pytest.raises(MatrixError, match="missing diagonal"):
        SparseSpd.from_scipy(sp.csr_matrix(np.array([[0.0, 1.0], [1.0, 2.0]])))


def test_immutable_arrays():
    A = gen_poisson2d(3)
    with pytest.raises(ValueError):
        A.vals[0] = 1.0


def _write(tmp_path, text):
    p = tmp_path / "m.mtx"
    p.write_text(text)
    return p


def test_mm_symmetric_mirrored(tmp_path):
    p = _write(tmp_path, "%%MatrixMarket matrix coordinate real symmetric\n2 2 3\n1 1 4\n2 2 3\n2 1 1\n")
    A = load_matrix_market(p)
    assert A.nnz == 4
    assert np.array_equal(A.toarray(), [[4, 1], [1, 3]])


def test_mm_general_mirrored(tmp_path):
    p = _write(tmp_path, "%%MatrixMarket matrix coordinate real general\n% comment\n2 2 3\n1 1 4\n2 2 3\n1 2 1\n")
    assert np.array_equal(load_matrix_market(p).toarray(), [[4, 1], [1, 3]])


def test_mm_general_mismatch(tmp_path):
    p = _write(tmp_path, "%%MatrixMarket matrix coordinate real general\n2 2 4\n1 1 4\n2 2 3\n1 2 1\n2 1 1.5\n")
    with pytest.raises(MatrixError, match="asymmetric values"):
        load_matrix_market(p)


def test_mm_general_within_ingest_tolerance(tmp_path):
    p = _write(tmp_path, "%%MatrixMarket matrix coordinate real general\n2 2 4\n1 1 4\n2 2 3\n1 2 1\n2 1 1.000000000000001\n")
    assert load_matrix_market(p).n == 2


def test_mm_negative_diagonal(tmp_path):
    p = _write(tmp_path, "%%MatrixMarket matrix coordinate real symmetric\n2 2 2\n1 1 -1\n2 2 3\n")
    with pytest.raises(MatrixError, match="nonpositive diagonal"):
        load_matrix_market(p)


@pytest.mark.parametrize(
    "text",
    [
        "not a header\n1 1 1\n1 1 1\n",
        "%%MatrixMarket matrix array real general\n1 1\n1\n",
        "%%MatrixMarket matrix coordinate real symmetric\n2 2 2\n1 1 4\n",
        "%%MatrixMarket matrix coordinate real symmetric\n2 2 1\n3 1 4\n",
        "%%MatrixMarket matrix coordinate real symmetric\n2 2 1\n1 x 4\n",
    ],
)
def test_mm_parse_errors(tmp_path, text):
    with pytest.raises(MatrixError, match="parse error"):
        load_matrix_market(_write(tmp_path, text))


@pytest.mark.parametrize("A", [gen_poisson2d(3), gen_synthetic3d(3, 3, 2, "skyscraper", 4)])
def test_mm_round_trip(tmp_path, A):
    p = tmp_path / "a.mtx"
    write_matrix_market(p, A)
    assert load_matrix_market(p).equals(A)


def test_synthetic_small_anisotropic():
    A = gen_synthetic3d(2, 2, 2, "anisotropic", seed=1)
    assert A.n == 8
    A.validate()
    assert np.all(A.diagonal() > 0)


def test_synthetic_deterministic():
    a = gen_synthetic3d(6, 5, 4, "skyscraper", seed=3)
    b = gen_synthetic3d(6, 5, 4, "skyscraper", seed=3)
    assert a.equals(b)
    assert not a.equals(gen_synthetic3d(6, 5, 4, "skyscraper", seed=4))


def test_synthetic_unknown_kind():
    with pytest.raises(ValueError):
        gen_synthetic3d(3, 3, 3, "marble")


def _power_cond(A, scale=None, iters=300):
    # power iteration for the largest eigenvalue, shifted power iteration for the smallest
    M = A.csr if scale is None else sp.diags(scale) @ A.csr @ sp.diags(scale)
    rng = np.random.default_rng(0)
    v = rng.standard_normal(A.n)
    for _ in range(iters):
        v = M @ v
        v /= np.linalg.norm(v)
    lmax = v @ (M @ v)
    w = rng.standard_normal(A.n)
    for _ in range(iters * 10):
        w = lmax * w - M @ w
        w /= np.linalg.norm(w)
    lmin = lmax - w @ (lmax * w - M @ w)
    return lmax / lmin


def test_skyscraper_ill_conditioned():
    A = gen_synthetic3d(20, 20, 20, "skyscraper", seed=7)
    assert A.n == 8000
    # power-iteration estimates overestimate lambda_min, so both are lower bounds on cond
    assert _power_cond(A) > 1e3
    assert _power_cond(A, 1 / np.sqrt(A.diagonal())) > 1e3


def test_synthetic_is_spd_small():
    A = gen_synthetic3d(4, 3, 3, "anisotropic", seed=2).toarray()
    assert np.linalg.eigvalsh(A).min() > 0
