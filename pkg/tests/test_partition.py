import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.sparse.csgraph import connected_components

from sstep_ecg.partition import (
    Partition,
    kway_partition,
    read_partition,
    reorder,
    split_T,
    write_partition,
)
from sstep_ecg.sparse import gen_poisson2d, gen_synthetic3d

from conftest import diag_matrix


def _connected(A, P):
    csr = A.csr
    for d in range(P.t):
        rows = np.flatnonzero(P.domain_of == d)
        if connected_components(csr[rows][:, rows], directed=False)[0] != 1:
            return False
    return True


def test_poisson2_two_domains():
    P = kway_partition(gen_poisson2d(2), 2)
    assert sorted(P.sizes()) == [2, 2]


def test_single_domain():
    P = kway_partition(gen_poisson2d(5), 1)
    assert P.t == 1 and np.all(P.domain_of == 0)


@pytest.fixture(scope="module")
def base64(poisson100):
    return kway_partition(poisson100, 64, seed=0)


def test_poisson100_64_balance(base64):
    sizes = base64.sizes()
    assert sizes.min() >= 147 and sizes.max() <= 165
    assert sizes.max() <= math.ceil(10000 / 64) * 1.05


def test_poisson100_domains_connected(poisson100, base64):
    assert not base64.fallback
    assert _connected(poisson100, base64)


@pytest.mark.parametrize("t", [2, 8, 32])
def test_nested_coarsening(poisson100, base64, t):
    P = base64.coarsen(t)
    assert np.array_equal(P.domain_of, kway_partition(poisson100, t, seed=0).domain_of)
    assert P.sizes().max() <= math.ceil(10000 / t) * 1.05


def test_deterministic(poisson100):
    a = kway_partition(poisson100, 16, seed=3)
    b = kway_partition(poisson100, 16, seed=3)
    assert np.array_equal(a.domain_of, b.domain_of)


@pytest.mark.parametrize("method", ["bfs", "multilevel"])
@given(nx=st.integers(4, 20), logt=st.integers(0, 3), seed=st.integers(0, 1000))
def test_partition_properties(method, nx, logt, seed):
    A = gen_poisson2d(nx)
    t = 2**logt
    P = kway_partition(A, t, seed=seed, method=method)
    sizes = P.sizes()
    assert sizes.sum() == A.n and sizes.min() > 0
    assert sizes.max() <= math.ceil(A.n / t) * 1.05 + 1
    assert np.array_equal(P.domain_of, kway_partition(A, t, seed=seed, method=method).domain_of)


def test_bad_t():
    A = gen_poisson2d(4)
    with pytest.raises(ValueError):
        kway_partition(A, 3)
    with pytest.raises(ValueError):
        kway_partition(A, 32)
    with pytest.raises(ValueError):
        kway_partition(A, 2, method="metis")


def test_disconnected_graph_flags_fallback():
    A = diag_matrix(1, 2, 3, 4)
    P = kway_partition(A, 2)
    assert P.fallback and sorted(P.sizes()) == [2, 2]


def test_partition_validation():
    with pytest.raises(ValueError):
        Partition(2, np.array([0, 0]))
    with pytest.raises(ValueError):
        Partition(2, np.array([0, 2]))
    with pytest.raises(ValueError):
        Partition(1, np.array([], dtype=int))
    with pytest.raises(ValueError):
        Partition(2, np.array([1, 0])).domain_ranges
    with pytest.raises(ValueError):
        Partition(4, np.arange(4)).coarsen(3)


def test_reorder_identity():
    A = gen_poisson2d(4)
    P = Partition(2, np.repeat([0, 1], 8))
    B, perm = reorder(A, P)
    assert B.equals(A) and np.array_equal(perm, np.arange(16))


def test_reorder_swap():
    B, perm = reorder(diag_matrix(4, 3), Partition(2, np.array([1, 0])))
    assert np.array_equal(B.toarray(), np.diag([3.0, 4.0]))
    assert np.array_equal(perm + 1, [2, 1])


@given(st.integers(0, 1000))
def test_reorder_round_trip(seed):
    A = gen_synthetic3d(4, 3, 3, "anisotropic", seed=seed % 5)
    dom = np.random.default_rng(seed).permutation(np.arange(A.n) % 4)
    B, perm = reorder(A, Partition(4, dom))
    inv = np.empty_like(perm)
    inv[perm] = np.arange(A.n)
    assert np.array_equal(B.csr[inv][:, inv].toarray(), A.toarray())
    assert Partition(4, dom).permuted(perm).is_contiguous


def test_split_T_example():
    P = Partition(2, np.array([0, 0, 1, 1]))
    T = split_T(np.array([1.0, 2.0, 3.0, 4.0]), P)
    assert np.array_equal(T, [[1, 0], [2, 0], [0, 3], [0, 4]])


def test_split_T_zero():
    assert not split_T(np.zeros(4), Partition(2, np.array([0, 0, 1, 1]))).any()


@given(st.lists(st.floats(-1e300, 1e300), min_size=8, max_size=8), st.integers(0, 3))
def test_split_T_row_sum_exact(r, logt):
    t = 2**logt
    P = Partition(t, np.repeat(np.arange(t), 8 // t))
    r = np.array(r)
    assert np.array_equal(split_T(r, P).sum(axis=1), r)


def test_split_T_length_mismatch():
    with pytest.raises(ValueError):
        split_T(np.ones(3), Partition(2, np.array([0, 0, 1, 1])))


def test_partition_file_round_trip(tmp_path, base64):
    p = tmp_path / "part.txt"
    write_partition(p, base64)
    assert p.read_text().splitlines()[0] == str(base64.domain_of[0])
    back = read_partition(p, n=base64.n)
    assert np.array_equal(back.domain_of, base64.domain_of) and back.t == 64
    with pytest.raises(ValueError):
        read_partition(p, n=5)
