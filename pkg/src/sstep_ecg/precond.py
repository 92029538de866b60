"""Block Jacobi preconditioners ``M = L L^T`` on the base domains."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .partition import Partition, split_T
from .sparse import SparseSpd

__all__ = [
    "FactorizationError",
    "BlockJacobiPrecond",
    "build_block_jacobi",
    "identity_precond",
    "ic0_dense",
    "ic0_sparse",
    "apply_Linv",
    "apply_Ltinv",
    "apply_Minv",
    "split_T_prec",
]

DENSE_LIMIT = 500
MODES = ("cholesky", "ic0", "identity")


class FactorizationError(ArithmeticError):
    pass


@dataclass(frozen=True, eq=False)
class BlockJacobiPrecond:
    """Lower-triangular factor per base domain.

    ``factors[i]`` is a dense array for blocks up to 500 rows and a CSR
    matrix otherwise. ``shifts[i]`` is the diagonal shift that was needed for
    an incomplete factorization to succeed (0 when none).
    """

    factors: tuple
    base_ranges: tuple[tuple[int, int], ...]
    mode: str
    shifts: tuple[float, ...]

    @property
    def n(self) -> int:
        return self.base_ranges[-1][1]

    @property
    def nblocks(self) -> int:
        return len(self.factors)

    @property
    def shifted(self) -> bool:
        return any(s > 0 for s in self.shifts)


def ic0_dense(B: np.ndarray) -> np.ndarray:
    """Zero fill-in incomplete Cholesky of a dense SPD block.

    Fill is discarded outside the lower-triangular pattern of ``B``.
    """
    m = B.shape[0]
    pattern = np.tril(B != 0)
    L = np.tril(B).astype(np.float64)
    for k in range(m):
        piv = L[k, k]
        if not piv > 0:
            raise FactorizationError(f"nonpositive pivot {piv:.3e} at row {k}")
        L[k, k] = np.sqrt(piv)
        L[k + 1 :, k] /= L[k, k]
        col = L[k + 1 :, k]
        nz = np.flatnonzero(col)
        if nz.size:
            idx = nz + k + 1
            sub = np.ix_(idx, idx)
            L[sub] -= np.outer(col[nz], col[nz]) * pattern[sub]
    return np.tril(L)


def ic0_sparse(B: sp.spmatrix) -> sp.csr_matrix:
    """Row-oriented IC(0) for large sparse blocks; same result as :func:`ic0_dense`."""
    low = sp.tril(sp.csr_matrix(B)).tocsr()
    low.sort_indices()
    m = low.shape[0]
    rows: list[dict[int, float]] = []
    diag = np.empty(m)
    for i in range(m):
        a, b = low.indptr[i], low.indptr[i + 1]
        cols, vals = low.indices[a:b], low.data[a:b]
        row: dict[int, float] = {}
        for k, v in zip(cols[:-1] if cols[-1] == i else cols, vals):
            rk = rows[k]
            acc = v
            for j, lij in row.items():
                lkj = rk.get(j)
                if lkj is not None:
                    acc -= lij * lkj
            row[int(k)] = acc / diag[k]
        if cols[-1] != i:
            raise FactorizationError(f"missing diagonal at row {i}")
        piv = vals[-1] - sum(x * x for x in row.values())
        if not piv > 0:
            raise FactorizationError(f"nonpositive pivot {piv:.3e} at row {i}")
        diag[i] = np.sqrt(piv)
        rows.append(row)
    ri, ci, vi = [], [], []
    for i, row in enumerate(rows):
        ri += [i] * (len(row) + 1)
        ci += list(row.keys()) + [i]
        vi += list(row.values()) + [diag[i]]
    return sp.csr_matrix((vi, (ri, ci)), shape=(m, m))


def _factor_block(B, mode):
    dense = B.shape[0] <= DENSE_LIMIT
    if mode == "identity":
        return np.eye(B.shape[0]) if dense else sp.identity(B.shape[0], format="csr")
    if mode == "cholesky":
        Bd = B.toarray()
        try:
            L = np.linalg.cholesky(Bd)
        except np.linalg.LinAlgError as exc:
            raise FactorizationError(str(exc)) from None
        # no sparse direct solver is available; large blocks keep the dense fill as CSR
        return L if dense else sp.csr_matrix(L)
    if mode == "ic0":
        return ic0_dense(B.toarray()) if dense else ic0_sparse(B)
    raise ValueError(f"unknown preconditioner mode {mode!r}")


def build_block_jacobi(A: SparseSpd, P: Partition, mode: str = "ic0") -> BlockJacobiPrecond:
    """Factor every diagonal block ``A(D_i, D_i)`` of a reordered partition.

    ``P`` must be contiguous and hold the base domains. An incomplete
    factorization that hits a nonpositive pivot is retried on
    ``A_ii + sigma I`` with ``sigma = 1e-3 max diag(A_ii)``, doubling sigma
    until it succeeds.
    """
    if mode not in MODES:
        raise ValueError(f"unknown preconditioner mode {mode!r}")
    if P.n != A.n:
        raise ValueError("partition does not match matrix")
    ranges = tuple(P.domain_ranges)
    csr = A.csr
    factors, shifts = [], []
    for a, b in ranges:
        B = csr[a:b, a:b]
        sigma = 0.0
        while True:
            try:
                Bs = B if sigma == 0 else B + sigma * sp.identity(b - a)
                factors.append(_factor_block(sp.csr_matrix(Bs), mode))
                break
            except FactorizationError:
                if mode != "ic0":
                    raise
                sigma = 1e-3 * B.diagonal().max() if sigma == 0 else 2 * sigma
        shifts.append(sigma)
    return BlockJacobiPrecond(tuple(factors), ranges, mode, tuple(shifts))


def identity_precond(P: Partition) -> BlockJacobiPrecond:
    """``M = I`` expressed as a block Jacobi preconditioner on ``P``."""
    ranges = tuple(P.domain_ranges)
    factors = tuple(_factor_block(sp.identity(b - a), "identity") for a, b in ranges)
    return BlockJacobiPrecond(factors, ranges, "identity", (0.0,) * len(ranges))


def _tri_solve(L, X, trans):
    if isinstance(L, np.ndarray):
        return sla.solve_triangular(L, X, lower=True, trans=trans, check_finite=False)
    if trans:
        return spla.spsolve_triangular(L.T.tocsr(), X, lower=False)
    return spla.spsolve_triangular(L, X, lower=True)


def _apply(Pr: BlockJacobiPrecond, X, steps):
    X = np.asarray(X, dtype=np.float64)
    if X.shape[0] != Pr.n:
        raise ValueError("dimension mismatch")
    Y = np.empty_like(X, order="F") if X.ndim == 2 else np.empty_like(X)
    for L, (a, b) in zip(Pr.factors, Pr.base_ranges):
        blk = X[a:b]
        for trans in steps:
            blk = _tri_solve(L, blk, trans)
        Y[a:b] = blk
    return Y


def apply_Linv(Pr: BlockJacobiPrecond, X) -> np.ndarray:
    return _apply(Pr, X, (0,))


def apply_Ltinv(Pr: BlockJacobiPrecond, X) -> np.ndarray:
    return _apply(Pr, X, (1,))


def apply_Minv(Pr: BlockJacobiPrecond, X) -> np.ndarray:
    return _apply(Pr, X, (0, 1))


def conforms(Pr: BlockJacobiPrecond, P: Partition) -> bool:
    """True when every domain of ``P`` is a union of whole base blocks."""
    starts = {a for a, _ in Pr.base_ranges} | {Pr.n}
    return P.n == Pr.n and all(a in starts and b in starts for a, b in P.domain_ranges)


def split_T_prec(Pr: BlockJacobiPrecond, r, P: Partition) -> np.ndarray:
    """``M^{-1} [T(r)]`` by per-domain triangular solves.

    For a block-diagonal ``L`` conforming to ``P`` this equals
    ``L^{-T} [T(L^{-1} r)]``.
    """
    if not conforms(Pr, P):
        raise ValueError("preconditioner blocks do not conform to the partition")
    return apply_Minv(Pr, split_T(r, P))
