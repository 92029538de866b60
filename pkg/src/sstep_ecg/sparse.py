"""Sparse SPD storage, test-matrix generators, Matrix Market I/O and SpMM."""

from __future__ import annotations

import os
from dataclasses import dataclass
from functools import cached_property

import numpy as np
import scipy.sparse as sp

__all__ = [
    "MatrixError",
    "SparseSpd",
    "gen_poisson2d",
    "gen_synthetic3d",
    "load_matrix_market",
    "write_matrix_market",
    "spmm",
]

INGEST_RTOL = 1e-14


class MatrixError(ValueError):
    """Raised when a matrix violates the SPD storage invariants."""


@dataclass(frozen=True, eq=False)
class SparseSpd:
    """Symmetric positive definite matrix in CSR form.

    Instances are immutable; the scipy view is built lazily and shared.
    """

    n: int
    row_ptr: np.ndarray
    col_idx: np.ndarray
    vals: np.ndarray

    def __post_init__(self):
        for arr in (self.row_ptr, self.col_idx, self.vals):
            arr.setflags(write=False)

    @classmethod
    def from_scipy(cls, mat, rtol: float = 0.0) -> "SparseSpd":
        csr = sp.csr_matrix(mat, dtype=np.float64)
        csr.sum_duplicates()
        csr.sort_indices()
        out = cls(
            n=csr.shape[0],
            row_ptr=csr.indptr.astype(np.int64),
            col_idx=csr.indices.astype(np.int64),
            vals=csr.data.astype(np.float64),
        )
        out.validate(rtol)
        return out

    @cached_property
    def csr(self) -> sp.csr_matrix:
        m = sp.csr_matrix((self.vals, self.col_idx, self.row_ptr), shape=(self.n, self.n))
        m.has_sorted_indices = True
        return m

    @property
    def nnz(self) -> int:
        return int(self.row_ptr[-1])

    @property
    def shape(self) -> tuple[int, int]:
        return (self.n, self.n)

    def diagonal(self) -> np.ndarray:
        return self.csr.diagonal()

    def toarray(self) -> np.ndarray:
        return self.csr.toarray()

    def __matmul__(self, x):
        return spmm(self, x)

    def equals(self, other: "SparseSpd") -> bool:
        return (
            self.n == other.n
            and np.array_equal(self.row_ptr, other.row_ptr)
            and np.array_equal(self.col_idx, other.col_idx)
            and np.array_equal(self.vals, other.vals)
        )

    def validate(self, rtol: float = 0.0) -> None:
        """Check symmetry, sorted column indices and a positive diagonal.

        ``rtol`` bounds ``|a_ij - a_ji|`` relative to ``max(|a_ij|, |a_ji|)``.
        """
        if self.row_ptr.shape != (self.n + 1,) or self.row_ptr[0] != 0:
            raise MatrixError("malformed row pointer")
        if self.col_idx.size and (self.col_idx.min() < 0 or self.col_idx.max() >= self.n):
            raise MatrixError("column index out of range")
        rows = np.repeat(np.arange(self.n), np.diff(self.row_ptr))
        same_row = rows[1:] == rows[:-1]
        if np.any(np.diff(self.col_idx)[same_row] <= 0):
            raise MatrixError("column indices not strictly increasing within a row")

        m = self.csr
        diag_present = np.zeros(self.n, dtype=bool)
        diag_present[rows[rows == self.col_idx]] = True
        if not diag_present.all():
            raise MatrixError("missing diagonal entry")
        if np.any(m.diagonal() <= 0):
            raise MatrixError("nonpositive diagonal")

        mt = m.T.tocsr()
        mt.sort_indices()
        if not (np.array_equal(mt.indptr, m.indptr) and np.array_equal(mt.indices, m.indices)):
            raise MatrixError("asymmetric structure")
        diff = np.abs(mt.data - m.data)
        scale = np.maximum(np.abs(mt.data), np.abs(m.data))
        if np.any(diff > rtol * scale):
            raise MatrixError("asymmetric values")


def spmm(A: SparseSpd, X: np.ndarray) -> np.ndarray:
    """Return ``A @ X`` for a vector or an ``n x m`` block.

    Each output entry accumulates its row in ascending column order, so the
    result does not depend on how columns are scheduled.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.shape[0] != A.n:
        raise ValueError(f"dimension mismatch: A is {A.n}x{A.n}, X has {X.shape[0]} rows")
    return A.csr @ X


def gen_poisson2d(nx: int) -> SparseSpd:
    """5-point Laplacian on an ``nx x nx`` grid (4 on the diagonal, -1 off)."""
    if nx < 2:
        raise ValueError("nx must be >= 2")
    t = sp.diags([-1.0, 2.0, -1.0], [-1, 0, 1], shape=(nx, nx))
    eye = sp.identity(nx)
    L = (sp.kron(eye, t) + sp.kron(t, eye)).tocsr()
    L.eliminate_zeros()
    return SparseSpd.from_scipy(L)


def _skyscraper_field(nx, ny, nz, rng):
    # checkerboard of cells, each ~1/5 of a side; half the even cells are raised
    bs = [max(1, d // 5) for d in (nx, ny, nz)]
    ix, iy, iz = np.meshgrid(
        np.arange(nx) // bs[0], np.arange(ny) // bs[1], np.arange(nz) // bs[2], indexing="ij"
    )
    cells = np.stack([ix, iy, iz]).reshape(3, -1)
    ncell = [int(c.max()) + 1 for c in cells]
    draw = rng.random(ncell) < 0.5
    even = (cells.sum(axis=0) % 2) == 0
    high = even & draw[cells[0], cells[1], cells[2]]
    kappa = np.where(high, 1e3, 1.0).reshape(nx, ny, nz)
    return kappa, kappa, kappa


def _anisotropic_field(nx, ny, nz, rng):
    levels = np.array([1.0, 1e-2, 1e-4])
    kx = np.empty((nx, ny, nz))
    ky = np.empty_like(kx)
    kz = np.empty_like(kx)
    for z in range(nz):
        cx, cy, cz = levels[rng.permutation(3)]
        kx[:, :, z], ky[:, :, z], kz[:, :, z] = cx, cy, cz
    return kx, ky, kz


def gen_synthetic3d(nx: int, ny: int, nz: int, kind: str = "skyscraper", seed: int = 0) -> SparseSpd:
    """7-point finite-difference operator with piecewise-constant coefficients.

    ``kind="skyscraper"`` raises random checkerboard cells to coefficient 1e3;
    ``kind="anisotropic"`` gives every z-layer a random assignment of the
    directional coefficients {1, 1e-2, 1e-4}. Faces carry the harmonic mean
    of the two nodal coefficients, boundary faces couple to a zero Dirichlet
    ghost, and the diagonal is the sum of all face couplings plus 1e-8.
    """
    if min(nx, ny, nz) < 2:
        raise ValueError("all dimensions must be >= 2")
    rng = np.random.default_rng(seed)
    if kind == "skyscraper":
        fields = _skyscraper_field(nx, ny, nz, rng)
    elif kind == "anisotropic":
        fields = _anisotropic_field(nx, ny, nz, rng)
    else:
        raise ValueError(f"unknown kind {kind!r}")

    dims = (nx, ny, nz)
    idx = np.arange(nx * ny * nz).reshape(dims)
    diag = np.full(dims, 1e-8)
    rows, cols, data = [], [], []
    for axis, kappa in enumerate(fields):
        lo = [slice(None)] * 3
        hi = [slice(None)] * 3
        lo[axis] = slice(0, -1)
        hi[axis] = slice(1, None)
        lo, hi = tuple(lo), tuple(hi)
        face = 2 * kappa[lo] * kappa[hi] / (kappa[lo] + kappa[hi])
        rows += [idx[lo].ravel(), idx[hi].ravel()]
        cols += [idx[hi].ravel(), idx[lo].ravel()]
        data += [-face.ravel(), -face.ravel()]
        diag[lo] += face
        diag[hi] += face
        # boundary faces couple to a zero Dirichlet ghost node
        first = [slice(None)] * 3
        last = [slice(None)] * 3
        first[axis] = 0
        last[axis] = -1
        diag[tuple(first)] += kappa[tuple(first)]
        diag[tuple(last)] += kappa[tuple(last)]
    n = idx.size
    rows.append(idx.ravel())
    cols.append(idx.ravel())
    data.append(diag.ravel())
    mat = sp.coo_matrix(
        (np.concatenate(data), (np.concatenate(rows), np.concatenate(cols))), shape=(n, n)
    )
    return SparseSpd.from_scipy(mat)


def write_matrix_market(path: str | os.PathLike, A: SparseSpd) -> None:
    """Write the lower triangle in coordinate/real/symmetric form, 17 digits."""
    coo = sp.tril(A.csr).tocoo()
    order = np.lexsort((coo.row, coo.col))
    with open(path, "w") as fh:
        fh.write("%%MatrixMarket matrix coordinate real symmetric\n")
        fh.write(f"{A.n} {A.n} {coo.nnz}\n")
        for i, j, v in zip(coo.row[order], coo.col[order], coo.data[order]):
            fh.write(f"{i + 1} {j + 1} {v:.17g}\n")


def load_matrix_market(path: str | os.PathLike) -> SparseSpd:
    """Read a coordinate real symmetric/general file into a full SparseSpd.

    Symmetric files are mirrored. General files must already be symmetric to
    within a relative 1e-14; both triangles are kept as stored.
    """
    with open(path) as fh:
        header = fh.readline().split()
        if len(header) < 5 or header[0].lower() != "%%matrixmarket":
            raise MatrixError("parse error: missing MatrixMarket header")
        obj, fmt, field, symm = (h.lower() for h in header[1:5])
        if obj != "matrix" or fmt != "coordinate":
            raise MatrixError("parse error: only coordinate matrices are supported")
        if field not in ("real", "integer", "double"):
            raise MatrixError(f"parse error: unsupported field {field!r}")
        if symm not in ("symmetric", "general"):
            raise MatrixError(f"parse error: unsupported symmetry {symm!r}")
        line = fh.readline()
        while line.startswith("%"):
            line = fh.readline()
        try:
            nr, nc, nnz = (int(tok) for tok in line.split())
            body = np.loadtxt(fh, ndmin=2) if nnz else np.empty((0, 3))
        except ValueError as exc:
            raise MatrixError(f"parse error: {exc}") from None
    if nr != nc:
        raise MatrixError("parse error: matrix is not square")
    if body.shape != (nnz, 3):
        raise MatrixError("parse error: entry count does not match header")
    i = body[:, 0].astype(np.int64) - 1
    j = body[:, 1].astype(np.int64) - 1
    v = body[:, 2]
    if i.size and (min(i.min(), j.min()) < 0 or max(i.max(), j.max()) >= nr):
        raise MatrixError("parse error: index out of range")
    if symm == "symmetric":
        if np.any(j > i):
            raise MatrixError("parse error: symmetric file stores upper-triangular entries")
        off = i != j
        i, j, v = np.concatenate([i, j[off]]), np.concatenate([j, i[off]]), np.concatenate([v, v[off]])
    else:
        i, j, v = _mirror_general(i, j, v, nr)
    mat = sp.coo_matrix((v, (i, j)), shape=(nr, nr))
    return SparseSpd.from_scipy(mat, rtol=0.0 if symm == "symmetric" else INGEST_RTOL)


def _mirror_general(i, j, v, n):
    # sum duplicates, then add the transpose of every entry whose mirror is absent
    m = sp.coo_matrix((v, (i, j)), shape=(n, n)).tocsr()
    m.sum_duplicates()
    coo = m.tocoo()
    keys = coo.row * n + coo.col
    mirror = coo.col * n + coo.row
    order = np.argsort(keys)
    pos = np.searchsorted(keys[order], mirror)
    pos = np.minimum(pos, keys.size - 1)
    has_mirror = keys[order][pos] == mirror
    other = coo.data[order][pos]
    both = has_mirror & (coo.row != coo.col)
    diff = np.abs(coo.data[both] - other[both])
    if np.any(diff > INGEST_RTOL * np.maximum(np.abs(coo.data[both]), np.abs(other[both]))):
        raise MatrixError("asymmetric values")
    add = ~has_mirror
    return (
        np.concatenate([coo.row, coo.col[add]]),
        np.concatenate([coo.col, coo.row[add]]),
        np.concatenate([coo.data, coo.data[add]]),
    )
