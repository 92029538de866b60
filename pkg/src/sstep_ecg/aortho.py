"""A-inner-product orthonormalization kernels and block basis construction.

All routines take ``A`` (the SPD operator defining the inner product) and
dense ``n x m`` blocks. Basis-growing routines additionally accept ``op``,
the operator whose powers generate new blocks; it is ``A`` itself for the
unpreconditioned solvers and ``M^{-1} A`` for the preconditioned ones.
"""

from __future__ import annotations

from collections import deque
from typing import Callable

import numpy as np
import scipy.linalg as sla

from .sparse import SparseSpd, spmm

__all__ = [
    "BasisBreakdown",
    "BasisAccumulator",
    "a_gram",
    "cgs2_against",
    "a_cholqr",
    "pre_cholqr",
    "self_orthonormalize",
    "arnoldi_step",
    "ca_arnoldi",
]

EPS = 2.0**-52
ORTHO_KINDS = ("acholqr", "precholqr")


class BasisBreakdown(ArithmeticError):
    """The block handed to a self-orthonormalization is numerically rank deficient."""

    def __init__(self, message: str, stage: str = "", pivot: float = float("nan"), index: int = -1):
        super().__init__(message)
        self.stage = stage
        self.pivot = pivot
        self.index = index


def _as_block(X) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    return X[:, None] if X.ndim == 1 else X


def a_gram(A: SparseSpd, X, Y) -> np.ndarray:
    """``X^T (A Y)``."""
    X, Y = _as_block(X), _as_block(Y)
    if X.shape[0] != A.n or Y.shape[0] != A.n:
        raise ValueError("dimension mismatch")
    return X.T @ spmm(A, Y)


def cgs2_against(A: SparseSpd, W, Q) -> np.ndarray:
    """Classical Gram-Schmidt in the A-inner product, applied twice.

    ``Q`` is assumed A-orthonormal. An empty ``Q`` returns a copy of ``W``.
    """
    W = np.array(_as_block(W), order="F")
    Q = _as_block(Q)
    if Q.shape[1] == 0:
        return W
    for _ in range(2):
        W -= Q @ (Q.T @ spmm(A, W))
    return W


def _cholesky_upper(B: np.ndarray, n: int, stage: str) -> np.ndarray:
    """Upper Cholesky factor, refusing pivots at or below ``n * eps * max|B|``."""
    B = 0.5 * (B + B.T)
    thresh = n * EPS * np.abs(B).max()
    try:
        R = sla.cholesky(B, lower=False, check_finite=True)
    except (sla.LinAlgError, ValueError) as exc:
        raise BasisBreakdown(f"{stage}: Cholesky failed ({exc})", stage) from None
    piv = np.diag(R) ** 2
    k = int(np.argmin(piv))
    if not np.isfinite(thresh) or piv[k] <= thresh:
        raise BasisBreakdown(
            f"{stage}: pivot {piv[k]:.3e} at column {k} below {thresh:.3e}", stage, float(piv[k]), k
        )
    return R


def _right_solve(W: np.ndarray, R: np.ndarray) -> np.ndarray:
    # W R^{-1}
    return np.asfortranarray(sla.solve_triangular(R, W.T, trans="T", lower=False).T)


def a_cholqr(A: SparseSpd, W) -> np.ndarray:
    """Cholesky QR in the A-inner product: ``W R^{-1}`` with ``R^T R = W^T A W``."""
    W = _as_block(W)
    if W.shape[0] != A.n:
        raise ValueError("dimension mismatch")
    R = _cholesky_upper(a_gram(A, W, W), A.n, "a-cholqr")
    return _right_solve(W, R)


def pre_cholqr(A: SparseSpd, W) -> np.ndarray:
    """Euclidean QR of ``W`` followed by :func:`a_cholqr` of the orthonormal factor.

    The first stage is a Householder QR of the column-normalized block; a
    diagonal entry of its triangular factor at or below ``n * eps`` times the
    largest one signals a rank deficient block.
    """
    W = _as_block(W)
    if W.shape[0] != A.n:
        raise ValueError("dimension mismatch")
    if not np.all(np.isfinite(W)):
        raise BasisBreakdown("pre-cholqr: non-finite entries", "qr")
    norms = np.linalg.norm(W, axis=0)
    if not np.all(norms > 0):
        k = int(np.argmin(norms))
        raise BasisBreakdown(f"qr: zero column {k}", "qr", 0.0, k)
    # unit columns make the rank test scale free; the span and the result are unchanged
    Q, R = sla.qr(W / norms, mode="economic", check_finite=False)
    d = np.abs(np.diag(R))
    thresh = A.n * EPS * d.max()
    k = int(np.argmin(d))
    if d[k] <= thresh:
        raise BasisBreakdown(
            f"qr: diagonal {d[k]:.3e} at column {k} below {thresh:.3e}", "qr", float(d[k]), k
        )
    # fix the sign so a block that is already orthonormal comes back unchanged
    Q *= np.sign(np.diag(R))
    return a_cholqr(A, Q)


def self_orthonormalize(A: SparseSpd, W, ortho: str = "precholqr") -> np.ndarray:
    if ortho == "precholqr":
        return pre_cholqr(A, W)
    if ortho == "acholqr":
        return a_cholqr(A, W)
    raise ValueError(f"unknown orthonormalization {ortho!r}")


class BasisAccumulator:
    """Growing A-orthonormal basis ``Q`` stored block by block.

    ``window=None`` keeps every block (full basis); an integer keeps only the
    most recent ``window`` blocks.
    """

    def __init__(self, n: int, window: int | None = None):
        self.n = n
        self.window = window
        self.nblocks = 0
        if window is None:
            self._buf = np.empty((n, 0), order="F")
            self._m = 0
        else:
            self._blocks: deque[np.ndarray] = deque(maxlen=window)

    @property
    def full(self) -> bool:
        return self.window is None

    @property
    def ncols(self) -> int:
        if self.full:
            return self._m
        return sum(b.shape[1] for b in self._blocks)

    def append(self, W: np.ndarray) -> None:
        W = _as_block(W)
        self.nblocks += 1
        if not self.full:
            self._blocks.append(np.asfortranarray(W))
            return
        need = self._m + W.shape[1]
        if need > self._buf.shape[1]:
            cap = max(need, 2 * self._buf.shape[1], 64)
            buf = np.empty((self.n, cap), order="F")
            buf[:, : self._m] = self._buf[:, : self._m]
            self._buf = buf
        self._buf[:, self._m : need] = W
        self._m = need

    def view(self, last: int | None = None) -> np.ndarray:
        """Columns of the basis, optionally only the last ``last`` blocks."""
        if self.full:
            if last is not None:
                raise ValueError("block-limited views need a windowed accumulator")
            return self._buf[:, : self._m]
        blocks = list(self._blocks)
        if last is not None:
            blocks = blocks[-last:] if last > 0 else []
        if not blocks:
            return np.empty((self.n, 0), order="F")
        return np.hstack(blocks) if len(blocks) > 1 else blocks[0]

    def projection_view(self, mode: str) -> np.ndarray:
        """Basis columns a stepwise Arnoldi block is projected against."""
        if mode == "full":
            return self.view()
        if mode == "truncated":
            return self.view(last=2)
        raise ValueError(f"unknown mode {mode!r}")


Operator = Callable[[np.ndarray], np.ndarray]


def _default_op(A: SparseSpd, op: Operator | None) -> Operator:
    return op if op is not None else (lambda X: spmm(A, X))


def arnoldi_step(
    A: SparseSpd,
    W_prev,
    Q: BasisAccumulator,
    mode: str = "full",
    ortho: str = "precholqr",
    op: Operator | None = None,
) -> np.ndarray:
    """Next block ``orth(cgs2(op W_prev))``; appended to ``Q`` and returned.

    ``mode="truncated"`` projects only against the two newest blocks.
    """
    op = _default_op(A, op)
    W = cgs2_against(A, op(W_prev), Q.projection_view(mode))
    W = self_orthonormalize(A, W, ortho)
    Q.append(W)
    return W


def ca_arnoldi(
    A: SparseSpd,
    W_start,
    Q: np.ndarray,
    s: int,
    k: int,
    variant: str = "alg7",
    ortho: str = "precholqr",
    op: Operator | None = None,
    reseed: bool = False,
) -> np.ndarray:
    """Build ``s`` blocks of powers and A-orthonormalize them as one slab.

    ``W_start`` is the previous A-orthonormal block (first block ``op W_start``)
    or, when ``k == 1`` or ``reseed`` is set, the raw seed block used as the
    first block directly. ``Q`` holds the columns the slab is projected against
    (ignored for ``k == 1``).

    ``variant="alg5"`` generates every power before any orthonormalization.
    ``variant="alg7"`` first cleans the leading block against ``Q`` and itself
    and only then generates the remaining powers. With ``s == 1`` the alg7
    slab equals its cleaned leading block, so no second pass is made and the
    result matches :func:`arnoldi_step`.
    """
    if s < 1:
        raise ValueError("s must be >= 1")
    if variant not in ("alg5", "alg7"):
        raise ValueError(f"unknown variant {variant!r}")
    op = _default_op(A, op)
    first = k == 1 or reseed
    W = _as_block(W_start) if first else op(W_start)
    project = k > 1 and Q.shape[1] > 0

    if variant == "alg7":
        if project:
            W = cgs2_against(A, W, Q)
        W = self_orthonormalize(A, W, ortho)
        if s == 1:
            return W

    blocks = [W]
    for _ in range(s - 1):
        blocks.append(op(blocks[-1]))
    V = np.hstack(blocks) if s > 1 else np.asfortranarray(W)
    if project:
        V = cgs2_against(A, V, Q)
    return self_orthonormalize(A, V, ortho)
