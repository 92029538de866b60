"""CG and the enlarged CG families (SRE-CG, SRE-CG2, MSDO-CG).

Every enlarged solver builds an A-orthonormal basis block by block and
updates the iterate with ``alpha = V^T r``, ``x += V alpha``,
``r -= (A V) alpha``. The variants differ in how the basis is grown:

* ``restructured``: stepwise blocks, one update per block, convergence
  checked once per ``s`` blocks;
* ``sstep``: stepwise blocks, one update per ``s`` blocks;
* ``ca-alg5`` / ``ca-alg7``: all ``s`` blocks generated as a slab and
  orthonormalized together (see :func:`sstep_ecg.aortho.ca_arnoldi`).

With a preconditioner ``M = L L^T`` new blocks are powers of ``M^{-1} A``
applied to ``M^{-1} T(r)`` while orthonormality, ``alpha`` and the residual
all use ``A`` itself.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import commcost
from .aortho import (
    BasisAccumulator,
    BasisBreakdown,
    arnoldi_step,
    ca_arnoldi,
    cgs2_against,
    self_orthonormalize,
)
from .partition import BASE_DOMAINS, Partition, kway_partition, reorder, split_T
from .precond import BlockJacobiPrecond, apply_Minv, build_block_jacobi, split_T_prec
from .sparse import SparseSpd, spmm

__all__ = [
    "METHODS",
    "VARIANTS",
    "PRECONDS",
    "SolveConfig",
    "SolveReport",
    "BreakdownRecord",
    "ConvergenceRelation",
    "Problem",
    "make_problem",
    "build_preconditioner",
    "solve",
    "solve_cg",
    "solve_enlarged",
    "check_convergence_relation",
]

METHODS = ("cg", "sre-cg", "sre-cg2", "msdo-cg")
VARIANTS = ("restructured", "sstep", "ca-alg5", "ca-alg7")
PRECONDS = ("none", "bj-chol", "bj-ic0")
ORTHOS = ("acholqr", "precholqr")
DEFAULT_KMAX = 5000

_PRECOND_MODE = {"bj-chol": "cholesky", "bj-ic0": "ic0"}

Monitor = Callable[[int, np.ndarray, np.ndarray], None]


@dataclass(frozen=True)
class SolveConfig:
    method: str = "cg"
    variant: str = "sstep"
    s: int = 1
    t: int = 1
    epsilon: float = 1e-6
    k_max: int = DEFAULT_KMAX
    ortho: str = "precholqr"
    precond: str = "none"
    seed: int = 0

    def __post_init__(self):
        ortho = self.ortho.removeprefix("cgs2+")
        object.__setattr__(self, "ortho", ortho)
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}")
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}")
        if ortho not in ORTHOS:
            raise ValueError(f"unknown orthonormalization {self.ortho!r}")
        if self.precond not in PRECONDS:
            raise ValueError(f"unknown preconditioner {self.precond!r}")
        if self.s < 1:
            raise ValueError("s must be >= 1")
        if self.t < 1:
            raise ValueError("t must be >= 1")
        if self.k_max < 1:
            raise ValueError("k_max must be >= 1")
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")
        if self.variant == "restructured" and self.method == "msdo-cg":
            raise ValueError("restructured variant exists only for sre-cg and sre-cg2")


@dataclass(frozen=True)
class BreakdownRecord:
    stage: str
    message: str
    pivot: float
    index: int
    outer_iter: int


@dataclass(eq=False)
class SolveReport:
    """Outcome of one solve.

    ``residual_history`` holds ``||r||_2`` after every outer iteration, with
    the initial residual first. ``inner_residual_history`` is filled only by
    the restructured variant (one entry per block update). ``true_relres``
    is ``||b - A x|| / ||r_0||`` recomputed at exit; the stopping test uses
    the recurrence residual.
    """

    config: SolveConfig
    converged: bool
    outer_iters: int
    inner_equiv_iters: int
    residual_history: list[float]
    final_relres: float
    true_relres: float
    inner_residual_history: list[float] = field(default_factory=list)
    breakdown: BreakdownRecord | None = None
    comm_messages: float | None = None
    comm_words: float | None = None
    max_ortho_error: float = 0.0
    max_galerkin: float | None = None
    x: np.ndarray | None = field(default=None, repr=False)

    def same_as(self, other: "SolveReport") -> bool:
        """Bitwise equality of every recorded field, the iterate included."""
        keys = [k for k in self.__dataclass_fields__ if k != "x"]
        if any(getattr(self, k) != getattr(other, k) for k in keys):
            return False
        if self.x is None or other.x is None:
            return self.x is other.x
        return self.x.tobytes() == other.x.tobytes()


def _comm(cfg: SolveConfig, outer: int, t: int) -> float | None:
    try:
        if cfg.method == "cg":
            return commcost.messages_total("cg", k=outer, m=t)
        return commcost.messages_total(cfg.method, cfg.variant, outer, cfg.s, t)
    except ValueError:
        return None


def _prepare(A: SparseSpd, b, x0):
    b = np.asarray(b, dtype=np.float64)
    if b.shape != (A.n,):
        raise ValueError("right-hand side length does not match matrix")
    x = np.zeros(A.n) if x0 is None else np.array(x0, dtype=np.float64)
    if x.shape != (A.n,):
        raise ValueError("initial guess length does not match matrix")
    return b, x


def solve_cg(
    A: SparseSpd,
    b,
    x0=None,
    cfg: SolveConfig | None = None,
    Pr: BlockJacobiPrecond | None = None,
    monitor: Monitor | None = None,
) -> SolveReport:
    """Preconditioned CG; ``Pr=None`` means ``M = I``.

    Stops once ``||r_k|| <= epsilon ||r_0||`` or after ``k_max`` iterations.
    """
    cfg = cfg or SolveConfig()
    b, x = _prepare(A, b, x0)
    if Pr is not None and Pr.n != A.n:
        raise ValueError("preconditioner does not match matrix")
    minv = (lambda v: v.copy()) if Pr is None else (lambda v: apply_Minv(Pr, v))

    r = b - spmm(A, x)
    rho = float(r @ r)
    rho0 = rho
    z = minv(r)
    rz = float(r @ z)
    hist = [math.sqrt(rho0)]
    tol = cfg.epsilon * math.sqrt(rho0)
    p = None
    k = 0
    while math.sqrt(rho) > tol and k < cfg.k_max:
        p = z.copy() if p is None else z + (rz / rz_prev) * p
        w = spmm(A, p)
        alpha = rz / float(p @ w)
        x += alpha * p
        r -= alpha * w
        z = minv(r)
        rz_prev, rz = rz, float(r @ z)
        rho = float(r @ r)
        k += 1
        hist.append(math.sqrt(rho))
        if monitor is not None:
            monitor(k, x, r)

    r0n = hist[0]
    relres = hist[-1] / r0n if r0n > 0 else 0.0
    true_rel = float(np.linalg.norm(b - spmm(A, x))) / r0n if r0n > 0 else 0.0
    return SolveReport(
        config=cfg,
        converged=hist[-1] <= tol,
        outer_iters=k,
        inner_equiv_iters=k,
        residual_history=hist,
        final_relres=relres,
        true_relres=true_rel,
        comm_messages=_comm(cfg, k, cfg.t),
        x=x,
    )


class _BasisBuilder:
    """Produces the blocks of one outer iteration.

    ``next_blocks`` returns a list of A-orthonormal blocks whose
    concatenation is this iteration's ``V``; stepwise variants return ``s``
    blocks of ``t`` columns, CA variants a single slab.
    """

    def __init__(self, A, P, cfg, op, seed):
        self.A, self.P, self.cfg, self.op, self.seed = A, P, cfg, op, seed
        self.s = cfg.s
        self.msdo = cfg.method == "msdo-cg"
        self.ca = cfg.variant.startswith("ca-")
        self.full = cfg.method != "sre-cg"
        if self.full:
            window = None
        elif self.ca:
            # the slab is projected against the previous (s+1) t vectors
            window = self.s + 1
        else:
            window = max(self.s, 3)
        self.Q = BasisAccumulator(A.n, window)
        self.last: np.ndarray | None = None
        self.k = 0

    def _msdo_seed(self, r):
        T = self.seed(r)
        keep = np.flatnonzero(np.any(T != 0, axis=0))
        if keep.size == 0:
            raise BasisBreakdown("seed: every domain residual vanished", "seed")
        return T if keep.size == T.shape[1] else np.asfortranarray(T[:, keep])

    def next_blocks(self, r) -> list[np.ndarray]:
        self.k += 1
        if self.ca:
            return [self._next_ca(r)]
        return self._next_stepwise(r)

    def _next_stepwise(self, r):
        A, cfg, Q = self.A, self.cfg, self.Q
        mode = "full" if self.full else "truncated"
        blocks = []
        if self.msdo:
            W = cgs2_against(A, self._msdo_seed(r), Q.view())
            W = self_orthonormalize(A, W, cfg.ortho)
            Q.append(W)
            blocks.append(W)
        elif self.last is None:
            W = self_orthonormalize(A, self.seed(r), cfg.ortho)
            Q.append(W)
            blocks.append(W)
        while len(blocks) < self.s:
            prev = blocks[-1] if blocks else self.last
            blocks.append(arnoldi_step(A, prev, Q, mode, cfg.ortho, self.op))
        self.last = blocks[-1]
        return blocks

    def _next_ca(self, r):
        A, cfg, Q = self.A, self.cfg, self.Q
        variant = cfg.variant.removeprefix("ca-")
        if self.msdo:
            start, reseed = self._msdo_seed(r), True
        elif self.last is None:
            start, reseed = self.seed(r), False
        else:
            start, reseed = self.last, False
        V = ca_arnoldi(A, start, Q.view(), self.s, self.k, variant, cfg.ortho, self.op, reseed)
        if self.full:
            Q.append(V)
        else:
            t = self.P.t
            for j in range(0, V.shape[1], t):
                Q.append(V[:, j : j + t])
        self.last = V[:, -self.P.t :]
        return V


def solve_enlarged(
    A: SparseSpd,
    b,
    x0,
    P: Partition,
    cfg: SolveConfig,
    Pr: BlockJacobiPrecond | None = None,
    monitor: Monitor | None = None,
    diagnostics: bool = True,
) -> SolveReport:
    """Run one of the enlarged CG methods on ``A`` already reordered by ``P``.

    ``Pr`` must be given exactly when ``cfg.precond`` is not ``"none"``; its
    blocks must nest inside the domains of ``P``. At most ``cfg.k_max``
    outer iterations are taken. A :class:`BasisBreakdown` ends the solve
    and is recorded in the report.

    With ``diagnostics`` set, the report carries the largest
    ``|V^T A V - I|`` entry seen and, for the full-basis methods, the
    largest ``|Q^T r|`` entry relative to ``||r_0||``.
    """
    if cfg.method == "cg":
        raise ValueError("use solve_cg for method 'cg'")
    if P.n != A.n or not P.is_contiguous:
        raise ValueError("partition must match A and be contiguous (reorder first)")
    if (Pr is None) != (cfg.precond == "none"):
        raise ValueError("preconditioner presence does not match cfg.precond")
    b, x = _prepare(A, b, x0)

    if Pr is None:
        op = lambda X: spmm(A, X)  # noqa: E731
        seed = lambda r: split_T(r, P)  # noqa: E731
    else:
        op = lambda X: apply_Minv(Pr, spmm(A, X))  # noqa: E731
        seed = lambda r: split_T_prec(Pr, r, P)  # noqa: E731

    builder = _BasisBuilder(A, P, cfg, op, seed)
    restructured = cfg.variant == "restructured"
    full_q = cfg.method != "sre-cg"

    r = b - spmm(A, x)
    rho0 = float(np.linalg.norm(r))
    rho = rho0
    tol = cfg.epsilon * rho0
    hist = [rho0]
    inner: list[float] = []
    breakdown = None
    ortho_err = 0.0
    galerkin = 0.0 if (diagnostics and full_q) else None
    k = 0

    while rho > tol and k < cfg.k_max:
        try:
            blocks = builder.next_blocks(r)
        except BasisBreakdown as exc:
            breakdown = BreakdownRecord(exc.stage, str(exc), exc.pivot, exc.index, k + 1)
            break
        AWs = [spmm(A, W) for W in blocks]
        if restructured:
            for W, AW in zip(blocks, AWs):
                alpha = W.T @ r
                x += W @ alpha
                r -= AW @ alpha
                inner.append(float(np.linalg.norm(r)))
        else:
            V, AV = (blocks[0], AWs[0]) if len(blocks) == 1 else (np.hstack(blocks), np.hstack(AWs))
            alpha = V.T @ r
            x += V @ alpha
            r -= AV @ alpha
        k += 1
        rho = float(np.linalg.norm(r))
        hist.append(rho)
        if diagnostics:
            for W, AW in ([(np.hstack(blocks), np.hstack(AWs))] if len(blocks) > 1 else zip(blocks, AWs)):
                G = W.T @ AW
                G[np.diag_indices_from(G)] -= 1.0
                ortho_err = max(ortho_err, float(np.abs(G).max()))
            if galerkin is not None:
                galerkin = max(galerkin, float(np.abs(builder.Q.view().T @ r).max()) / rho0)
        if monitor is not None:
            monitor(k, x, r)

    relres = rho / rho0 if rho0 > 0 else 0.0
    true_rel = float(np.linalg.norm(b - spmm(A, x))) / rho0 if rho0 > 0 else 0.0
    return SolveReport(
        config=cfg,
        converged=rho <= tol,
        outer_iters=k,
        inner_equiv_iters=cfg.s * k,
        residual_history=hist,
        final_relres=relres,
        true_relres=true_rel,
        inner_residual_history=inner,
        breakdown=breakdown,
        comm_messages=_comm(cfg, k, P.t),
        comm_words=commcost.words_total(cfg.method, cfg.variant),
        max_ortho_error=ortho_err,
        max_galerkin=galerkin,
        x=x,
    )


@dataclass(frozen=True, eq=False)
class Problem:
    """A test system reordered so every domain is a contiguous row range.

    ``base`` is the finest partition (64 domains unless the matrix is
    smaller or a partition was injected); coarser partitions merge runs of
    consecutive base domains. ``perm[new] = old``.
    """

    A: SparseSpd
    b: np.ndarray
    x_true: np.ndarray
    base: Partition
    perm: np.ndarray

    @property
    def n(self) -> int:
        return self.A.n

    def partition(self, t: int) -> Partition:
        if t == self.base.t:
            return self.base
        return self.base.coarsen(t)

    def to_original(self, x: np.ndarray) -> np.ndarray:
        out = np.empty_like(x)
        out[self.perm] = x
        return out


def make_problem(
    A: SparseSpd,
    seed: int = 0,
    base_t: int = BASE_DOMAINS,
    partition: Partition | None = None,
) -> Problem:
    """Reorder ``A`` by a base partition and set ``b = A x`` with ``x ~ U(0, 1)``.

    ``x`` is drawn in the original ordering from ``default_rng(seed)``.
    """
    x_true = np.random.default_rng(seed).uniform(0.0, 1.0, A.n)
    b = spmm(A, x_true)
    if partition is None:
        base_t = min(base_t, 1 << (A.n.bit_length() - 1))
        partition = kway_partition(A, base_t, seed=seed, base_t=base_t)
    elif partition.n != A.n:
        raise ValueError("partition does not match matrix")
    Ar, perm = reorder(A, partition)
    base = partition.permuted(perm)
    return Problem(Ar, b[perm], x_true[perm], base, perm)


def build_preconditioner(problem: Problem, precond: str) -> BlockJacobiPrecond | None:
    if precond == "none":
        return None
    if precond not in _PRECOND_MODE:
        raise ValueError(f"unknown preconditioner {precond!r}")
    return build_block_jacobi(problem.A, problem.base, _PRECOND_MODE[precond])


def solve(
    problem: Problem,
    cfg: SolveConfig,
    Pr: BlockJacobiPrecond | None = None,
    monitor: Monitor | None = None,
    diagnostics: bool = True,
) -> SolveReport:
    """Solve ``problem`` from ``x0 = 0`` with the configured method.

    The preconditioner is built on demand when ``cfg.precond`` asks for one
    and ``Pr`` is not supplied.
    """
    if cfg.precond != "none" and Pr is None:
        Pr = build_preconditioner(problem, cfg.precond)
    if cfg.precond == "none":
        Pr = None
    if cfg.method == "cg":
        return solve_cg(problem.A, problem.b, None, cfg, Pr, monitor)
    P = problem.partition(cfg.t)
    return solve_enlarged(problem.A, problem.b, None, P, cfg, Pr, monitor, diagnostics)


@dataclass(frozen=True)
class ConvergenceRelation:
    """How the restructured iteration count compares with ``s ceil(k / s)``.

    ``k`` is the first block update of the restructured run that meets the
    tolerance (the single-step count), ``k1`` the restructured count
    ``s * k_s``. ``label`` is ``"exact"`` when ``k1 = s ceil(k/s)``,
    ``"late"`` when ``k1 >= k + s`` (or ``k`` was never reached) and
    ``"early"`` otherwise.
    """

    s: int
    k: int | None
    k1: int
    k_s_sstep: int
    label: str

    @property
    def sstep_matches(self) -> bool:
        return self.k is not None and self.k_s_sstep == -(-self.k // self.s)


def check_convergence_relation(
    report_sstep: SolveReport, report_restructured: SolveReport, s: int
) -> ConvergenceRelation:
    ca, cb = report_sstep.config, report_restructured.config
    if cb.variant != "restructured":
        raise ValueError("second report must come from the restructured variant")
    if (ca.method, ca.s, ca.t, ca.epsilon, ca.seed) != (cb.method, cb.s, cb.t, cb.epsilon, cb.seed) or ca.s != s:
        raise ValueError("reports do not share a configuration")
    tol = cb.epsilon * report_restructured.residual_history[0]
    k = next((i + 1 for i, v in enumerate(report_restructured.inner_residual_history) if v <= tol), None)
    k1 = s * report_restructured.outer_iters
    if k is None or k1 >= k + s:
        label = "late"
    elif k1 == s * -(-k // s):
        label = "exact"
    else:
        label = "early"
    return ConvergenceRelation(s, k, k1, report_sstep.outer_iters, label)
