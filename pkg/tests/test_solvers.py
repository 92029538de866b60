import dataclasses

import numpy as np
import pytest
import scipy.sparse as sp

from sstep_ecg.precond import build_block_jacobi, identity_precond
from sstep_ecg.solvers import (
    SolveConfig,
    check_convergence_relation,
    make_problem,
    solve,
    solve_cg,
    solve_enlarged,
)
from sstep_ecg.sparse import SparseSpd, gen_poisson2d

FULL_Q = ("sre-cg2", "msdo-cg")


def test_cg_identity_one_iteration():
    A = SparseSpd.from_scipy(sp.identity(10, format="csr"))
    rep = solve_cg(A, np.arange(1.0, 11.0))
    assert rep.converged and rep.outer_iters == 1


def test_cg_report_fields(problem20):
    rep = solve(problem20, SolveConfig())
    assert rep.converged
    assert rep.residual_history[0] == pytest.approx(np.linalg.norm(problem20.b), rel=0, abs=0)
    assert rep.final_relres <= 1e-6
    assert len(rep.residual_history) == rep.outer_iters + 1
    assert rep.true_relres < 1e-5
    assert np.abs(rep.x - problem20.x_true).max() < 1e-4


def test_cg_kmax_not_converged(problem20):
    rep = solve(problem20, SolveConfig(k_max=3))
    assert not rep.converged and rep.outer_iters == 3


@pytest.mark.parametrize(
    "kwargs",
    [
        dict(method="gmres"),
        dict(variant="ca-alg6"),
        dict(ortho="mgs"),
        dict(precond="ilu"),
        dict(s=0),
        dict(t=0),
        dict(k_max=0),
        dict(epsilon=0.0),
        dict(method="msdo-cg", variant="restructured"),
    ],
)
def test_config_validation(kwargs):
    with pytest.raises(ValueError):
        SolveConfig(**kwargs)


def test_config_accepts_cgs2_prefix():
    assert SolveConfig(ortho="cgs2+acholqr").ortho == "acholqr"


def test_enlarged_rejects_cg_and_mismatch(problem20):
    P = problem20.partition(2)
    with pytest.raises(ValueError):
        solve_enlarged(problem20.A, problem20.b, None, P, SolveConfig())
    with pytest.raises(ValueError):
        solve_enlarged(problem20.A, problem20.b, None, P, SolveConfig(method="sre-cg", precond="bj-ic0"))


CONVERGING = [
    ("sre-cg", "restructured", 3),
    ("sre-cg", "sstep", 4),
    ("sre-cg", "ca-alg5", 3),
    ("sre-cg", "ca-alg7", 4),
    ("sre-cg2", "restructured", 2),
    ("sre-cg2", "sstep", 5),
    ("sre-cg2", "ca-alg7", 4),
    ("msdo-cg", "sstep", 3),
    ("msdo-cg", "ca-alg5", 2),
    ("msdo-cg", "ca-alg7", 4),
]


@pytest.mark.parametrize("method, variant, s", CONVERGING)
@pytest.mark.parametrize("precond", ["none", "bj-ic0"])
def test_enlarged_invariants(problem20, method, variant, s, precond):
    seen = []
    cfg = SolveConfig(method=method, variant=variant, s=s, t=4, precond=precond)
    rep = solve(problem20, cfg, monitor=lambda k, x, r: seen.append(x.copy()))
    assert rep.converged and rep.breakdown is None
    assert rep.final_relres <= cfg.epsilon
    assert rep.residual_history[0] == np.linalg.norm(problem20.b)
    assert rep.inner_equiv_iters == s * rep.outer_iters
    assert rep.max_ortho_error <= 1e-10
    if method in FULL_Q:
        assert rep.max_galerkin <= 1e-8
    # the A-norm of the error never grows
    A = problem20.A.csr
    errs = [(e := x - problem20.x_true) @ (A @ e) for x in seen]
    e0 = problem20.x_true @ (A @ problem20.x_true)
    for prev, cur in zip([e0] + errs, errs):
        assert cur <= prev * (1 + 1e-13)


@pytest.mark.parametrize("method", ["sre-cg", "sre-cg2"])
def test_sstep_s1_matches_restructured(problem20, method):
    a = solve(problem20, SolveConfig(method=method, variant="sstep", t=4))
    b = solve(problem20, SolveConfig(method=method, variant="restructured", t=4))
    assert a.outer_iters == b.outer_iters
    ha, hb = np.array(a.residual_history), np.array(b.residual_history)
    assert np.abs(ha - hb).max() <= 1e-12 * ha[0]


@pytest.mark.parametrize("method", ["sre-cg", "sre-cg2", "msdo-cg"])
def test_ca_alg7_s1_matches_sstep(problem20, method):
    a = solve(problem20, SolveConfig(method=method, variant="ca-alg7", t=8))
    b = solve(problem20, SolveConfig(method=method, variant="sstep", t=8))
    assert a.residual_history == b.residual_history
    assert np.array_equal(a.x, b.x)


@pytest.mark.parametrize("method, variant", [("sre-cg", "sstep"), ("msdo-cg", "ca-alg7")])
def test_identity_preconditioner_matches_none(problem20, method, variant):
    cfg = SolveConfig(method=method, variant=variant, s=2, t=4)
    plain = solve(problem20, cfg)
    M_is_I = solve_enlarged(
        problem20.A,
        problem20.b,
        None,
        problem20.partition(4),
        dataclasses.replace(cfg, precond="bj-chol"),
        identity_precond(problem20.base),
    )
    ha, hb = np.array(plain.residual_history), np.array(M_is_I.residual_history)
    assert ha.shape == hb.shape
    assert np.abs(ha - hb).max() <= 1e-12 * ha[0]


def test_identity_preconditioner_matches_none_cg(problem20):
    plain = solve(problem20, SolveConfig())
    M_is_I = solve_cg(problem20.A, problem20.b, None, SolveConfig(), identity_precond(problem20.base))
    assert plain.residual_history == M_is_I.residual_history


@pytest.mark.parametrize("method", ["sre-cg", "sre-cg2", "msdo-cg"])
def test_t1_s1_close_to_cg(problem20, method):
    cg = solve(problem20, SolveConfig())
    en = solve(problem20, SolveConfig(method=method, t=1))
    assert abs(en.outer_iters - cg.outer_iters) <= 2


@pytest.mark.parametrize("method", ["sre-cg", "sre-cg2", "msdo-cg"])
@pytest.mark.parametrize("variant", ["sstep", "ca-alg7"])
def test_block_diagonal_cholesky_one_iteration(problem20, method, variant):
    csr = problem20.A.csr
    ranges = problem20.base.domain_ranges
    A = SparseSpd.from_scipy(sp.block_diag([csr[a:b, a:b] for a, b in ranges], format="csr"))
    Pr = build_block_jacobi(A, problem20.base, "cholesky")
    b = A.csr @ problem20.x_true
    cfg = SolveConfig(method=method, variant=variant, t=8, precond="bj-chol")
    rep = solve_enlarged(A, b, None, problem20.partition(8), cfg, Pr)
    assert rep.converged and rep.outer_iters == 1


def test_determinism(problem20):
    cfg = SolveConfig(method="msdo-cg", variant="ca-alg5", s=3, t=8, precond="bj-ic0")
    assert solve(problem20, cfg).same_as(solve(problem20, cfg))
    other = solve(problem20, dataclasses.replace(cfg, s=2))
    assert not solve(problem20, cfg).same_as(other)


def test_msdo_drops_zero_domain_columns(problem20):
    P = problem20.partition(4)
    a, b_ = P.domain_ranges[0]
    b = problem20.b.copy()
    b[a:b_] = 0.0
    cfg = SolveConfig(method="msdo-cg", variant="sstep", s=2, t=4)
    rep = solve_enlarged(problem20.A, b, None, P, cfg)
    assert rep.converged and rep.breakdown is None
    assert rep.max_ortho_error <= 1e-10


def test_zero_rhs_converges_immediately(problem20):
    cfg = SolveConfig(method="msdo-cg", t=4)
    rep = solve_enlarged(problem20.A, np.zeros(problem20.n), None, problem20.partition(4), cfg)
    assert rep.converged and rep.outer_iters == 0


def test_breakdown_recorded():
    # monomial slabs of a wide spectrum with plain A-CholQR lose rank quickly
    pb = make_problem(gen_poisson2d(30), seed=0)
    cfg = SolveConfig(method="sre-cg", variant="ca-alg5", s=10, t=16, ortho="acholqr")
    rep = solve(pb, cfg)
    assert not rep.converged
    assert rep.breakdown is not None and rep.breakdown.stage == "a-cholqr"
    assert rep.breakdown.outer_iter >= 1
    assert len(rep.residual_history) == rep.breakdown.outer_iter


def test_comm_messages_in_report(problem20):
    rep = solve(problem20, SolveConfig(method="sre-cg", s=2, t=4))
    assert rep.comm_messages == (5 * 2 + 1) * rep.outer_iters * 2
    assert rep.comm_words is None


@pytest.mark.parametrize("t", [2, 8])
@pytest.mark.parametrize("s", [1, 2, 3, 5])
def test_relation_exact_on_poisson(problem20, t, s):
    ss = solve(problem20, SolveConfig(method="sre-cg", s=s, t=t))
    rs = solve(problem20, SolveConfig(method="sre-cg", variant="restructured", s=s, t=t))
    rel = check_convergence_relation(ss, rs, s)
    assert rel.label == "exact" and rel.sstep_matches
    if s == 1:
        assert rel.k1 == rel.k


def test_relation_always_labelled():
    from sstep_ecg.sparse import gen_synthetic3d

    pb = make_problem(gen_synthetic3d(8, 8, 8, "skyscraper", seed=7), seed=0)
    for s in (2, 4):
        ss = solve(pb, SolveConfig(method="sre-cg", s=s, t=8, k_max=400))
        rs = solve(pb, SolveConfig(method="sre-cg", variant="restructured", s=s, t=8, k_max=400))
        assert check_convergence_relation(ss, rs, s).label in ("exact", "early", "late")


def test_relation_rejects_mismatch(problem20):
    a = solve(problem20, SolveConfig(method="sre-cg", s=2, t=2))
    with pytest.raises(ValueError):
        check_convergence_relation(a, a, 2)
    b = solve(problem20, SolveConfig(method="sre-cg", variant="restructured", s=3, t=2))
    with pytest.raises(ValueError):
        check_convergence_relation(a, b, 2)


def test_problem_round_trip(problem20):
    x = problem20.to_original(problem20.x_true)
    assert np.array_equal(x, np.random.default_rng(0).uniform(0.0, 1.0, problem20.n))
