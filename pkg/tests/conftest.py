import numpy as np
import pytest
from hypothesis import settings

from sstep_ecg.sparse import SparseSpd, gen_poisson2d
from sstep_ecg.solvers import make_problem

settings.register_profile("default", deadline=None, max_examples=40)
settings.load_profile("default")


@pytest.fixture(scope="session")
def poisson100():
    return gen_poisson2d(100)


@pytest.fixture(scope="session")
def problem100(poisson100):
    return make_problem(poisson100, seed=0)


@pytest.fixture(scope="session")
def problem20():
    return make_problem(gen_poisson2d(20), seed=0)


def diag_matrix(*d):
    import scipy.sparse as sp

    return SparseSpd.from_scipy(sp.diags(np.asarray(d, dtype=float)))


# criterion number -> list of (ok, detail) parts recorded by test_acceptance.py
ACCEPTANCE: dict[int, list[tuple[bool, str]]] = {}


def record_criterion(number: int, ok: bool, detail: str) -> None:
    ACCEPTANCE.setdefault(number, []).append((bool(ok), detail))


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        parts = ACCEPTANCE[number]
        failed = [d for ok, d in parts if not ok]
        verdict = "PASS" if not failed else "FAIL"
        shown = failed if failed else [d for _, d in parts][:3]
        detail = "; ".join(shown) + (" ..." if not failed and len(parts) > 3 else "")
        terminalreporter.write_line(f"criterion {number}: {verdict} ({len(parts)} checks) {detail}")
