"""s-step and communication-avoiding enlarged conjugate gradient solvers."""

from .aortho import BasisBreakdown
from .commcost import messages_total
from .partition import Partition, kway_partition
from .precond import build_block_jacobi
from .solvers import (
    SolveConfig,
    SolveReport,
    make_problem,
    solve,
    solve_cg,
    solve_enlarged,
)
from .sparse import MatrixError, SparseSpd, gen_poisson2d, gen_synthetic3d, load_matrix_market

__all__ = [
    "BasisBreakdown",
    "MatrixError",
    "Partition",
    "SolveConfig",
    "SolveReport",
    "SparseSpd",
    "build_block_jacobi",
    "gen_poisson2d",
    "gen_synthetic3d",
    "kway_partition",
    "load_matrix_market",
    "make_problem",
    "messages_total",
    "solve",
    "solve_cg",
    "solve_enlarged",
]

__version__ = "0.1.0"
