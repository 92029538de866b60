"""Command line front end: ``solve``, ``study`` and ``commcost``."""

from __future__ import annotations

import argparse
import csv
import io
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import yaml

from . import commcost
from .partition import read_partition
from .solvers import (
    METHODS,
    PRECONDS,
    VARIANTS,
    Problem,
    SolveConfig,
    SolveReport,
    build_preconditioner,
    make_problem,
    solve,
)
from .sparse import MatrixError, SparseSpd, gen_poisson2d, gen_synthetic3d, load_matrix_market

DEFAULT_S = (1, 2, 4, 8)
FULL_S = (1, 2, 3, 4, 5, 8, 10)
DEFAULT_T = (2, 4, 8, 16, 32, 64)

EXIT_OK, EXIT_USAGE, EXIT_FAIL = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def parse_gen(spec: str) -> SparseSpd:
    """``poisson2d:<nx>`` or ``synth3d:<nx>,<ny>,<nz>,<kind>[,<seed>]``."""
    name, _, args = spec.partition(":")
    try:
        if name == "poisson2d":
            return gen_poisson2d(int(args))
        if name == "synth3d":
            parts = args.split(",")
            nx, ny, nz = (int(v) for v in parts[:3])
            kind = parts[3] if len(parts) > 3 else "skyscraper"
            seed = int(parts[4]) if len(parts) > 4 else 0
            return gen_synthetic3d(nx, ny, nz, kind, seed)
    except ValueError as exc:
        raise UsageError(f"bad generator spec {spec!r}: {exc}") from None
    raise UsageError(f"unknown generator {name!r}")


def matrix_label(gen: str | None, path: str | None) -> str:
    if gen:
        return gen.replace(":", "-").replace(",", "-")
    return Path(path).stem


def load_matrix(gen: str | None, path: str | None) -> SparseSpd:
    if bool(gen) == bool(path):
        raise UsageError("exactly one of --gen or --matrix is required")
    if gen:
        return parse_gen(gen)
    try:
        return load_matrix_market(path)
    except OSError as exc:
        raise UsageError(f"cannot read {path}: {exc}") from None


def build_problem(gen, path, seed, partition_path=None) -> Problem:
    A = load_matrix(gen, path)
    part = read_partition(partition_path, n=A.n) if partition_path else None
    return make_problem(A, seed=seed, partition=part)


def _fmt(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return f"{v:.17g}"
    return str(v)


def report_text(rep: SolveReport, problem: Problem, extra: dict | None = None) -> str:
    """Flat ``key=value`` lines followed by a residual-history CSV section."""
    cfg = rep.config
    fields = {
        "method": cfg.method,
        "variant": cfg.variant if cfg.method != "cg" else "none",
        "s": cfg.s,
        "t": cfg.t,
        "epsilon": cfg.epsilon,
        "k_max": cfg.k_max,
        "ortho": cfg.ortho,
        "precond": cfg.precond,
        "seed": cfg.seed,
        "n": problem.n,
        "nnz": problem.A.nnz,
        "converged": rep.converged,
        "iterations": rep.outer_iters,
        "inner_equiv_iters": rep.inner_equiv_iters,
        "final_relres": rep.final_relres,
        "true_relres": rep.true_relres,
        "breakdown": rep.breakdown.message if rep.breakdown else None,
        "comm_messages": rep.comm_messages,
        "comm_words": rep.comm_words,
        "max_ortho_error": rep.max_ortho_error,
        "max_galerkin": rep.max_galerkin,
        "partition_fallback": problem.base.fallback,
    }
    fields.update(extra or {})
    lines = [f"{k}={_fmt(v)}" for k, v in fields.items()]
    lines += ["", "[residual_history]", residual_csv(rep).rstrip("\n")]
    return "\n".join(lines) + "\n"


def residual_csv(rep: SolveReport) -> str:
    r0 = rep.residual_history[0] or 1.0
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["iteration", "relres"])
    for i, v in enumerate(rep.residual_history):
        w.writerow([i, f"{v / r0:.17g}"])
    return buf.getvalue()


def plot_residuals(path: Path, series: dict[str, SolveReport]) -> None:
    """Deterministic SVG of relative residual histories (log scale)."""
    try:
        import matplotlib
    except ImportError:
        raise UsageError("--plot needs matplotlib (pip install 'artifact[plot]')") from None

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    matplotlib.rcParams["svg.hashsalt"] = "sstep-ecg"
    fig, ax = plt.subplots(figsize=(6, 4))
    for label, rep in series.items():
        r0 = rep.residual_history[0] or 1.0
        ax.semilogy([v / r0 for v in rep.residual_history], label=label)
    ax.set_xlabel("outer iteration")
    ax.set_ylabel("relative residual")
    ax.legend()
    fig.savefig(path, format="svg", metadata={"Date": None, "Creator": None})
    plt.close(fig)


def _reference_cap(problem: Problem) -> int:
    # the reference CG run itself needs a cap
    return max(5000, 10 * problem.n)


# ---------------------------------------------------------------- solve


def cmd_solve(args) -> int:
    problem = build_problem(args.gen, args.matrix, args.seed, args.partition)
    kw = dict(
        method=args.method,
        variant=args.variant,
        s=args.s,
        t=args.t,
        epsilon=args.tol,
        ortho=args.ortho,
        precond=args.precond,
        seed=args.seed,
    )
    try:
        cfg = SolveConfig(**kw, k_max=args.kmax or 5000)
        if cfg.method != "cg":
            problem.partition(cfg.t)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    rep = solve(problem, cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    stem = _run_stem(cfg)
    (out / f"{stem}.report.txt").write_text(report_text(rep, problem))
    (out / f"{stem}.residuals.csv").write_text(residual_csv(rep))
    if args.plot:
        plot_residuals(out / f"{stem}.residuals.svg", {stem: rep})
    status = "converged" if rep.converged else ("breakdown" if rep.breakdown else "not converged")
    print(f"{stem}: {status} iterations={rep.outer_iters} relres={rep.final_relres:.3e}")
    return EXIT_OK if rep.converged else EXIT_FAIL


def _run_stem(cfg: SolveConfig) -> str:
    if cfg.method == "cg":
        return f"cg_{cfg.precond}"
    return f"{cfg.method}_{cfg.variant}_{cfg.precond}_t{cfg.t}_s{cfg.s}"


# ---------------------------------------------------------------- study


@dataclass
class StudySpec:
    matrix: str
    runs: list[tuple[str, str]]
    t: list[int]
    s: list[int]
    epsilon: float = 1e-6
    precond: str = "none"
    ortho: str = "precholqr"
    seed: int = 0
    out: str = "study_out"
    workers: int = 1
    k_max: int | None = None

    @property
    def label(self) -> str:
        if _is_path(self.matrix):
            return matrix_label(None, self.matrix)
        return matrix_label(self.matrix, None)


def load_study(path: str, full_grid: bool = False) -> StudySpec:
    try:
        raw = yaml.safe_load(Path(path).read_text())
    except (OSError, yaml.YAMLError) as exc:
        raise UsageError(f"cannot read study spec {path}: {exc}") from None
    if not isinstance(raw, dict) or "matrix" not in raw:
        raise UsageError("study spec needs a 'matrix' entry")
    runs = []
    for item in raw.get("methods", []):
        if isinstance(item, str):
            method, _, variant = item.partition("/")
            variant = variant or "sstep"
        else:
            method, variant = item.get("method"), item.get("variant", "sstep")
        if method not in METHODS or (method != "cg" and variant not in VARIANTS):
            raise UsageError(f"bad method entry {item!r}")
        runs.append((method, variant))
    if not runs:
        raise UsageError("study spec lists no methods")
    s_list = raw.get("s", list(FULL_S if full_grid else DEFAULT_S))
    t_list = raw.get("t", list(DEFAULT_T))
    if not s_list or not t_list:
        raise UsageError("s and t lists must be nonempty")
    spec = StudySpec(
        matrix=str(raw["matrix"]),
        runs=runs,
        t=[int(v) for v in t_list],
        s=[int(v) for v in s_list],
        epsilon=float(raw.get("epsilon", raw.get("tol", 1e-6))),
        precond=raw.get("precond", "none"),
        ortho=raw.get("ortho", "precholqr"),
        seed=int(raw.get("seed", 0)),
        out=str(raw.get("out", "study_out")),
        workers=int(raw.get("workers", 1)),
        k_max=raw.get("k_max"),
    )
    if spec.precond not in PRECONDS:
        raise UsageError(f"unknown preconditioner {spec.precond!r}")
    if spec.precond != "none" and any(64 % t for t in spec.t):
        raise UsageError("preconditioned studies need every t to divide 64")
    return spec


_WORKER: dict = {}


def _init_worker(matrix, seed, precond):
    gen = matrix if not _is_path(matrix) else None
    path = matrix if _is_path(matrix) else None
    problem = build_problem(gen, path, seed)
    _WORKER["problem"] = problem
    _WORKER["precond"] = build_preconditioner(problem, precond)


def _is_path(matrix: str) -> bool:
    return not (matrix.startswith("poisson2d:") or matrix.startswith("synth3d:"))


def _run_cell(cfg: SolveConfig) -> SolveReport:
    rep = solve(_WORKER["problem"], cfg, _WORKER["precond"], diagnostics=False)
    rep.x = None
    return rep


def run_study(spec: StudySpec) -> dict:
    """Run every cell of ``spec``; returns ``{(method, variant): {(t, s): report}}``."""
    _init_worker(spec.matrix, spec.seed, spec.precond)
    problem = _WORKER["problem"]
    cg = solve(problem, SolveConfig("cg", epsilon=spec.epsilon, precond=spec.precond, k_max=_reference_cap(problem)),
               _WORKER["precond"])
    k_max = spec.k_max or (10 * cg.outer_iters if cg.converged else 5000)
    cells = []
    for method, variant in spec.runs:
        if method == "cg":
            continue
        for t in spec.t:
            for s in spec.s:
                try:
                    cfg = SolveConfig(method, variant, s, t, spec.epsilon, k_max, spec.ortho, spec.precond, spec.seed)
                    problem.partition(t)
                except ValueError as exc:
                    raise UsageError(str(exc)) from None
                cells.append(cfg)
    if spec.workers > 1:
        with ProcessPoolExecutor(spec.workers, initializer=_init_worker,
                                 initargs=(spec.matrix, spec.seed, spec.precond)) as pool:
            reports = list(pool.map(_run_cell, cells))
    else:
        reports = [_run_cell(c) for c in cells]
    results: dict = {}
    for cfg, rep in zip(cells, reports):
        results.setdefault((cfg.method, cfg.variant), {})[(cfg.t, cfg.s)] = rep
    return {"cg": cg, "k_max": k_max, "grids": results}


def grid_csv(spec: StudySpec, grid: dict) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["t"] + [f"s={s}" for s in spec.s])
    for t in spec.t:
        row = [t]
        for s in spec.s:
            rep = grid[(t, s)]
            row.append(rep.outer_iters if rep.converged else "x")
        w.writerow(row)
    return buf.getvalue()


def study_summary(spec: StudySpec, out: dict, label: str) -> str:
    cg = out["cg"]
    lines = [
        f"# Study: {label}",
        "",
        f"- epsilon: {spec.epsilon:g}",
        f"- preconditioner: {spec.precond}",
        f"- orthonormalization: cgs2+{spec.ortho}",
        f"- seed: {spec.seed}",
        f"- CG iterations: {cg.outer_iters if cg.converged else 'x'}",
        f"- k_max: {out['k_max']}",
        "",
    ]
    for (method, variant), grid in out["grids"].items():
        lines += [f"## {method} ({variant})", ""]
        lines.append("| t | " + " | ".join(f"s={s}" for s in spec.s) + " |")
        lines.append("|---|" + "---|" * len(spec.s))
        for t in spec.t:
            cells = []
            for s in spec.s:
                rep = grid[(t, s)]
                cells.append(str(rep.outer_iters) if rep.converged else "x")
            lines.append(f"| {t} | " + " | ".join(cells) + " |")
        lines.append("")
    return "\n".join(lines)


def cmd_study(args) -> int:
    spec = load_study(args.spec, full_grid=args.full_grid)
    if args.out:
        spec.out = args.out
    if args.workers:
        spec.workers = args.workers
    out = run_study(spec)
    label = spec.label
    outdir = Path(spec.out)
    outdir.mkdir(parents=True, exist_ok=True)
    failed = 0
    for (method, variant), grid in out["grids"].items():
        name = f"{label}_{method}_{variant}_{spec.precond}.csv"
        (outdir / name).write_text(grid_csv(spec, grid))
        failed += sum(not r.converged for r in grid.values())
    (outdir / "summary.md").write_text(study_summary(spec, out, label))
    print(f"study {label}: {sum(len(g) for g in out['grids'].values())} cells, {failed} not converged -> {outdir}")
    return EXIT_OK


# ---------------------------------------------------------------- commcost


def _pct(v: float) -> str:
    return "CG cheaper" if v < 0 else f"{v:.2f}%"


def cmd_commcost(args) -> int:
    rows = []
    if args.s_reduction:
        for s in args.s_reduction:
            if s < 1:
                raise UsageError("s must be >= 1")
            rows.append(("sstep-vs-s1", f"s={s}", f"{commcost.sstep_reduction_pct(s):.2f}%"))
    if args.family:
        for i in args.i:
            for j in args.j:
                try:
                    v = commcost.vs_cg_reduction_pct(args.family, i, j)
                except ValueError as exc:
                    raise UsageError(str(exc)) from None
                rows.append((f"{args.family}-vs-cg", f"i={i} j={j}", _pct(v)))
    if args.tradeoff:
        for i in args.i:
            for t in args.t:
                try:
                    tr = commcost.doubling_tradeoff(i, t, args.tradeoff)
                except ValueError as exc:
                    raise UsageError(str(exc)) from None
                verdict = "merge s" if tr.ca_or_sstep_wins else "more domains"
                rows.append((f"tradeoff-{args.tradeoff}", f"i={i} t={t}", f"{tr.lhs:.4f} vs {tr.rhs:.4f}: {verdict}"))
    if args.csv:
        rows += _measured_rows(args)
    if not rows:
        raise UsageError("nothing to evaluate; pass --family, --s-reduction, --tradeoff or --csv")
    text = "\n".join(",".join(r) for r in [("quantity", "point", "value")] + rows) + "\n"
    sys.stdout.write(text)
    if args.out:
        Path(args.out).write_text(text)
    return EXIT_OK


def _measured_rows(args):
    """Messages implied by the iteration counts of a study CSV."""
    if not args.method:
        raise UsageError("--csv needs --method (and --variant for enlarged methods)")
    rows = []
    try:
        with open(args.csv, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader)
            s_vals = [int(h.split("=")[1]) for h in header[1:]]
            for rec in reader:
                t = int(rec[0])
                for s, cell in zip(s_vals, rec[1:]):
                    if cell == "x":
                        rows.append(("messages", f"t={t} s={s}", "x"))
                        continue
                    m = commcost.messages_total(args.method, args.variant, int(cell), s, t)
                    rows.append(("messages", f"t={t} s={s}", f"{m:g}"))
    except (OSError, ValueError, IndexError, StopIteration) as exc:
        raise UsageError(f"cannot use {args.csv}: {exc}") from None
    return rows


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="sstep-ecg", description="s-step and communication-avoiding enlarged CG solvers")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    sv = sub.add_parser("solve", help="run one solver configuration")
    sv.add_argument("--gen", help="poisson2d:<nx> or synth3d:<nx>,<ny>,<nz>,<kind>[,<seed>]")
    sv.add_argument("--matrix", help="Matrix Market file")
    sv.add_argument("--partition", help="text file with the 0-based domain of every row")
    sv.add_argument("--method", choices=METHODS, default="cg")
    sv.add_argument("--variant", choices=VARIANTS, default="sstep")
    sv.add_argument("--t", type=int, default=1)
    sv.add_argument("--s", type=int, default=1)
    sv.add_argument("--tol", type=float, default=1e-6)
    sv.add_argument("--kmax", type=int, default=None)
    sv.add_argument("--precond", choices=PRECONDS, default="none")
    sv.add_argument("--ortho", choices=("acholqr", "precholqr"), default="precholqr")
    sv.add_argument("--seed", type=int, default=0)
    sv.add_argument("--out", default=".")
    sv.add_argument("--plot", action="store_true", help="also write an SVG of the residual history")
    sv.set_defaults(func=cmd_solve)

    st = sub.add_parser("study", help="sweep (method, variant, t, s) from a YAML/JSON spec")
    st.add_argument("spec")
    st.add_argument("--out")
    st.add_argument("--workers", type=int)
    st.add_argument("--full-grid", action="store_true", help="default s grid 1,2,3,4,5,8,10")
    st.set_defaults(func=cmd_study)

    cc = sub.add_parser("commcost", help="evaluate the communication model")
    cc.add_argument("--family", choices=commcost.FAMILIES)
    cc.add_argument("--i", type=int, nargs="+", default=[0])
    cc.add_argument("--j", type=int, nargs="+", default=[0])
    cc.add_argument("--t", type=int, nargs="+", default=[2])
    cc.add_argument("--s-reduction", type=int, nargs="+")
    cc.add_argument("--tradeoff", choices=("sstep", "ca"))
    cc.add_argument("--csv", help="study CSV of iteration counts")
    cc.add_argument("--method", choices=METHODS)
    cc.add_argument("--variant", choices=VARIANTS, default="sstep")
    cc.add_argument("--out")
    cc.set_defaults(func=cmd_commcost)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if not getattr(args, "func", None):
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"sstep-ecg: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except MatrixError as exc:
        print(f"sstep-ecg: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
