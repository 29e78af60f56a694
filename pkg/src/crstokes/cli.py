"""Command line interface.

Exit codes: 0 success, 2 solver failure, 3 configuration error.
"""
from __future__ import annotations

import argparse
import sys

from .errors import discrete_infsup_r2
from .experiments import ConfigError, ConvergenceFailure, ExperimentConfig, emit_reports, run_convergence
from .mesh import mesh_dump, mesh_hierarchy
from .nfunction import NFunctionRE, certify_inequalities, reports_to_csv

EXIT_OK = 0
EXIT_SOLVER = 2
EXIT_CONFIG = 3


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on bad usage, which would collide with the
    # solver-failure code
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="crstokes", description="Nonlinear Stokes with smoothed Crouzeix-Raviart elements.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    run = sub.add_parser("run", help="convergence study from a key = value config file")
    run.add_argument("--config", required=True)
    run.add_argument("--out-dir", help="overrides out_dir of the config")
    run.add_argument("--plots", action="store_true", help="also write SVG plots")
    run.add_argument("--quiet", action="store_true")

    cert = sub.add_parser("certify", help="sample the N-function inequalities")
    cert.add_argument("--r", type=float, required=True)
    cert.add_argument("--epsilon", type=float, default=0.0)
    cert.add_argument("--n", type=int, default=100_000)
    cert.add_argument("--seed", type=int, default=0)
    cert.add_argument("--delta", type=float, default=1.0)

    inf = sub.add_parser("infsup", help="discrete inf-sup constant for r = 2")
    inf.add_argument("--level", type=int, required=True)

    dump = sub.add_parser("mesh-dump", help="print a mesh of the hierarchy")
    dump.add_argument("--level", type=int, required=True)
    dump.add_argument("--lower", type=float, nargs=2, default=(-1.0, -1.0))
    dump.add_argument("--upper", type=float, nargs=2, default=(1.0, 1.0))
    return parser


def _cmd_run(args) -> int:
    config = ExperimentConfig.from_file(args.config)
    if args.out_dir:
        config.out_dir = args.out_dir
    if args.plots:
        config.plots = True

    def progress(row):
        if not args.quiet:
            e = row.errors
            print(
                f"level {row.level}: dofs {e.dofs} err_F {e.err_F_broken:.4e} "
                f"err_F_smoothed {e.err_F_smoothed:.4e} err_p {e.err_p:.4e} "
                f"outer {row.outer_iters}",
                file=sys.stderr,
            )

    try:
        table = run_convergence(config, progress)
    except ConvergenceFailure as exc:
        print(f"solver failure: {exc}", file=sys.stderr)
        if not config.out_dir:
            sys.stdout.write(exc.table.to_csv())
        return EXIT_SOLVER
    if config.out_dir:
        for path in emit_reports(table, config.out_dir).values():
            print(path)
    else:
        sys.stdout.write(table.to_csv())
    return EXIT_OK


def _cmd_certify(args) -> int:
    try:
        nf = NFunctionRE(args.r, args.epsilon)
        reports = certify_inequalities(nf, args.delta, args.n, args.seed)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    sys.stdout.write(reports_to_csv(reports))
    return EXIT_OK


def _cmd_infsup(args) -> int:
    if not 0 <= args.level <= 3:
        raise ConfigError("infsup is limited to levels 0..3")
    mesh = mesh_hierarchy(args.level)[-1]
    print(repr(discrete_infsup_r2(mesh)))
    return EXIT_OK


def _cmd_mesh_dump(args) -> int:
    if args.level < 0:
        raise ConfigError("level must be non-negative")
    sys.stdout.write(mesh_dump(mesh_hierarchy(args.level, tuple(args.lower), tuple(args.upper))[-1]))
    return EXIT_OK


COMMANDS = {"run": _cmd_run, "certify": _cmd_certify, "infsup": _cmd_infsup, "mesh-dump": _cmd_mesh_dump}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
