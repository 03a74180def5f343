import argparse
import logging
import sys
from pathlib import Path
from typing import List, Tuple

import pandas as pd

from fbsdex.cli.benchmarks import run_benchmarks
from fbsdex.config import LoadedConfig, build_problem, load_config
from fbsdex.constants import (
    EXIT_INFEASIBLE, EXIT_MAX_ITERATIONS, EXIT_OK, EXIT_VERIFICATION_FAILED, VERSION,
)
from fbsdex.diagnostics import convergence_study, run_verify_suite
from fbsdex.export import FLOAT_FORMAT, to_json, write_report, write_solution
from fbsdex.fbsde import NumericsConfig, Status, solve

__all__ = [
    'STATUS_EXIT_CODES',
    'parse_ladder',
    'cmd_solve',
    'cmd_verify',
    'cmd_benchmark',
    'cmd_convergence',
]

logger = logging.getLogger(__name__)

STATUS_EXIT_CODES = {
    Status.CONVERGED: EXIT_OK,
    Status.MAX_ITERATIONS: EXIT_MAX_ITERATIONS,
    Status.INFEASIBLE: EXIT_INFEASIBLE,
}


def _load(args: argparse.Namespace) -> LoadedConfig:
    return load_config(
        args.config,
        overrides={
            'numerics.seed': args.seed,
            'numerics.n_paths': args.paths,
            'numerics.n_steps': args.steps,
            'output.directory': getattr(args, 'out', None),
        },
    )


def _emit(args: argparse.Namespace, data: dict, table: pd.DataFrame):
    if args.json:
        sys.stdout.write(to_json(data))
    else:
        sys.stdout.write(table.to_string(index=False) + '\n')


def cmd_solve(args: argparse.Namespace) -> int:
    loaded = _load(args)
    spec, numerics, solver = build_problem(loaded.config, threads=args.threads)
    output = loaded.config.output_section()

    solution = solve(spec, numerics, solver)

    write_solution(
        output.directory,
        solution,
        spec,
        numerics,
        echo=loaded.echo(),
        formats=[x.value for x in loaded.config.output_formats()],
        trace_paths=output.trace_paths,
        pretty=output.pretty,
    )

    summary = {
        'solver': solution.solver,
        'status': solution.status.value,
        'm_star': solution.m_star,
        'y0': solution.y0,
        'message': solution.message,
    }
    _emit(args, summary, pd.DataFrame([summary]))

    return STATUS_EXIT_CODES[solution.status]


def cmd_verify(args: argparse.Namespace) -> int:
    loaded = _load(args)
    spec, numerics, solver = build_problem(loaded.config, threads=args.threads)
    output = loaded.config.output_section()

    solution = solve(spec, numerics, solver)
    report = run_verify_suite(spec, solution, numerics)

    write_report(output.directory, report, echo=loaded.echo(), pretty=output.pretty)
    _emit(args, report.to_dict(), report.to_frame())

    if solution.status is not Status.CONVERGED:
        return STATUS_EXIT_CODES[solution.status]

    if not report.passed:
        logger.warning('Verification failed: %s', ', '.join(x.name for x in report.failures()))
        return EXIT_VERIFICATION_FAILED

    return EXIT_OK


def cmd_benchmark(args: argparse.Namespace) -> int:
    numerics = NumericsConfig(
        n_steps=args.steps or 64,
        n_paths=args.paths or 20_000,
        seed=args.seed or 0,
        threads=args.threads,
    )
    rows = run_benchmarks(numerics, tolerance=args.tolerance)
    data = {'version': VERSION, 'seed': numerics.seed, 'rows': [x.to_dict() for x in rows]}

    _emit(args, data, pd.DataFrame([x.to_dict() for x in rows]))

    return EXIT_OK if all(x.passed for x in rows) else EXIT_VERIFICATION_FAILED


def parse_ladder(text: str) -> List[Tuple[int, int]]:
    """
    '16x2000,32x2000' -> [(16, 2000), (32, 2000)]
    """
    ladder = []

    for item in text.split(','):
        steps, sep, paths = item.strip().partition('x')

        if not sep or not steps.isdigit() or not paths.isdigit():
            raise argparse.ArgumentTypeError(f"Expected ladder items as '<steps>x<paths>', got {item!r}")

        ladder.append((int(steps), int(paths)))

    return ladder


def cmd_convergence(args: argparse.Namespace) -> int:
    loaded = _load(args)
    spec, numerics, solver = build_problem(loaded.config, threads=args.threads)
    output = loaded.config.output_section()

    table = convergence_study(spec, numerics, args.ladder, solver=solver, metric=args.metric, target=args.target)

    directory = Path(output.directory)
    directory.mkdir(parents=True, exist_ok=True)
    table.to_frame().to_csv(directory / 'convergence.csv', index=False, float_format=FLOAT_FORMAT, lineterminator='\n')

    _emit(args, table.to_dict(), table.to_frame())

    return EXIT_OK if table.passed else EXIT_VERIFICATION_FAILED
