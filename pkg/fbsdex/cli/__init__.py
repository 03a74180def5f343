#!/usr/bin/env python3
import argparse
import logging
import sys
from typing import List, Optional

from fbsdex.cli.commands import cmd_benchmark, cmd_convergence, cmd_solve, cmd_verify, parse_ladder
from fbsdex.constants import EXIT_ERROR, VERSION
from fbsdex.diagnostics import CONVERGENCE_METRICS
from fbsdex.exceptions import ConfigValidationError, FbsdexError

__all__ = [
    'create_arg_parser',
    'main',
]

logger = logging.getLogger(__name__)


def _common_arguments() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(add_help=False)

    parser.add_argument(
        '--seed',
        type=int,
        help='Seed of the Brownian paths, overrides numerics.seed',
    )
    parser.add_argument(
        '--paths',
        type=int,
        help='Number of Monte Carlo paths, overrides numerics.n_paths',
    )
    parser.add_argument(
        '--steps',
        type=int,
        help='Number of time steps, overrides numerics.n_steps',
    )
    parser.add_argument(
        '--threads',
        type=int,
        help='Worker threads for path generation, results do not depend on it',
    )
    parser.add_argument(
        '--json',
        action='store_true',
        help='If enabled machine-readable JSON is printed to stdout',
    )
    parser.add_argument(
        '--log-level',
        default='WARNING',
        choices=['DEBUG', 'INFO', 'WARNING', 'ERROR'],
        help='Logging level of messages written to stderr',
    )

    return parser


def _config_arguments() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(add_help=False)

    parser.add_argument(
        '--config',
        required=True,
        help='Path to a TOML run config',
    )
    parser.add_argument(
        '--out',
        help='Output directory, overrides output.directory',
    )

    return parser


def create_arg_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog='fbsdex',
        description='Utility maximization by forward-backward SDEs',
    )
    parser.add_argument('--version', action='version', version=f'%(prog)s {VERSION}')

    common = _common_arguments()
    configured = _config_arguments()
    commands = parser.add_subparsers(dest='command', required=True)

    solve = commands.add_parser(
        'solve',
        parents=[common, configured],
        help='Solve the configured problem and write solution artifacts',
    )
    solve.set_defaults(handler=cmd_solve)

    verify = commands.add_parser(
        'verify',
        parents=[common, configured],
        help='Solve and run every applicable diagnostic',
    )
    verify.set_defaults(handler=cmd_verify)

    benchmark = commands.add_parser(
        'benchmark',
        parents=[common],
        help='Run the built-in closed-form and fixed-point cases',
    )
    benchmark.add_argument(
        '--tolerance',
        type=float,
        help='Acceptance tolerance for every row',
    )
    benchmark.set_defaults(handler=cmd_benchmark)

    convergence = commands.add_parser(
        'convergence',
        parents=[common, configured],
        help='Run the solver over a ladder of grid and path sizes',
    )
    convergence.add_argument(
        '--ladder',
        type=parse_ladder,
        default=parse_ladder('16x20000,32x20000,64x20000,128x20000'),
        help="Comma separated '<steps>x<paths>' pairs",
    )
    convergence.add_argument(
        '--metric',
        default='y0',
        choices=list(CONVERGENCE_METRICS),
        help='Error measured at each level',
    )
    convergence.add_argument(
        '--target',
        type=float,
        help='Exact value of Y_0, the finest level is used when omitted',
    )
    convergence.set_defaults(handler=cmd_convergence)

    return parser


def main(argv: Optional[List[str]] = None) -> int:
    try:
        args = create_arg_parser().parse_args(argv)
    except SystemExit as e:
        # usage errors share the config exit code
        return EXIT_ERROR if e.code else 0

    logging.basicConfig(
        level=getattr(logging, args.log_level),
        stream=sys.stderr,
        format='%(asctime)s %(levelname)s %(name)s: %(message)s',
    )

    try:
        return args.handler(args)
    except ConfigValidationError as e:
        print(f'config error: {e}', file=sys.stderr)
    except FbsdexError as e:
        logger.debug('Command failed', exc_info=True)
        print(f'error: {type(e).__name__}: {e}', file=sys.stderr)

    return EXIT_ERROR


if __name__ == '__main__':
    sys.exit(main())
