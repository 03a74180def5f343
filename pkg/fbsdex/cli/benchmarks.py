import logging
from dataclasses import dataclass
from typing import Callable, List, Optional

import numpy as np

from fbsdex.diagnostics import merton_benchmark
from fbsdex.fbsde import NumericsConfig, ProblemSpec, Status, solve
from fbsdex.market import build_market
from fbsdex.utility import exponential, log, mixture_exp, power

__all__ = [
    'BenchmarkCase',
    'BenchmarkRow',
    'BUILTIN_CASES',
    'run_benchmarks',
]

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class BenchmarkCase:
    name: str
    build: Callable[[int], ProblemSpec]
    # closed-form strategy, None for the fixed-point case
    target: Optional[float]
    description: str


@dataclass(frozen=True)
class BenchmarkRow:
    name: str
    status: str
    target: Optional[float]
    computed: Optional[float]
    error: float
    tolerance: float
    passed: bool

    def to_dict(self) -> dict:
        return {
            'name': self.name,
            'status': self.status,
            'target': self.target,
            'computed': self.computed,
            'error': self.error,
            'tolerance': self.tolerance,
            'passed': self.passed,
        }


def _exponential(n_steps: int) -> ProblemSpec:
    return ProblemSpec(build_market(1, 0, 0.2, 1.0, n_steps=n_steps), exponential(1.0), x0=1.0)


def _power(n_steps: int) -> ProblemSpec:
    return ProblemSpec(build_market(1, 0, 0.2, 1.0, n_steps=n_steps), power(0.5), x0=1.0)


def _log(n_steps: int) -> ProblemSpec:
    return ProblemSpec(build_market(1, 0, lambda t: 0.1 + 0.1 * t, 1.0, n_steps=n_steps), log(), x0=1.0)


def _mixture(n_steps: int) -> ProblemSpec:
    return ProblemSpec(build_market(1, 0, 0.2, 1.0, n_steps=n_steps), mixture_exp(1.0, 2.0), x0=0.0)


BUILTIN_CASES = [
    BenchmarkCase('merton_exponential', _exponential, 0.2, 'exponential alpha=1, theta=0.2, amount theta/alpha'),
    BenchmarkCase('merton_power', _power, 0.4, 'power gamma=0.5, theta=0.2, proportion theta/(1-gamma)'),
    BenchmarkCase('merton_log', _log, None, 'log, theta(t)=0.1+0.1t, proportion theta(t)'),
    BenchmarkCase('hara_mixture', _mixture, None, 'U=-exp(-x)-exp(-2x), fixed point |Y_0 - m*|'),
]


def _run_case(case: BenchmarkCase, numerics: NumericsConfig, tolerance: Optional[float]) -> BenchmarkRow:
    spec = case.build(numerics.n_steps)
    solution = solve(spec, numerics)

    if solution.status is not Status.CONVERGED or solution.pi_star is None:
        return BenchmarkRow(
            case.name, solution.status.value, case.target, None, float('nan'),
            tolerance or numerics.merton_tolerance, False,
        )

    if case.name == 'hara_mixture':
        limit = numerics.fixed_point_tolerance if tolerance is None else tolerance
        error = float(solution.metadata['fixed_point_residual'])

        return BenchmarkRow(
            case.name, solution.status.value, None, solution.m_star, error, limit, error <= limit,
        )

    limit = numerics.merton_tolerance if tolerance is None else tolerance
    check = merton_benchmark(spec, solution, tolerance=limit)[0]
    computed = float(np.mean(solution.pi_star.as_matrix()[:, :-1, 0]))

    return BenchmarkRow(
        case.name, solution.status.value, case.target, computed, check.statistic, limit, check.passed,
    )


def run_benchmarks(numerics: NumericsConfig, *, tolerance: Optional[float] = None) -> List[BenchmarkRow]:
    """
    The three closed-form strategy cases and the non-HARA fixed-point case.
    The tolerance overrides the acceptance threshold of every row.
    """
    rows = []

    for case in BUILTIN_CASES:
        logger.info('Benchmark %s: %s', case.name, case.description)
        rows.append(_run_case(case, numerics, tolerance))

    return rows
