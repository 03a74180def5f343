import enum
import hashlib
import json
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Dict, List, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from scipy.stats import norm

from fbsdex.bsde import RegressionBasis
from fbsdex.constants import (
    CONVERGENCE_MIN_ORDER, DEFAULT_Z, EXACT_IDENTITY_RTOL, FLOAT_FLOOR, HAMILTONIAN_RTOL, MAX_VIOLATION_FRACTION,
    MERTON_RTOL, MIN_TEST_PATHS, NODE_THINNING, PERTURBATION_EPSILON, RESIDUAL_RMS_CONSTANT,
    STRATEGY_IDENTITY_TOLERANCE, TEST_DEGREE,
)
from fbsdex.exceptions import DimensionError, DomainError, InsufficientSampleError, NotApplicableError
from fbsdex.fbsde import (
    FbsdeSolution, NumericsConfig, ProblemSpec, SolverKind, Status, solve, with_steps,
)
from fbsdex.paths import PathBundle, StatePaths, TimeGrid, stochastic_exponential, wealth_amount, wealth_proportion
from fbsdex.utility import Domain, Family, applicability_notes, convex_conjugate, phi1, phi2_halfline

__all__ = [
    'CheckKind',
    'CheckResult',
    'DiagnosticsReport',
    'Perturbation',
    'UtilityEstimate',
    'ConvergenceRow',
    'ConvergenceTable',
    'thinned_nodes',
    'default_perturbations',
    'martingale_test',
    'supermartingale_test',
    'first_order_condition_test',
    'merton_target',
    'merton_benchmark',
    'cole_hopf_check',
    'dual_consistency_check',
    'utility_estimate',
    'utility_perturbation_test',
    'strategy_identity_check',
    'martingale_identity_check',
    'local_martingale_stress_test',
    'duality_supermartingale_test',
    'marginal_utility_representation_check',
    'power_terminal_identity_check',
    'CONVERGENCE_METRICS',
    'convergence_study',
    'spec_hash',
    'run_verify_suite',
]

logger = logging.getLogger(__name__)


class CheckKind(enum.Enum):
    STATISTICAL = 'statistical'
    DETERMINISTIC = 'deterministic'


@dataclass(frozen=True)
class CheckResult:
    """
    Statistical checks pass when |statistic| <= z se + tolerance (one-sided: statistic <= z se + tolerance),
    deterministic checks when |statistic| <= tolerance. A tolerance of None marks a reported value.
    """
    name: str
    kind: CheckKind
    statistic: float
    standard_error: float
    z: float
    tolerance: Optional[float]
    passed: bool
    context: Dict[str, object] = field(default_factory=dict)

    @classmethod
    def statistical(
        cls,
        name: str,
        samples: np.ndarray,
        z: float,
        *,
        one_sided: bool = False,
        **context,
    ) -> 'CheckResult':
        statistic, standard_error = _mean_and_se(samples)
        bound = z * standard_error + FLOAT_FLOOR
        passed = statistic <= bound if one_sided else abs(statistic) <= bound

        if one_sided:
            context['one_sided'] = True

        context.setdefault('n_paths', int(np.size(samples)))

        return cls(name, CheckKind.STATISTICAL, statistic, standard_error, z, FLOAT_FLOOR, bool(passed), context)

    @classmethod
    def deterministic(cls, name: str, statistic: float, tolerance: float, **context) -> 'CheckResult':
        statistic = float(statistic)

        return cls(name, CheckKind.DETERMINISTIC, statistic, 0.0, 0.0, tolerance, abs(statistic) <= tolerance, context)

    @classmethod
    def reported(cls, name: str, statistic: float, **context) -> 'CheckResult':
        statistic = float(statistic)

        return cls(name, CheckKind.DETERMINISTIC, statistic, 0.0, 0.0, None, math.isfinite(statistic), context)

    def to_dict(self) -> dict:
        return {
            'name': self.name,
            'kind': self.kind.value,
            'statistic': self.statistic,
            'se': self.standard_error,
            'z': self.z,
            'tolerance': self.tolerance,
            'passed': self.passed,
            'context': self.context,
        }


@dataclass
class DiagnosticsReport:
    checks: List[CheckResult] = field(default_factory=list)
    provenance: Dict[str, object] = field(default_factory=dict)
    notes: Dict[str, str] = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return bool(self.checks) and all(x.passed for x in self.checks)

    def failures(self) -> List[CheckResult]:
        return [x for x in self.checks if not x.passed]

    def to_dict(self) -> dict:
        return {
            'passed': self.passed,
            'provenance': self.provenance,
            'notes': self.notes,
            'checks': [x.to_dict() for x in self.checks],
        }

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            [{k: v for k, v in x.to_dict().items() if k != 'context'} for x in self.checks],
            columns=['name', 'kind', 'statistic', 'se', 'z', 'tolerance', 'passed'],
        )


class Perturbation(NamedTuple):
    name: str
    values: np.ndarray  # (N, d1) on the left nodes


class UtilityEstimate(NamedTuple):
    mean: float
    standard_error: float
    violations: int


def _mean_and_se(samples: np.ndarray) -> Tuple[float, float]:
    samples = np.asarray(samples, dtype=float).ravel()
    n = samples.size

    if n < 2:
        raise InsufficientSampleError(f'At least two samples are required, got {n}')

    return float(samples.mean()), float(samples.std(ddof=1) / math.sqrt(n))


def _bonferroni(z: float, n_tests: int) -> float:
    if n_tests <= 1:
        return z

    return float(norm.isf(norm.sf(z) / n_tests))


def thinned_nodes(n_steps: int) -> np.ndarray:
    count = math.ceil(n_steps / NODE_THINNING)
    return np.unique(np.round(np.linspace(0, n_steps - 1, count)).astype(int))


def _check_aligned(process: StatePaths, bundle: PathBundle):
    if process.n_paths < MIN_TEST_PATHS:
        raise InsufficientSampleError(f'Martingale tests need at least {MIN_TEST_PATHS} paths, got {process.n_paths}')

    if process.values.shape != (bundle.n_paths, bundle.grid.n_steps + 1):
        raise DimensionError(
            f'Process {process.name} has shape {process.values.shape}, '
            f'bundle has {bundle.n_paths} paths and {bundle.grid.n_steps} steps'
        )


def _test_functions(process: StatePaths, bundle: PathBundle, node: int, degree: int) -> np.ndarray:
    coords = np.column_stack([bundle.levels[:, node, :], process.values[:, node]])
    return RegressionBasis(degree=degree).design(coords)


def martingale_test(
    process: StatePaths,
    bundle: PathBundle,
    basis: Optional[RegressionBasis] = None,
    *,
    z: float = DEFAULT_Z,
    name: Optional[str] = None,
) -> List[CheckResult]:
    """
    Terminal test E[M_N] - M_0 = 0 and increment orthogonality E[psi(state_k) (M_{k+1} - M_k)] = 0
    on thinned nodes, psi ranging over a polynomial basis of (W_k, M_k)

    :raises:
        InsufficientSampleError: with fewer than 100 paths
    """
    _check_aligned(process, bundle)

    name = name or f'martingale.{process.name}'
    degree = TEST_DEGREE if basis is None else basis.degree
    values = process.values
    nodes = thinned_nodes(bundle.grid.n_steps)

    checks = [CheckResult.statistical(f'{name}.terminal', values[:, -1] - values[:, 0], z)]

    increments = []

    for k in nodes:
        psi = _test_functions(process, bundle, k, degree)
        increments.append((k, psi * (values[:, k + 1] - values[:, k])[:, None]))

    z_family = _bonferroni(z, sum(x.shape[1] for _, x in increments))

    for k, samples in increments:
        for j in range(samples.shape[1]):
            checks.append(CheckResult.statistical(
                f'{name}.increment[node={k},psi={j}]', samples[:, j], z_family, node=int(k), base_z=z,
            ))

    return checks


def supermartingale_test(
    process: StatePaths,
    bundle: PathBundle,
    basis: Optional[RegressionBasis] = None,
    *,
    z: float = DEFAULT_Z,
    name: Optional[str] = None,
) -> List[CheckResult]:
    """
    One-sided version of martingale_test with nonnegative test functions
    """
    _check_aligned(process, bundle)

    name = name or f'supermartingale.{process.name}'
    values = process.values
    nodes = thinned_nodes(bundle.grid.n_steps)

    checks = [CheckResult.statistical(f'{name}.terminal', values[:, -1] - values[:, 0], z, one_sided=True)]

    increments = []

    for k in nodes:
        linear = _test_functions(process, bundle, k, 1)
        weights = np.column_stack([linear[:, :1], np.maximum(linear[:, 1:], 0), np.maximum(-linear[:, 1:], 0)])
        increments.append((k, weights * (values[:, k + 1] - values[:, k])[:, None]))

    z_family = _bonferroni(z, sum(x.shape[1] for _, x in increments))

    for k, samples in increments:
        for j in range(samples.shape[1]):
            checks.append(CheckResult.statistical(
                f'{name}.increment[node={k},psi={j}]', samples[:, j], z_family,
                one_sided=True, node=int(k), base_z=z,
            ))

    return checks


def default_perturbations(grid: TimeGrid, d1: int, seed: int = 0) -> List[Perturbation]:
    """
    Constants +-e_i, the switch +-sign(t - T/2) and two random piecewise-constant directions
    """
    times = grid.times[:-1]
    perturbations = []

    for i in range(d1):
        unit = np.zeros((grid.n_steps, d1))
        unit[:, i] = 1.0
        perturbations.append(Perturbation(f'const+{i}', unit))
        perturbations.append(Perturbation(f'const-{i}', -unit))

    switch = np.repeat(np.sign(times - grid.horizon / 2)[:, None], d1, axis=1)
    perturbations.append(Perturbation('switch+', switch))
    perturbations.append(Perturbation('switch-', -switch))

    rng = np.random.Generator(np.random.Philox(seed))
    pieces = np.minimum((4 * times / grid.horizon).astype(int), 3)

    for j in range(2):
        levels = rng.uniform(-1.0, 1.0, size=(4, d1))
        perturbations.append(Perturbation(f'random{j}', levels[pieces]))

    return perturbations


def _as_perturbation(h: Union[Perturbation, Tuple[str, object]], grid: TimeGrid, d1: int) -> Perturbation:
    name, values = h

    if callable(values):
        values = np.stack([np.broadcast_to(np.asarray(values(float(t)), dtype=float), (d1,)) for t in grid.times[:-1]])

    values = np.asarray(values, dtype=float)

    if values.shape != (grid.n_steps, d1):
        raise DimensionError(f'Perturbation {name} should have shape {(grid.n_steps, d1)}, got {values.shape}')

    if not np.all(np.isfinite(values)):
        raise DomainError(f'Perturbation {name} is not bounded')

    return Perturbation(name, values)


def _require_paths(solution: FbsdeSolution):
    if solution.X is None or solution.Y is None or solution.Z is None or solution.bundle is None:
        raise DomainError(f'Solution has no terminal data (status {solution.status.value})')


def first_order_condition_test(
    solution: FbsdeSolution,
    spec: ProblemSpec,
    perturbations: Optional[Sequence[Perturbation]] = None,
    *,
    z: float = DEFAULT_Z,
    seed: int = 0,
) -> List[CheckResult]:
    """
    E[U'(X_N + H) sum_k h(t_k) . (dW^H_k + theta^H dt)] = 0 for bounded deterministic h
    """
    if spec.utility.domain is not Domain.REAL_LINE:
        raise NotApplicableError('The first-order condition test uses the amount convention of real-line solutions')

    _require_paths(solution)

    market, bundle = spec.market, solution.bundle
    grid = bundle.grid
    d1 = market.d1

    if perturbations is None:
        perturbations = default_perturbations(grid, d1, seed)

    weight = spec.utility.u1(solution.X.terminal + solution.endowment)
    gains_basis = bundle.increments[:, :, :d1] + market.hedgeable_path(grid.times[:-1])[None] * grid.dt

    checks = []

    for h in perturbations:
        h = _as_perturbation(h, grid, d1)
        gains = np.einsum('mnd,nd->m', gains_basis, h.values)
        checks.append(CheckResult.statistical(f'first_order.{h.name}', weight * gains, z))

    return checks


def merton_target(spec: ProblemSpec, times: np.ndarray) -> np.ndarray:
    """
    Closed-form strategy on the given times, shape (len(times), d1):
    theta/alpha (amount), theta/(1 - gamma) and theta (proportion)

    :raises:
        NotApplicableError: with an endowment or outside the exponential, power and log families
    """
    u = spec.utility

    if not spec.endowment.is_zero:
        raise NotApplicableError('Closed-form benchmarks require H = 0')

    theta_h = spec.market.hedgeable_path(times)

    if u.family is Family.EXPONENTIAL:
        return theta_h / u.params['alpha']

    if u.family is Family.POWER:
        return theta_h / (1 - u.params['gamma'])

    if u.family is Family.LOG:
        return theta_h

    raise NotApplicableError(f'No closed-form benchmark for {u.family.value} utility')


def _merton_errors(solution: FbsdeSolution, spec: ProblemSpec) -> np.ndarray:
    """
    Relative error of pi* per (path, node, component) on the left nodes
    """
    grid = solution.pi_star.grid
    target = merton_target(spec, grid.times)[:-1]
    pi = solution.pi_star.as_matrix()[:, :-1, :]

    return np.abs(pi - target[None]) / np.maximum(np.abs(target[None]), FLOAT_FLOOR)


def merton_benchmark(
    spec: ProblemSpec,
    solution: FbsdeSolution,
    *,
    tolerance: float = MERTON_RTOL,
) -> List[CheckResult]:
    if solution.pi_star is None:
        raise DomainError(f'Solution has no strategy (status {solution.status.value})')

    errors = _merton_errors(solution, spec)

    return [
        CheckResult.deterministic(
            f'merton[{i}]',
            float(np.max(errors[:, :, i])),
            tolerance,
            family=spec.utility.family.value,
            convention=spec.convention.value,
            mean_strategy=float(np.mean(solution.pi_star.as_matrix()[:, 0, i])),
        )
        for i in range(errors.shape[2])
    ]


def cole_hopf_check(
    solution: FbsdeSolution,
    spec: ProblemSpec,
    *,
    z: float = DEFAULT_Z,
) -> List[CheckResult]:
    """
    Adjoint pair p = exp(Y), k = Z p of a one-dimensional half-line solution without endowment
    """
    if spec.market.d != 1:
        raise NotApplicableError(f'Adjoint checks are one-dimensional, market has d={spec.market.d}')

    if spec.utility.domain is not Domain.HALF_LINE or not spec.endowment.is_zero:
        raise NotApplicableError('Adjoint checks require a half-line utility and H = 0')

    _require_paths(solution)

    u = spec.utility
    bundle = solution.bundle
    grid = bundle.grid
    dt = grid.dt
    dw = bundle.increments[:, :, 0]

    p = np.exp(solution.Y.values)
    zeta = solution.Z.values[:, :, 0]
    k = zeta * p
    x = solution.X.values
    theta = spec.market.hedgeable_path(grid.times)[:, 0][None]
    drift = (zeta + theta) ** 2 * np.asarray(phi2_halfline(u, x))

    checks = [CheckResult.deterministic('cole_hopf.terminal', float(np.max(np.abs(p[:, -1] - 1))), 0.0)]

    euler = p[:, 1:] - p[:, :-1] - k[:, :-1] * dw - p[:, :-1] * drift[:, :-1] * dt
    rms = float(np.sqrt(np.mean(euler ** 2)))
    checks.append(CheckResult.deterministic(
        'cole_hopf.residual_rms', rms, RESIDUAL_RMS_CONSTANT * math.sqrt(dt), n_steps=grid.n_steps,
    ))

    compensated = p[:, 1:] - p[:, :-1] * np.exp(drift[:, :-1] * dt) - k[:, :-1] * dw
    nodes = thinned_nodes(grid.n_steps)
    z_family = _bonferroni(z, len(nodes))

    for n in nodes:
        checks.append(CheckResult.statistical(
            f'cole_hopf.mean[node={n}]', compensated[:, n], z_family, node=int(n), base_z=z,
        ))

    maximizer = -np.asarray(phi1(u, x)) * (k / p + theta)
    amount = solution.pi_star.as_matrix()[:, :, 0] * x
    relative = np.abs(maximizer - amount) / np.maximum(np.abs(amount), FLOAT_FLOOR)
    checks.append(CheckResult.deterministic('cole_hopf.hamiltonian', float(np.max(relative)), HAMILTONIAN_RTOL))

    return checks


def _dual_process(solution: FbsdeSolution, spec: ProblemSpec) -> np.ndarray:
    return spec.utility.u1(solution.X.values) * np.exp(solution.Y.values)


def dual_consistency_check(
    solution: FbsdeSolution,
    spec: ProblemSpec,
    *,
    z: float = DEFAULT_Z,
) -> List[CheckResult]:
    """
    Dual optimizer D = U'(X) e^Y and its normalization D / D_0
    """
    if spec.utility.domain is not Domain.HALF_LINE:
        raise NotApplicableError('Dual checks require a half-line solution')

    _require_paths(solution)

    u, market = spec.utility, spec.market
    bundle = solution.bundle
    grid = bundle.grid
    d1 = market.d1
    dual = _dual_process(solution, spec)
    normalized = dual / dual[:, :1]

    checks = [
        CheckResult.deterministic('dual.initial', float(np.max(np.abs(normalized[:, 0] - 1))), 0.0),
        CheckResult.statistical('dual.budget', solution.X.terminal * normalized[:, -1] - spec.x0, z),
    ]

    theta_h = market.hedgeable_path(grid.times[:-1])[None]
    z_o = solution.Z.as_matrix()[:, :-1, d1:]
    dw = bundle.increments

    with np.errstate(all='ignore'):
        residual = (
            np.diff(np.log(dual), axis=1)
            + np.sum(theta_h * dw[:, :, :d1], axis=2)
            + 0.5 * (np.sum(theta_h ** 2, axis=2) + np.sum(z_o ** 2, axis=2)) * grid.dt
            - np.sum(z_o * dw[:, :, d1:], axis=2)
        )

    nodes = thinned_nodes(grid.n_steps)
    z_family = _bonferroni(z, len(nodes))

    for k in nodes:
        checks.append(CheckResult.statistical(
            f'dual.representation[node={k}]', residual[:, k], z_family, node=int(k), base_z=z,
        ))

    energy = np.sum(z_o ** 2, axis=(1, 2)) * grid.dt
    checks.append(CheckResult.reported('dual.orthogonal_energy', float(np.mean(energy))))

    endowment = solution.endowment
    terminal = dual[:, -1]
    gap = (
        u.u0(solution.X.terminal + endowment)
        - np.asarray(convex_conjugate(u, terminal))
        - terminal * endowment
        - dual[:, 0] * spec.x0
    )
    checks.append(CheckResult.statistical('dual.gap', gap, z))

    return checks


def _utility_samples(
    spec: ProblemSpec,
    pi: Union[StatePaths, np.ndarray],
    bundle: PathBundle,
    endowment: Optional[np.ndarray] = None,
) -> Tuple[np.ndarray, np.ndarray]:
    u = spec.utility

    if endowment is None:
        endowment = spec.endowment_values(bundle)

    if u.domain is Domain.REAL_LINE:
        wealth = wealth_amount(bundle, spec.market, pi, spec.x0)
    else:
        wealth = wealth_proportion(bundle, spec.market, pi, spec.x0)

    total = wealth.terminal + endowment
    valid = np.isfinite(total)

    if u.domain is Domain.HALF_LINE:
        valid &= total > 0

    if u.upper is not None:
        valid &= total < u.upper

    samples = np.full(total.shape, np.nan)
    samples[valid] = u.u0(total[valid])

    return samples, valid


def _check_violations(valid: np.ndarray):
    violations = int(np.sum(~valid))

    if violations > MAX_VIOLATION_FRACTION * valid.size:
        raise DomainError(f'Terminal wealth leaves the utility domain on {violations} of {valid.size} paths')

    return violations


def utility_estimate(
    spec: ProblemSpec,
    pi: Union[StatePaths, np.ndarray],
    bundle: PathBundle,
) -> UtilityEstimate:
    """
    Monte Carlo estimate of E[U(X_N + H)] under the strategy pi

    :raises:
        DomainError: when more than 0.1% of the paths leave the utility domain
    """
    samples, valid = _utility_samples(spec, pi, bundle)
    violations = _check_violations(valid)

    if violations:
        logger.warning('Dropped %d paths outside the utility domain', violations)

    mean, standard_error = _mean_and_se(samples[valid])

    return UtilityEstimate(mean, standard_error, violations)


def _extend(values: np.ndarray) -> np.ndarray:
    return np.vstack([values, values[-1:]])


def utility_perturbation_test(
    solution: FbsdeSolution,
    spec: ProblemSpec,
    perturbations: Optional[Sequence[Perturbation]] = None,
    *,
    epsilon: float = PERTURBATION_EPSILON,
    z: float = DEFAULT_Z,
    seed: int = 0,
) -> List[CheckResult]:
    """
    Paired comparison of E[U(X_N + H)] under pi* and pi* +- epsilon h on the same paths
    """
    _require_paths(solution)

    bundle = solution.bundle
    grid = bundle.grid
    d1 = spec.market.d1

    if perturbations is None:
        perturbations = default_perturbations(grid, d1, seed)

    pi = solution.pi_star.as_matrix()
    optimal, optimal_valid = _utility_samples(spec, pi, bundle, solution.endowment)
    checks = []

    for h in perturbations:
        h = _as_perturbation(h, grid, d1)

        for sign, suffix in ((1.0, '+'), (-1.0, '-')):
            strategy = pi + sign * epsilon * _extend(h.values)[None]
            perturbed, valid = _utility_samples(spec, strategy, bundle, solution.endowment)
            valid &= optimal_valid
            violations = _check_violations(valid)

            checks.append(CheckResult.statistical(
                f'utility_perturbation.{h.name}{suffix}',
                perturbed[valid] - optimal[valid],
                z,
                one_sided=True,
                epsilon=epsilon,
                violations=violations,
            ))

    return checks


def strategy_identity_check(solution: FbsdeSolution, spec: ProblemSpec) -> CheckResult:
    """
    Real line: pi + Z^H + theta^H phi1(X + Y) = 0, half line: pi X U''(X) + U'(X) (Z^H + theta^H) = 0
    """
    _require_paths(solution)

    u = spec.utility
    d1 = spec.market.d1
    grid = solution.X.grid
    theta_h = spec.market.hedgeable_path(grid.times)[None]
    z_h = solution.Z.as_matrix()[:, :, :d1]
    pi = solution.pi_star.as_matrix()
    x = solution.X.values

    if u.domain is Domain.REAL_LINE:
        tail = z_h + theta_h * np.asarray(phi1(u, x + solution.Y.values))[:, :, None]
    else:
        tail = u.u1(x)[:, :, None] * (z_h + theta_h)
        pi = pi * (x * u.u2(x))[:, :, None]

    residual = np.abs(pi + tail) / np.maximum(1.0, np.abs(tail))

    return CheckResult.deterministic(
        'strategy_identity', float(np.max(residual)), STRATEGY_IDENTITY_TOLERANCE, convention=spec.convention.value,
    )


def martingale_identity_check(solution: FbsdeSolution, spec: ProblemSpec) -> CheckResult:
    """
    Compares the marginal utility process with U'(x0 + m*) E(-theta^H . W^H) (real line, relative RMS)
    or U'(x0) e^{m*} E(-theta^H . W^H) (half line, exact up to rounding)
    """
    _require_paths(solution)

    if solution.m_star is None:
        raise NotApplicableError('The martingale identity needs a fixed-point solution')

    u, market = spec.utility, spec.market
    bundle = solution.bundle
    grid = bundle.grid
    theta = market.theta_path(grid.times[:-1])
    exponential = stochastic_exponential(bundle, -theta, [True] * market.d1 + [False] * market.d2).values

    if u.domain is Domain.REAL_LINE:
        marginal = u.u1(solution.X.values + solution.Y.values)
        reference = u.u1(np.asarray(spec.x0 + solution.m_star)) * exponential
        statistic = float(np.sqrt(np.mean(((marginal - reference) / reference) ** 2)))

        return CheckResult.deterministic(
            'martingale_identity', statistic, RESIDUAL_RMS_CONSTANT * math.sqrt(grid.dt), n_steps=grid.n_steps,
        )

    marginal = _dual_process(solution, spec)

    if 'G' in solution.processes:
        # carries Z^O . W^O when the endowment reads orthogonal components
        reference = solution.processes['G'].values
    else:
        reference = u.u1(np.asarray(spec.x0)) * math.exp(solution.m_star) * exponential

    statistic = float(np.max(np.abs(marginal - reference) / np.abs(reference)))

    return CheckResult.deterministic(
        'martingale_identity', statistic, EXACT_IDENTITY_RTOL,
        domain_clips=solution.metadata.get('domain_clips', 0),
    )


def local_martingale_stress_test(
    solution: FbsdeSolution,
    spec: ProblemSpec,
    *,
    z: float = DEFAULT_Z,
) -> List[CheckResult]:
    """
    U'(X* + Y) (X^pi - X*) for the stress strategies 0.5 pi*, 2 pi* and pi* + 1
    """
    if spec.utility.domain is not Domain.REAL_LINE:
        raise NotApplicableError('The local martingale stress test is defined for real-line solutions')

    _require_paths(solution)

    bundle, market = solution.bundle, spec.market
    pi = solution.pi_star.as_matrix()
    marginal = spec.utility.u1(solution.X.values + solution.Y.values)
    optimal = wealth_amount(bundle, market, pi, spec.x0).values
    checks = []

    for label, strategy in (('half', 0.5 * pi), ('double', 2.0 * pi), ('shift', pi + 1.0)):
        other = wealth_amount(bundle, market, strategy, spec.x0).values
        process = StatePaths(f'stress_{label}', bundle.grid, marginal * (other - optimal))
        checks.extend(martingale_test(process, bundle, z=z, name=f'stress.{label}'))

    return checks


def duality_supermartingale_test(
    solution: FbsdeSolution,
    spec: ProblemSpec,
    *,
    z: float = DEFAULT_Z,
) -> List[CheckResult]:
    """
    X^pi D / D_0 for the stress strategies 0.5 pi*, 2 pi* and the constant proportion 1
    """
    if spec.utility.domain is not Domain.HALF_LINE:
        raise NotApplicableError('The duality supermartingale test is defined for half-line solutions')

    _require_paths(solution)

    bundle, market = solution.bundle, spec.market
    pi = solution.pi_star.as_matrix()
    dual = _dual_process(solution, spec)
    normalized = dual / dual[:, :1]
    checks = []

    for label, strategy in (('half', 0.5 * pi), ('double', 2.0 * pi), ('unit', np.ones_like(pi))):
        wealth = wealth_proportion(bundle, market, strategy, spec.x0).values
        process = StatePaths(f'deflated_{label}', bundle.grid, wealth * normalized)
        checks.extend(supermartingale_test(process, bundle, z=z, name=f'deflated.{label}'))

    return checks


def marginal_utility_representation_check(
    solution: FbsdeSolution,
    spec: ProblemSpec,
    *,
    z: float = DEFAULT_Z,
) -> List[CheckResult]:
    """
    Node means of dU'(X + Y) + theta^H U' dW^H - U'' Z^O dW^O
    """
    if spec.utility.domain is not Domain.REAL_LINE:
        raise NotApplicableError('The marginal utility representation is defined for real-line solutions')

    _require_paths(solution)

    u, market = spec.utility, spec.market
    bundle = solution.bundle
    grid = bundle.grid
    d1 = market.d1
    p = solution.X.values + solution.Y.values
    marginal, curvature = u.u1(p), u.u2(p)
    theta_h = market.hedgeable_path(grid.times[:-1])[None]
    z_o = solution.Z.as_matrix()[:, :-1, d1:]
    dw = bundle.increments

    residual = (
        np.diff(marginal, axis=1)
        + marginal[:, :-1] * np.sum(theta_h * dw[:, :, :d1], axis=2)
        - curvature[:, :-1] * np.sum(z_o * dw[:, :, d1:], axis=2)
    )

    nodes = thinned_nodes(grid.n_steps)
    z_family = _bonferroni(z, len(nodes))

    return [
        CheckResult.statistical(
            f'marginal_representation[node={k}]', residual[:, k], z_family, node=int(k), base_z=z,
        )
        for k in nodes
    ]


def power_terminal_identity_check(solution: FbsdeSolution, spec: ProblemSpec) -> CheckResult:
    """
    log(U'(X_N + H) / U'(X_N)) = (gamma - 1) log(1 + H / X_N) on every path
    """
    u = spec.utility

    if u.family is not Family.POWER:
        raise NotApplicableError(f'Terminal identity is specific to power utility, got {u.family.value}')

    _require_paths(solution)

    gamma = u.params['gamma']
    wealth, endowment = solution.X.terminal, solution.endowment
    generic = np.log(u.u1(wealth + endowment) / u.u1(wealth))
    closed = (gamma - 1) * np.log1p(endowment / wealth)

    return CheckResult.deterministic(
        'power_terminal_identity', float(np.max(np.abs(generic - closed))), EXACT_IDENTITY_RTOL,
    )


@dataclass(frozen=True)
class ConvergenceRow:
    n_steps: int
    n_paths: int
    status: str
    y0: Optional[float]
    y0_standard_error: Optional[float]
    m_star: Optional[float]
    error: float

    def to_dict(self) -> dict:
        return {
            'n_steps': self.n_steps,
            'n_paths': self.n_paths,
            'status': self.status,
            'y0': self.y0,
            'y0_se': self.y0_standard_error,
            'm_star': self.m_star,
            'error': self.error,
        }


@dataclass
class ConvergenceTable:
    metric: str
    rows: List[ConvergenceRow]
    order: float
    reference: Optional[float] = None

    @property
    def passed(self) -> bool:
        return self.order >= CONVERGENCE_MIN_ORDER

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame([x.to_dict() for x in self.rows])

    def to_dict(self) -> dict:
        return {
            'metric': self.metric,
            'order': None if math.isnan(self.order) else self.order,
            'reference': self.reference,
            'passed': self.passed,
            'rows': [x.to_dict() for x in self.rows],
        }


def _fit_order(steps: Sequence[float], errors: Sequence[float]) -> float:
    """
    Least-squares slope of log error against log dt, infinite when every level is exact
    """
    points = [(dt, e) for dt, e in zip(steps, errors) if math.isfinite(e)]

    if not points:
        return math.nan

    if all(e <= FLOAT_FLOOR for _, e in points):
        return math.inf

    points = [(dt, e) for dt, e in points if e > FLOAT_FLOOR]

    if len({dt for dt, _ in points}) < 2:
        return math.nan

    dts, es = zip(*points)

    return float(np.polyfit(np.log(dts), np.log(es), 1)[0])


def _metric(metric: str, solution: FbsdeSolution, spec: ProblemSpec) -> float:
    if solution.X is None:
        return math.nan

    if metric == 'pi':
        return float(np.max(np.abs(np.mean(_merton_errors(solution, spec), axis=0))))

    if metric == 'cole_hopf':
        return next(x.statistic for x in cole_hopf_check(solution, spec) if x.name == 'cole_hopf.residual_rms')

    if metric == 'martingale':
        return martingale_identity_check(solution, spec).statistic

    raise ValueError(f'Unknown convergence metric {metric!r}')


CONVERGENCE_METRICS = ('y0', 'pi', 'cole_hopf', 'martingale')


def convergence_study(
    spec: ProblemSpec,
    numerics: NumericsConfig,
    ladder: Sequence[Tuple[int, int]],
    *,
    solver: SolverKind = SolverKind.AUTO,
    metric: str = 'y0',
    target: Optional[float] = None,
) -> ConvergenceTable:
    """
    Runs the solver over a ladder of (n_steps, n_paths) pairs on the same seed.

    For metric 'y0' the error is |Y_0 - target|, or the distance to the finest level when
    no target is given. Other metrics are errors in their own right.
    """
    if metric not in CONVERGENCE_METRICS:
        raise ValueError(f'Unknown convergence metric {metric!r}, expected one of {CONVERGENCE_METRICS}')

    if not ladder:
        raise ValueError('Convergence ladder is empty')

    solutions = []

    for n_steps, n_paths in ladder:
        logger.info('Convergence level N=%d, M=%d', n_steps, n_paths)
        solution = solve(spec, with_steps(numerics, n_steps, n_paths), solver)
        solutions.append((n_steps, n_paths, solution))

    reference = target

    if metric == 'y0' and reference is None:
        finest = max(solutions, key=lambda x: (x[0], x[1]))
        reference = finest[2].y0

    rows = []

    for n_steps, n_paths, solution in solutions:
        if metric == 'y0':
            error = math.nan if solution.y0 is None or reference is None else abs(solution.y0 - reference)
        else:
            error = _metric(metric, solution, spec)

        rows.append(ConvergenceRow(
            n_steps=n_steps,
            n_paths=n_paths,
            status=solution.status.value,
            y0=solution.y0,
            y0_standard_error=solution.regression[0].standard_error if solution.regression else None,
            m_star=solution.m_star,
            error=error,
        ))

    fitted = rows

    if metric == 'y0' and target is None:
        finest = max(rows, key=lambda x: (x.n_steps, x.n_paths))
        fitted = [x for x in rows if x is not finest]

    order = _fit_order([spec.market.horizon / x.n_steps for x in fitted], [x.error for x in fitted])

    logger.info('Convergence study on %s: fitted order %.3g', metric, order)

    return ConvergenceTable(metric=metric, rows=rows, order=order, reference=reference)


def spec_hash(spec: ProblemSpec) -> str:
    payload = json.dumps(spec.describe(), sort_keys=True, default=str)
    return hashlib.sha256(payload.encode('utf-8')).hexdigest()


def _collect(checks: List[CheckResult], skipped: Dict[str, str], name: str, fn: Callable, *args, **kwargs):
    try:
        result = fn(*args, **kwargs)
    except NotApplicableError as e:
        skipped[name] = str(e)
        return

    if isinstance(result, CheckResult):
        checks.append(result)
    else:
        checks.extend(result)


def run_verify_suite(
    spec: ProblemSpec,
    solution: FbsdeSolution,
    numerics: NumericsConfig,
) -> DiagnosticsReport:
    """
    Every applicable check for the solution, with provenance and applicability notes
    """
    u = spec.utility
    z = numerics.z

    report = DiagnosticsReport(
        provenance={
            'spec_hash': spec_hash(spec),
            'seed': numerics.seed,
            'numerics': numerics.describe(),
            'solver': solution.solver,
            'layout': None if solution.bundle is None else solution.bundle.layout,
        },
        notes=applicability_notes(u),
    )

    report.checks.append(CheckResult.deterministic(
        'status', 0.0 if solution.status is Status.CONVERGED else 1.0, 0.0, status=solution.status.value,
    ))

    if solution.X is None:
        logger.warning('Solution has no paths, diagnostics reduced to the status check')
        return report

    skipped: Dict[str, str] = {}
    checks = report.checks
    bundle = solution.bundle

    _collect(checks, skipped, 'strategy_identity', strategy_identity_check, solution, spec)

    if u.domain is Domain.REAL_LINE:
        marginal = StatePaths('marginal_utility', bundle.grid, u.u1(solution.X.values + solution.Y.values))
        checks.extend(martingale_test(marginal, bundle, z=z))
        _collect(checks, skipped, 'first_order', first_order_condition_test, solution, spec, z=z, seed=numerics.seed)
        _collect(checks, skipped, 'stress', local_martingale_stress_test, solution, spec, z=z)

        if spec.market.d2 > 0:
            _collect(checks, skipped, 'marginal_representation', marginal_utility_representation_check,
                     solution, spec, z=z)
    else:
        dual = StatePaths('dual', bundle.grid, _dual_process(solution, spec))
        checks.extend(martingale_test(dual, bundle, z=z))
        _collect(checks, skipped, 'dual', dual_consistency_check, solution, spec, z=z)
        _collect(checks, skipped, 'deflated', duality_supermartingale_test, solution, spec, z=z)
        _collect(checks, skipped, 'cole_hopf', cole_hopf_check, solution, spec, z=z)

    _collect(checks, skipped, 'martingale_identity', martingale_identity_check, solution, spec)
    _collect(checks, skipped, 'merton', merton_benchmark, spec, solution, tolerance=numerics.merton_tolerance)

    if solution.solver == SolverKind.POWER_ENDOWMENT.value:
        _collect(checks, skipped, 'power_terminal_identity', power_terminal_identity_check, solution, spec)

    _collect(checks, skipped, 'utility_perturbation', utility_perturbation_test, solution, spec,
             z=z, seed=numerics.seed)

    report.provenance['skipped'] = skipped

    logger.info(
        'Verification: %d checks, %d failed', len(report.checks), len(report.failures()),
    )

    return report
