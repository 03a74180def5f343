import enum
import logging
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np
from scipy.optimize import brentq

from fbsdex.bsde import (
    BsdePaths, Driver, RegressionBasis, RegressionStep, SteppingMode, driver_halfline, driver_hara,
    driver_incomplete_realline, driver_lipschitz_realline, solve_bsde,
)
from fbsdex.constants import (
    BRACKET_GROWTH_LIMIT, DAMPING, DIVERGENCE_FACTOR, DOMAIN_CLIP, DEFAULT_Z, FIXED_POINT_MAX_ITERATIONS,
    FIXED_POINT_TOLERANCE, MAX_SEED, MERTON_RTOL, MIN_SEED, PICARD_MAX_ITERATIONS, PICARD_TOLERANCE,
    Y_BOUND_FACTOR,
)
from fbsdex.endowment import Endowment
from fbsdex.exceptions import (
    ConfigValidationError, DimensionError, DomainError, InfeasibleError, IntegrationError,
    IterationDivergedError, NotApplicableError,
)
from fbsdex.market import MarketModel
from fbsdex.paths import PathBundle, StatePaths, TimeGrid, euler_sde, sample_brownian, stochastic_exponential
from fbsdex.utility import (
    Domain, Family, UtilityModel, hara_kappa, phi1, phi2_realline, phi_bounds, relative_risk_tolerance,
)

__all__ = [
    'Status',
    'Convention',
    'SolverKind',
    'ProblemSpec',
    'NumericsConfig',
    'FbsdeSolution',
    'solve_complete_realline',
    'solve_complete_halfline',
    'solve_incomplete_picard',
    'solve_power_endowment',
    'extract_strategy',
    'select_solver',
    'solve',
    'simulate',
]

logger = logging.getLogger(__name__)


class Status(enum.Enum):
    CONVERGED = 'Converged'
    MAX_ITERATIONS = 'MaxIterations'
    INFEASIBLE = 'Infeasible'


class Convention(enum.Enum):
    AMOUNT = 'amount'
    PROPORTION = 'proportion'


class SolverKind(enum.Enum):
    AUTO = 'auto'
    COMPLETE_REALLINE = 'complete_realline'
    COMPLETE_HALFLINE = 'complete_halfline'
    INCOMPLETE_PICARD = 'incomplete_picard'
    POWER_ENDOWMENT = 'power_endowment'


@dataclass(frozen=True)
class ProblemSpec:
    """
    Maximize E[U(X_T + H)] from initial wealth x0
    """
    market: MarketModel
    utility: UtilityModel
    x0: float
    endowment: Endowment = field(default_factory=Endowment.none)

    def __post_init__(self):
        if self.utility.domain is Domain.HALF_LINE:
            if not self.x0 > 0:
                raise DomainError(f'Half-line problems require x0 > 0, got {self.x0!r}')

            if math.isinf(self.endowment.bound):
                raise DomainError(
                    f'Half-line problems require a bounded endowment, got {self.endowment.kind.value}'
                )

        if any(c >= self.market.d for c in self.endowment.components):
            raise DimensionError(
                f'Endowment reads component {self.endowment.component} of a {self.market.d}-dimensional market'
            )

    @property
    def convention(self) -> Convention:
        if self.utility.domain is Domain.HALF_LINE:
            return Convention.PROPORTION

        return Convention.AMOUNT

    @property
    def reads_orthogonal(self) -> bool:
        return any(c >= self.market.d1 for c in self.endowment.components)

    def endowment_values(self, bundle: PathBundle) -> np.ndarray:
        """
        :raises:
            DomainError: when H is not finite, or negative for a half-line utility
        """
        values = self.endowment.evaluate(bundle)

        if not np.all(np.isfinite(values)):
            raise DomainError('Endowment is not finite on every path')

        if self.utility.domain is Domain.HALF_LINE and np.any(values < 0):
            raise DomainError('Half-line problems require a nonnegative endowment')

        return values

    def describe(self) -> dict:
        return {
            'd1': self.market.d1,
            'd2': self.market.d2,
            'horizon': self.market.horizon,
            'theta_bound': self.market.theta_bound,
            'utility': self.utility.describe(),
            'x0': self.x0,
            'endowment': self.endowment.describe(),
        }


@dataclass(frozen=True)
class NumericsConfig:
    n_steps: int = 64
    n_paths: int = 20_000
    seed: int = 0
    basis: RegressionBasis = RegressionBasis()
    fixed_point_tolerance: float = FIXED_POINT_TOLERANCE
    fixed_point_max_iterations: int = FIXED_POINT_MAX_ITERATIONS
    damping: float = DAMPING
    picard_max_iterations: int = PICARD_MAX_ITERATIONS
    picard_tolerance: float = PICARD_TOLERANCE
    domain_clip: float = DOMAIN_CLIP
    z: float = DEFAULT_Z
    merton_tolerance: float = MERTON_RTOL
    # execution only, never part of artifacts
    threads: Optional[int] = None

    def __post_init__(self):
        for name in (
            'fixed_point_tolerance', 'picard_tolerance', 'domain_clip', 'z', 'merton_tolerance',
        ):
            if not getattr(self, name) > 0:
                raise ConfigValidationError(f'Should be positive, got {getattr(self, name)!r}', f'numerics.{name}')

        if not 0 < self.damping <= 1:
            raise ConfigValidationError(f'Damping should be in (0, 1], got {self.damping!r}', 'numerics.damping')

        for name in ('n_steps', 'fixed_point_max_iterations', 'picard_max_iterations'):
            if getattr(self, name) < 1:
                raise ConfigValidationError(f'Should be at least 1, got {getattr(self, name)!r}', f'numerics.{name}')

        if self.n_paths < 2:
            raise ConfigValidationError(f'At least two paths are required, got {self.n_paths}', 'numerics.n_paths')

        if not MIN_SEED <= self.seed <= MAX_SEED:
            raise ConfigValidationError(f'Seed should fit in 64 bits, got {self.seed}', 'numerics.seed')

    def grid(self, horizon: float) -> TimeGrid:
        return TimeGrid(self.n_steps, horizon)

    def describe(self) -> dict:
        return {
            'n_steps': self.n_steps,
            'n_paths': self.n_paths,
            'seed': self.seed,
            'basis': {'kind': self.basis.kind.value, 'degree': self.basis.degree, 'bins': self.basis.bins},
            'fixed_point_tolerance': self.fixed_point_tolerance,
            'fixed_point_max_iterations': self.fixed_point_max_iterations,
            'damping': self.damping,
            'picard_max_iterations': self.picard_max_iterations,
            'picard_tolerance': self.picard_tolerance,
            'domain_clip': self.domain_clip,
            'z': self.z,
            'merton_tolerance': self.merton_tolerance,
        }


@dataclass(eq=False)
class FbsdeSolution:
    solver: str
    status: Status
    bundle: Optional[PathBundle] = None
    X: Optional[StatePaths] = None
    Y: Optional[StatePaths] = None
    Z: Optional[StatePaths] = None
    pi_star: Optional[StatePaths] = None
    m_star: Optional[float] = None
    endowment: Optional[np.ndarray] = None
    processes: Dict[str, StatePaths] = field(default_factory=dict)
    regression: List[RegressionStep] = field(default_factory=list)
    iteration_log: List[float] = field(default_factory=list)
    metadata: Dict[str, object] = field(default_factory=dict)
    message: str = ''

    @property
    def y0(self) -> Optional[float]:
        return None if self.Y is None else float(self.Y.values[0, 0])

    def to_meta(self) -> dict:
        return {
            'solver': self.solver,
            'status': self.status.value,
            'message': self.message,
            'm_star': self.m_star,
            'y0': self.y0,
            'iteration_log': [float(x) for x in self.iteration_log],
            'metadata': self.metadata,
            'regression': [x.to_dict() for x in self.regression],
        }


def simulate(spec: ProblemSpec, numerics: NumericsConfig) -> PathBundle:
    return sample_brownian(
        numerics.grid(spec.market.horizon),
        numerics.n_paths,
        spec.market.d,
        numerics.seed,
        threads=numerics.threads,
    )


def _bundle_for(spec: ProblemSpec, numerics: NumericsConfig, bundle: Optional[PathBundle]) -> PathBundle:
    if bundle is None:
        return simulate(spec, numerics)

    if bundle.dim != spec.market.d:
        raise DimensionError(f'Bundle has {bundle.dim} components, market has {spec.market.d}')

    if not math.isclose(bundle.grid.horizon, spec.market.horizon):
        raise DomainError(f'Bundle horizon {bundle.grid.horizon!r} differs from {spec.market.horizon!r}')

    return bundle


def _require_domain(spec: ProblemSpec, domain: Domain, solver: str):
    if spec.utility.domain is not domain:
        raise NotApplicableError(f'{solver} requires a {domain.value} utility, got {spec.utility.domain.value}')


def _endowment_projection(spec: ProblemSpec, *state: str) -> Tuple[str, ...]:
    return tuple(f'W{i}' for i in sorted(spec.endowment.components)) + state


@dataclass
class _Evaluation:
    y0: float
    paths: BsdePaths
    state: Dict[str, StatePaths]
    terminal_wealth: Optional[np.ndarray] = None


@dataclass
class _FixedPoint:
    status: Status
    m: float
    evaluation: Optional[_Evaluation]
    history: List[Tuple[float, float]]
    message: str


def _search_fixed_point(
    evaluate: Callable[[float], _Evaluation],
    numerics: NumericsConfig,
    bound: float,
) -> _FixedPoint:
    """
    Damped iteration m <- m + damping (g(m) - m) from the warm start g(0),
    bracketed root search on g(m) - m after two successive sign flips of the update
    """
    history: List[Tuple[float, float]] = []
    cache: Dict[float, _Evaluation] = {}
    tolerance = numerics.fixed_point_tolerance

    def g(m: float) -> _Evaluation:
        if m not in cache:
            cache[m] = evaluate(m)
            history.append((m, cache[m].y0))
            logger.debug('Fixed point evaluation g(%.10g) = %.10g', m, cache[m].y0)

        return cache[m]

    m = g(0.0).y0
    previous = None
    flips = 0

    for _ in range(numerics.fixed_point_max_iterations):
        current = g(m)
        update = current.y0 - m

        if abs(update) <= tolerance:
            return _FixedPoint(Status.CONVERGED, m, current, history, 'damped iteration converged')

        if previous is not None and np.sign(update) != np.sign(previous):
            flips += 1

            if flips >= 2:
                logger.info('Fixed point iteration oscillates, switching to bracketed search')
                return _bracketed_search(g, tolerance, bound, history)
        else:
            flips = 0

        previous = update
        m = m + numerics.damping * update

    logger.warning('Fixed point iteration stopped after %d iterations', numerics.fixed_point_max_iterations)

    return _FixedPoint(
        Status.MAX_ITERATIONS, m, g(m), history,
        f'fixed point residual above {tolerance:g} after {numerics.fixed_point_max_iterations} iterations',
    )


def _bracketed_search(
    g: Callable[[float], _Evaluation],
    tolerance: float,
    bound: float,
    history: List[Tuple[float, float]],
) -> _FixedPoint:
    def h(m: float) -> float:
        return g(m).y0 - m

    width = max(bound, 1.0)
    limit = BRACKET_GROWTH_LIMIT * width

    while True:
        low, high = h(-width), h(width)

        if low == 0 or high == 0 or np.sign(low) != np.sign(high):
            break

        if width >= limit:
            return _FixedPoint(
                Status.INFEASIBLE, math.nan, None, history,
                f'no sign change of g(m) - m in [-{width:g}, {width:g}]',
            )

        width = min(2 * width, limit)

    m = brentq(h, -width, width, xtol=tolerance / 4)
    evaluation = g(m)
    status = Status.CONVERGED if abs(evaluation.y0 - m) <= tolerance else Status.MAX_ITERATIONS

    logger.info('Bracketed search found m=%.10g in [-%g, %g]', m, width, width)

    return _FixedPoint(status, m, evaluation, history, f'bracketed search in [-{width:g}, {width:g}]')


def _attach_fixed_point(solution: FbsdeSolution, result: _FixedPoint):
    solution.iteration_log = [m for m, _ in result.history]
    solution.metadata['fixed_point_values'] = [y for _, y in result.history]
    solution.metadata['fixed_point_residual'] = (
        None if result.evaluation is None else abs(result.evaluation.y0 - result.m)
    )
    solution.message = result.message


def solve_complete_realline(
    spec: ProblemSpec,
    numerics: NumericsConfig,
    *,
    bundle: Optional[PathBundle] = None,
) -> FbsdeSolution:
    """
    Fixed point over m of Y_0 of the backward equation driven by
    dP = -|theta|^2 phi2(P) / 2 dt - phi1(P) theta . dW, P_0 = x0 + m
    """
    _require_domain(spec, Domain.REAL_LINE, 'solve_complete_realline')

    market, u = spec.market, spec.utility

    if market.d2 != 0:
        raise NotApplicableError('solve_complete_realline requires a complete market (d2 = 0)')

    bundle = _bundle_for(spec, numerics, bundle)
    terminal = spec.endowment_values(bundle)
    driver = driver_lipschitz_realline(u, market)
    basis = numerics.basis.with_projection(*_endowment_projection(spec, 'P'))

    bounds = phi_bounds(u)
    bound = float(np.max(np.abs(terminal))) + market.horizon * market.theta_bound ** 2 * (
        0.5 * bounds.phi2 + bounds.phi1
    )
    y_bound = Y_BOUND_FACTOR * max(bound, 1.0)

    def drift(t, p):
        theta = market.theta_at(t)
        return -0.5 * float(theta @ theta) * phi2_realline(u, p)

    def diffusion(t, p):
        return -np.asarray(phi1(u, p))[:, None] * market.theta_at(t)[None, :]

    def evaluate(m: float) -> _Evaluation:
        p = euler_sde(bundle, drift, diffusion, spec.x0 + m, name='P')
        paths = solve_bsde(bundle, {'P': p}, terminal, driver, basis, SteppingMode.EXPLICIT, y_bound=y_bound)

        return _Evaluation(paths.y0, paths, {'P': p})

    logger.info('Solving complete real-line problem for %s utility', u.family.value)

    result = _search_fixed_point(evaluate, numerics, bound)
    solution = FbsdeSolution(solver=SolverKind.COMPLETE_REALLINE.value, status=result.status, bundle=bundle)
    _attach_fixed_point(solution, result)
    solution.metadata['bracket_bound'] = bound

    if result.evaluation is None:
        return solution

    p = result.evaluation.state['P']
    paths = result.evaluation.paths

    solution.m_star = result.m
    solution.Y, solution.Z = paths.Y, paths.Z
    # X + Y recovers P up to one rounding of the subtraction
    solution.X = StatePaths('X', bundle.grid, p.values - paths.Y.values)
    solution.endowment = terminal
    solution.processes = {'P': p}
    solution.regression = paths.steps
    solution.pi_star = extract_strategy(solution, spec)

    logger.info('Complete real-line solve finished: %s, m*=%.6g', solution.status.value, solution.m_star)

    return solution


def _dual_exponential(
    spec: ProblemSpec,
    bundle: PathBundle,
    z_orthogonal: Optional[np.ndarray] = None,
) -> StatePaths:
    """
    E(-theta^H . W^H + Z^O . W^O), the orthogonal integrand is path dependent, shape (M, N, d2)
    """
    market = spec.market
    theta = market.theta_path(bundle.grid.times[:-1])
    mask = [True] * market.d1 + [False] * market.d2
    exponential = stochastic_exponential(bundle, -theta, mask, name='E')

    if z_orthogonal is None:
        return exponential

    log_increments = (
        np.sum(z_orthogonal * bundle.increments[:, :, market.d1:], axis=2)
        - 0.5 * np.sum(z_orthogonal ** 2, axis=2) * bundle.grid.dt
    )
    exponent = np.zeros_like(exponential.values)
    np.cumsum(log_increments, axis=1, out=exponent[:, 1:])

    return StatePaths('E', bundle.grid, exponential.values * np.exp(exponent))


def _complete_halfline(
    spec: ProblemSpec,
    numerics: NumericsConfig,
    bundle: Optional[PathBundle],
    driver: Optional[Driver],
    solver: SolverKind,
) -> FbsdeSolution:
    market, u = spec.market, spec.utility
    bundle = _bundle_for(spec, numerics, bundle)
    grid = bundle.grid
    endowment = spec.endowment_values(bundle)
    marginal0 = float(u.u1(np.asarray(spec.x0)))
    clip = numerics.domain_clip
    basis = numerics.basis.with_projection(*_endowment_projection(spec, 'logG'))
    orthogonal = spec.reads_orthogonal

    bounds = phi_bounds(u)
    bound = market.horizon * market.theta_bound ** 2 * bounds.phi2 + abs(
        math.log(float(u.u1(np.asarray(spec.x0 + spec.endowment.bound))) / marginal0)
    )

    def to_wealth(t, state, y):
        with np.errstate(all='ignore'):
            x = u.inverse_marginal(state['G'] * np.exp(-y))

        return {'X': np.maximum(x, clip)}

    if driver is None:
        driver = driver_halfline(u, market).with_state_map(to_wealth, requires=('G',))

    exponential = _dual_exponential(spec, bundle)

    def evaluate(m: float) -> _Evaluation:
        g = StatePaths('G', grid, marginal0 * math.exp(m) * exponential.values)

        with np.errstate(all='ignore'):
            wealth = u.inverse_marginal(g.terminal) - endowment

        short = ~(wealth > clip)

        if np.any(short):
            raise InfeasibleError(
                f'I(G_N) <= H + {clip:g} on {int(short.sum())} paths at m={m:.6g}: '
                f'initial wealth {spec.x0:g} is below the level needed to finance the endowment'
            )

        terminal = np.log(u.u1(wealth + endowment) / u.u1(wealth))
        y_bound = Y_BOUND_FACTOR * max(float(np.max(np.abs(terminal))) + bound, 1.0)

        paths = solve_bsde(
            bundle,
            {'G': g, 'logG': StatePaths('logG', grid, np.log(g.values))},
            terminal,
            driver,
            basis,
            SteppingMode.IMPLICIT_NEWTON,
            y_bound=y_bound,
        )

        return _Evaluation(paths.y0, paths, {'G': g}, wealth)

    logger.info('Solving complete half-line problem for %s utility', u.family.value)

    # Z^O of the dual exponential is taken from the previous backward pass until Y settles
    y = np.zeros((bundle.n_paths, grid.n_steps + 1))
    residuals: List[float] = []
    sweeps = numerics.picard_max_iterations if orthogonal else 1

    for sweep in range(sweeps):
        try:
            result = _search_fixed_point(evaluate, numerics, bound)
        except InfeasibleError as e:
            logger.warning('Half-line problem is infeasible: %s', e)
            return FbsdeSolution(solver=solver.value, status=Status.INFEASIBLE, bundle=bundle, message=str(e))

        if not orthogonal or result.evaluation is None:
            break

        paths = result.evaluation.paths
        residuals.append(_node_rms(paths.Y.values, y))
        y = paths.Y.values

        logger.debug('Orthogonal sweep %d: residual %.3e', sweep + 1, residuals[-1])

        if residuals[-1] <= numerics.picard_tolerance:
            break

        exponential = _dual_exponential(spec, bundle, paths.Z.as_matrix()[:, :-1, market.d1:])

    status = result.status

    if orthogonal and status is Status.CONVERGED and residuals[-1] > numerics.picard_tolerance:
        logger.warning('Orthogonal sweeps stopped after %d passes with residual %.3e', len(residuals), residuals[-1])
        status = Status.MAX_ITERATIONS

    solution = FbsdeSolution(solver=solver.value, status=status, bundle=bundle)
    _attach_fixed_point(solution, result)
    solution.metadata['bracket_bound'] = bound

    if orthogonal:
        solution.metadata['orthogonal_residuals'] = residuals

    if result.evaluation is None:
        return solution

    g = result.evaluation.state['G']
    paths = result.evaluation.paths

    with np.errstate(all='ignore'):
        wealth = u.inverse_marginal(g.values * np.exp(-paths.Y.values))

    clipped = int(np.sum(wealth <= clip))
    wealth = np.maximum(wealth, clip)
    wealth[:, -1] = result.evaluation.terminal_wealth

    if clipped:
        logger.warning('Clipped wealth at %g on %d path nodes', clip, clipped)

    solution.m_star = result.m
    solution.X = StatePaths('X', grid, wealth)
    solution.Y, solution.Z = paths.Y, paths.Z
    solution.endowment = endowment
    solution.processes = {'G': g}
    solution.regression = paths.steps
    solution.metadata['domain_clips'] = clipped
    solution.metadata['domain_clip'] = clip
    solution.pi_star = extract_strategy(solution, spec)

    logger.info('Complete half-line solve finished: %s, m*=%.6g', solution.status.value, solution.m_star)

    return solution


def solve_complete_halfline(
    spec: ProblemSpec,
    numerics: NumericsConfig,
    *,
    bundle: Optional[PathBundle] = None,
) -> FbsdeSolution:
    """
    Fixed point over m with G^m = U'(x0) e^m E(-theta^H . W^H), terminal wealth I(G_N) - H
    and wealth along the grid X = I(G e^{-Y})

    An endowment on orthogonal components adds Z^O . W^O to the exponential, with Z^O taken
    from the previous backward pass, until the node RMS of the Y update is below the Picard tolerance.
    """
    _require_domain(spec, Domain.HALF_LINE, 'solve_complete_halfline')

    return _complete_halfline(spec, numerics, bundle, None, SolverKind.COMPLETE_HALFLINE)


def _node_rms(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.sqrt(np.mean((a - b) ** 2)))


def _forward_realline(
    spec: ProblemSpec,
    bundle: PathBundle,
    y: np.ndarray,
    z: np.ndarray,
) -> StatePaths:
    market, u = spec.market, spec.utility
    grid = bundle.grid
    d1 = market.d1
    theta_h = market.hedgeable_path(grid.times)
    values = np.empty((bundle.n_paths, grid.n_steps + 1))
    values[:, 0] = spec.x0

    for k in range(grid.n_steps):
        amounts = -np.asarray(phi1(u, values[:, k] + y[:, k]))[:, None] * theta_h[k] - z[:, k, :d1]
        values[:, k + 1] = values[:, k] + np.sum(
            amounts * (bundle.increments[:, k, :d1] + theta_h[k] * grid.dt), axis=1,
        )

        bad = ~np.isfinite(values[:, k + 1])

        if np.any(bad):
            raise IntegrationError('Non-finite wealth', path=int(np.argmax(bad)), step=k)

    return StatePaths('X', grid, values)


def _forward_halfline(spec: ProblemSpec, bundle: PathBundle, z: np.ndarray, clip: float) -> StatePaths:
    market, u = spec.market, spec.utility
    grid = bundle.grid
    d1 = market.d1
    theta_h = market.hedgeable_path(grid.times)
    values = np.empty((bundle.n_paths, grid.n_steps + 1))
    values[:, 0] = spec.x0

    for k in range(grid.n_steps):
        proportions = (
            np.asarray(relative_risk_tolerance(u, values[:, k]))[:, None] * (z[:, k, :d1] + theta_h[k])
        )

        with np.errstate(all='ignore'):
            values[:, k + 1] = values[:, k] * np.exp(
                np.sum(proportions * bundle.increments[:, k, :d1], axis=1)
                - 0.5 * np.sum(proportions ** 2, axis=1) * grid.dt
                + np.sum(proportions * theta_h[k], axis=1) * grid.dt
            )

        bad = ~np.isfinite(values[:, k + 1])

        if np.any(bad):
            raise IntegrationError('Non-finite wealth', path=int(np.argmax(bad)), step=k)

        np.maximum(values[:, k + 1], clip, out=values[:, k + 1])

    return StatePaths('X', grid, values)


def _picard(
    spec: ProblemSpec,
    numerics: NumericsConfig,
    bundle: Optional[PathBundle],
    driver: Optional[Driver],
    terminal_fn: Optional[Callable[[np.ndarray, np.ndarray], np.ndarray]],
    solver: SolverKind,
) -> FbsdeSolution:
    market, u = spec.market, spec.utility
    bundle = _bundle_for(spec, numerics, bundle)
    grid = bundle.grid
    endowment = spec.endowment_values(bundle)
    halfline = u.domain is Domain.HALF_LINE
    clip = numerics.domain_clip

    if driver is None:
        driver = driver_halfline(u, market) if halfline else driver_incomplete_realline(u, market)

    if terminal_fn is None and halfline:
        def terminal_fn(x, h):
            return np.log(u.u1(x + h) / u.u1(x))

    basis = numerics.basis.with_projection(*_endowment_projection(spec, 'logX' if halfline else 'X'))

    bounds = phi_bounds(u)
    y_bound = Y_BOUND_FACTOR * max(
        float(np.max(np.abs(endowment))) + market.horizon * market.theta_bound ** 2 * (bounds.phi2 + bounds.phi1),
        1.0,
    )

    y = np.zeros((bundle.n_paths, grid.n_steps + 1))
    z = np.zeros((bundle.n_paths, grid.n_steps + 1, market.d))
    residuals: List[float] = []
    status = Status.MAX_ITERATIONS
    paths: Optional[BsdePaths] = None

    logger.info('Solving incomplete %s problem by Picard iteration', u.domain.value)

    for iteration in range(numerics.picard_max_iterations):
        if halfline:
            x = _forward_halfline(spec, bundle, z, clip)
            state = {'X': x, 'logX': StatePaths('logX', grid, np.log(x.values))}
            terminal = terminal_fn(x.terminal, endowment)
        else:
            x = _forward_realline(spec, bundle, y, z)
            state = {'X': x}
            terminal = endowment

        paths = solve_bsde(
            bundle, state, terminal, driver, basis, SteppingMode.IMPLICIT_NEWTON, y_bound=y_bound,
        )

        residual = _node_rms(paths.Y.values, y)
        residuals.append(residual)
        y, z = paths.Y.values, paths.Z.values

        logger.debug('Picard iteration %d: residual %.3e', iteration + 1, residual)

        if residual <= numerics.picard_tolerance:
            status = Status.CONVERGED
            break

        smallest = min(residuals)

        if len(residuals) > 1 and smallest > 0 and residual > DIVERGENCE_FACTOR * smallest:
            raise IterationDivergedError(residuals)

    if status is not Status.CONVERGED:
        logger.warning(
            'Picard iteration stopped after %d iterations with residual %.3e',
            len(residuals), residuals[-1],
        )

    # the half-line terminal Y_N is a function of X_N, keep the wealth of the last backward pass
    if not halfline:
        x = _forward_realline(spec, bundle, y, z)

    solution = FbsdeSolution(
        solver=solver.value,
        status=status,
        bundle=bundle,
        X=x,
        Y=paths.Y,
        Z=paths.Z,
        endowment=endowment,
        regression=paths.steps,
        iteration_log=residuals,
        message=(
            f'Picard residual {residuals[-1]:.3e} after {len(residuals)} iterations'
        ),
    )
    solution.metadata['experimental'] = True
    solution.metadata['orthogonal_energy'] = float(
        np.mean(np.sum(paths.Z.values[:, :-1, market.d1:] ** 2, axis=(1, 2)) * grid.dt)
    )

    if halfline:
        solution.metadata['domain_clips'] = int(np.sum(x.values <= clip))
        solution.metadata['domain_clip'] = clip

    solution.pi_star = extract_strategy(solution, spec)

    return solution


def solve_incomplete_picard(
    spec: ProblemSpec,
    numerics: NumericsConfig,
    *,
    bundle: Optional[PathBundle] = None,
) -> FbsdeSolution:
    """
    Alternating forward (wealth) and backward (Y, Z) passes until the node RMS of the
    Y update falls below the Picard tolerance. Complete markets go to the fixed-point solvers.

    :raises:
        IterationDivergedError: when the residual grows past five times its minimum
    """
    if spec.market.d2 == 0:
        logger.info('Market is complete, delegating to the fixed-point construction')

        if spec.utility.domain is Domain.HALF_LINE:
            return solve_complete_halfline(spec, numerics, bundle=bundle)

        return solve_complete_realline(spec, numerics, bundle=bundle)

    return _picard(spec, numerics, bundle, None, None, SolverKind.INCOMPLETE_PICARD)


def solve_power_endowment(
    spec: ProblemSpec,
    numerics: NumericsConfig,
    *,
    bundle: Optional[PathBundle] = None,
) -> FbsdeSolution:
    """
    Power utility with endowment: the driver reduces to the HARA form with
    kappa = gamma / (2 (gamma - 1)) and the terminal value to (gamma - 1) log(1 + H / X_T)
    """
    u = spec.utility

    if u.family is not Family.POWER:
        raise NotApplicableError(f'solve_power_endowment requires a power utility, got {u.family.value}')

    gamma = float(u.params['gamma'])

    if not 0 < gamma < 1:
        raise NotApplicableError(f'solve_power_endowment requires gamma in (0, 1), got {gamma!r}')

    kappa = hara_kappa(u)
    driver = driver_hara(kappa, spec.market)

    def terminal_fn(x, h):
        return (gamma - 1) * np.log1p(h / x)

    if spec.reads_orthogonal:
        solution = _picard(spec, numerics, bundle, driver, terminal_fn, SolverKind.POWER_ENDOWMENT)
    else:
        solution = _complete_halfline(spec, numerics, bundle, driver, SolverKind.POWER_ENDOWMENT)

    solution.metadata['kappa'] = kappa

    if solution.X is not None:
        wealth, endowment = solution.X.terminal, solution.endowment
        generic = np.log(u.u1(wealth + endowment) / u.u1(wealth))
        solution.metadata['terminal_identity_error'] = float(
            np.max(np.abs(generic - terminal_fn(wealth, endowment)))
        )

    return solution


def extract_strategy(solution: FbsdeSolution, spec: ProblemSpec) -> StatePaths:
    """
    Real line (amounts): pi = -theta^H phi1(X + Y) - Z^H
    Half line (proportions): pi = -U'(X) / (X U''(X)) (Z^H + theta^H)

    :raises:
        DomainError: on the half line when wealth reaches the domain clip
    """
    if solution.X is None or solution.Y is None or solution.Z is None:
        raise DomainError('Solution has no (X, Y, Z) paths to extract a strategy from')

    market, u = spec.market, spec.utility
    grid = solution.X.grid
    d1 = market.d1
    theta_h = market.hedgeable_path(grid.times)[None]
    z_h = solution.Z.as_matrix()[:, :, :d1]

    if u.domain is Domain.REAL_LINE:
        values = -np.asarray(phi1(u, solution.X.values + solution.Y.values))[:, :, None] * theta_h - z_h
    else:
        wealth = solution.X.values
        clip = solution.metadata.get('domain_clip', DOMAIN_CLIP)

        if np.any(wealth <= clip):
            raise DomainError(f'Wealth at or below {clip:g} on {int(np.sum(wealth <= clip))} path nodes')

        values = np.asarray(relative_risk_tolerance(u, wealth))[:, :, None] * (z_h + theta_h)

    return StatePaths('pi', grid, values)


def select_solver(spec: ProblemSpec) -> SolverKind:
    u, market = spec.utility, spec.market

    if u.domain is Domain.REAL_LINE:
        return SolverKind.COMPLETE_REALLINE if market.d2 == 0 else SolverKind.INCOMPLETE_PICARD

    if u.family is Family.POWER and not spec.endowment.is_zero and 0 < u.params['gamma'] < 1:
        return SolverKind.POWER_ENDOWMENT

    if spec.reads_orthogonal:
        return SolverKind.INCOMPLETE_PICARD

    return SolverKind.COMPLETE_HALFLINE


_SOLVERS = {
    SolverKind.COMPLETE_REALLINE: solve_complete_realline,
    SolverKind.COMPLETE_HALFLINE: solve_complete_halfline,
    SolverKind.INCOMPLETE_PICARD: solve_incomplete_picard,
    SolverKind.POWER_ENDOWMENT: solve_power_endowment,
}


def solve(
    spec: ProblemSpec,
    numerics: NumericsConfig,
    solver: SolverKind = SolverKind.AUTO,
    *,
    bundle: Optional[PathBundle] = None,
) -> FbsdeSolution:
    if solver is SolverKind.AUTO:
        solver = select_solver(spec)

    logger.info('Dispatching to %s', solver.value)

    return _SOLVERS[solver](spec, numerics, bundle=bundle)


def with_steps(numerics: NumericsConfig, n_steps: int, n_paths: int) -> NumericsConfig:
    return replace(numerics, n_steps=n_steps, n_paths=n_paths)
