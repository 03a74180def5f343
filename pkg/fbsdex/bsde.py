import enum
import logging
from dataclasses import dataclass, field, replace
from itertools import combinations_with_replacement
from typing import Callable, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from fbsdex.constants import (
    COLLINEAR_TOLERANCE, DEFAULT_BINS, DEFAULT_DEGREE, MAX_CONDITION, MAX_DEGREE,
    NEWTON_MAX_ITERATIONS, NEWTON_TOLERANCE,
)
from fbsdex.exceptions import (
    ConfigValidationError, DomainError, IllConditionedBasisError, ImplicitStepError, IntegrationError,
)
from fbsdex.market import MarketModel
from fbsdex.paths import PathBundle, StatePaths
from fbsdex.utility import Domain, UtilityModel, phi1, phi2_halfline, phi2_realline, phi3

__all__ = [
    'BasisKind',
    'SteppingMode',
    'ZDependence',
    'RegressionBasis',
    'RegressionStep',
    'BsdePaths',
    'Driver',
    'solve_bsde',
    'driver_lipschitz_realline',
    'driver_halfline',
    'driver_hara',
    'driver_incomplete_realline',
]

logger = logging.getLogger(__name__)

# relative spread below which a regression coordinate is treated as constant
SPREAD_TOLERANCE = 1e-10


class BasisKind(enum.Enum):
    POLYNOMIAL = 'polynomial'
    PIECEWISE_LINEAR = 'piecewise_linear'


class SteppingMode(enum.Enum):
    EXPLICIT = 'explicit'
    IMPLICIT_NEWTON = 'implicit_newton'


class ZDependence(enum.Enum):
    LINEAR = 'linear'
    QUADRATIC = 'quadratic'


def _independent_coordinates(coords: np.ndarray) -> np.ndarray:
    """
    Standardizes coordinates and drops constant ones and exact affine duplicates of earlier ones
    """
    kept: List[np.ndarray] = []

    for j in range(coords.shape[1]):
        column = coords[:, j]
        mean = column.mean()
        spread = column.std()

        if not spread > SPREAD_TOLERANCE * max(1.0, abs(mean)):
            continue

        standardized = (column - mean) / spread

        if kept:
            previous = np.column_stack(kept)
            coefficients, *_ = np.linalg.lstsq(previous, standardized, rcond=None)

            if np.std(standardized - previous @ coefficients) < COLLINEAR_TOLERANCE:
                continue

        kept.append(standardized)

    if not kept:
        return np.empty((coords.shape[0], 0))

    return np.column_stack(kept)


@dataclass(frozen=True)
class RegressionBasis:
    """
    Conditional expectation estimator on the coordinates named in projection.

    'W' stands for all Brownian levels, 'W<i>' for one component, any other name
    for a state process. None projects on W and every supplied state process.
    """
    kind: BasisKind = BasisKind.POLYNOMIAL
    degree: int = DEFAULT_DEGREE
    bins: int = DEFAULT_BINS
    projection: Optional[Tuple[str, ...]] = None

    def __post_init__(self):
        if not 0 <= self.degree <= MAX_DEGREE:
            raise ConfigValidationError(f'Basis degree should be in [0, {MAX_DEGREE}], got {self.degree}')

        if self.bins < 1:
            raise ConfigValidationError(f'Number of bins should be positive, got {self.bins}')

    def with_projection(self, *names: str) -> 'RegressionBasis':
        return replace(self, projection=tuple(names))

    def design(self, coords: np.ndarray) -> np.ndarray:
        """
        Design matrix (M, p) with a leading constant column
        """
        n_paths = coords.shape[0]
        x = _independent_coordinates(coords)
        columns = [np.ones(n_paths)]

        if self.kind is BasisKind.POLYNOMIAL:
            for degree in range(1, self.degree + 1):
                for combo in combinations_with_replacement(range(x.shape[1]), degree):
                    columns.append(np.prod(x[:, combo], axis=1))
        else:
            quantiles = np.linspace(0.0, 1.0, self.bins + 1)[1:-1]

            for j in range(x.shape[1]):
                columns.append(x[:, j])

                for knot in np.unique(np.quantile(x[:, j], quantiles)):
                    columns.append(np.maximum(x[:, j] - knot, 0.0))

        return np.column_stack(columns)


@dataclass(frozen=True)
class RegressionStep:
    node: int
    residual_rms: float
    condition: float
    standard_error: float
    z_standard_error: Tuple[float, ...]
    n_basis: int

    def to_dict(self) -> dict:
        return {
            'node': self.node,
            'residual_rms': self.residual_rms,
            'condition': self.condition,
            'standard_error': self.standard_error,
            'z_standard_error': list(self.z_standard_error),
            'n_basis': self.n_basis,
        }


@dataclass(frozen=True, eq=False)
class BsdePaths:
    Y: StatePaths
    Z: StatePaths
    steps: List[RegressionStep] = field(default_factory=list)

    @property
    def y0(self) -> float:
        return float(self.Y.values[0, 0])


DriverFn = Callable[[float, Mapping[str, np.ndarray], np.ndarray, np.ndarray], np.ndarray]


@dataclass(frozen=True)
class Driver:
    """
    f(t, state, y, z) of dY = f dt + Z dW, evaluated on all paths of one node at once
    """
    fn: DriverFn
    z_dependence: ZDependence
    requires: Tuple[str, ...] = ()
    dy: Optional[DriverFn] = None
    name: str = 'driver'

    def __call__(self, t: float, state: Mapping[str, np.ndarray], y: np.ndarray, z: np.ndarray) -> np.ndarray:
        return self.fn(t, state, y, z)

    def with_state_map(
        self,
        mapping: Callable[[float, Mapping[str, np.ndarray], np.ndarray], Mapping[str, np.ndarray]],
        requires: Sequence[str],
    ) -> 'Driver':
        """
        Driver whose state is derived from other state processes and the own y value
        """
        inner = self.fn

        def fn(t, state, y, z):
            return inner(t, mapping(t, state, y), y, z)

        return Driver(fn=fn, z_dependence=self.z_dependence, requires=tuple(requires), name=self.name)


def _coordinates(
    bundle: PathBundle,
    state: Mapping[str, StatePaths],
    projection: Optional[Sequence[str]],
    node: int,
) -> np.ndarray:
    names = projection if projection is not None else ('W',) + tuple(sorted(state))
    columns = []

    for name in names:
        if name == 'W':
            columns.append(bundle.levels[:, node, :])
        elif name.startswith('W') and name[1:].isdigit():
            columns.append(bundle.levels[:, node, int(name[1:])][:, None])
        else:
            columns.append(state[name].as_matrix()[:, node, :])

    if not columns:
        return np.empty((bundle.n_paths, 0))

    return np.hstack(columns)


def _implicit_step(
    driver: Driver,
    t: float,
    state: Mapping[str, np.ndarray],
    continuation: np.ndarray,
    z: np.ndarray,
    dt: float,
    node: int,
) -> np.ndarray:
    """
    Solves y = continuation - f(t, state, y, z) dt path by path with scalar Newton steps
    """
    y = continuation.copy()
    step = np.zeros_like(y)

    with np.errstate(all='ignore'):
        for _ in range(NEWTON_MAX_ITERATIONS):
            residual = y - continuation + driver(t, state, y, z) * dt

            if driver.dy is not None:
                slope = driver.dy(t, state, y, z)
            else:
                h = 1e-6 * np.maximum(1.0, np.abs(y))
                slope = (driver(t, state, y + h, z) - driver(t, state, y - h, z)) / (2 * h)

            step = residual / (1 + slope * dt)
            y = y - step

            bad = ~np.isfinite(y)

            if np.any(bad):
                raise ImplicitStepError('Non-finite Newton iterate', node=node, path=int(np.argmax(bad)))

            if np.all(np.abs(step) <= NEWTON_TOLERANCE * np.maximum(1.0, np.abs(y))):
                return y

    raise ImplicitStepError(
        f'Newton iteration did not converge in {NEWTON_MAX_ITERATIONS} steps',
        node=node,
        path=int(np.argmax(np.abs(step))),
    )


def solve_bsde(
    bundle: PathBundle,
    state: Mapping[str, StatePaths],
    terminal: np.ndarray,
    driver: Driver,
    basis: RegressionBasis = RegressionBasis(),
    mode: SteppingMode = SteppingMode.EXPLICIT,
    *,
    y_bound: Optional[float] = None,
) -> BsdePaths:
    """
    Backward induction Y_k = E_k[Y_{k+1}] - f dt with least-squares conditional expectations.

    Z_k regresses (Y_{k+1} - E_k[Y_{k+1}]) dW_k / dt, which has the same conditional
    expectation as Y_{k+1} dW_k / dt and a smaller variance.

    :raises:
        IllConditionedBasisError: when a design matrix condition number exceeds the limit
        ImplicitStepError: when the Newton step fails at some node
        IntegrationError: when the driver produces non-finite values
    """
    grid = bundle.grid
    n_paths, n_steps, dim = bundle.n_paths, grid.n_steps, bundle.dim
    dt = grid.dt

    terminal = np.asarray(terminal, dtype=float)

    if terminal.shape != (n_paths,):
        raise DomainError(f'Terminal values should have shape ({n_paths},), got {terminal.shape}')

    if not np.all(np.isfinite(terminal)):
        raise DomainError('Terminal values should be finite')

    missing = set(driver.requires) - set(state)

    if missing:
        raise DomainError(f'Driver {driver.name} requires state processes {sorted(missing)}')

    if driver.z_dependence is ZDependence.QUADRATIC and mode is SteppingMode.EXPLICIT:
        raise ConfigValidationError(f'Quadratic driver {driver.name} requires implicit stepping')

    y_values = np.empty((n_paths, n_steps + 1))
    z_values = np.zeros((n_paths, n_steps + 1, dim))
    y_values[:, n_steps] = terminal
    steps: List[RegressionStep] = []

    for k in reversed(range(n_steps)):
        t = float(grid.times[k])
        design = basis.design(_coordinates(bundle, state, basis.projection, k))
        q, r = np.linalg.qr(design)
        condition = float(np.linalg.cond(r))

        if not condition <= MAX_CONDITION:
            raise IllConditionedBasisError(node=k, condition=condition)

        target = y_values[:, k + 1]
        continuation = q @ (q.T @ target)
        residual = target - continuation

        z_target = residual[:, None] * bundle.increments[:, k, :] / dt
        z = q @ (q.T @ z_target)

        node_state = {name: paths.values[:, k] for name, paths in state.items()}

        if mode is SteppingMode.EXPLICIT:
            with np.errstate(all='ignore'):
                y = continuation - driver(t, node_state, continuation, z) * dt
        else:
            y = _implicit_step(driver, t, node_state, continuation, z, dt, k)

        bad = ~np.isfinite(y)

        if np.any(bad):
            raise IntegrationError(f'Non-finite value of {driver.name}', path=int(np.argmax(bad)), step=k)

        if y_bound is not None:
            y = np.clip(y, -y_bound, y_bound)

        y_values[:, k] = y
        z_values[:, k] = z

        n_basis = design.shape[1]
        spread = np.sqrt(n_basis / n_paths)
        residual_rms = float(np.sqrt(np.mean(residual ** 2)))

        steps.append(RegressionStep(
            node=k,
            residual_rms=residual_rms,
            condition=condition,
            standard_error=residual_rms * spread,
            z_standard_error=tuple(
                float(x) for x in np.sqrt(np.mean((z_target - z) ** 2, axis=0)) * spread
            ),
            n_basis=n_basis,
        ))

    z_values[:, n_steps] = z_values[:, n_steps - 1]
    steps.reverse()

    logger.debug(
        'Solved backward equation with %s: Y_0=%.6g, max condition %.3g',
        driver.name, y_values[0, 0], max(x.condition for x in steps),
    )

    return BsdePaths(
        Y=StatePaths('Y', grid, y_values),
        Z=StatePaths('Z', grid, z_values),
        steps=steps,
    )


def _require(u: UtilityModel, domain: Domain, name: str):
    if u.domain is not domain:
        raise DomainError(f'{name} requires a {domain.value} utility, got {u.domain.value}')


def _zero(t, state, y, z):
    return np.zeros_like(y)


def driver_lipschitz_realline(u: UtilityModel, market: MarketModel) -> Driver:
    """
    f(t, p, z) = -|theta|^2 phi2(p) / 2 + |theta|^2 phi1(p) + z . theta, reads P
    """
    _require(u, Domain.REAL_LINE, 'driver_lipschitz_realline')

    def fn(t, state, y, z):
        theta = market.theta_at(t)
        p = state['P']
        square = float(theta @ theta)

        return -0.5 * square * phi2_realline(u, p) + square * phi1(u, p) + z @ theta

    return Driver(fn=fn, z_dependence=ZDependence.LINEAR, requires=('P',), dy=_zero, name='lipschitz_realline')


def driver_halfline(u: UtilityModel, market: MarketModel) -> Driver:
    """
    f(t, x, z) = |z^H + theta^H|^2 phi2(x) - |z|^2 / 2, reads X
    """
    _require(u, Domain.HALF_LINE, 'driver_halfline')
    d1 = market.d1

    def fn(t, state, y, z):
        theta_h = market.theta_at(t)[:d1]
        hedgeable = z[:, :d1] + theta_h

        return (
            np.sum(hedgeable ** 2, axis=1) * phi2_halfline(u, state['X'])
            - 0.5 * np.sum(z ** 2, axis=1)
        )

    return Driver(fn=fn, z_dependence=ZDependence.QUADRATIC, requires=('X',), dy=_zero, name='halfline')


def driver_hara(kappa: float, market: MarketModel) -> Driver:
    """
    g(t, z) = -|z|^2 / 2 + kappa |z^H + theta^H|^2
    """
    d1 = market.d1

    def fn(t, state, y, z):
        theta_h = market.theta_at(t)[:d1]

        return -0.5 * np.sum(z ** 2, axis=1) + kappa * np.sum((z[:, :d1] + theta_h) ** 2, axis=1)

    return Driver(fn=fn, z_dependence=ZDependence.QUADRATIC, dy=_zero, name=f'hara(kappa={kappa:g})')


def driver_incomplete_realline(u: UtilityModel, market: MarketModel) -> Driver:
    """
    Driver of the incomplete real-line system evaluated at p = x + y:

        -|theta^H|^2 phi2(p) / 2 + |theta^H|^2 phi1(p) + z^H . theta^H - |z^O|^2 phi3(p) / 2
    """
    _require(u, Domain.REAL_LINE, 'driver_incomplete_realline')
    d1 = market.d1

    def fn(t, state, y, z):
        theta_h = market.theta_at(t)[:d1]
        p = state['X'] + y
        square = float(theta_h @ theta_h)
        orthogonal = np.sum(z[:, d1:] ** 2, axis=1)

        value = -0.5 * square * phi2_realline(u, p) + square * phi1(u, p) + z[:, :d1] @ theta_h

        if z.shape[1] > d1:
            value = value - 0.5 * orthogonal * phi3(u, p)

        return value

    return Driver(fn=fn, z_dependence=ZDependence.QUADRATIC, requires=('X',), name='incomplete_realline')
