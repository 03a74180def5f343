import enum
import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, Mapping, Optional, Union

import numpy as np

from fbsdex.constants import (
    BOUND_SAFETY_FACTOR, DERIVATIVE_RTOL, FINITE_DIFFERENCE_STEP, HALF_LINE_RANGE,
    HARA_RTOL, INVERSE_RTOL, REAL_LINE_RANGE, VALIDATION_POINTS,
)
from fbsdex.exceptions import ConstructionError, DomainError

__all__ = [
    'Domain',
    'Family',
    'UtilityModel',
    'PhiBounds',
    'exponential',
    'power',
    'log',
    'quadratic',
    'mixture_exp',
    'mixture_power',
    'custom',
    'validation_grid',
    'phi1',
    'phi2_realline',
    'phi2_halfline',
    'phi2',
    'phi3',
    'risk_tolerance',
    'relative_risk_tolerance',
    'absolute_risk_aversion',
    'relative_risk_aversion',
    'hara_kappa',
    'convex_conjugate',
    'phi_bounds',
    'applicability_notes',
]

logger = logging.getLogger(__name__)

ArrayLike = Union[float, np.ndarray]
Fn = Callable[[np.ndarray], np.ndarray]


class Domain(enum.Enum):
    REAL_LINE = 'real_line'
    HALF_LINE = 'half_line'


class Family(enum.Enum):
    EXPONENTIAL = 'exponential'
    POWER = 'power'
    LOG = 'log'
    QUADRATIC = 'quadratic'
    MIXTURE_EXP = 'mixture_exp'
    MIXTURE_POWER = 'mixture_power'
    CUSTOM = 'custom'


@dataclass(frozen=True, eq=False)
class UtilityModel:
    domain: Domain
    u0: Fn
    u1: Fn
    u2: Fn
    u3: Fn
    inverse_marginal: Fn
    family: Family
    params: Mapping[str, float] = field(default_factory=dict)
    # quadratic utility is only defined strictly below its bliss point
    upper: Optional[float] = None

    def describe(self) -> Dict[str, object]:
        return {'family': self.family.value, **{k: float(v) for k, v in self.params.items()}}


@dataclass(frozen=True)
class PhiBounds:
    phi1: float
    phi2: float


def validation_grid(u: UtilityModel) -> np.ndarray:
    if u.domain is Domain.HALF_LINE:
        return np.geomspace(*HALF_LINE_RANGE, VALIDATION_POINTS)

    low, high = REAL_LINE_RANGE

    if u.upper is not None:
        high = min(high, u.upper - 0.01 * max(1.0, abs(u.upper)))

        if high <= low:
            raise ConstructionError(
                f'Utility domain below {u.upper!r} does not intersect the validation range'
            )

    return np.linspace(low, high, VALIDATION_POINTS)


def _fd_step(u: UtilityModel, x: np.ndarray) -> np.ndarray:
    if u.domain is Domain.HALF_LINE:
        return FINITE_DIFFERENCE_STEP * x

    return FINITE_DIFFERENCE_STEP * np.maximum(1.0, np.abs(x))


def _check_close(name: str, actual: np.ndarray, expected: np.ndarray, rtol: float, scale: np.ndarray):
    error = np.abs(actual - expected)
    bad = ~(error <= rtol * scale)

    if np.any(bad):
        i = int(np.argmax(bad))
        raise ConstructionError(
            f'{name} check failed: got {actual[i]!r}, expected {expected[i]!r}'
        )


def _validate(u: UtilityModel) -> UtilityModel:
    """
    :raises:
        ConstructionError: when monotonicity, concavity, inversion or derivative consistency fails
    """
    x = validation_grid(u)

    with np.errstate(all='ignore'):
        values = [np.asarray(fn(x), dtype=float) for fn in (u.u0, u.u1, u.u2, u.u3)]

    for i, value in enumerate(values):
        if value.shape != x.shape or not np.all(np.isfinite(value)):
            raise ConstructionError(f'Derivative of order {i} is not finite on the validation grid')

    u0, u1, u2, u3 = values

    if np.any(u1 <= 0):
        raise ConstructionError('Utility should be strictly increasing')

    if np.any(u2 >= 0):
        raise ConstructionError('Utility should be strictly concave')

    inverse = np.asarray(u.inverse_marginal(u1), dtype=float)
    _check_close('inverse marginal', inverse, x, INVERSE_RTOL, np.maximum(1.0, np.abs(x)))

    h = _fd_step(u, x)

    for name, fn, derivative in (
        ('first derivative', u.u0, u1),
        ('second derivative', u.u1, u2),
        ('third derivative', u.u2, u3),
    ):
        approx = (fn(x + h) - fn(x - h)) / (2 * h)
        _check_close(name, approx, derivative, DERIVATIVE_RTOL, np.abs(derivative))

    logger.debug('Validated %s utility %s', u.family.value, dict(u.params))

    return u


def exponential(alpha: float = 1.0) -> UtilityModel:
    """
    U(x) = -exp(-alpha x) / alpha
    """
    if not alpha > 0:
        raise ConstructionError(f'Exponential utility requires alpha > 0, got {alpha!r}')

    return _validate(UtilityModel(
        domain=Domain.REAL_LINE,
        u0=lambda x: -np.exp(-alpha * x) / alpha,
        u1=lambda x: np.exp(-alpha * x),
        u2=lambda x: -alpha * np.exp(-alpha * x),
        u3=lambda x: alpha ** 2 * np.exp(-alpha * x),
        inverse_marginal=lambda y: -np.log(y) / alpha,
        family=Family.EXPONENTIAL,
        params={'alpha': alpha},
    ))


def power(gamma: float) -> UtilityModel:
    """
    U(x) = x^gamma / gamma on x > 0
    """
    if not gamma < 1 or gamma == 0:
        raise ConstructionError(f'Power utility requires gamma < 1 and gamma != 0, got {gamma!r}')

    g = gamma

    return _validate(UtilityModel(
        domain=Domain.HALF_LINE,
        u0=lambda x: x ** g / g,
        u1=lambda x: x ** (g - 1),
        u2=lambda x: (g - 1) * x ** (g - 2),
        u3=lambda x: (g - 1) * (g - 2) * x ** (g - 3),
        inverse_marginal=lambda y: y ** (1 / (g - 1)),
        family=Family.POWER,
        params={'gamma': gamma},
    ))


def log() -> UtilityModel:
    return _validate(UtilityModel(
        domain=Domain.HALF_LINE,
        u0=np.log,
        u1=lambda x: 1 / x,
        u2=lambda x: -1 / x ** 2,
        u3=lambda x: 2 / x ** 3,
        inverse_marginal=lambda y: 1 / y,
        family=Family.LOG,
    ))


def quadratic(b: float) -> UtilityModel:
    """
    U(x) = x - x^2 / (2b), defined for x < b
    """
    if not b > 0:
        raise ConstructionError(f'Quadratic utility requires a positive bliss point, got {b!r}')

    return _validate(UtilityModel(
        domain=Domain.REAL_LINE,
        u0=lambda x: x - x ** 2 / (2 * b),
        u1=lambda x: 1 - x / b,
        u2=lambda x: np.full_like(np.asarray(x, dtype=float), -1 / b),
        u3=lambda x: np.zeros_like(np.asarray(x, dtype=float)),
        inverse_marginal=lambda y: b * (1 - y),
        family=Family.QUADRATIC,
        params={'b': b},
        upper=b,
    ))


def _newton_inverse(log_marginal: Callable, slope: Callable, start: np.ndarray, y: np.ndarray) -> np.ndarray:
    # log U' is convex and decreasing, started left of the root Newton increases monotonically
    target = np.log(y)
    s = start

    for _ in range(100):
        step = (log_marginal(s) - target) / slope(s)
        s = s - step

        if np.all(np.abs(step) <= 1e-15 * np.maximum(1.0, np.abs(s))):
            break

    return s


def mixture_exp(alpha1: float = 1.0, alpha2: float = 2.0) -> UtilityModel:
    """
    U(x) = -exp(-alpha1 x) - exp(-alpha2 x), not HARA unless alpha1 == alpha2
    """
    if not (alpha1 > 0 and alpha2 > 0):
        raise ConstructionError(f'Mixture exponential requires positive rates, got {alpha1!r}, {alpha2!r}')

    a = np.array([alpha1, alpha2])

    def marginal(x):
        return alpha1 * np.exp(-alpha1 * x) + alpha2 * np.exp(-alpha2 * x)

    def second(x):
        return -alpha1 ** 2 * np.exp(-alpha1 * x) - alpha2 ** 2 * np.exp(-alpha2 * x)

    def inverse(y):
        y = np.asarray(y, dtype=float)
        start = np.max(-np.log(y[..., None] / a) / a, axis=-1)

        return _newton_inverse(
            lambda x: np.log(marginal(x)),
            lambda x: second(x) / marginal(x),
            start,
            y,
        )

    return _validate(UtilityModel(
        domain=Domain.REAL_LINE,
        u0=lambda x: -np.exp(-alpha1 * x) - np.exp(-alpha2 * x),
        u1=marginal,
        u2=second,
        u3=lambda x: alpha1 ** 3 * np.exp(-alpha1 * x) + alpha2 ** 3 * np.exp(-alpha2 * x),
        inverse_marginal=inverse,
        family=Family.MIXTURE_EXP,
        params={'alpha1': alpha1, 'alpha2': alpha2},
    ))


def mixture_power(gamma1: float = 0.3, gamma2: float = 0.7) -> UtilityModel:
    """
    U(x) = x^gamma1 / gamma1 + x^gamma2 / gamma2 on x > 0
    """
    for g in (gamma1, gamma2):
        if not 0 < g < 1:
            raise ConstructionError(f'Mixture power requires exponents in (0, 1), got {g!r}')

    exponents = np.array([gamma1 - 1, gamma2 - 1])

    def marginal(x):
        return x ** (gamma1 - 1) + x ** (gamma2 - 1)

    def inverse(y):
        y = np.asarray(y, dtype=float)
        start = np.max(np.log(y)[..., None] / exponents, axis=-1)

        # Newton in s = log x
        s = _newton_inverse(
            lambda s: np.log(np.exp((gamma1 - 1) * s) + np.exp((gamma2 - 1) * s)),
            lambda s: (
                ((gamma1 - 1) * np.exp((gamma1 - 1) * s) + (gamma2 - 1) * np.exp((gamma2 - 1) * s))
                / (np.exp((gamma1 - 1) * s) + np.exp((gamma2 - 1) * s))
            ),
            start,
            y,
        )
        return np.exp(s)

    return _validate(UtilityModel(
        domain=Domain.HALF_LINE,
        u0=lambda x: x ** gamma1 / gamma1 + x ** gamma2 / gamma2,
        u1=marginal,
        u2=lambda x: (gamma1 - 1) * x ** (gamma1 - 2) + (gamma2 - 1) * x ** (gamma2 - 2),
        u3=lambda x: (
            (gamma1 - 1) * (gamma1 - 2) * x ** (gamma1 - 3)
            + (gamma2 - 1) * (gamma2 - 2) * x ** (gamma2 - 3)
        ),
        inverse_marginal=inverse,
        family=Family.MIXTURE_POWER,
        params={'gamma1': gamma1, 'gamma2': gamma2},
    ))


def custom(
    *,
    domain: Domain,
    u0: Fn,
    u1: Fn,
    u2: Fn,
    u3: Fn,
    inverse_marginal: Fn,
    params: Optional[Mapping[str, float]] = None,
) -> UtilityModel:
    """
    User supplied utility, all derivatives and the inverse marginal must be given explicitly
    """
    return _validate(UtilityModel(
        domain=domain,
        u0=u0,
        u1=u1,
        u2=u2,
        u3=u3,
        inverse_marginal=inverse_marginal,
        family=Family.CUSTOM,
        params=dict(params or {}),
    ))


def _check_domain(u: UtilityModel, x: ArrayLike) -> np.ndarray:
    x = np.asarray(x, dtype=float)

    if not np.all(np.isfinite(x)):
        raise DomainError('Utility argument is not finite')

    if u.domain is Domain.HALF_LINE and np.any(x <= 0):
        raise DomainError(f'Utility argument should be positive, got min {x.min()!r}')

    if u.upper is not None and np.any(x >= u.upper):
        raise DomainError(f'Utility argument should be below {u.upper!r}, got max {x.max()!r}')

    return x


def _require_domain(u: UtilityModel, domain: Domain, operation: str):
    if u.domain is not domain:
        raise DomainError(
            f'{operation} is defined for {domain.value} utilities, got {u.domain.value}'
        )


def _scalar_or_array(value: np.ndarray) -> ArrayLike:
    return float(value) if value.ndim == 0 else value


def phi1(u: UtilityModel, x: ArrayLike) -> ArrayLike:
    """
    U'/U'', always negative
    """
    x = _check_domain(u, x)
    return _scalar_or_array(u.u1(x) / u.u2(x))


def phi2_realline(u: UtilityModel, x: ArrayLike) -> ArrayLike:
    """
    U''' (U')^2 / (U'')^3
    """
    _require_domain(u, Domain.REAL_LINE, 'phi2_realline')
    x = _check_domain(u, x)
    return _scalar_or_array(u.u3(x) * u.u1(x) ** 2 / u.u2(x) ** 3)


def phi2_halfline(u: UtilityModel, x: ArrayLike) -> ArrayLike:
    """
    1 - U''' U' / (2 (U'')^2)
    """
    _require_domain(u, Domain.HALF_LINE, 'phi2_halfline')
    x = _check_domain(u, x)
    return _scalar_or_array(1 - 0.5 * u.u3(x) * u.u1(x) / u.u2(x) ** 2)


def phi2(u: UtilityModel, x: ArrayLike) -> ArrayLike:
    if u.domain is Domain.HALF_LINE:
        return phi2_halfline(u, x)

    return phi2_realline(u, x)


def phi3(u: UtilityModel, x: ArrayLike) -> ArrayLike:
    x = _check_domain(u, x)
    return _scalar_or_array(u.u3(x) / u.u2(x))


def risk_tolerance(u: UtilityModel, x: ArrayLike) -> ArrayLike:
    return -phi1(u, x)


def relative_risk_tolerance(u: UtilityModel, x: ArrayLike) -> ArrayLike:
    x = np.asarray(x, dtype=float)

    if np.any(x <= 0):
        raise DomainError('Relative risk tolerance requires a positive argument')

    return _scalar_or_array(-np.asarray(phi1(u, x)) / x)


def absolute_risk_aversion(u: UtilityModel, x: ArrayLike) -> ArrayLike:
    return _scalar_or_array(1 / np.asarray(risk_tolerance(u, x)))


def relative_risk_aversion(u: UtilityModel, x: ArrayLike) -> ArrayLike:
    return _scalar_or_array(1 / np.asarray(relative_risk_tolerance(u, x)))


def hara_kappa(u: UtilityModel) -> Optional[float]:
    """
    Returns 1/2 - c/2 when the risk tolerance -U'/U'' is affine with slope c on the validation grid
    """
    x = validation_grid(u)
    u1, u2, u3 = u.u1(x), u.u2(x), u.u3(x)

    slope = -1 + u1 * u3 / u2 ** 2
    c = float(np.mean(slope))

    if np.max(np.abs(slope - c)) > HARA_RTOL * max(1.0, abs(c)):
        return None

    return 0.5 - 0.5 * c


def convex_conjugate(u: UtilityModel, y: ArrayLike) -> ArrayLike:
    """
    V(y) = sup_x U(x) - x y, attained at x = I(y)

    :raises:
        DomainError: when y <= 0 or the utility is not defined on the half line
    """
    _require_domain(u, Domain.HALF_LINE, 'convex_conjugate')
    y = np.asarray(y, dtype=float)

    if np.any(~(y > 0)):
        raise DomainError(f'Convex conjugate requires y > 0, got min {y.min()!r}')

    x = u.inverse_marginal(y)
    return _scalar_or_array(u.u0(x) - y * x)


def phi_bounds(u: UtilityModel) -> PhiBounds:
    """
    Grid estimates of sup |phi1| and sup |phi2| inflated by a safety factor
    """
    x = validation_grid(u)

    return PhiBounds(
        phi1=BOUND_SAFETY_FACTOR * float(np.max(np.abs(phi1(u, x)))),
        phi2=BOUND_SAFETY_FACTOR * float(np.max(np.abs(phi2(u, x)))),
    )


def applicability_notes(u: UtilityModel) -> Dict[str, str]:
    """
    Grid-based notes on the structural hypotheses of the converse results, recorded not adjudicated
    """
    x = validation_grid(u)
    tolerance = risk_tolerance(u, x)
    notes = {}

    growth = tolerance[-1] / tolerance[len(tolerance) // 2]
    notes['risk_tolerance'] = (
        f'bounded on grid (max {tolerance.max():.4g})' if growth < 1.5
        else f'grows with wealth (max {tolerance.max():.4g} on grid), bounded risk tolerance not established'
    )

    if u.domain is Domain.HALF_LINE:
        relative = relative_risk_tolerance(u, x)
        aversion = 1 / relative
        notes['relative_risk_tolerance'] = f'max {relative.max():.4g} on grid'
        notes['large_wealth_relative_risk_aversion'] = (
            f'{aversion[-1]:.4g} at x={x[-1]:g}, drift over last decade {abs(aversion[-1] - aversion[-11]):.2g}'
        )

    kappa = hara_kappa(u)
    notes['hara'] = 'not HARA' if kappa is None else f'HARA with kappa={kappa:.6g}'

    return notes
