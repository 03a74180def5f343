import logging
from dataclasses import dataclass
from typing import Callable, Sequence, Tuple, Union

import numpy as np

from fbsdex.constants import THETA_GRID_FACTOR, THETA_SAFETY_FACTOR
from fbsdex.exceptions import ConstructionError, DimensionError, DomainError

__all__ = [
    'MarketModel',
    'build_market',
    'theta_split',
    'piecewise_linear_theta',
]

logger = logging.getLogger(__name__)

ThetaLike = Union[float, Sequence[float], Callable[[float], Union[float, Sequence[float]]]]


@dataclass(frozen=True)
class MarketModel:
    """
    Normalized market dS^i = dW^i + theta^i dt with zero interest rate.

    Components 0..d1-1 are tradable (hedgeable), d1..d-1 are orthogonal.
    """
    d1: int
    d2: int
    theta: Callable[[float], np.ndarray]
    theta_bound: float
    horizon: float

    @property
    def d(self) -> int:
        return self.d1 + self.d2

    def theta_at(self, t: float) -> np.ndarray:
        return _evaluate_theta(self.theta, t, self.d)

    def theta_path(self, times: np.ndarray) -> np.ndarray:
        """
        theta evaluated on a time grid, shape (len(times), d)
        """
        return np.stack([self.theta_at(float(t)) for t in times])

    def hedgeable_path(self, times: np.ndarray) -> np.ndarray:
        return self.theta_path(times)[:, :self.d1]


def _evaluate_theta(theta: Callable, t: float, d: int) -> np.ndarray:
    value = np.atleast_1d(np.asarray(theta(t), dtype=float))

    if value.shape == (1,) and d > 1:
        raise DimensionError(
            f'theta returned a scalar for a market with {d} components'
        )

    if value.shape != (d,):
        raise DimensionError(
            f'theta should return a vector of length {d}, got shape {value.shape}'
        )

    return value


def _as_callable(theta: ThetaLike) -> Callable[[float], np.ndarray]:
    if callable(theta):
        return theta

    constant = np.atleast_1d(np.asarray(theta, dtype=float))
    constant.setflags(write=False)

    return lambda t: constant


def build_market(
    d1: int,
    d2: int,
    theta: ThetaLike,
    horizon: float,
    *,
    n_steps: int = 100,
) -> MarketModel:
    """
    Validates dimensions and certifies a uniform bound of |theta| on a 10*N point grid

    :raises:
        DimensionError: when d1 < 1, d2 < 0 or theta has the wrong length
        ConstructionError: when theta is not finite on [0, T] or T <= 0
    """
    if d1 < 1:
        raise DimensionError(f'At least one tradable component is required, got d1={d1}')

    if d2 < 0:
        raise DimensionError(f'Number of orthogonal components should be nonnegative, got d2={d2}')

    if not horizon > 0:
        raise ConstructionError(f'Horizon should be positive, got {horizon!r}')

    fn = _as_callable(theta)
    d = d1 + d2
    grid = np.linspace(0.0, horizon, THETA_GRID_FACTOR * max(n_steps, 1) + 1)

    norms = np.empty(grid.size)

    for i, t in enumerate(grid):
        value = _evaluate_theta(fn, float(t), d)

        if not np.all(np.isfinite(value)):
            raise ConstructionError(f'theta is not finite at t={t!r}: {value!r}')

        norms[i] = np.linalg.norm(value)

    theta_bound = THETA_SAFETY_FACTOR * float(norms.max())

    logger.debug('Built market d1=%d d2=%d T=%g theta_bound=%g', d1, d2, horizon, theta_bound)

    return MarketModel(
        d1=d1,
        d2=d2,
        theta=fn,
        theta_bound=theta_bound,
        horizon=float(horizon),
    )


def theta_split(model: MarketModel, t: float) -> Tuple[np.ndarray, np.ndarray]:
    """
    Returns (theta_H, theta_O), both of length d, zero-padded on the complementary slots

    :raises:
        DomainError: when t is outside [0, T]
    """
    if not 0.0 <= t <= model.horizon:
        raise DomainError(f'Time {t!r} is outside [0, {model.horizon!r}]')

    value = model.theta_at(t)

    theta_h = np.zeros_like(value)
    theta_o = np.zeros_like(value)
    theta_h[:model.d1] = value[:model.d1]
    theta_o[model.d1:] = value[model.d1:]

    return theta_h, theta_o


def piecewise_linear_theta(
    times: Sequence[float],
    values: Sequence[Sequence[float]],
) -> Callable[[float], np.ndarray]:
    """
    Linear interpolation between (time, vector) breakpoints, constant outside the first and last one
    """
    times = np.asarray(times, dtype=float)
    values = np.atleast_2d(np.asarray(values, dtype=float))

    if times.ndim != 1 or times.size < 1 or values.shape[0] != times.size:
        raise DimensionError(
            f'Expected one theta vector per breakpoint, got {times.size} times and {values.shape[0]} vectors'
        )

    if np.any(np.diff(times) <= 0):
        raise ConstructionError('theta breakpoint times should be strictly increasing')

    def theta(t: float) -> np.ndarray:
        return np.array([np.interp(t, times, values[:, i]) for i in range(values.shape[1])])

    return theta
