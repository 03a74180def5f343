import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Optional, Sequence, Union

import numpy as np
import pandas as pd

from fbsdex.constants import MAX_SEED, MIN_SEED, PATH_BLOCK_SIZE, STREAM_LAYOUT
from fbsdex.exceptions import AllocationError, DimensionError, DomainError, IntegrationError
from fbsdex.market import MarketModel

__all__ = [
    'TimeGrid',
    'PathBundle',
    'StatePaths',
    'sample_brownian',
    'stochastic_exponential',
    'euler_sde',
    'wealth_amount',
    'wealth_proportion',
]

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class TimeGrid:
    n_steps: int
    horizon: float

    def __post_init__(self):
        if self.n_steps < 1:
            raise DomainError(f'Time grid needs at least one step, got {self.n_steps}')

        if not self.horizon > 0:
            raise DomainError(f'Time grid horizon should be positive, got {self.horizon!r}')

    @property
    def dt(self) -> float:
        return self.horizon / self.n_steps

    @property
    def times(self) -> np.ndarray:
        return self.horizon * np.arange(self.n_steps + 1) / self.n_steps


@dataclass(frozen=True, eq=False)
class PathBundle:
    """
    Brownian increments (M, N, d) and levels (M, N + 1, d) with levels[:, 0] == 0
    """
    grid: TimeGrid
    increments: np.ndarray
    levels: np.ndarray
    seed: int
    layout: str = STREAM_LAYOUT

    @property
    def n_paths(self) -> int:
        return self.levels.shape[0]

    @property
    def dim(self) -> int:
        return self.levels.shape[2]

    def restrict(self, components: Sequence[int]) -> 'PathBundle':
        """
        Same paths seen through a subset of the Brownian components
        """
        components = list(components)

        return PathBundle(
            grid=self.grid,
            increments=self.increments[:, :, components],
            levels=self.levels[:, :, components],
            seed=self.seed,
            layout=f'{self.layout}[{",".join(map(str, components))}]',
        )


@dataclass(frozen=True, eq=False)
class StatePaths:
    """
    Grid aligned values of a named process, shape (M, N + 1) or (M, N + 1, k)
    """
    name: str
    grid: TimeGrid
    values: np.ndarray

    @property
    def n_paths(self) -> int:
        return self.values.shape[0]

    @property
    def components(self) -> int:
        return 1 if self.values.ndim == 2 else self.values.shape[2]

    @property
    def terminal(self) -> np.ndarray:
        return self.values[:, -1]

    def component(self, i: int) -> 'StatePaths':
        if self.values.ndim == 2:
            if i != 0:
                raise DimensionError(f'Process {self.name} is scalar, got component {i}')
            return self

        return StatePaths(f'{self.name}[{i}]', self.grid, self.values[:, :, i])

    def as_matrix(self) -> np.ndarray:
        """
        Values with an explicit component axis, shape (M, N + 1, k)
        """
        return self.values if self.values.ndim == 3 else self.values[:, :, None]

    def to_frame(self, paths: Optional[Sequence[int]] = None) -> pd.DataFrame:
        """
        Long format table with columns path, node, time, value (value_1.. for vector processes)
        """
        values = self.as_matrix()
        selected = np.arange(self.n_paths) if paths is None else np.asarray(paths, dtype=int)
        n_nodes = self.grid.n_steps + 1

        frame = pd.DataFrame({
            'path': np.repeat(selected, n_nodes),
            'node': np.tile(np.arange(n_nodes), selected.size),
            'time': np.tile(self.grid.times, selected.size),
        })

        block = values[selected].reshape(selected.size * n_nodes, -1)

        if self.values.ndim == 2:
            frame['value'] = block[:, 0]
        else:
            for i in range(block.shape[1]):
                frame[f'value_{i + 1}'] = block[:, i]

        return frame

    def summary_frame(self) -> pd.DataFrame:
        """
        Cross-path mean and standard deviation per node and component
        """
        values = self.as_matrix()
        frames = []

        for i in range(values.shape[2]):
            frames.append(pd.DataFrame({
                'process': self.name,
                'component': i + 1,
                'node': np.arange(self.grid.n_steps + 1),
                'time': self.grid.times,
                'mean': values[:, :, i].mean(axis=0),
                'std': values[:, :, i].std(axis=0),
            }))

        return pd.concat(frames, ignore_index=True)


def _block_generator(seed: int, block: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=seed | (block << 64)))


def sample_brownian(
    grid: TimeGrid,
    n_paths: int,
    dim: int,
    seed: int,
    *,
    threads: Optional[int] = None,
) -> PathBundle:
    """
    Paths are generated in fixed blocks, each keyed by (seed, block index),
    so the bundle does not depend on the number of threads

    :raises:
        DomainError: for n_paths < 2, dim < 1 or a seed outside 64 bits
        AllocationError: when the arrays cannot be allocated
    """
    if n_paths < 2:
        raise DomainError(f'At least two paths are required, got {n_paths}')

    if dim < 1:
        raise DomainError(f'Brownian dimension should be positive, got {dim}')

    if not MIN_SEED <= seed <= MAX_SEED:
        raise DomainError(f'Seed should be a 64-bit unsigned integer, got {seed!r}')

    n_steps = grid.n_steps

    try:
        levels = np.zeros((n_paths, n_steps + 1, dim))
    except MemoryError as e:
        raise AllocationError(
            f'Cannot allocate Brownian levels of shape ({n_paths}, {n_steps + 1}, {dim}), '
            f'{8 * n_paths * (n_steps + 1) * dim:_} bytes'
        ) from e

    scale = math.sqrt(grid.dt)
    n_blocks = -(-n_paths // PATH_BLOCK_SIZE)

    def fill(block: int):
        start = block * PATH_BLOCK_SIZE
        stop = min(n_paths, start + PATH_BLOCK_SIZE)
        normals = _block_generator(seed, block).standard_normal((stop - start, n_steps, dim))
        np.cumsum(normals * scale, axis=1, out=levels[start:stop, 1:])

    with ThreadPoolExecutor(max_workers=threads) as executor:
        list(executor.map(fill, range(n_blocks)))

    # increments are taken from the levels so W[k+1] - W[k] == dW[k] holds exactly
    increments = np.diff(levels, axis=1)

    logger.debug('Sampled %d paths, %d steps, dim %d, seed %d', n_paths, n_steps, dim, seed)

    return PathBundle(grid=grid, increments=increments, levels=levels, seed=seed)


TimeVector = Union[Callable[[float], Sequence[float]], np.ndarray]


def _integrand_on_grid(integrand: TimeVector, grid: TimeGrid, dim: int) -> np.ndarray:
    """
    Integrand at the left nodes t_0..t_{N-1}, shape (N, dim)
    """
    if callable(integrand):
        values = np.stack([
            np.broadcast_to(np.asarray(integrand(float(t)), dtype=float), (dim,))
            for t in grid.times[:-1]
        ])
    else:
        values = np.asarray(integrand, dtype=float)

    if values.shape != (grid.n_steps, dim):
        raise DimensionError(f'Expected integrand of shape {(grid.n_steps, dim)}, got {values.shape}')

    return values


def stochastic_exponential(
    bundle: PathBundle,
    integrand: TimeVector,
    component_mask: Optional[Sequence[bool]] = None,
    *,
    name: str = 'E',
) -> StatePaths:
    """
    exp(sum_{j<k} a(t_j) dW_j - 1/2 sum_{j<k} |a(t_j)|^2 dt) over the masked components
    """
    a = _integrand_on_grid(integrand, bundle.grid, bundle.dim)

    if component_mask is not None:
        mask = np.asarray(component_mask, dtype=bool)

        if mask.shape != (bundle.dim,):
            raise DimensionError(f'Component mask should have length {bundle.dim}, got {mask.shape}')

        a = a * mask

    log_increments = (
        np.einsum('mnd,nd->mn', bundle.increments, a)
        - 0.5 * np.sum(a ** 2, axis=1) * bundle.grid.dt
    )

    exponent = np.zeros((bundle.n_paths, bundle.grid.n_steps + 1))
    np.cumsum(log_increments, axis=1, out=exponent[:, 1:])

    return StatePaths(name, bundle.grid, np.exp(exponent))


def _raise_non_finite(values: np.ndarray, step: int, what: str):
    bad = ~np.isfinite(values)

    if np.any(bad):
        raise IntegrationError(f'Non-finite {what}', path=int(np.argmax(bad)), step=step)


def euler_sde(
    bundle: PathBundle,
    drift: Callable[[float, np.ndarray], np.ndarray],
    diffusion: Callable[[float, np.ndarray], np.ndarray],
    x0: Union[float, np.ndarray],
    *,
    name: str = 'X',
) -> StatePaths:
    """
    x_{k+1} = x_k + drift(t_k, x_k) dt + diffusion(t_k, x_k) . dW_k

    drift returns shape (M,), diffusion (M, d) or (d,)

    :raises:
        IntegrationError: on the first non-finite state
    """
    grid = bundle.grid
    values = np.empty((bundle.n_paths, grid.n_steps + 1))
    values[:, 0] = x0

    for k, t in enumerate(grid.times[:-1]):
        x = values[:, k]
        sigma = np.broadcast_to(np.asarray(diffusion(t, x), dtype=float), (bundle.n_paths, bundle.dim))

        with np.errstate(all='ignore'):
            values[:, k + 1] = (
                x
                + np.asarray(drift(t, x), dtype=float) * grid.dt
                + np.sum(sigma * bundle.increments[:, k], axis=1)
            )

        _raise_non_finite(values[:, k + 1], k, f'state of {name}')

    return StatePaths(name, grid, values)


def _strategy_matrix(pi: Union[StatePaths, np.ndarray], bundle: PathBundle, d1: int) -> np.ndarray:
    values = pi.values if isinstance(pi, StatePaths) else np.asarray(pi, dtype=float)

    if values.ndim == 2:
        values = values[:, :, None]

    expected = (bundle.n_paths, bundle.grid.n_steps + 1)

    if values.shape[:2] != expected and values.shape[:2] != (bundle.n_paths, bundle.grid.n_steps):
        raise DimensionError(f'Strategy should have shape {expected} + (d1,), got {values.shape}')

    if values.shape[2] != d1:
        raise DimensionError(f'Strategy should have {d1} components, got {values.shape[2]}')

    return values[:, :bundle.grid.n_steps]


def wealth_amount(
    bundle: PathBundle,
    market: MarketModel,
    pi: Union[StatePaths, np.ndarray],
    x0: float,
    *,
    name: str = 'X',
) -> StatePaths:
    """
    X_{k+1} = X_k + sum_i pi_i(t_k) (dW^i_k + theta^i(t_k) dt), pi in money amounts
    """
    grid = bundle.grid
    amounts = _strategy_matrix(pi, bundle, market.d1)
    theta_h = market.hedgeable_path(grid.times[:-1])

    gains = np.sum(
        amounts * (bundle.increments[:, :, :market.d1] + theta_h[None] * grid.dt),
        axis=2,
    )

    values = np.empty((bundle.n_paths, grid.n_steps + 1))
    values[:, 0] = x0
    np.cumsum(gains, axis=1, out=values[:, 1:])
    values[:, 1:] += x0

    for k in range(grid.n_steps):
        _raise_non_finite(values[:, k + 1], k, 'wealth')

    return StatePaths(name, grid, values)


def wealth_proportion(
    bundle: PathBundle,
    market: MarketModel,
    pi: Union[StatePaths, np.ndarray],
    x0: float,
    *,
    name: str = 'X',
) -> StatePaths:
    """
    X_{k+1} = X_k exp(pi . dW^H - |pi|^2 dt / 2 + pi . theta^H dt), pi as proportions of wealth
    """
    if not x0 > 0:
        raise DomainError(f'Proportional wealth requires x0 > 0, got {x0!r}')

    grid = bundle.grid
    proportions = _strategy_matrix(pi, bundle, market.d1)
    theta_h = market.hedgeable_path(grid.times[:-1])

    log_increments = (
        np.sum(proportions * bundle.increments[:, :, :market.d1], axis=2)
        - 0.5 * np.sum(proportions ** 2, axis=2) * grid.dt
        + np.sum(proportions * theta_h[None], axis=2) * grid.dt
    )

    exponent = np.zeros((bundle.n_paths, grid.n_steps + 1))
    np.cumsum(log_increments, axis=1, out=exponent[:, 1:])

    with np.errstate(all='ignore'):
        values = x0 * np.exp(exponent)

    for k in range(grid.n_steps):
        _raise_non_finite(values[:, k + 1], k, 'wealth')

    return StatePaths(name, grid, values)
