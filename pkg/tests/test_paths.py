import numpy as np
import pytest

from fbsdex.constants import PATH_BLOCK_SIZE
from fbsdex.exceptions import DimensionError, DomainError, IntegrationError
from fbsdex.market import build_market
from fbsdex.paths import (
    StatePaths, TimeGrid, euler_sde, sample_brownian, stochastic_exponential, wealth_amount, wealth_proportion,
)


@pytest.fixture
def bundle():
    return sample_brownian(TimeGrid(16, 1.0), 4000, 2, seed=7)


@pytest.mark.parametrize('n_steps, horizon', [
    (0, 1.0),
    (-1, 1.0),
    (10, 0.0),
    (10, -0.5),
])
def test_time_grid_raises_on_bad_input(n_steps, horizon):
    with pytest.raises(DomainError):
        TimeGrid(n_steps, horizon)


def test_time_grid_nodes():
    grid = TimeGrid(4, 2.0)

    assert grid.dt == 0.5
    assert grid.times.tolist() == [0.0, 0.5, 1.0, 1.5, 2.0]


class TestSampleBrownian:
    def test_shapes_and_start(self, bundle):
        assert bundle.levels.shape == (4000, 17, 2)
        assert bundle.increments.shape == (4000, 16, 2)
        assert np.all(bundle.levels[:, 0] == 0)

    def test_increments_match_levels_exactly(self, bundle):
        assert np.array_equal(bundle.levels[:, 1:] - bundle.levels[:, :-1], bundle.increments)

    def test_moments(self, bundle):
        terminal = bundle.levels[:, -1]

        # 5 standard errors
        assert np.all(np.abs(terminal.mean(axis=0)) < 5 / np.sqrt(4000))
        assert np.all(np.abs(terminal.var(axis=0) - 1.0) < 5 * np.sqrt(2 / 4000))

    def test_same_seed_same_paths(self):
        grid = TimeGrid(8, 1.0)

        first = sample_brownian(grid, 100, 1, seed=3)
        second = sample_brownian(grid, 100, 1, seed=3)

        assert np.array_equal(first.levels, second.levels)

    def test_different_seed_different_paths(self):
        grid = TimeGrid(8, 1.0)

        first = sample_brownian(grid, 100, 1, seed=3)
        second = sample_brownian(grid, 100, 1, seed=4)

        assert not np.array_equal(first.levels, second.levels)

    @pytest.mark.parametrize('threads', [
        1,
        2,
        5,
    ])
    def test_independent_of_thread_count(self, threads):
        grid = TimeGrid(4, 1.0)
        n_paths = 2 * PATH_BLOCK_SIZE + 17

        reference = sample_brownian(grid, n_paths, 2, seed=11, threads=1)
        bundle = sample_brownian(grid, n_paths, 2, seed=11, threads=threads)

        assert np.array_equal(reference.levels, bundle.levels)

    def test_prefix_stable_when_adding_paths(self):
        grid = TimeGrid(4, 1.0)

        small = sample_brownian(grid, PATH_BLOCK_SIZE, 1, seed=5)
        large = sample_brownian(grid, 3 * PATH_BLOCK_SIZE, 1, seed=5)

        assert np.array_equal(small.levels, large.levels[:PATH_BLOCK_SIZE])

    @pytest.mark.parametrize('n_paths, dim, seed', [
        (1, 1, 0),
        (10, 0, 0),
        (10, 1, -1),
        (10, 1, 2 ** 64),
    ])
    def test_raises_on_bad_input(self, n_paths, dim, seed):
        with pytest.raises(DomainError):
            sample_brownian(TimeGrid(4, 1.0), n_paths, dim, seed)

    def test_restrict_keeps_paths(self, bundle):
        restricted = bundle.restrict([1])

        assert restricted.dim == 1
        assert np.array_equal(restricted.levels[:, :, 0], bundle.levels[:, :, 1])
        assert restricted.layout.endswith('[1]')


class TestStatePaths:
    def test_scalar_frame(self):
        grid = TimeGrid(2, 1.0)
        paths = StatePaths('Y', grid, np.arange(6, dtype=float).reshape(2, 3))

        frame = paths.to_frame([1])

        assert list(frame.columns) == ['path', 'node', 'time', 'value']
        assert frame['value'].tolist() == [3.0, 4.0, 5.0]
        assert frame['time'].tolist() == [0.0, 0.5, 1.0]

    def test_vector_frame(self):
        grid = TimeGrid(1, 1.0)
        paths = StatePaths('Z', grid, np.ones((3, 2, 2)))

        frame = paths.to_frame()

        assert list(frame.columns) == ['path', 'node', 'time', 'value_1', 'value_2']
        assert len(frame) == 6

    def test_summary_frame(self):
        grid = TimeGrid(1, 1.0)
        paths = StatePaths('X', grid, np.array([[1.0, 2.0], [3.0, 4.0]]))

        summary = paths.summary_frame()

        assert summary['mean'].tolist() == [2.0, 3.0]
        assert summary['std'].tolist() == [1.0, 1.0]
        assert set(summary['process']) == {'X'}

    def test_component(self):
        grid = TimeGrid(1, 1.0)
        paths = StatePaths('Z', grid, np.arange(8, dtype=float).reshape(2, 2, 2))

        assert paths.component(1).values.tolist() == [[1.0, 3.0], [5.0, 7.0]]
        assert paths.as_matrix().shape == (2, 2, 2)

    def test_scalar_component_raises(self):
        paths = StatePaths('Y', TimeGrid(1, 1.0), np.zeros((2, 2)))

        assert paths.component(0) is paths

        with pytest.raises(DimensionError):
            paths.component(1)


def test_stochastic_exponential_is_unit_mean_martingale(bundle):
    exponential = stochastic_exponential(bundle, lambda t: [-0.2, 0.0])

    assert np.all(exponential.values[:, 0] == 1.0)
    assert abs(exponential.terminal.mean() - 1.0) < 5 * exponential.terminal.std() / np.sqrt(bundle.n_paths)


def test_stochastic_exponential_mask(bundle):
    masked = stochastic_exponential(bundle, np.full((16, 2), 0.3), [True, False])
    expected = np.exp(0.3 * bundle.levels[:, :, 0] - 0.5 * 0.09 * bundle.grid.times)

    assert np.allclose(masked.values, expected)


def test_stochastic_exponential_raises_on_mask_length(bundle):
    with pytest.raises(DimensionError):
        stochastic_exponential(bundle, np.zeros((16, 2)), [True])


def test_euler_matches_arithmetic_brownian_motion(bundle):
    paths = euler_sde(bundle, lambda t, x: np.full_like(x, 0.1), lambda t, x: np.array([1.0, 0.0]), 2.0)
    expected = 2.0 + 0.1 * bundle.grid.times + bundle.levels[:, :, 0]

    assert np.allclose(paths.values, expected)


def test_euler_raises_on_non_finite_state(bundle):
    with pytest.raises(IntegrationError) as e:
        euler_sde(bundle, lambda t, x: x * 1e300, lambda t, x: np.zeros(2), 1e10)

    assert e.value.step == 0


class TestWealth:
    def test_amount_closed_form(self, bundle):
        market = build_market(1, 1, [0.2, 0.1], 1.0)

        wealth = wealth_amount(bundle, market, np.full((bundle.n_paths, 17, 1), 0.5), 1.0)
        expected = 1.0 + 0.5 * (bundle.levels[:, :, 0] + 0.2 * bundle.grid.times)

        assert np.allclose(wealth.values, expected)

    def test_proportion_closed_form(self, bundle):
        market = build_market(1, 1, [0.2, 0.1], 1.0)

        wealth = wealth_proportion(bundle, market, np.full((bundle.n_paths, 16, 1), 0.4), 2.0)
        expected = 2.0 * np.exp(0.4 * bundle.levels[:, :, 0] + (0.4 * 0.2 - 0.08) * bundle.grid.times)

        assert np.allclose(wealth.values, expected)

    def test_zero_strategy_keeps_wealth(self, bundle):
        market = build_market(1, 1, [0.2, 0.1], 1.0)

        wealth = wealth_amount(bundle, market, np.zeros((bundle.n_paths, 17, 1)), 3.0)

        assert np.all(wealth.values == 3.0)

    def test_proportion_raises_on_nonpositive_wealth(self, bundle):
        market = build_market(1, 1, [0.2, 0.1], 1.0)

        with pytest.raises(DomainError):
            wealth_proportion(bundle, market, np.zeros((bundle.n_paths, 17, 1)), 0.0)

    def test_raises_on_strategy_width(self, bundle):
        market = build_market(1, 1, [0.2, 0.1], 1.0)

        with pytest.raises(DimensionError):
            wealth_amount(bundle, market, np.zeros((bundle.n_paths, 17, 2)), 1.0)
