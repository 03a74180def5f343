import numpy as np
import pytest

from fbsdex import utility
from fbsdex.bsde import (
    BasisKind, Driver, RegressionBasis, SteppingMode, ZDependence, driver_halfline, driver_hara,
    driver_incomplete_realline, driver_lipschitz_realline, solve_bsde,
)
from fbsdex.exceptions import ConfigValidationError, DomainError, IntegrationError
from fbsdex.market import build_market
from fbsdex.paths import StatePaths, TimeGrid, sample_brownian


def constant_driver(value, z_dependence=ZDependence.LINEAR):
    return Driver(fn=lambda t, state, y, z: np.full_like(y, value), z_dependence=z_dependence, name='constant')


@pytest.fixture(scope='module')
def bundle():
    return sample_brownian(TimeGrid(16, 1.0), 5000, 1, seed=1)


class TestRegressionBasis:
    @pytest.mark.parametrize('kwargs', [
        {'degree': -1},
        {'degree': 6},
        {'bins': 0},
    ])
    def test_raises_on_bad_parameters(self, kwargs):
        with pytest.raises(ConfigValidationError):
            RegressionBasis(**kwargs)

    def test_drops_constant_and_collinear_coordinates(self):
        w = np.random.default_rng(0).standard_normal(200)
        coords = np.column_stack([w, 2 * w + 1, np.full(200, 3.0)])

        design = RegressionBasis(degree=1).design(coords)

        assert design.shape == (200, 2)
        assert np.all(design[:, 0] == 1.0)

    def test_polynomial_column_count(self):
        coords = np.random.default_rng(0).standard_normal((300, 2))

        # 1 + 2 + 3 + 4 monomials up to degree 3 in two variables
        assert RegressionBasis(degree=3).design(coords).shape == (300, 10)

    def test_piecewise_linear_column_count(self):
        coords = np.random.default_rng(0).standard_normal((300, 1))

        design = RegressionBasis(kind=BasisKind.PIECEWISE_LINEAR, bins=4).design(coords)

        assert design.shape == (300, 5)

    def test_all_constant_coordinates_give_intercept_only(self):
        assert RegressionBasis().design(np.zeros((50, 3))).shape == (50, 1)

    def test_with_projection(self):
        basis = RegressionBasis().with_projection('W0', 'X')

        assert basis.projection == ('W0', 'X')
        assert basis.degree == RegressionBasis().degree


class TestSolveBsde:
    def test_constant_driver_is_exact(self, bundle):
        solution = solve_bsde(bundle, {}, np.zeros(bundle.n_paths), constant_driver(-0.3))

        assert solution.y0 == pytest.approx(0.3, abs=1e-12)
        assert np.allclose(solution.Y.values[:, 8], 0.15)
        assert np.allclose(solution.Z.values, 0.0)

    def test_terminal_brownian_level(self, bundle):
        terminal = bundle.levels[:, -1, 0]

        solution = solve_bsde(bundle, {}, terminal, constant_driver(0.0))

        assert abs(solution.y0) < 5 / np.sqrt(bundle.n_paths)
        assert np.mean(solution.Z.values[:, :-1]) == pytest.approx(1.0, abs=0.05)
        # degree three regression on W reproduces the martingale W_k
        assert np.sqrt(np.mean((solution.Y.values[:, 8] - bundle.levels[:, 8, 0]) ** 2)) < 0.05

    def test_regression_steps(self, bundle):
        solution = solve_bsde(bundle, {}, bundle.levels[:, -1, 0], constant_driver(0.0))

        assert [x.node for x in solution.steps] == list(range(16))
        assert solution.steps[0].n_basis == 1
        assert solution.steps[5].n_basis == 4
        assert set(solution.steps[3].to_dict()) == {
            'node', 'residual_rms', 'condition', 'standard_error', 'z_standard_error', 'n_basis',
        }

    def test_implicit_step_on_linear_driver(self, bundle):
        driver = Driver(fn=lambda t, state, y, z: y, z_dependence=ZDependence.LINEAR, name='linear')

        solution = solve_bsde(bundle, {}, np.ones(bundle.n_paths), driver, mode=SteppingMode.IMPLICIT_NEWTON)

        assert solution.y0 == pytest.approx((1 + bundle.grid.dt) ** -16, rel=1e-10)

    def test_explicit_step_on_linear_driver(self, bundle):
        driver = Driver(fn=lambda t, state, y, z: y, z_dependence=ZDependence.LINEAR, name='linear')

        solution = solve_bsde(bundle, {}, np.ones(bundle.n_paths), driver)

        assert solution.y0 == pytest.approx((1 - bundle.grid.dt) ** 16, rel=1e-10)

    def test_state_process_projection(self, bundle):
        state = {'S': StatePaths('S', bundle.grid, np.exp(bundle.levels[:, :, 0]))}
        basis = RegressionBasis(degree=2).with_projection('S')

        solution = solve_bsde(bundle, state, state['S'].terminal, constant_driver(0.0), basis)

        # S is a submartingale with E[S_T] = exp(T / 2)
        assert solution.y0 == pytest.approx(np.exp(0.5), rel=0.1)

    def test_y_bound_clips(self, bundle):
        solution = solve_bsde(bundle, {}, np.zeros(bundle.n_paths), constant_driver(-10.0), y_bound=1.0)

        assert np.all(np.abs(solution.Y.values[:, :-1]) <= 1.0)
        assert solution.y0 == 1.0

    def test_raises_on_terminal_shape(self, bundle):
        with pytest.raises(DomainError):
            solve_bsde(bundle, {}, np.zeros(3), constant_driver(0.0))

    def test_raises_on_non_finite_terminal(self, bundle):
        terminal = np.zeros(bundle.n_paths)
        terminal[4] = np.nan

        with pytest.raises(DomainError):
            solve_bsde(bundle, {}, terminal, constant_driver(0.0))

    def test_raises_on_missing_state(self, bundle):
        driver = Driver(fn=lambda t, state, y, z: state['X'], z_dependence=ZDependence.LINEAR, requires=('X',))

        with pytest.raises(DomainError):
            solve_bsde(bundle, {}, np.zeros(bundle.n_paths), driver)

    def test_quadratic_driver_requires_implicit_mode(self, bundle):
        with pytest.raises(ConfigValidationError):
            solve_bsde(bundle, {}, np.zeros(bundle.n_paths), constant_driver(0.0, ZDependence.QUADRATIC))

    def test_raises_on_non_finite_driver(self, bundle):
        with pytest.raises(IntegrationError) as e:
            solve_bsde(bundle, {}, np.zeros(bundle.n_paths), constant_driver(np.inf))

        assert e.value.step == 15


class TestDrivers:
    def test_hara_driver_with_deterministic_theta(self, bundle):
        market = build_market(1, 0, 0.2, 1.0)

        solution = solve_bsde(
            bundle, {}, np.zeros(bundle.n_paths), driver_hara(-0.5, market), mode=SteppingMode.IMPLICIT_NEWTON,
        )

        assert solution.y0 == pytest.approx(0.02, abs=1e-12)

    def test_lipschitz_driver_exponential(self):
        market = build_market(1, 0, 0.2, 1.0)
        driver = driver_lipschitz_realline(utility.exponential(1.0), market)
        p = np.array([0.0, 1.0])

        # -theta^2 phi2 / 2 + theta^2 phi1 + z theta with phi1 = phi2 = -1
        value = driver(0.0, {'P': p}, np.zeros(2), np.array([[0.5], [0.0]]))

        assert value.tolist() == pytest.approx([0.02 - 0.04 + 0.1, -0.02])

    def test_halfline_driver_log(self):
        market = build_market(1, 1, [0.2, 0.1], 1.0)
        driver = driver_halfline(utility.log(), market)
        z = np.array([[0.3, 0.4]])

        assert driver(0.0, {'X': np.array([2.0])}, np.zeros(1), z)[0] == pytest.approx(-0.125)

    def test_incomplete_driver_reduces_to_complete(self):
        market = build_market(1, 0, 0.2, 1.0)
        u = utility.exponential(2.0)
        x, y = np.array([0.5, 1.5]), np.array([0.1, -0.2])
        z = np.array([[0.3], [-0.1]])

        incomplete = driver_incomplete_realline(u, market)(0.0, {'X': x}, y, z)
        complete = driver_lipschitz_realline(u, market)(0.0, {'P': x + y}, y, z)

        assert np.allclose(incomplete, complete)

    @pytest.mark.parametrize('factory, u', [
        (driver_lipschitz_realline, utility.log()),
        (driver_halfline, utility.exponential()),
        (driver_incomplete_realline, utility.power(0.5)),
    ])
    def test_driver_domain(self, factory, u):
        with pytest.raises(DomainError):
            factory(u, build_market(1, 0, 0.2, 1.0))

    def test_with_state_map(self):
        driver = Driver(fn=lambda t, state, y, z: state['P'], z_dependence=ZDependence.LINEAR, requires=('P',))
        mapped = driver.with_state_map(lambda t, state, y: {'P': state['X'] + y}, requires=('X',))

        assert mapped.requires == ('X',)
        assert mapped(0.0, {'X': np.array([1.0])}, np.array([2.0]), np.zeros((1, 1))).tolist() == [3.0]
