import numpy as np
import pytest

from fbsdex import utility
from fbsdex.exceptions import ConstructionError, DomainError
from fbsdex.utility import (
    Domain, Family, absolute_risk_aversion, applicability_notes, convex_conjugate, custom, hara_kappa,
    phi1, phi2, phi2_halfline, phi2_realline, phi3, phi_bounds, relative_risk_aversion,
    relative_risk_tolerance, risk_tolerance,
)

ALL_UTILITIES = [
    utility.exponential(1.0),
    utility.exponential(2.5),
    utility.power(0.5),
    utility.power(-1.0),
    utility.log(),
    utility.quadratic(20.0),
    utility.mixture_exp(1.0, 2.0),
    utility.mixture_power(0.3, 0.7),
]


def _points(u):
    if u.domain is Domain.HALF_LINE:
        return np.array([0.01, 0.5, 1.0, 3.0, 8.0])

    return np.array([-3.0, -0.5, 0.0, 1.0, 4.0])


@pytest.mark.parametrize('u', ALL_UTILITIES, ids=lambda u: u.family.value)
def test_inverse_marginal_inverts_marginal(u):
    x = _points(u)

    assert np.allclose(u.inverse_marginal(u.u1(x)), x, rtol=1e-10, atol=1e-10)


@pytest.mark.parametrize('u', ALL_UTILITIES, ids=lambda u: u.family.value)
def test_phi1_is_negative(u):
    assert np.all(np.asarray(phi1(u, _points(u))) < 0)


@pytest.mark.parametrize('u', ALL_UTILITIES, ids=lambda u: u.family.value)
def test_risk_measures_are_reciprocal(u):
    x = _points(u)

    assert np.allclose(np.asarray(absolute_risk_aversion(u, x)) * np.asarray(risk_tolerance(u, x)), 1.0)


@pytest.mark.parametrize('alpha', [
    0.5,
    1.0,
    3.0,
])
def test_exponential_ratios_are_constant(alpha):
    u = utility.exponential(alpha)
    x = _points(u)

    assert np.allclose(phi1(u, x), -1 / alpha)
    assert np.allclose(phi2_realline(u, x), -1 / alpha)
    assert np.allclose(phi3(u, x), -alpha)
    assert np.allclose(absolute_risk_aversion(u, x), alpha)


@pytest.mark.parametrize('gamma', [
    -2.0,
    0.3,
    0.5,
    0.9,
])
def test_power_ratios(gamma):
    u = utility.power(gamma)
    x = _points(u)

    assert np.allclose(phi1(u, x), x / (gamma - 1))
    assert np.allclose(phi2_halfline(u, x), 1 - 0.5 * (gamma - 2) / (gamma - 1))
    assert np.allclose(relative_risk_tolerance(u, x), 1 / (1 - gamma))
    assert np.allclose(relative_risk_aversion(u, x), 1 - gamma)


def test_log_ratios():
    u = utility.log()
    x = _points(u)

    assert np.allclose(phi1(u, x), -x)
    assert np.allclose(phi2(u, x), 0.0)


def test_scalar_in_scalar_out():
    value = phi1(utility.exponential(2.0), 1.0)

    assert isinstance(value, float)
    assert value == pytest.approx(-0.5)


@pytest.mark.parametrize('u, expected', [
    (utility.exponential(1.0), 0.5),
    (utility.exponential(4.0), 0.5),
    (utility.power(0.5), -0.5),
    (utility.power(-1.0), 0.25),
    (utility.log(), 0.0),
    (utility.quadratic(20.0), 1.0),
    (utility.mixture_exp(1.0, 2.0), None),
    (utility.mixture_power(0.3, 0.7), None),
], ids=lambda x: getattr(getattr(x, 'family', None), 'value', str(x)))
def test_hara_kappa(u, expected):
    kappa = hara_kappa(u)

    if expected is None:
        assert kappa is None
    else:
        assert kappa == pytest.approx(expected, abs=1e-8)


def test_mixture_exp_with_equal_rates_is_hara():
    assert hara_kappa(utility.mixture_exp(1.5, 1.5)) == pytest.approx(0.5)


@pytest.mark.parametrize('factory, args', [
    (utility.exponential, (0.0,)),
    (utility.exponential, (-1.0,)),
    (utility.power, (0.0,)),
    (utility.power, (1.0,)),
    (utility.power, (1.5,)),
    (utility.quadratic, (0.0,)),
    (utility.mixture_exp, (1.0, -1.0)),
    (utility.mixture_power, (0.3, 1.0)),
    (utility.mixture_power, (0.0, 0.5)),
])
def test_factories_raise_on_bad_parameters(factory, args):
    with pytest.raises(ConstructionError):
        factory(*args)


class TestCustom:
    def test_accepts_consistent_utility(self):
        u = custom(
            domain=Domain.REAL_LINE,
            u0=lambda x: -np.exp(-x),
            u1=lambda x: np.exp(-x),
            u2=lambda x: -np.exp(-x),
            u3=lambda x: np.exp(-x),
            inverse_marginal=lambda y: -np.log(y),
            params={'alpha': 1.0},
        )

        assert u.family is Family.CUSTOM
        assert u.describe() == {'family': 'custom', 'alpha': 1.0}

    def test_rejects_convex_function(self):
        with pytest.raises(ConstructionError):
            custom(
                domain=Domain.REAL_LINE,
                u0=lambda x: np.exp(x),
                u1=lambda x: np.exp(x),
                u2=lambda x: np.exp(x),
                u3=lambda x: np.exp(x),
                inverse_marginal=np.log,
            )

    def test_rejects_wrong_inverse(self):
        with pytest.raises(ConstructionError):
            custom(
                domain=Domain.REAL_LINE,
                u0=lambda x: -np.exp(-x),
                u1=lambda x: np.exp(-x),
                u2=lambda x: -np.exp(-x),
                u3=lambda x: np.exp(-x),
                inverse_marginal=lambda y: -2 * np.log(y),
            )

    def test_rejects_inconsistent_third_derivative(self):
        with pytest.raises(ConstructionError):
            custom(
                domain=Domain.REAL_LINE,
                u0=lambda x: -np.exp(-x),
                u1=lambda x: np.exp(-x),
                u2=lambda x: -np.exp(-x),
                u3=lambda x: 2 * np.exp(-x),
                inverse_marginal=lambda y: -np.log(y),
            )


class TestDomain:
    def test_half_line_rejects_nonpositive(self):
        with pytest.raises(DomainError):
            phi1(utility.power(0.5), np.array([1.0, 0.0]))

    def test_quadratic_rejects_bliss_point(self):
        with pytest.raises(DomainError):
            phi1(utility.quadratic(5.0), 5.0)

    def test_rejects_nan(self):
        with pytest.raises(DomainError):
            phi1(utility.exponential(), float('nan'))

    def test_phi2_realline_rejects_half_line_utility(self):
        with pytest.raises(DomainError):
            phi2_realline(utility.log(), 1.0)

    def test_phi2_halfline_rejects_real_line_utility(self):
        with pytest.raises(DomainError):
            phi2_halfline(utility.exponential(), 1.0)


class TestConvexConjugate:
    def test_log(self):
        y = np.array([0.5, 1.0, 2.0])

        assert np.allclose(convex_conjugate(utility.log(), y), -np.log(y) - 1)

    def test_power(self):
        y = np.array([0.5, 1.0, 2.0])

        assert np.allclose(convex_conjugate(utility.power(0.5), y), 1 / y)

    def test_rejects_nonpositive(self):
        with pytest.raises(DomainError):
            convex_conjugate(utility.log(), 0.0)

    def test_rejects_real_line(self):
        with pytest.raises(DomainError):
            convex_conjugate(utility.exponential(), 1.0)


def test_phi_bounds_exponential():
    bounds = phi_bounds(utility.exponential(2.0))

    assert bounds.phi1 == pytest.approx(1.5 * 0.5)
    assert bounds.phi2 == pytest.approx(1.5 * 0.5)


def test_applicability_notes():
    notes = applicability_notes(utility.power(0.5))

    assert 'grows with wealth' in notes['risk_tolerance']
    assert notes['hara'].startswith('HARA')
    assert 'not HARA' == applicability_notes(utility.mixture_exp())['hara']


def test_describe():
    assert utility.power(0.5).describe() == {'family': 'power', 'gamma': 0.5}
    assert utility.log().describe() == {'family': 'log'}
