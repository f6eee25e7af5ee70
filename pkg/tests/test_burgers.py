import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from metaloss.burgers import QuadratureWarning, burgers_reference, cole_hopf, crank_nicolson, quadrature_error


def test_initial_condition_recovered():
    x = np.linspace(-1, 1, 101)
    np.testing.assert_allclose(cole_hopf(0.05, np.zeros_like(x), x), -np.sin(np.pi * x), atol=1e-12)


@pytest.mark.parametrize("lam", [1e-3, 0.1, 1.0])
def test_boundaries_vanish(lam):
    t = np.linspace(0, 1, 11)
    np.testing.assert_allclose(cole_hopf(lam, t, np.ones_like(t)), 0.0, atol=1e-12)
    np.testing.assert_allclose(cole_hopf(lam, t, -np.ones_like(t)), 0.0, atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.floats(1e-3, 1.0), st.floats(0.0, 1.0), st.floats(-1.0, 1.0))
def test_solution_is_odd_in_x(lam, t, x):
    a = cole_hopf(lam, np.array([t]), np.array([x]))[0]
    b = cole_hopf(lam, np.array([t]), np.array([-x]))[0]
    assert a == pytest.approx(-b, abs=1e-10)


def test_satisfies_pde_by_differences():
    lam, h = 0.1, 1e-4
    t = np.array([0.3, 0.6, 0.9])
    x = np.array([-0.5, 0.2, 0.7])

    def u(tt, xx):
        return cole_hopf(lam, tt, xx)

    ut = (u(t + h, x) - u(t - h, x)) / (2 * h)
    ux = (u(t, x + h) - u(t, x - h)) / (2 * h)
    uxx = (u(t, x + h) - 2 * u(t, x) + u(t, x - h)) / h**2
    np.testing.assert_allclose(ut + u(t, x) * ux - lam * uxx, 0.0, atol=1e-5)


def test_crank_nicolson_agrees_with_cole_hopf():
    t, x, u = crank_nicolson(0.1, nx=201, nt=201)
    tt, xx = np.meshgrid(t, x, indexing="ij")
    ref = cole_hopf(0.1, tt, xx)
    assert np.linalg.norm(u - ref) / np.linalg.norm(ref) < 1e-3


def test_tiny_viscosity_stays_finite_and_warns():
    x = np.linspace(-1, 1, 201)
    pts = np.column_stack([np.full_like(x, 1.0), x])
    with pytest.warns(QuadratureWarning):
        u = burgers_reference(1e-4, pts)
    assert np.all(np.isfinite(u))


def test_task_range_viscosities_are_resolved():
    x = np.linspace(-1, 1, 401)
    pts = np.column_stack([np.full_like(x, 1.0), x])
    with warnings.catch_warnings():
        warnings.simplefilter("error", QuadratureWarning)
        burgers_reference(1e-3, pts)
    assert quadrature_error(1e-3, pts[:, 0], pts[:, 1]) < 1e-12


def test_rejects_nonpositive_viscosity():
    with pytest.raises(ValueError):
        cole_hopf(0.0, np.zeros(1), np.zeros(1))
