import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mfglab.discretization import (
    assemble_laplacian,
    divergence_flux,
    faces,
    grad_dot,
    gradient,
    normal_derivative,
    observation_matrix,
    solve_linear,
)
from mfglab.errors import ConfigurationError, PreconditionError
from mfglab.geometry import NodeClass, boundary_patch


def test_laplacian_exact_on_quadratics(holed):
    op = assemble_laplacian(holed, "DD")
    f = holed.x**2 + 3 * holed.y**2 - holed.x * holed.y
    np.testing.assert_allclose(op.apply(f), -8.0, atol=1e-9)


def test_stiffness_symmetric_positive(holed):
    for bc in ("DD", "DN"):
        op = assemble_laplacian(holed, bc)
        K = op.stiffness.toarray()
        np.testing.assert_allclose(K, K.T, atol=1e-12)
        assert np.linalg.eigvalsh(K).min() > 0


def test_discrete_sine_eigenvalue(square):
    # five-point stencil eigenvalue of sin(pi x) sin(pi y): (8 / h^2) sin^2(pi h / 2)
    h = 1.0 / 32
    expected = 8.0 / h**2 * np.sin(np.pi * h / 2) ** 2
    op = assemble_laplacian(square, "DD")
    f = np.sin(np.pi * square.x) * np.sin(np.pi * square.y)
    np.testing.assert_allclose(op.apply(f), expected * f[op.unknowns], rtol=1e-10, atol=1e-10)


def test_neumann_operator_annihilates_constants(holed):
    op = assemble_laplacian(holed, "DN")
    r = op.apply(np.ones(holed.n_active))
    # rows away from the obstacle see a constant and give zero
    far = holed.classes[op.unknowns] == NodeClass.OUTER
    np.testing.assert_allclose(r[far], 0.0, atol=1e-10)


def test_unknown_bc_rejected(square):
    with pytest.raises(ConfigurationError):
        assemble_laplacian(square, "NN")


def test_gradient_exact_for_linear(holed):
    g = gradient(holed, 2 * holed.x - 3 * holed.y)
    np.testing.assert_allclose(g.gx, 2.0, atol=1e-12)
    np.testing.assert_allclose(g.gy, -3.0, atol=1e-12)


def test_grad_dot_interior_exact_for_linear(holed):
    a = holed.x + 2 * holed.y
    b = 3 * holed.x - holed.y
    v = grad_dot(holed, gradient(holed, a), gradient(holed, b))
    interior = holed.classes == NodeClass.INTERIOR
    np.testing.assert_allclose(v[interior], 1 * 3 + 2 * -1, atol=1e-12)


def test_divergence_matches_laplacian_for_unit_density(holed):
    u = np.sin(2 * holed.x) * np.cos(holed.y)
    op = assemble_laplacian(holed, "DD")
    d = divergence_flux(holed, np.ones(holed.n_active), gradient(holed, u))
    np.testing.assert_allclose(d[op.unknowns], -op.apply(u), atol=1e-9)


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_summation_by_parts(small_holed, seed):
    rng = np.random.default_rng(seed)
    n = small_holed.n_active
    phi, m, u = rng.standard_normal((3, n))
    fs = faces(small_holed)
    lhs = -np.sum(small_holed.area_weights * phi * divergence_flux(small_holed, m, gradient(small_holed, u)))
    rhs = np.sum(fs.volume * (fs.avg @ m) * (fs.grad @ phi) * (fs.grad @ u))
    assert lhs == pytest.approx(rhs, rel=1e-10, abs=1e-10)


def test_normal_derivative_exact_for_quadratic(square):
    patch = boundary_patch(square, ("right", "top"))
    f = square.x**2 + square.y
    d = normal_derivative(square, f, patch)
    expected = np.where(np.array(patch.edges) == "right", 2.0, 1.0)
    np.testing.assert_allclose(d, expected, atol=1e-10)


def test_value_observation_is_trace(square):
    patch = boundary_patch(square, ("left",))
    obs = observation_matrix(square, patch, "value")
    np.testing.assert_allclose(obs @ square.y, square.y[patch.nodes])
    with pytest.raises(ConfigurationError):
        observation_matrix(square, patch, "curl")


def test_solve_linear_paths_agree(holed):
    op = assemble_laplacian(holed, "DD")
    rhs = np.random.default_rng(1).standard_normal(op.n)
    a = solve_linear(op, rhs, method="direct")
    b = solve_linear(op, rhs, tol=1e-12, method="cg")
    np.testing.assert_allclose(a, b, rtol=1e-8, atol=1e-10)
    with pytest.raises(PreconditionError):
        solve_linear(op, rhs, tol=0.1)
