"""Tests for the periodic cell problems and two-scale reconstruction."""

import numpy as np
import pytest

from msfemlab.homogenization import (CellData, homogenized_tensor,
                                     periodic_profile, solve_cell_problems,
                                     two_scale_field)
from msfemlab.legacy_fem import (EffectiveCoefficients, assemble_macro,
                                 reference_solve, solve_macro)
from msfemlab.mesh import build_coarse_mesh
from msfemlab.problem import ProblemSpec, rhs_at


def _identity_profile(y):
    return np.broadcast_to(np.eye(2), np.shape(y)[:-1] + (2, 2)).copy()


def _scalar_means(profile, n=512):
    """Arithmetic and harmonic means of an isotropic profile by quadrature."""
    mesh = build_coarse_mesh(n)
    vals = np.asarray(profile(mesh.centroids))[..., 0, 0]
    arith = float(np.sum(mesh.areas * vals))
    harm = 1.0 / float(np.sum(mesh.areas / vals))
    return harm, arith


def _solve_homogenized(mesh, A_star, spec):
    """P1 solve of the constant-tensor limit problem on ``mesh``."""
    T = mesh.num_triangles
    coeffs = EffectiveCoefficients(Mbar=np.zeros(T), B1=np.zeros((T, 2)),
                                   B2=np.zeros((T, 2)),
                                   Abar=np.tile(A_star, (T, 1, 1)))
    system = assemble_macro(mesh, "lagrange", coeffs,
                            lambda x: rhs_at(spec, x), quadrature="exact-P1")
    return solve_macro(system).dofs


def _broken_h1(mesh, broken):
    g = np.einsum("tic,ti->tc", mesh.grads, broken)
    return float(np.sqrt(np.sum(mesh.areas * np.sum(g * g, axis=1))))


def test_identity_profile_gives_zero_correctors_and_identity_tensor():
    cell = solve_cell_problems(_identity_profile, 8)
    assert np.allclose(cell.w_grid, 0.0, atol=1e-13)
    assert np.allclose(cell.A_star, np.eye(2), atol=1e-12)


def test_laminate_matches_harmonic_and_arithmetic_means():
    spec = ProblemSpec(coefficient="laminate(1,4)")
    cell = solve_cell_problems(periodic_profile(spec), 16)
    # Across the layers the flux is constant (harmonic mean); along them
    # the field is unperturbed (arithmetic mean).  The piecewise-linear
    # corrector is exactly representable once the interfaces are mesh
    # lines, so the tensor is exact to rounding.
    assert np.allclose(cell.A_star, np.diag([1.6, 2.5]), atol=1e-10)


def test_checkerboard_matches_geometric_mean():
    spec = ProblemSpec(coefficient="checkerboard(1,4)")
    cell = solve_cell_problems(periodic_profile(spec), 128)
    exact = 2.0 * np.eye(2)  # sqrt(1 * 4) by the 2D duality formula
    assert np.linalg.norm(cell.A_star - exact) <= 0.02 * np.linalg.norm(exact)


@pytest.mark.parametrize("coefficient", ["laminate(1,4)", "checkerboard(1,4)",
                                         "periodic"])
def test_symmetric_profile_gives_symmetric_tensor(coefficient):
    spec = ProblemSpec(coefficient=coefficient)
    cell = solve_cell_problems(periodic_profile(spec), 32)
    assert np.allclose(cell.A_star, cell.A_star.T, atol=1e-10)


def test_resolution_self_convergence():
    profile = periodic_profile(ProblemSpec(coefficient="periodic"))
    tensors = [solve_cell_problems(profile, n).A_star for n in (16, 32, 64)]
    gaps = [np.linalg.norm(tensors[k + 1] - tensors[k]) for k in range(2)]
    assert gaps[1] < gaps[0]


def test_periodic_tensor_within_coefficient_bounds():
    spec = ProblemSpec(coefficient="periodic")
    cell = solve_cell_problems(periodic_profile(spec), 64)
    eigs = np.linalg.eigvalsh(0.5 * (cell.A_star + cell.A_star.T))
    assert eigs[0] >= spec.m - 1e-8
    assert eigs[1] <= spec.M + 1e-8


@pytest.mark.parametrize("coefficient", ["laminate(1,4)", "checkerboard(1,4)"])
def test_voigt_reuss_sandwich(coefficient):
    profile = periodic_profile(ProblemSpec(coefficient=coefficient))
    cell = solve_cell_problems(profile, 64)
    harm, arith = _scalar_means(profile)
    eigs = np.linalg.eigvalsh(0.5 * (cell.A_star + cell.A_star.T))
    assert eigs[0] >= harm - 1e-8
    assert eigs[1] <= arith + 1e-8


def test_corrector_means_are_zero():
    cell = solve_cell_problems(
        periodic_profile(ProblemSpec(coefficient="periodic")), 32)
    means = cell.w_grid[:, :-1, :-1].mean(axis=(1, 2))
    assert np.all(np.abs(means) <= 1e-10)


def test_homogenized_tensor_rederives_stored_value():
    cell = solve_cell_problems(
        periodic_profile(ProblemSpec(coefficient="checkerboard(1,4)")), 32)
    assert np.allclose(homogenized_tensor(cell), cell.A_star, atol=1e-14)


def test_cell_data_rejects_biased_correctors():
    grid = np.ones((2, 5, 5))
    with pytest.raises(ValueError):
        CellData(n=4, w_grid=grid, coeffs=np.zeros((32, 2, 2)),
                 A_star=np.eye(2))


def test_resolution_and_profile_validation():
    with pytest.raises(ValueError):
        solve_cell_problems(_identity_profile, 1)
    with pytest.raises(ValueError):
        solve_cell_problems(lambda y: np.ones(np.shape(y)[:-1]), 8)


def test_two_scale_with_zero_correctors_returns_field():
    mesh = build_coarse_mesh(8)
    cell = solve_cell_problems(_identity_profile, 4)
    u = np.sin(mesh.vertices[:, 0]) + mesh.vertices[:, 1] ** 2
    recon = two_scale_field(mesh, u, cell, 0.1)
    assert np.allclose(recon, u[mesh.triangles], atol=1e-12)


def test_two_scale_constant_field_stays_constant():
    mesh = build_coarse_mesh(8)
    cell = solve_cell_problems(
        periodic_profile(ProblemSpec(coefficient="checkerboard(1,4)")), 16)
    recon = two_scale_field(mesh, np.full(mesh.num_vertices, 3.25), cell, 0.1)
    assert np.allclose(recon, 3.25, atol=1e-12)


def test_two_scale_rejects_wrong_field_length():
    mesh = build_coarse_mesh(4)
    cell = solve_cell_problems(_identity_profile, 4)
    with pytest.raises(ValueError):
        two_scale_field(mesh, np.zeros(7), cell, 0.1)


def test_corrector_interpolation_is_periodic_and_nodal_exact():
    cell = solve_cell_problems(
        periodic_profile(ProblemSpec(coefficient="periodic")), 16)
    from msfemlab.homogenization import _interp_periodic
    nodes = build_coarse_mesh(16).vertices
    at_nodes = _interp_periodic(cell, nodes)
    expect = cell.w_grid.reshape(2, -1)
    assert np.allclose(at_nodes, expect, atol=1e-12)
    pts = np.array([[0.21, 0.68], [0.05, 0.99]])
    shifted = _interp_periodic(cell, pts + np.array([2.0, -1.0]))
    assert np.allclose(shifted, _interp_periodic(cell, pts), atol=1e-12)


def test_two_scale_error_decreases_with_epsilon():
    spec_base = ProblemSpec(coefficient="periodic")
    cell = solve_cell_problems(periodic_profile(spec_base), 64)
    errors = []
    # Fine resolution grows with 1/eps so the reference stays adequate
    # (24 cells per period throughout); the remaining gap is the
    # homogenization error, which shrinks like sqrt(eps).
    for eps, n in ((1.0 / 4.0, 96), (1.0 / 8.0, 192), (1.0 / 16.0, 384)):
        mesh = build_coarse_mesh(n)
        spec = ProblemSpec(coefficient="periodic", epsilon=eps)
        u_ref = reference_solve(mesh, spec)
        u_star = _solve_homogenized(mesh, cell.A_star, spec)
        recon = two_scale_field(mesh, u_star, cell, eps)
        diff = u_ref[mesh.triangles] - recon
        errors.append(_broken_h1(mesh, diff) /
                      _broken_h1(mesh, u_ref[mesh.triangles]))
    assert errors[2] < errors[1] < errors[0]
