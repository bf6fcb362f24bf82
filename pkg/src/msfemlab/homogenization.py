"""Periodic homogenization on the unit cell.

The classical two-scale machinery for a coefficient of the form
A(x) = A_per(x / eps) with a 1-periodic profile A_per: corrector fields
w_alpha on the unit cell, the constant homogenized tensor A*, and the
first-order reconstruction u*(x) + eps * sum_a d_a u*(x) w_a(x / eps).

The cell problems are solved with P1 elements on a structured n-by-n
triangulation of the unit square whose opposite edges are identified
(true periodic coupling, no penalty terms).  The constant nullspace is
removed by a single zero-mean constraint; on the structured periodic
mesh every node carries the same lumped mass, so the plain average of
the nodal values equals the integral mean exactly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _fem_core as core
from .linalg import ConstraintBlock, constrained_solve, csr_from_triplets
from .mesh import CoarseMesh, build_coarse_mesh
from .problem import ProblemSpec, coefficient_at

__all__ = [
    "CellData",
    "periodic_profile",
    "solve_cell_problems",
    "homogenized_tensor",
    "two_scale_field",
]

_MEAN_TOL = 1e-10


@dataclass(frozen=True)
class CellData:
    """Solved cell problems on the periodic unit cell.

    ``w_grid`` holds the two corrector fields on the full (n+1)^2 vertex
    grid of the cell mesh (periodically extended, so row/column n repeats
    row/column 0); each has zero mean.  ``coeffs`` are the centroid
    samples of the periodic profile used in the solve, kept so the
    homogenized tensor can be re-derived from the stored correctors.
    """

    n: int
    w_grid: np.ndarray   # (2, n+1, n+1) corrector nodal values
    coeffs: np.ndarray   # (T, 2, 2) profile at the cell-mesh centroids
    A_star: np.ndarray   # (2, 2) homogenized tensor

    def __post_init__(self):
        if self.w_grid.shape != (2, self.n + 1, self.n + 1):
            raise ValueError("corrector grid does not match the resolution")
        means = self.w_grid[:, :-1, :-1].mean(axis=(1, 2))
        if np.any(np.abs(means) > _MEAN_TOL):
            raise ValueError("corrector fields are not mean-free")


def periodic_profile(spec: ProblemSpec):
    """The 1-periodic diffusion profile underlying a problem's coefficient.

    Every coefficient family evaluates as A(x) = profile(x / eps), so the
    profile itself is the same field sampled at eps = 1.
    """
    unit = ProblemSpec(coefficient=spec.coefficient, epsilon=1.0)
    return lambda y: coefficient_at(unit, y)


def _periodic_dof_map(mesh: CoarseMesh) -> np.ndarray:
    """Map each vertex id to its periodic dof (opposite edges identified)."""
    n = mesh.n
    cols = np.arange(mesh.num_vertices) % (n + 1)
    rows = np.arange(mesh.num_vertices) // (n + 1)
    return (rows % n) * n + (cols % n)


def solve_cell_problems(profile, n: int) -> CellData:
    """Solve the two periodic cell problems at resolution ``n``.

    ``profile`` maps points y with shape (..., 2) to 2x2 tensors with
    shape (..., 2, 2) and must be 1-periodic.  For each coordinate
    direction the corrector w_alpha is the zero-mean periodic field with
    s(w_alpha, v) = -int grad(v) . profile e_alpha for every periodic v;
    the homogenized tensor pairs the corrected directions through the
    profile and is computed with the same centroid quadrature as the
    solve.
    """
    if n < 2:
        raise ValueError("cell resolution must be at least 2")
    mesh = build_coarse_mesh(n)
    coeffs = np.asarray(profile(mesh.centroids), dtype=float)
    if coeffs.shape != (mesh.num_triangles, 2, 2):
        raise ValueError("profile must return a 2x2 tensor per point")

    pdof = _periodic_dof_map(mesh)
    pdofs = pdof[mesh.triangles]
    num_dofs = n * n

    local = core.local_matrices(mesh.areas, mesh.grads,
                                np.full(mesh.triangles.shape, 1.0 / 3.0),
                                A=coeffs)
    rows, cols, vals = core.scatter_triplets(pdofs, local)
    stiffness = csr_from_triplets(num_dofs, (rows, cols, vals))

    # r_i = -int grad(phi_i) . profile e_alpha, element-wise then scattered.
    flux = coeffs * mesh.areas[:, None, None]            # (T, 2, 2)
    elem_loads = -np.einsum("tic,tca->tia", mesh.grads, flux)
    loads = np.zeros((num_dofs, 2))
    np.add.at(loads, pdofs.ravel(), elem_loads.reshape(-1, 2))

    mean_row = ConstraintBlock(np.full((1, num_dofs), 1.0 / num_dofs), [0.0])
    w, _ = constrained_solve(stiffness, loads, mean_row, tol=1e-12,
                             symmetric=True)

    w_grid = w[pdof].T.reshape(2, n + 1, n + 1)
    A_star = _pair_corrected_directions(mesh, coeffs, w[pdof])
    return CellData(n=n, w_grid=w_grid, coeffs=coeffs, A_star=A_star)


def _pair_corrected_directions(mesh: CoarseMesh, coeffs: np.ndarray,
                               w_nodes: np.ndarray) -> np.ndarray:
    """int_Q (e_beta + grad w_beta) . profile (e_alpha + grad w_alpha)."""
    w_elem = w_nodes[mesh.triangles]                     # (T, 3, 2)
    corrected = np.eye(2) + np.einsum("tic,tia->tac", mesh.grads, w_elem)
    return np.einsum("t,tbi,tij,taj->ba", mesh.areas, corrected, coeffs,
                     corrected)


def homogenized_tensor(cell: CellData) -> np.ndarray:
    """The homogenized 2x2 tensor, re-derived from the stored correctors."""
    mesh = build_coarse_mesh(cell.n)
    w_nodes = cell.w_grid.reshape(2, -1).T               # (V, 2)
    return _pair_corrected_directions(mesh, cell.coeffs, w_nodes)


def _interp_periodic(cell: CellData, points: np.ndarray) -> np.ndarray:
    """P1-interpolate the corrector fields at arbitrary points (periodic).

    Points are wrapped into the unit cell, located in the structured
    grid, and evaluated on the triangle of the containing square that
    holds them.  Returns shape (2,) + points.shape[:-1].
    """
    n = cell.n
    y = np.mod(np.asarray(points, dtype=float), 1.0) * n
    i = np.minimum(y[..., 0].astype(int), n - 1)
    j = np.minimum(y[..., 1].astype(int), n - 1)
    fx = y[..., 0] - i
    fy = y[..., 1] - j

    w00 = cell.w_grid[:, j, i]
    w10 = cell.w_grid[:, j, i + 1]
    w01 = cell.w_grid[:, j + 1, i]
    w11 = cell.w_grid[:, j + 1, i + 1]

    lower = w00 * (1.0 - fx) + w10 * (fx - fy) + w11 * fy
    upper = w00 * (1.0 - fy) + w11 * fx + w01 * (fy - fx)
    return np.where(fx >= fy, lower, upper)


def two_scale_field(mesh: CoarseMesh, u_star: np.ndarray, cell: CellData,
                    eps: float) -> np.ndarray:
    """First-order reconstruction u* + eps * sum_a d_a u* . w_a(x / eps).

    ``u_star`` holds nodal values on ``mesh``; its gradient is taken
    piecewise per element, so the reconstruction is returned as broken
    per-element nodal values with shape (T, 3).
    """
    u_star = np.asarray(u_star, dtype=float)
    if u_star.shape != (mesh.num_vertices,):
        raise ValueError("u_star must hold one value per mesh vertex")
    u_elem = u_star[mesh.triangles]                      # (T, 3)
    grads = np.einsum("tic,ti->tc", mesh.grads, u_elem)  # (T, 2)
    pts = mesh.vertices[mesh.triangles]                  # (T, 3, 2)
    w_at = _interp_periodic(cell, pts / eps)             # (2, T, 3)
    return u_elem + eps * np.einsum("ta,atl->tl", grads, w_at)
