"""The quarantined single-scale solver and the fine-scale reference solver.

This module plays the role of an existing legacy finite element code: it
accepts only macroscopic, piecewise-constant effective coefficients
(a mass scalar, two advection vectors and a diffusion tensor per coarse
element), assembles and solves the coarse system in either the vertex-based
Lagrange space or the face-based Crouzeix-Raviart space, and exports
centroid values and per-element gradients of the solution.  Nothing outside
this module touches its matrices or DOF vectors; multiscale drivers consume
only the (EffectiveCoefficients in) -> (CoarseSolution exports out)
interface.

It also provides the standard fine-scale P1 solver used to produce
reference solutions.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _fem_core as core
from .linalg import bicgstab_solve, cg_solve, csr_from_triplets, dense_lu_solve
from .mesh import CoarseMesh
from .problem import ProblemSpec, coefficient_at, rhs_at

__all__ = [
    "SPACES",
    "EffectiveCoefficients",
    "MacroSystem",
    "CoarseSolution",
    "space_dofs",
    "assemble_macro",
    "solve_macro",
    "reference_solve",
]

SPACES = ("lagrange", "cr")

# coarse systems up to this many DOFs are solved by dense LU (determinism);
# beyond it the nonsymmetric-capable iterative solver takes over
_DENSE_LIMIT = 2000


@dataclass
class EffectiveCoefficients:
    """Per-coarse-element effective data: Mbar, B1, B2, Abar and a flavor tag."""

    Mbar: np.ndarray   # (T,)
    B1: np.ndarray     # (T, 2)
    B2: np.ndarray     # (T, 2)
    Abar: np.ndarray   # (T, 2, 2)
    flavor: str = "pg"

    def __post_init__(self):
        self.Mbar = np.asarray(self.Mbar, dtype=float)
        self.B1 = np.asarray(self.B1, dtype=float)
        self.B2 = np.asarray(self.B2, dtype=float)
        self.Abar = np.asarray(self.Abar, dtype=float)
        T = self.Mbar.shape[0]
        if self.B1.shape != (T, 2) or self.B2.shape != (T, 2) \
                or self.Abar.shape != (T, 2, 2):
            raise ValueError("effective coefficient arrays have inconsistent sizes")
        if not (np.all(np.isfinite(self.Mbar)) and np.all(np.isfinite(self.B1))
                and np.all(np.isfinite(self.B2)) and np.all(np.isfinite(self.Abar))):
            raise ValueError("effective coefficients must be finite")
        if self.flavor not in ("pg", "galerkin"):
            raise ValueError(f"unknown flavor: {self.flavor!r}")

    @property
    def num_elements(self) -> int:
        return self.Mbar.shape[0]

    @classmethod
    def constant(cls, num_elements: int, Abar=np.eye(2), B1=(0.0, 0.0),
                 B2=(0.0, 0.0), Mbar=0.0, flavor: str = "pg"):
        """Spatially constant coefficients replicated over all elements."""
        T = num_elements
        return cls(Mbar=np.full(T, float(Mbar)),
                   B1=np.tile(np.asarray(B1, dtype=float), (T, 1)),
                   B2=np.tile(np.asarray(B2, dtype=float), (T, 1)),
                   Abar=np.tile(np.asarray(Abar, dtype=float), (T, 1, 1)),
                   flavor=flavor)


@dataclass
class MacroSystem:
    """Assembled coarse system, already restricted to interior DOFs."""

    mesh: CoarseMesh
    space: str
    matrix: object          # SparseMatrix over interior DOFs
    rhs: np.ndarray
    interior: np.ndarray    # interior DOF index into the full DOF vector
    n_dofs: int


@dataclass
class CoarseSolution:
    """A legacy solve result: DOF vector plus the per-element exports."""

    space: str
    dofs: np.ndarray        # full DOF vector; boundary entries exactly 0
    u_centroid: np.ndarray  # (T,)
    grad: np.ndarray        # (T, 2)


def space_dofs(mesh: CoarseMesh, space: str):
    """DOF layout of a coarse space on a mesh.

    Returns (element_dofs (T,3), n_dofs, boundary mask over DOFs,
    basis gradients (T,3,2), basis values at the centroid (3,)).  For the
    Lagrange space DOFs are vertices; for Crouzeix-Raviart they are faces,
    with the local face l opposite the local vertex l (its basis function
    is 1 - 2 lambda_l).
    """
    if space == "lagrange":
        return (mesh.triangles, mesh.num_vertices, mesh.vertex_is_boundary,
                mesh.grads, np.full(3, 1.0 / 3.0))
    if space == "cr":
        return (mesh.element_faces, mesh.num_faces, mesh.face_is_boundary,
                -2.0 * mesh.grads, np.full(3, 1.0 / 3.0))
    raise ValueError(f"unknown space: {space!r}")


def _exact_p1_mass(mesh: CoarseMesh, space: str) -> np.ndarray:
    """Exact (non-centroid) element mass matrices of the coarse space."""
    T = mesh.num_triangles
    if space == "lagrange":
        base = (np.ones((3, 3)) + np.eye(3)) / 12.0
    else:
        base = np.eye(3) / 3.0
    return mesh.areas[:, None, None] * base[None, :, :]


def assemble_macro(mesh: CoarseMesh, space: str, coeffs: EffectiveCoefficients,
                   f, quadrature: str = "centroid") -> MacroSystem:
    """Assemble the effective coarse bilinear form and load.

    The form is: grad(v) . Abar grad(u) + v (B1 . grad(u)) + u (B2 . grad(v))
    + Mbar u v, integrated per element with coefficients constant on each
    element.  With `centroid` quadrature the zeroth-order terms use
    one-point evaluation at the element centroid (the rule the non-intrusive
    pipeline relies on); `exact-P1` integrates the products of basis
    functions exactly.  Gradient terms are exact under both rules.

    `f` supplies the load: either vertex values of the right-hand side (the
    legacy code integrates its P1 interpolant exactly, never seeing any
    fine-scale data) or a callable evaluated at the vertices.
    """
    if coeffs.num_elements != mesh.num_triangles:
        raise ValueError("coefficient arrays do not match the mesh")
    if quadrature not in ("centroid", "exact-P1"):
        raise ValueError(f"unknown quadrature: {quadrature!r}")
    dofs, n_dofs, boundary, basis_grads, cvals = space_dofs(mesh, space)

    areas = mesh.areas
    local = core.local_matrices(areas, basis_grads, cvals, A=coeffs.Abar)
    # v (B1 . grad u): test value x trial gradient
    b1_dot = np.einsum("ta,tja->tj", coeffs.B1, basis_grads)
    local += areas[:, None, None] * cvals[None, :, None] * b1_dot[:, None, :]
    # u (B2 . grad v): trial value x test gradient
    b2_dot = np.einsum("ta,tia->ti", coeffs.B2, basis_grads)
    local += areas[:, None, None] * b2_dot[:, :, None] * cvals[None, None, :]
    if quadrature == "centroid":
        local += (areas * coeffs.Mbar)[:, None, None] * np.outer(cvals, cvals)
    else:
        local += coeffs.Mbar[:, None, None] * _exact_p1_mass(mesh, space)

    f_vertices = np.asarray(f(mesh.vertices) if callable(f) else f, dtype=float)
    if f_vertices.shape != (mesh.num_vertices,):
        raise ValueError("load data must be one value per coarse vertex")
    f_elem = f_vertices[mesh.triangles]
    if space == "lagrange":
        load_elem = core.load_exact_p1(areas, f_elem)
    else:
        load_elem = core.load_exact_p1_cr(areas, f_elem)
    rhs = np.zeros(n_dofs)
    np.add.at(rhs, dofs, load_elem)

    rows, cols, vals = core.scatter_triplets(dofs, local)
    rows, cols, vals, rhs_in, keep = core.interior_system(
        rows, cols, vals, rhs, ~boundary)
    matrix = csr_from_triplets(len(keep), (rows, cols, vals))
    return MacroSystem(mesh=mesh, space=space, matrix=matrix, rhs=rhs_in,
                       interior=keep, n_dofs=n_dofs)


def _is_numerically_symmetric(matrix) -> bool:
    """True when the sparse matrix equals its transpose to rounding.

    Effective systems without oversampling are symmetric up to assembly
    rounding (measured ~1e-15 of the largest entry); oversampled tables
    produce genuinely asymmetric systems, orders of magnitude away.
    """
    m = matrix.backend if hasattr(matrix, "backend") else matrix
    if m.nnz == 0:
        return True
    diff = (m - m.T).tocoo()
    if diff.nnz == 0:
        return True
    scale = float(np.abs(m.data).max())
    return float(np.abs(diff.data).max()) <= 1e-13 * scale


def solve_macro(system: MacroSystem) -> CoarseSolution:
    """Solve the assembled coarse system and export centroid data.

    Small systems go through dense LU for bitwise-deterministic results.
    Larger ones use the symmetric solver when the matrix is numerically
    symmetric (coercive effective tensors make it positive definite) and
    the nonsymmetric iterative solver otherwise, both at tolerance 1e-12.
    """
    n = len(system.interior)
    if n <= _DENSE_LIMIT:
        x = dense_lu_solve(system.matrix.toarray(), system.rhs)
    elif _is_numerically_symmetric(system.matrix):
        x = cg_solve(system.matrix, system.rhs, tol=1e-12)
    else:
        x = bicgstab_solve(system.matrix, system.rhs, tol=1e-12)
    dofs = np.zeros(system.n_dofs)
    dofs[system.interior] = x
    return _export(system.mesh, system.space, dofs)


def _export(mesh: CoarseMesh, space: str, dofs: np.ndarray) -> CoarseSolution:
    elem_dofs, _, _, basis_grads, cvals = space_dofs(mesh, space)
    local_vals = dofs[elem_dofs]
    u_centroid = local_vals @ cvals
    grad = np.einsum("ti,tid->td", local_vals, basis_grads)
    return CoarseSolution(space=space, dofs=dofs, u_centroid=u_centroid, grad=grad)


def reference_solve(mesh: CoarseMesh, spec: ProblemSpec) -> np.ndarray:
    """Standard P1 Lagrange solve of the oscillating problem on a fine mesh.

    Pure diffusion only (the reference baseline); coefficients are sampled
    at element centroids and the load integrates the P1 interpolant of f.
    Returns the full nodal field with exact zeros on the boundary.
    """
    if not spec.pure_diffusion:
        raise ValueError("the reference solver handles pure diffusion only")
    A = coefficient_at(spec, mesh.centroids)
    local = core.local_matrices(mesh.areas, mesh.grads, np.full(3, 1.0 / 3.0), A=A)
    rows, cols, vals = core.scatter_triplets(mesh.triangles, local)

    f_nodes = rhs_at(spec, mesh.vertices)
    load_elem = core.load_exact_p1(mesh.areas, f_nodes[mesh.triangles])
    rhs = np.zeros(mesh.num_vertices)
    np.add.at(rhs, mesh.triangles, load_elem)

    rows, cols, vals, rhs_in, keep = core.interior_system(
        rows, cols, vals, rhs, ~mesh.vertex_is_boundary)
    matrix = csr_from_triplets(len(keep), (rows, cols, vals))
    out = np.zeros(mesh.num_vertices)
    if np.linalg.norm(rhs_in) > 0.0:
        out[keep] = cg_solve(matrix, rhs_in, tol=1e-12)
    return out
