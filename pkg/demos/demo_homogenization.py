"""
Periodic homogenization: cell problems and the two-scale expansion
==================================================================

Solves the unit-cell corrector problems for three classical microstructures,
compares the homogenized tensors with their analytic values, and uses the
correctors to reconstruct a fine-scale solution from the homogenized one.
"""

import numpy as np

from msfemlab.bench import broken_h1_error
from msfemlab.homogenization import (homogenized_tensor, periodic_profile,
                                     solve_cell_problems, two_scale_field)
from msfemlab.legacy_fem import (EffectiveCoefficients, assemble_macro,
                                 reference_solve, solve_macro)
from msfemlab.mesh import build_coarse_mesh
from msfemlab.problem import ProblemSpec, rhs_at

np.set_printoptions(precision=6, suppress=True)

# --- three microstructures with known or reference homogenized limits ----
# A laminate homogenizes to the harmonic mean across the layers and the
# arithmetic mean along them; a two-phase checkerboard to the geometric
# mean times the identity (the 2D duality formula).
for name, comment in [
    ("laminate(1,4)", "analytic: diag(2/(1 + 1/4), (1+4)/2) = diag(1.6, 2.5)"),
    ("checkerboard(1,4)", "analytic: sqrt(1*4) Id = 2 Id"),
    ("periodic", "no closed form; bounded by 1 and 101"),
]:
    cell = solve_cell_problems(periodic_profile(ProblemSpec(coefficient=name)),
                               128)
    print(f"{name}: A* =")
    print(homogenized_tensor(cell))
    print(f"  ({comment})\n")

# --- two-scale reconstruction ------------------------------------------
# Solve the homogenized problem once on a fine mesh, then add the
# corrector oscillations back: u*(x) + eps * grad(u*)(x) . w(x/eps).
eps = 1.0 / 16.0
mesh = build_coarse_mesh(384)
spec = ProblemSpec(coefficient="periodic", epsilon=eps)
cell = solve_cell_problems(periodic_profile(spec), 64)

T = mesh.num_triangles
coeffs = EffectiveCoefficients(Mbar=np.zeros(T), B1=np.zeros((T, 2)),
                               B2=np.zeros((T, 2)),
                               Abar=np.tile(cell.A_star, (T, 1, 1)))
system = assemble_macro(mesh, "lagrange", coeffs, lambda x: rhs_at(spec, x),
                        quadrature="exact-P1")
u_star = solve_macro(system).dofs

u_ref = reference_solve(mesh, spec)
recon = two_scale_field(mesh, u_star, cell, eps)

plain = broken_h1_error(u_star, u_ref, mesh)[1]
corrected = broken_h1_error(recon, u_ref[mesh.triangles], mesh)[1]
print(f"eps = {eps}: relative broken-H1 error vs the fine reference")
print(f"  homogenized solution alone   {plain:.4f}")
print(f"  with the two-scale corrector {corrected:.4f}")
print("the corrector restores the fine-scale oscillations of the gradient")
