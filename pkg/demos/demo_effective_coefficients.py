"""
Correctors and effective coefficients on one element
====================================================

Solves the three local corrector problems on a single coarse element,
condenses them into the effective pairing table in both flavors, and
shows the structural facts the solvers rely on: pure diffusion kills the
lower-order row and column, both flavors agree without oversampling,
and the effective diffusion block stays coercive.
"""

import numpy as np

from msfemlab.effective import coercivity_check, effective_pair
from msfemlab.local import build_correctors, element_domain
from msfemlab.mesh import build_coarse_mesh, build_fine_mesh
from msfemlab.problem import ProblemSpec

np.set_printoptions(precision=6, suppress=True)

coarse = build_coarse_mesh(8)
fine = build_fine_mesh(coarse, 16)
spec = ProblemSpec(coefficient="periodic", epsilon=np.pi / 50)
k = 37

# The correctors encode the element's microstructure response to the
# constant driver 1 and the two centered affine drivers x - x_c.  For
# pure diffusion the constant driver produces nothing.
cs = build_correctors(coarse, fine, k, spec, "lagrange", "none")
norms = [np.abs(f).max() for f in cs.fields]
print(f"corrector max magnitudes on element {k}: "
      + ", ".join(f"{v:.2e}" for v in norms))

# Condensing correctors against affine test functions gives the
# Petrov-Galerkin tables; testing against the corrected functions
# themselves gives the Galerkin flavor.  Without oversampling the local
# form is symmetric in the right way and the two coincide.
dom = element_domain(coarse, fine, k)
(Mbar, B1, B2, Abar), (_, _, _, Abar_g) = effective_pair(dom, cs, spec)
print("\nPG effective diffusion block:")
print(Abar)
print(f"lower-order terms: Mbar = {Mbar}, B1 = {B1}, B2 = {B2}")
print(f"\nflavor difference |Abar_G - Abar_PG| = "
      f"{np.abs(Abar_g - Abar).max():.2e} (zero without oversampling)")

# With an oversampling patch the corrector sees a larger sample of the
# microstructure and the two flavors genuinely differ.
cs_os = build_correctors(coarse, fine, k, spec, "lagrange", "extended", rho=2.0)
(_, _, _, A_pg_os), (_, _, _, A_g_os) = effective_pair(dom, cs_os, spec)
print(f"with extended oversampling (rho = 2): "
      f"|Abar_G - Abar_PG| = {np.abs(A_g_os - A_pg_os).max():.2e}")

# The whole-mesh coercivity check: the offline driver condenses every
# element, and the report compares the smallest eigenvalue of each
# symmetrized effective diffusion block with the coefficient's lower
# bound m = 1.
from msfemlab.msfem import MethodConfig, offline

off = offline(coarse, fine, spec, MethodConfig(space="lin"))
report = coercivity_check(off.pg, spec.m)
print(f"\ncoercivity over all {coarse.num_triangles} elements: {report}")
