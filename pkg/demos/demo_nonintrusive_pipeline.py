"""
The non-intrusive pipeline versus the intrusive methods
=======================================================

Runs the same multiscale problem three ways: the classical Galerkin
method in the multiscale basis, its Petrov-Galerkin variant, and the
non-intrusive route (effective coefficients + unmodified coarse P1
solver + fine-scale reconstruction).  The point of the exercise: the
non-intrusive Galerkin solution tracks the intrusive one closely, and
the Petrov-Galerkin method is *identical* to its non-intrusive
implementation.
"""

import numpy as np

from msfemlab.bench import broken_h1_error, fine_broken_field, method_config
from msfemlab.legacy_fem import reference_solve
from msfemlab.mesh import build_coarse_mesh, build_fine_mesh
from msfemlab.msfem import (offline, run_intrusive_galerkin, run_intrusive_pg,
                            run_nonintrusive)
from msfemlab.problem import ProblemSpec

spec = ProblemSpec(coefficient="periodic", epsilon=np.pi / 50)
coarse = build_coarse_mesh(8)
fine = build_fine_mesh(coarse, 32)
print(f"coarse H = 1/{coarse.n}, fine h = 1/{fine.n}, eps = {spec.epsilon:.4f}")

# The expensive part happens once: local corrector problems on every
# element, condensed into effective coefficient tables of both flavors.
off = offline(coarse, fine, spec, method_config("lin:none:pg"), threads=1)
print(f"offline data: {len(off.correctors)} corrector sets, "
      f"effective tables {off.pg.Abar.shape}")

# Every run below reuses that offline data.
runs = {
    "G   (intrusive)": run_intrusive_galerkin(
        coarse, fine, spec, method_config("lin:none:g"), offline_data=off),
    "PG  (intrusive)": run_intrusive_pg(
        coarse, fine, spec, method_config("lin:none:pg"), offline_data=off),
    "G-ni": run_nonintrusive(
        coarse, fine, spec, method_config("lin:none:gni"), offline_data=off),
    "PG-ni": run_nonintrusive(
        coarse, fine, spec, method_config("lin:none:pg"), offline_data=off),
}

ref = reference_solve(build_coarse_mesh(fine.n), spec)
ref_broken = ref[fine.triangles]

print("\nrelative broken-H1 errors against the fine reference:")
broken = {}
for name, sol in runs.items():
    broken[name] = fine_broken_field(fine, sol.fields)
    rel = broken_h1_error(broken[name], ref_broken, fine)[1]
    print(f"  {name:<16} {rel:.6f}")

gap_g = broken_h1_error(broken["G   (intrusive)"], broken["G-ni"], fine)[0]
gap_pg = broken_h1_error(broken["PG  (intrusive)"], broken["PG-ni"], fine)[0]
print(f"\n|u_G - u_G-ni|   = {gap_g:.3e}  (small: flavors agree without OS)")
print(f"|u_PG - u_PG-ni| = {gap_pg:.3e}  (zero: same method, two routes)")
