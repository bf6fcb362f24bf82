import time

import numpy as np

from msfemlab.mesh import build_coarse_mesh, build_fine_mesh
from msfemlab.problem import ProblemSpec, rhs_at
from msfemlab.legacy_fem import reference_solve
from msfemlab.msfem import (MethodConfig, offline, run_intrusive_galerkin,
                            run_nonintrusive)
from msfemlab.bench import (_as_broken, _broken_h1_sq, broken_h1_error,
                            fine_broken_field)
from msfemlab import _fem_core as core

spec = ProblemSpec(coefficient="laminate(1,4)", epsilon=1/64)
FINE = 512

t0 = time.perf_counter()
ref_mesh = build_coarse_mesh(FINE)
ref = reference_solve(ref_mesh, spec)
print(f"reference: {time.perf_counter()-t0:.1f}s")

f_nodal = rhs_at(spec, ref_mesh.vertices)
f_l2 = np.sqrt(float(np.sum(
    core.load_exact_p1(ref_mesh.areas, f_nodal[ref_mesh.triangles])
    * f_nodal[ref_mesh.triangles])))
print("||f||_L2 ~=", f_l2)

ref_broken = _as_broken(ref_mesh, ref)
abs_ref = float(np.sqrt(_broken_h1_sq(ref_mesh, ref_broken)))

rows = []
for n in (8, 16, 32):
    t0 = time.perf_counter()
    coarse = build_coarse_mesh(n)
    fine = build_fine_mesh(coarse, FINE // n)
    cfg_g = MethodConfig(space="lagrange", oversampling="none",
                         formulation="galerkin-intrusive")
    off = offline(coarse, fine, spec, cfg_g)
    t_off = time.perf_counter() - t0
    u_g = run_intrusive_galerkin(coarse, fine, spec, cfg_g, offline_data=off)
    u_pg = run_nonintrusive(coarse, fine, spec,
                            MethodConfig(space="lagrange", oversampling="none",
                                         formulation="pg"), offline_data=off)
    bg = fine_broken_field(fine, u_g.fields)
    bpg = fine_broken_field(fine, u_pg.fields)
    abs_diff, _ = broken_h1_error(bg, bpg, ref_mesh)
    rel = abs_diff / abs_ref
    ratio = rel / ((1.0 / n) * f_l2)
    rows.append((n, rel, ratio))
    print(f"H=1/{n:<3d} reldiff={rel:.6e} ratio={ratio:.4f} "
          f"(offline {t_off:.1f}s, total {time.perf_counter()-t0:.1f}s)")

for (n1, r1, q1), (n2, r2, q2) in zip(rows, rows[1:]):
    print(f"H=1/{n1}->1/{n2}: rel {r1:.3e}->{r2:.3e} "
          f"decreasing={r2 < r1}, ratio growth {q2/q1:.3f} (<2: {q2 < 2*q1})")
