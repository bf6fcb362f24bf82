import sys
import time

import numpy as np

from msfemlab.mesh import build_coarse_mesh, build_fine_mesh
from msfemlab.problem import ProblemSpec
from msfemlab.legacy_fem import reference_solve
from msfemlab.msfem import (MethodConfig, offline, run_intrusive_galerkin,
                            run_nonintrusive)
from msfemlab.bench import (_as_broken, _broken_h1_sq, broken_h1_error,
                            fine_broken_field)

spec = ProblemSpec(coefficient="periodic", epsilon=np.pi / 50)
FINE = 512

t0 = time.perf_counter()
ref_mesh = build_coarse_mesh(FINE)
ref_broken = _as_broken(ref_mesh, reference_solve(ref_mesh, spec))
abs_ref = float(np.sqrt(_broken_h1_sq(ref_mesh, ref_broken)))
print(f"reference: {time.perf_counter()-t0:.1f}s", flush=True)

cases = [(space, os_, int(n))
         for space in sys.argv[1].split(",")
         for os_ in sys.argv[2].split(",")
         for n in sys.argv[3].split(",")]

for space, os_, n in cases:
    rho = 3.0 if os_ != "none" else 1.0
    t0 = time.perf_counter()
    coarse = build_coarse_mesh(n)
    fine = build_fine_mesh(coarse, FINE // n)
    off = offline(coarse, fine, spec,
                  MethodConfig(space=space, oversampling=os_, rho=rho))
    t_off = time.perf_counter() - t0
    errs = {}
    for form, runner in (("g", run_intrusive_galerkin),
                         ("gni", run_nonintrusive), ("pg", run_nonintrusive)):
        f = {"g": "galerkin-intrusive", "gni": "galerkin-ni", "pg": "pg"}[form]
        cfg = MethodConfig(space=space, oversampling=os_, rho=rho,
                           formulation=f)
        sol = runner(coarse, fine, spec, cfg, offline_data=off)
        broken = fine_broken_field(fine, sol.fields)
        abs_err, _ = broken_h1_error(broken, ref_broken, ref_mesh)
        errs[form] = abs_err / abs_ref
    dev = abs(errs["gni"] - errs["g"]) / errs["g"]
    print(f"{space}:{os_}:n={n:<3d} err_g={errs['g']:.6f} "
          f"err_gni={errs['gni']:.6f} err_pg={errs['pg']:.6f} "
          f"dev={dev:.4%}  (offline {t_off:.1f}s, "
          f"total {time.perf_counter()-t0:.1f}s)", flush=True)
