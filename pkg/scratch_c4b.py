import time

import numpy as np

from msfemlab.mesh import build_coarse_mesh, build_fine_mesh
from msfemlab.problem import ProblemSpec
from msfemlab.local import build_correctors, element_domain
from msfemlab.effective import effective_pair
from msfemlab.homogenization import periodic_profile, solve_cell_problems

coarse = build_coarse_mesh(4)
interior = [k for k in range(coarse.num_triangles)
            if not coarse.vertex_is_boundary[coarse.triangles[k]].any()]
k_int = interior[0]
H = 1.0 / 4.0

for name in ("laminate(1,4)", "checkerboard(1,4)"):
    cell = solve_cell_problems(
        periodic_profile(ProblemSpec(coefficient=name, epsilon=1.0)), 256)
    A_star = cell.A_star
    nrm = np.linalg.norm(A_star)
    print(f"=== {name}  A* = {np.array2string(A_star, precision=6)}")
    for j in (1, 2, 3, 4):
        eps = H / 2 ** j
        r = 16 * 2 ** j
        t0 = time.perf_counter()
        fine = build_fine_mesh(coarse, r)
        spec = ProblemSpec(coefficient=name, epsilon=eps)
        cs = build_correctors(coarse, fine, k_int, spec, "lagrange", "none")
        dom = element_domain(coarse, fine, k_int)
        _, gal = effective_pair(dom, cs, spec)
        Abar = gal[3]
        gap = np.linalg.norm(Abar - A_star)
        dt = time.perf_counter() - t0
        print(f"  eps=H/{2**j:<3d} fine={4*r:<5d} gap_F={gap:.6f} "
              f"rel={gap/nrm:.4%}  ({dt:.1f}s)")
