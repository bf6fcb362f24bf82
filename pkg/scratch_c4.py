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
print("interior elements:", interior, "-> using", k_int)
print("vertices:", coarse.vertices[coarse.triangles[k_int]].tolist())

cell = solve_cell_problems(periodic_profile(ProblemSpec(coefficient="periodic",
                                                        epsilon=1.0)), 256)
A_star = cell.A_star
print("A* (cell 256):\n", A_star)
nrm = np.linalg.norm(A_star)

H = 1.0 / 4.0
for cpp in (16,):
    print(f"--- cells per period = {cpp}")
    for j in (1, 2, 3, 4):
        eps = H / 2 ** j
        r = cpp * 2 ** j
        t0 = time.perf_counter()
        fine = build_fine_mesh(coarse, r)
        spec = ProblemSpec(coefficient="periodic", epsilon=eps)
        cs = build_correctors(coarse, fine, k_int, spec, "lagrange", "none")
        dom = element_domain(coarse, fine, k_int)
        _, gal = effective_pair(dom, cs, spec)
        Abar = gal[3]
        gap = np.linalg.norm(Abar - A_star)
        dt = time.perf_counter() - t0
        print(f"eps=H/{2**j:<3d} r={r:<4d} fine={4*r:<5d} "
              f"gap_F={gap:.6f} rel={gap/nrm:.4%}  ({dt:.1f}s)")
        print("   Abar =", np.array2string(Abar, precision=5))
