"""End-to-end acceptance checks, one per shipped guarantee.

Every test prints a single [PASS]/[FAIL] line with the measured margins at
the guaranteed tolerance.  The heavyweight study grid (criteria 6 and 8)
is computed once in a module-scoped fixture and shared; everything else
runs at the smallest scale that exercises the stated guarantee.
"""

import math
import time

import numpy as np
import pytest

from msfemlab import cli
from msfemlab.bench import (
    _as_broken,
    _broken_h1_sq,
    broken_h1_error,
    fine_broken_field,
)
from msfemlab.effective import coercivity_check, effective_pair
from msfemlab.homogenization import periodic_profile, solve_cell_problems
from msfemlab.legacy_fem import (
    EffectiveCoefficients,
    assemble_macro,
    reference_solve,
    solve_macro,
)
from msfemlab.linalg import SingularMatrixError
from msfemlab.local import (
    CorrectorSet,
    GlueSingularError,
    build_correctors,
    build_patch,
    corrector_continuous,
    corrector_extended,
    dof_eval,
    element_domain,
    glue_matrix,
    multiscale_basis,
    patch_domain,
    restrict_to_element,
    sampling_matrix,
    solve_glue,
)
from msfemlab.mesh import build_coarse_mesh, build_fine_mesh
from msfemlab.msfem import (
    MethodConfig,
    OfflineData,
    offline,
    run_intrusive_galerkin,
    run_intrusive_pg,
    run_nonintrusive,
)
from msfemlab.problem import ProblemSpec, rhs_at

EPS_STUDY = math.pi / 50

_FORMULATIONS = (
    ("g", run_intrusive_galerkin, "galerkin-intrusive"),
    ("gni", run_nonintrusive, "galerkin-ni"),
    ("pg", run_nonintrusive, "pg"),
)


def _verdict(ok: bool, label: str) -> None:
    print(f"[{'PASS' if ok else 'FAIL'}] {label}", flush=True)
    assert ok, label


def _matrix_gap(candidate, anchor) -> float:
    """Largest entry difference relative to the anchor's largest entry."""
    a = candidate.toarray() if hasattr(candidate, "toarray") else candidate
    b = anchor.toarray() if hasattr(anchor, "toarray") else anchor
    return float(np.max(np.abs(a - b)) / np.max(np.abs(b)))


def _coefficient_table(rows, flavor: str) -> EffectiveCoefficients:
    return EffectiveCoefficients(
        Mbar=np.array([r[0] for r in rows]),
        B1=np.array([r[1] for r in rows]),
        B2=np.array([r[2] for r in rows]),
        Abar=np.array([r[3] for r in rows]),
        flavor=flavor)


def _offline_with_glue(coarse, fine, spec, space, oversampling, rho):
    """One offline pass that also reports each element's glue system margin.

    Returns (OfflineData, margins) where margins[k] = |det M| / ||M||^3 for
    the DOF-continuous glue matrix of element k (empty for other variants).
    """
    pg_rows, gal_rows, correctors, margins = [], [], [], []
    for k in range(coarse.num_triangles):
        dom = element_domain(coarse, fine, k)
        if oversampling == "continuous":
            patch = build_patch(coarse, fine, k, rho)
            pdom = patch_domain(coarse, patch)
            ext = corrector_extended(pdom, spec, space, "full")
            M = glue_matrix(dom, restrict_to_element(patch, ext), space)
            margins.append(abs(np.linalg.det(M)) / np.linalg.norm(M) ** 3)
            glued = corrector_continuous(patch, dom, ext, space)
            cs = CorrectorSet(owner=k, space=space, variant="continuous",
                              fields=restrict_to_element(patch, glued))
        else:
            cs = build_correctors(coarse, fine, k, spec, space, oversampling,
                                  rho=rho)
        pg_row, gal_row = effective_pair(dom, cs, spec)
        pg_rows.append(pg_row)
        gal_rows.append(gal_row)
        correctors.append(cs)
    off = OfflineData(correctors=correctors,
                      pg=_coefficient_table(pg_rows, "pg"),
                      galerkin=_coefficient_table(gal_rows, "galerkin"))
    return off, np.array(margins)


# ---------------------------------------------------------------------------
# shared computations


@pytest.fixture(scope="module")
def ident_scale():
    """Matrix-identity scale: periodic coefficient, coarse n=8, fine 256."""
    spec = ProblemSpec(coefficient="periodic", epsilon=EPS_STUDY)
    coarse = build_coarse_mesh(8)
    fine = build_fine_mesh(coarse, 32)
    fmesh = build_coarse_mesh(256)
    off = {space: offline(coarse, fine, spec, MethodConfig(space=space))
           for space in ("lagrange", "cr")}
    return coarse, fine, fmesh, spec, off


@pytest.fixture(scope="module")
def cell_oracles():
    """Homogenized tensors from the periodic cell solver at resolution 256."""
    out = {}
    for name in ("laminate(1,4)", "checkerboard(1,4)", "constant(1)"):
        spec = ProblemSpec(coefficient=name, epsilon=1.0)
        out[name] = solve_cell_problems(periodic_profile(spec), 256).A_star
    return out


@pytest.fixture(scope="module")
def desk_grid():
    """The full study grid shared by criteria 6 and 8.

    Periodic coefficient at the desk scale (epsilon = pi/50, fine 512),
    both spaces, with and without DOF-continuous oversampling (rho = 3),
    all three formulations, coarse n in {4, 8, 16, 32, 64}.  Collects the
    relative broken-H1 error of every run against one fine reference and
    the glue-system margins of every oversampled element.
    """
    spec = ProblemSpec(coefficient="periodic", epsilon=EPS_STUDY)
    t0 = time.perf_counter()
    ref_mesh = build_coarse_mesh(512)
    ref_broken = _as_broken(ref_mesh, reference_solve(ref_mesh, spec))
    abs_ref = math.sqrt(_broken_h1_sq(ref_mesh, ref_broken))
    print(f"\n[desk] reference 512^2 solved in {time.perf_counter()-t0:.0f}s",
          flush=True)

    errors, glue_margins = {}, {}
    for n in (4, 8, 16, 32, 64):
        coarse = build_coarse_mesh(n)
        fine = build_fine_mesh(coarse, 512 // n)
        for space in ("lagrange", "cr"):
            for oversampling in ("none", "continuous"):
                rho = 3.0 if oversampling == "continuous" else 1.0
                t0 = time.perf_counter()
                off, margins = _offline_with_glue(
                    coarse, fine, spec, space, oversampling, rho)
                if oversampling == "continuous":
                    glue_margins[(space, n)] = margins
                for form, runner, token in _FORMULATIONS:
                    sol = runner(coarse, fine, spec,
                                 MethodConfig(space=space,
                                              oversampling=oversampling,
                                              rho=rho, formulation=token),
                                 offline_data=off)
                    abs_err, _ = broken_h1_error(
                        fine_broken_field(fine, sol.fields), ref_broken,
                        ref_mesh)
                    errors[(space, oversampling, n, form)] = abs_err / abs_ref
                print(f"[desk] {space}:{oversampling} n={n} done in "
                      f"{time.perf_counter()-t0:.0f}s", flush=True)
    return errors, glue_margins


# ---------------------------------------------------------------------------
# criteria


def test_criterion_1_matrix_identities(ident_scale):
    coarse, fine, fmesh, spec, off = ident_scale
    worst = {"pg_vs_effective": 0.0, "gni_vs_pg_matrix": 0.0,
             "solution_gap": 0.0, "specialization": 0.0}
    for space in ("lagrange", "cr"):
        o = off[space]
        load = lambda x: rhs_at(spec, x)

        # (a) the intrusive Petrov-Galerkin matrix is the legacy assembly of
        # the effective coefficients under the centroid rule
        ip = run_intrusive_pg(coarse, fine, spec,
                              MethodConfig(space=space, formulation="pg"),
                              offline_data=o)
        legacy_pg = assemble_macro(coarse, space, o.pg, load)
        worst["pg_vs_effective"] = max(worst["pg_vs_effective"],
                                       _matrix_gap(ip.matrix, legacy_pg.matrix))

        # (b) without oversampling both coefficient flavors assemble the same
        # macro system and the two non-intrusive solutions coincide
        legacy_gal = assemble_macro(coarse, space, o.galerkin, load)
        worst["gni_vs_pg_matrix"] = max(
            worst["gni_vs_pg_matrix"],
            _matrix_gap(legacy_gal.matrix, legacy_pg.matrix))
        sol_pg = run_nonintrusive(coarse, fine, spec,
                                  MethodConfig(space=space, formulation="pg"),
                                  offline_data=o)
        sol_gni = run_nonintrusive(coarse, fine, spec,
                                   MethodConfig(space=space,
                                                formulation="galerkin-ni"),
                                   offline_data=o)
        _, rel = broken_h1_error(fine_broken_field(fine, sol_gni.fields),
                                 fine_broken_field(fine, sol_pg.fields), fmesh)
        worst["solution_gap"] = max(worst["solution_gap"], rel)

        # (c) per element, the general Galerkin table specializes to the
        # plain corrected-gradient energy pairing in the diffusion case
        for k in range(coarse.num_triangles):
            dom = element_domain(coarse, fine, k)
            S = sampling_matrix(dom, spec, "full")
            V = o.correctors[k].fields
            c = dom.centroid
            W = np.stack([V[1] + (dom.points[:, 0] - c[0]),
                          V[2] + (dom.points[:, 1] - c[1])])
            pair = np.array([[W[b] @ S.matvec(W[a]) for a in range(2)]
                             for b in range(2)]) / dom.areas.sum()
            gap = np.max(np.abs(pair - o.galerkin.Abar[k]))
            worst["specialization"] = max(worst["specialization"], float(gap))

    ok = (worst["pg_vs_effective"] <= 1e-10
          and worst["gni_vs_pg_matrix"] <= 1e-10
          and worst["solution_gap"] <= 1e-9
          and worst["specialization"] <= 1e-12)
    _verdict(ok, "criterion 1, matrix identities: "
                 f"PG vs effective {worst['pg_vs_effective']:.2e} (<=1e-10), "
                 f"G-ni vs PG matrix {worst['gni_vs_pg_matrix']:.2e} (<=1e-10), "
                 f"solutions {worst['solution_gap']:.2e} (<=1e-9), "
                 f"table specialization {worst['specialization']:.2e} (<=1e-12)")


def test_criterion_2_coercivity_floor():
    spec = ProblemSpec(coefficient="periodic", epsilon=EPS_STUDY)
    assert spec.m == 1.0
    coarse = build_coarse_mesh(16)
    fine = build_fine_mesh(coarse, 16)
    floors = {}
    for label, kw in (("lin:none", dict(space="lagrange")),
                      ("cr:none", dict(space="cr")),
                      ("cr:continuous", dict(space="cr",
                                             oversampling="continuous",
                                             rho=3.0))):
        off = offline(coarse, fine, spec, MethodConfig(**kw))
        report = coercivity_check(off.galerkin, spec.m)
        floors[label] = float(report.min_eigs.min())
    ok = all(v >= 1.0 - 1e-8 for v in floors.values())
    _verdict(ok, "criterion 2, coercivity floor >= 1 - 1e-8: "
             + ", ".join(f"{k} min-eig {v:.9f}" for k, v in floors.items()))


def test_criterion_3_homogenization_oracles(cell_oracles):
    lam = cell_oracles["laminate(1,4)"]
    lam_exact = np.diag([1.6, 2.5])
    lam_err = np.linalg.norm(lam - lam_exact) / np.linalg.norm(lam_exact)

    chk = cell_oracles["checkerboard(1,4)"]
    chk_exact = 2.0 * np.eye(2)
    chk_err = np.linalg.norm(chk - chk_exact) / np.linalg.norm(chk_exact)

    ident = cell_oracles["constant(1)"]
    ident_err = float(np.max(np.abs(ident - np.eye(2))))

    ok = lam_err <= 0.01 and chk_err <= 0.02 and ident_err <= 1e-10
    _verdict(ok, "criterion 3, homogenized tensors at cell 256: "
                 f"laminate {lam_err:.2%} (<=1%), "
                 f"checkerboard {chk_err:.2%} (<=2%), "
                 f"identity {ident_err:.2e} (<=1e-10)")


def test_criterion_4_effective_tensor_converges_to_homogenized(cell_oracles):
    A_star = cell_oracles["laminate(1,4)"]
    nrm = np.linalg.norm(A_star)
    coarse = build_coarse_mesh(4)
    interior = [k for k in range(coarse.num_triangles)
                if not coarse.vertex_is_boundary[coarse.triangles[k]].any()]
    k_int = interior[0]
    H = 0.25

    gaps = []
    for j in (1, 2, 3, 4):
        eps = H / 2 ** j               # the element spans 2^j full periods
        fine = build_fine_mesh(coarse, 16 * 2 ** j)
        spec = ProblemSpec(coefficient="laminate(1,4)", epsilon=eps)
        cs = build_correctors(coarse, fine, k_int, spec, "lagrange", "none")
        _, gal = effective_pair(element_domain(coarse, fine, k_int), cs, spec)
        gaps.append(float(np.linalg.norm(gal[3] - A_star)))

    decreasing = all(b < a for a, b in zip(gaps, gaps[1:]))
    final_rel = gaps[-1] / nrm
    ok = decreasing and final_rel <= 0.05
    _verdict(ok, "criterion 4, effective tensor -> homogenized tensor: gaps "
             + " > ".join(f"{g:.4f}" for g in gaps)
             + f" (strictly decreasing: {decreasing}), "
               f"final {final_rel:.2%} of ||A*|| (<=5%)")


def test_criterion_5_galerkin_pg_gap_shrinks_with_h():
    spec = ProblemSpec(coefficient="laminate(1,4)", epsilon=1.0 / 64.0)
    ref_mesh = build_coarse_mesh(512)
    ref_broken = _as_broken(ref_mesh, reference_solve(ref_mesh, spec))
    abs_ref = math.sqrt(_broken_h1_sq(ref_mesh, ref_broken))

    f_nodal = rhs_at(spec, ref_mesh.vertices)
    from msfemlab import _fem_core as core
    f_l2 = math.sqrt(float(np.sum(
        core.load_exact_p1(ref_mesh.areas, f_nodal[ref_mesh.triangles])
        * f_nodal[ref_mesh.triangles])))

    rels, ratios = [], []
    for n in (8, 16, 32):
        coarse = build_coarse_mesh(n)
        fine = build_fine_mesh(coarse, 512 // n)
        off = offline(coarse, fine, spec, MethodConfig(space="lagrange"))
        u_g = run_intrusive_galerkin(
            coarse, fine, spec,
            MethodConfig(formulation="galerkin-intrusive"), offline_data=off)
        u_pg = run_nonintrusive(coarse, fine, spec,
                                MethodConfig(formulation="pg"),
                                offline_data=off)
        abs_diff, _ = broken_h1_error(fine_broken_field(fine, u_g.fields),
                                      fine_broken_field(fine, u_pg.fields),
                                      ref_mesh)
        rels.append(abs_diff / abs_ref)
        ratios.append(rels[-1] / ((1.0 / n) * f_l2))

    decreasing = all(b < a for a, b in zip(rels, rels[1:]))
    growth = max(b / a for a, b in zip(ratios, ratios[1:]))
    ok = decreasing and growth <= 2.0
    _verdict(ok, "criterion 5, G vs PG gap over H=1/8,1/16,1/32: relative "
             + " > ".join(f"{r:.2e}" for r in rels)
             + f" (decreasing: {decreasing}), "
               f"max ratio growth {growth:.3f}x (<=2x)")


def test_criterion_6_study_reproduction_at_desk_scale(desk_grid):
    errors, _ = desk_grid
    sizes = (4, 8, 16, 32, 64)
    combos = [(s, o) for s in ("lagrange", "cr")
              for o in ("none", "continuous")]

    worst_dev, worst_key = 0.0, None
    for space, oversampling in combos:
        for n in sizes:
            e_g = errors[(space, oversampling, n, "g")]
            e_gni = errors[(space, oversampling, n, "gni")]
            dev = abs(e_gni - e_g) / e_g
            if dev > worst_dev:
                worst_dev, worst_key = dev, (space, oversampling, n)

    plateau_ok = True
    plateau_bad = []
    for space, oversampling in combos:
        for form in ("g", "gni", "pg"):
            near_eps = errors[(space, oversampling, 16, form)]
            smallest = errors[(space, oversampling, 64, form)]
            if not near_eps >= smallest:
                plateau_ok = False
                plateau_bad.append((space, oversampling, form))

    ok = worst_dev <= 0.05 and plateau_ok
    _verdict(ok, "criterion 6, desk-scale study: worst G-ni vs G deviation "
                 f"{worst_dev:.2%} at {worst_key} (<=5%), "
                 f"plateau err(H=1/16) >= err(H=1/64) for all 12 curves: "
                 f"{plateau_ok}"
             + (f" (violated by {plateau_bad})" if plateau_bad else ""))


def test_criterion_7_triviality_suite():
    # constant coefficient: the method collapses to plain P1
    spec_c = ProblemSpec(coefficient="constant(2,1)", epsilon=1.0, f="one")
    coarse = build_coarse_mesh(8)
    fine = build_fine_mesh(coarse, 8)
    A_exact = np.diag([2.0, 1.0])

    worst_corr = worst_table = worst_zero = worst_collapse = 0.0
    for space in ("lagrange", "cr"):
        for oversampling, rho in (("none", 1.0), ("continuous", 3.0)):
            off = offline(coarse, fine, spec_c,
                          MethodConfig(space=space, oversampling=oversampling,
                                       rho=rho))
            worst_corr = max(worst_corr, max(
                float(np.max(np.abs(cs.fields))) for cs in off.correctors))
            for table in (off.pg, off.galerkin):
                worst_table = max(worst_table, float(
                    np.max(np.abs(table.Abar - A_exact))))
                worst_zero = max(worst_zero,
                                 float(np.max(np.abs(table.Mbar))),
                                 float(np.max(np.abs(table.B1))),
                                 float(np.max(np.abs(table.B2))))

        # every formulation reproduces the legacy P1 solution (constant f
        # keeps every load rule exact, so even the intrusive Galerkin load
        # coincides); the sine load covers the shared-load pipelines
        table = EffectiveCoefficients.constant(coarse.num_triangles,
                                               Abar=A_exact)
        off0 = offline(coarse, fine, spec_c, MethodConfig(space=space))
        for f_name in ("one", "sine"):
            spec_f = ProblemSpec(coefficient="constant(2,1)", epsilon=1.0,
                                 f=f_name)
            legacy = solve_macro(assemble_macro(
                coarse, space, table, lambda x: rhs_at(spec_f, x)))
            runs = _FORMULATIONS if f_name == "one" else _FORMULATIONS[1:]
            for form, runner, token in runs:
                sol = runner(coarse, fine, spec_f,
                             MethodConfig(space=space, formulation=token),
                             offline_data=off0)
                gap = float(np.max(np.abs(sol.dofs - legacy.dofs)))
                worst_collapse = max(worst_collapse, gap)

    # partition of unity and face-average continuity with a genuinely
    # oscillating coefficient
    spec_p = ProblemSpec(coefficient="periodic", epsilon=0.09)
    coarse_p = build_coarse_mesh(4)
    fine_p = build_fine_mesh(coarse_p, 16)
    worst_pu = worst_jump = 0.0
    for oversampling, rho in (("none", 1.0), ("continuous", 2.0)):
        off_lin = offline(coarse_p, fine_p, spec_p,
                          MethodConfig(space="lagrange",
                                       oversampling=oversampling, rho=rho))
        off_cr = offline(coarse_p, fine_p, spec_p,
                         MethodConfig(space="cr", oversampling=oversampling,
                                      rho=rho))
        for k in range(coarse_p.num_triangles):
            dom = element_domain(coarse_p, fine_p, k)
            total = sum(multiscale_basis(dom, off_lin.correctors[k], i)
                        for i in range(3))
            worst_pu = max(worst_pu, float(np.max(np.abs(total - 1.0))))
            for i in range(3):
                basis = multiscale_basis(dom, off_cr.correctors[k], i)
                averages = dof_eval("cr", dom, basis)
                target = np.zeros(3)
                target[i] = 1.0
                worst_jump = max(worst_jump,
                                 float(np.max(np.abs(averages - target))))

    ok = (worst_corr <= 1e-12 and worst_table <= 1e-10
          and worst_zero == 0.0 and worst_collapse <= 1e-10
          and worst_pu <= 1e-9 and worst_jump <= 1e-9)
    _verdict(ok, "criterion 7, triviality suite: correctors "
                 f"{worst_corr:.2e} (<=1e-12), effective table "
                 f"{worst_table:.2e} (<=1e-10), lower-order blocks "
                 f"{worst_zero:.2e} (exact 0), P1 collapse "
                 f"{worst_collapse:.2e} (<=1e-10), partition of unity "
                 f"{worst_pu:.2e} (<=1e-9), CR face averages "
                 f"{worst_jump:.2e} (<=1e-9)")


def test_criterion_8_glue_system_margins(desk_grid):
    _, glue_margins = desk_grid
    worst_margin, worst_key = math.inf, None
    checked = 0
    for key, margins in glue_margins.items():
        checked += margins.size
        low = float(margins.min())
        if low < worst_margin:
            worst_margin, worst_key = low, key

    with pytest.raises(GlueSingularError):
        solve_glue(np.ones((3, 3)), np.eye(3))

    ok = worst_margin >= 1e-8 and checked > 0
    _verdict(ok, f"criterion 8, glue systems: {checked} elements across "
                 f"{len(glue_margins)} oversampled configs, worst "
                 f"|det|/||M||^3 = {worst_margin:.2e} at {worst_key} "
                 f"(>=1e-8); singular glue matrix raises")


def test_criterion_9_sweep_determinism_across_threads(tmp_path):
    cfg = tmp_path / "study.cfg"
    cfg.write_text(
        "coefficient = periodic\n"
        "epsilon = 0.5\n"
        "f = sine\n"
        "coarse = 2, 4\n"
        "fine = 32\n"
        "methods = lin:none:pg, lin:none:g, cr:continuous:gni\n"
        "rho = 2.0\n"
        "timings = none\n")
    outputs = []
    for i, threads in enumerate((1, 1, 8)):
        out = tmp_path / f"run{i}.csv"
        code = cli.main(["sweep", "--config", str(cfg),
                         "--threads", str(threads), "--out", str(out)])
        assert code == 0
        outputs.append(out.read_bytes())
    ok = outputs[0] == outputs[1] == outputs[2]
    _verdict(ok, "criterion 9, sweep determinism: repeated runs and "
                 f"--threads 1 vs 8 byte-identical CSV ({len(outputs[0])} "
                 f"bytes): {ok}")
