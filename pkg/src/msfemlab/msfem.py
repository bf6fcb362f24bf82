"""End-to-end method drivers.

The offline stage builds correctors and effective coefficients for every
coarse element.  Three online formulations consume them:

* ``run_nonintrusive`` condenses everything into per-element effective
  coefficients and hands the resulting P1 problem to the legacy assembly and
  solver; the fine-scale field is reconstructed afterwards from the exported
  centroid values and gradients.  This path never touches the multiscale
  assembly below.
* ``run_intrusive_galerkin`` assembles the coarse system directly in the
  multiscale basis (both trial and test), the classical intrusive method.
* ``run_intrusive_pg`` uses the multiscale basis for the trial space but P1
  test functions; it reproduces the non-intrusive PG solution and exists
  mainly to validate the matrix identities the condensation relies on.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import _fem_core as core
from .effective import effective_pair
from .legacy_fem import (
    _DENSE_LIMIT,
    CoarseSolution,
    EffectiveCoefficients,
    assemble_macro,
    solve_macro,
)
from .linalg import (
    SingularMatrixError,
    SparseMatrix,
    bicgstab_solve,
    cg_solve,
    csr_from_triplets,
    dense_lu_solve,
)
from .local import (
    OVERSAMPLING,
    CorrectorSet,
    _is_symmetric_form,
    _p1_basis_on_points,
    build_correctors,
    element_domain,
    multiscale_basis,
    sampling_matrix,
)
from .mesh import CoarseMesh, FineMesh
from .problem import ProblemSpec, rhs_at

__all__ = [
    "MethodConfig",
    "MultiscaleSolution",
    "OfflineData",
    "OfflineError",
    "offline",
    "postprocess",
    "run_intrusive_galerkin",
    "run_intrusive_pg",
    "run_nonintrusive",
    "system_matrix",
]

FORMULATIONS = ("galerkin-intrusive", "pg", "galerkin-ni")
_SPACE_ALIASES = {"lin": "lagrange", "lagrange": "lagrange", "cr": "cr"}
_COND_LIMIT = 1e14


@dataclass(frozen=True)
class MethodConfig:
    """A fully specified method: space, oversampling, formulation, sampling.

    ``space`` accepts ``lin`` as an alias for ``lagrange``.  No oversampling
    forces ``rho`` = 1; the extended and continuous variants require a
    genuine dilation ``rho`` > 1.
    """

    space: str = "lagrange"
    oversampling: str = "none"
    rho: float = 1.0
    formulation: str = "pg"
    sampling: str = "full"

    def __post_init__(self):
        space = _SPACE_ALIASES.get(str(self.space).lower())
        if space is None:
            raise ValueError(f"unknown space: {self.space!r}")
        object.__setattr__(self, "space", space)
        if self.oversampling not in OVERSAMPLING:
            raise ValueError(f"unknown oversampling mode: {self.oversampling!r}")
        if self.formulation not in FORMULATIONS:
            raise ValueError(f"unknown formulation: {self.formulation!r}")
        if self.sampling not in ("full", "diffusion"):
            raise ValueError(f"unknown sampling form: {self.sampling!r}")
        rho = float(self.rho)
        object.__setattr__(self, "rho", rho)
        if self.oversampling == "none":
            if abs(rho - 1.0) > 1e-12:
                raise ValueError("oversampling 'none' requires rho = 1")
        elif rho <= 1.0 + 1e-12:
            raise ValueError(
                f"oversampling '{self.oversampling}' requires rho > 1")


@dataclass
class OfflineData:
    """Per-element correctors plus both effective coefficient flavors."""

    correctors: list
    pg: EffectiveCoefficients
    galerkin: EffectiveCoefficients


class OfflineError(RuntimeError):
    """Aggregated per-element failures from the offline stage."""

    def __init__(self, failures):
        self.failures = list(failures)
        ids = ", ".join(str(k) for k, _ in self.failures[:8])
        more = "" if len(self.failures) <= 8 else ", ..."
        first = self.failures[0][1]
        super().__init__(
            f"{len(self.failures)} element(s) failed in the offline stage "
            f"(ids {ids}{more}); first error: {first!r}")


@dataclass
class MultiscaleSolution:
    """A broken fine-mesh field with its provenance and assembly artifacts."""

    config: Optional[MethodConfig]
    fields: np.ndarray                       # (T, nodes per element)
    coarse: Optional[CoarseSolution] = None  # companion legacy solve, if any
    matrix: Optional[SparseMatrix] = None    # interior system of the run
    rhs: Optional[np.ndarray] = None
    interior: Optional[np.ndarray] = None
    n_dofs: int = 0
    dofs: Optional[np.ndarray] = None        # full DOF vector, boundary zeros


def offline(coarse: CoarseMesh, fine: FineMesh, spec: ProblemSpec,
            cfg: MethodConfig, threads: int = 1) -> OfflineData:
    """Solve all local problems and condense both coefficient flavors.

    The per-element work is independent; with ``threads`` > 1 it runs on a
    thread pool and the results are merged in element order, so the output
    is identical regardless of schedule.  Per-element failures are collected
    and raised together with their element ids.
    """
    T = coarse.num_triangles

    def work(k):
        dom = element_domain(coarse, fine, k)
        cs = build_correctors(coarse, fine, k, spec, cfg.space,
                              cfg.oversampling, rho=cfg.rho,
                              sampling=cfg.sampling)
        pg_row, gal_row = effective_pair(dom, cs, spec)
        return cs, pg_row, gal_row

    def safe(k):
        try:
            return work(k)
        except Exception as exc:  # aggregated below, with element ids
            return exc

    if threads and int(threads) > 1:
        with ThreadPoolExecutor(max_workers=int(threads)) as pool:
            results = list(pool.map(safe, range(T)))
    else:
        results = [safe(k) for k in range(T)]

    failures = [(k, r) for k, r in enumerate(results) if isinstance(r, Exception)]
    if failures:
        raise OfflineError(failures)

    correctors = [r[0] for r in results]

    def table(rows, flavor):
        return EffectiveCoefficients(
            Mbar=np.array([r[0] for r in rows]),
            B1=np.array([r[1] for r in rows]),
            B2=np.array([r[2] for r in rows]),
            Abar=np.array([r[3] for r in rows]),
            flavor=flavor)

    return OfflineData(correctors=correctors,
                       pg=table([r[1] for r in results], "pg"),
                       galerkin=table([r[2] for r in results], "galerkin"))


def postprocess(coarse: CoarseMesh, fine: FineMesh, macro: CoarseSolution,
                correctors, config: Optional[MethodConfig] = None
                ) -> MultiscaleSolution:
    """Reconstruct the fine-scale field from legacy exports, element by element.

    Uses only the centroid value and gradient of the coarse solution:
    u_c (1 + V0) + g . (x - xc) + g1 V1 + g2 V2 on each element's fine nodes.
    """
    F = np.stack([np.asarray(cs.fields) for cs in correctors])   # (T, 3, n)
    pts = fine.vertices[fine.sub_nodes]                          # (T, n, 2)
    rel = pts - coarse.centroids[:, None, :]
    u_c = macro.u_centroid[:, None]
    g = macro.grad
    fields = (u_c * (1.0 + F[:, 0, :])
              + np.einsum("tna,ta->tn", rel, g)
              + g[:, 0, None] * F[:, 1, :]
              + g[:, 1, None] * F[:, 2, :])
    return MultiscaleSolution(config=config, fields=fields, coarse=macro)


def run_nonintrusive(coarse: CoarseMesh, fine: FineMesh, spec: ProblemSpec,
                     cfg: MethodConfig, threads: int = 1,
                     offline_data: Optional[OfflineData] = None
                     ) -> MultiscaleSolution:
    """Offline condensation, legacy online solve, fine-scale reconstruction."""
    if cfg.formulation not in ("pg", "galerkin-ni"):
        raise ValueError(
            f"non-intrusive pipeline cannot run formulation {cfg.formulation!r}")
    off = offline_data if offline_data is not None \
        else offline(coarse, fine, spec, cfg, threads)
    coeffs = off.pg if cfg.formulation == "pg" else off.galerkin
    system = assemble_macro(coarse, cfg.space, coeffs, lambda x: rhs_at(spec, x),
                            quadrature="centroid")
    macro = solve_macro(system)
    sol = postprocess(coarse, fine, macro, off.correctors, cfg)
    sol.matrix = system.matrix
    sol.rhs = system.rhs
    sol.interior = system.interior
    sol.n_dofs = system.n_dofs
    sol.dofs = macro.dofs
    return sol


# ---------------------------------------------------------------------------
# intrusive assembly (the path non-intrusive runs must never need)


def _space_layout(coarse: CoarseMesh, space: str):
    if space == "lagrange":
        return coarse.triangles, coarse.num_vertices, coarse.vertex_is_boundary
    return coarse.element_faces, len(coarse.faces), coarse.face_is_boundary


def _coarse_p1_load(coarse: CoarseMesh, spec: ProblemSpec, space: str):
    """Exact integration of the coarse P1 interpolant of f, as a legacy
    code would compute its load vector."""
    f_elem = rhs_at(spec, coarse.vertices)[coarse.triangles]
    if space == "lagrange":
        return core.load_exact_p1(coarse.areas, f_elem)
    return core.load_exact_p1_cr(coarse.areas, f_elem)


def _assemble_intrusive(coarse, fine, spec, cfg, off, petrov: bool):
    """Assemble the global multiscale system.

    Trial functions are always the multiscale basis; tests are P1 basis
    functions when ``petrov`` and the multiscale basis otherwise.  Returns
    (matrix, rhs, interior, n_dofs, basis fields per element).
    """
    dof_map, n_dofs, boundary = _space_layout(coarse, cfg.space)
    T = coarse.num_triangles
    f_fine = rhs_at(spec, fine.vertices)
    coarse_load = _coarse_p1_load(coarse, spec, cfg.space) if petrov else None

    local = np.empty((T, 3, 3))
    loads = np.empty((T, 3))
    basis = np.empty((T, 3, fine.nodes_per_element))
    for k in range(T):
        dom = element_domain(coarse, fine, k)
        S = sampling_matrix(dom, spec, "full")
        cs = off.correctors[k]
        Phi = np.vstack([multiscale_basis(dom, cs, i) for i in range(3)])
        basis[k] = Phi
        SPhi = np.column_stack([S.matvec(Phi[i]) for i in range(3)])
        if petrov:
            lam = _p1_basis_on_points(dom.points[dom.corner_ids], dom.points)
            tests = lam if cfg.space == "lagrange" else 1.0 - 2.0 * lam
            loads[k] = coarse_load[k]
        else:
            tests = Phi
            elem_load = core.load_exact_p1(dom.areas,
                                           f_fine[fine.sub_nodes[k]][dom.triangles])
            nodal = np.zeros(dom.num_points)
            np.add.at(nodal, dom.triangles, elem_load)
            loads[k] = Phi @ nodal
        local[k] = tests @ SPhi     # [i, j] = a(phi_j, test_i)

    rhs = np.zeros(n_dofs)
    np.add.at(rhs, dof_map, loads)
    rows, cols, vals = core.scatter_triplets(dof_map, local)
    rows, cols, vals, rhs_in, keep = core.interior_system(
        rows, cols, vals, rhs, ~boundary)
    matrix = csr_from_triplets(len(keep), (rows, cols, vals))
    return matrix, rhs_in, keep, n_dofs, basis


def _solve_assembled(matrix, rhs, *, symmetric: bool, check_condition: bool):
    n = matrix.shape[0]
    if n <= _DENSE_LIMIT:
        dense = matrix.toarray()
        if check_condition:
            cond = float(np.linalg.cond(dense))
            if not np.isfinite(cond) or cond > _COND_LIMIT:
                raise SingularMatrixError(
                    f"global multiscale system is numerically singular "
                    f"(condition estimate {cond:.3e})")
        return dense_lu_solve(dense, rhs)
    if symmetric:
        return cg_solve(matrix, rhs, tol=1e-12)
    return bicgstab_solve(matrix, rhs, tol=1e-12)


def _run_intrusive(coarse, fine, spec, cfg, threads, offline_data, petrov):
    off = offline_data if offline_data is not None \
        else offline(coarse, fine, spec, cfg, threads)
    matrix, rhs, interior, n_dofs, basis = _assemble_intrusive(
        coarse, fine, spec, cfg, off, petrov)
    symmetric = (not petrov) and _is_symmetric_form(spec, "full")
    inner = _solve_assembled(
        matrix, rhs, symmetric=symmetric,
        check_condition=(cfg.oversampling == "extended"))
    dofs = np.zeros(n_dofs)
    dofs[interior] = inner
    dof_map, _, _ = _space_layout(coarse, cfg.space)
    coeff = dofs[dof_map]                                    # (T, 3)
    fields = np.einsum("ti,tin->tn", coeff, basis)
    return MultiscaleSolution(config=cfg, fields=fields, coarse=None,
                              matrix=matrix, rhs=rhs, interior=interior,
                              n_dofs=n_dofs, dofs=dofs)


def run_intrusive_galerkin(coarse: CoarseMesh, fine: FineMesh,
                           spec: ProblemSpec, cfg: MethodConfig,
                           threads: int = 1,
                           offline_data: Optional[OfflineData] = None
                           ) -> MultiscaleSolution:
    """Galerkin method in the multiscale basis (trial and test)."""
    if cfg.formulation != "galerkin-intrusive":
        raise ValueError(
            f"expected formulation 'galerkin-intrusive', got {cfg.formulation!r}")
    return _run_intrusive(coarse, fine, spec, cfg, threads, offline_data,
                          petrov=False)


def run_intrusive_pg(coarse: CoarseMesh, fine: FineMesh, spec: ProblemSpec,
                     cfg: MethodConfig, threads: int = 1,
                     offline_data: Optional[OfflineData] = None
                     ) -> MultiscaleSolution:
    """Petrov-Galerkin method: multiscale trial space, P1 test space.

    The load is the coarse P1 load vector, matching what the legacy code
    assembles, so this run is directly comparable to the non-intrusive PG
    pipeline.
    """
    if cfg.formulation != "pg":
        raise ValueError(f"expected formulation 'pg', got {cfg.formulation!r}")
    return _run_intrusive(coarse, fine, spec, cfg, threads, offline_data,
                          petrov=True)


def system_matrix(run: MultiscaleSolution) -> SparseMatrix:
    """The assembled interior system of a completed run."""
    if run.matrix is None:
        raise ValueError("this solution does not carry an assembled system")
    return run.matrix
