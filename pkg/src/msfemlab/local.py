"""Local degree-of-freedom operators and the numerical correctors.

Each coarse element K owns three local problems, one per affine driver
{1, x1 - xc, x2 - xc}.  Their solutions (the correctors) are computed on
either K's nested fine submesh (no oversampling) or on an oversampling
patch, in a sampling test space that depends on the flavor:

* Lagrange: functions vanishing on the whole domain boundary (Dirichlet
  elimination);
* Crouzeix-Raviart: functions whose averages over the three dilated faces
  vanish (a constrained Neumann solve).

The DOF-continuous variant glues a correction of affine-plus-corrector
fields so that the restricted correctors carry zero element DOFs, which
restores continuity properties of the resulting basis across elements.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import _fem_core as core
from .linalg import (
    ConstraintBlock,
    SparseMatrix,
    bicgstab_solve,
    cg_solve,
    constrained_solve,
    csr_from_triplets,
    dense_lu_solve,
)
from .mesh import CoarseMesh, FineMesh, PatchGeometry, build_patch
from .mesh import _p1_geometry  # shared exact P1 geometry kernel
from .problem import (
    ProblemSpec,
    advection_at,
    coefficient_at,
    reaction_at,
)

__all__ = [
    "DofVariant",
    "LocalDomain",
    "CorrectorSet",
    "GlueSingularError",
    "element_domain",
    "patch_domain",
    "dof_eval",
    "affine_dof_matrix",
    "sampling_matrix",
    "corrector_extended",
    "glue_matrix",
    "solve_glue",
    "corrector_continuous",
    "restrict_to_element",
    "multiscale_basis",
    "build_correctors",
]

VARIANTS = ("lagrange", "cr")
OVERSAMPLING = ("none", "extended", "continuous")


class GlueSingularError(RuntimeError):
    """The 3x3 glue system of the DOF-continuous construction is singular."""


@dataclass(frozen=True)
class DofVariant:
    """Tag selecting the DOF functionals: vertex values or face averages."""

    tag: str

    def __post_init__(self):
        if self.tag not in VARIANTS:
            raise ValueError(f"unknown DOF variant: {self.tag!r}")


def _variant_tag(variant) -> str:
    tag = variant.tag if isinstance(variant, DofVariant) else variant
    if tag not in VARIANTS:
        raise ValueError(f"unknown DOF variant: {tag!r}")
    return tag


@dataclass
class LocalDomain:
    """A triangulated local domain with its DOF anchors.

    Carries the node coordinates and connectivity, the ids of the three
    selected corner nodes (vertex DOFs), the three face node chains ordered
    along each face (face-average DOFs), all boundary node ids, and the
    centroid of the owner element (the origin of the affine drivers).
    """

    points: np.ndarray          # (N, 2)
    triangles: np.ndarray       # (T, 3)
    corner_ids: np.ndarray      # (3,)
    face_chains: tuple          # 3 arrays of node ids, ordered along the face
    boundary_nodes: np.ndarray  # sorted unique ids on the domain boundary
    centroid: np.ndarray        # (2,) owner-element centroid
    areas: np.ndarray = field(default=None, repr=False)
    grads: np.ndarray = field(default=None, repr=False)
    tri_centroids: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        if self.areas is None:
            self.areas, self.tri_centroids, self.grads = _p1_geometry(
                self.points, self.triangles)

    @property
    def num_points(self) -> int:
        return self.points.shape[0]


@dataclass
class CorrectorSet:
    """The three correctors of one element, restricted to its fine submesh."""

    owner: int
    space: str                  # DOF variant tag ("lagrange" | "cr")
    variant: str                # oversampling flavor: "none" | "extended" | "continuous"
    fields: np.ndarray          # (3, nsub) nodal values on the nested submesh
    patch_fields: np.ndarray = None  # (3, Npatch) diagnostics, when oversampled


def element_domain(coarse: CoarseMesh, fine: FineMesh, k: int) -> LocalDomain:
    """The nested fine submesh of element k as a local domain.

    Corner ids and face chains are located by grid index arithmetic (exact);
    face l is opposite the coarse element's local vertex l, its chain runs
    from local vertex l+1 to l+2.
    """
    sub_nodes = fine.sub_nodes[k]
    points = fine.vertices[sub_nodes]
    triangles = fine.sub_conn[k].astype(np.int64)

    nr = coarse.n * fine.r
    corner_vertex = coarse.triangles[k]
    # coarse vertex id -> (i, j) on the coarse grid -> fine grid node id
    ci = corner_vertex % (coarse.n + 1)
    cj = corner_vertex // (coarse.n + 1)
    fine_ids = (cj * fine.r) * (nr + 1) + ci * fine.r
    corner_ids = np.searchsorted(sub_nodes, fine_ids)
    if not np.array_equal(sub_nodes[corner_ids], fine_ids):
        raise ValueError("element corners are not submesh nodes")

    chains = []
    for l in range(3):
        a, b = (l + 1) % 3, (l + 2) % 3
        ia, ja = ci[a] * fine.r, cj[a] * fine.r
        ib, jb = ci[b] * fine.r, cj[b] * fine.r
        s = np.arange(fine.r + 1)
        ids = (ja + (jb - ja) // fine.r * s) * (nr + 1) + (ia + (ib - ia) // fine.r * s)
        local = np.searchsorted(sub_nodes, ids)
        if not np.array_equal(sub_nodes[local], ids):
            raise ValueError("face chain nodes are not submesh nodes")
        chains.append(local)
    boundary = np.unique(np.concatenate(chains))
    return LocalDomain(points=points, triangles=triangles,
                       corner_ids=corner_ids, face_chains=tuple(chains),
                       boundary_nodes=boundary,
                       centroid=coarse.centroids[k].copy())


def _select_patch_corners(coarse: CoarseMesh, patch: PatchGeometry) -> np.ndarray:
    """Vertex DOF anchors on the patch: homothety images of the element's
    vertices when they lie in the closed unit square, otherwise the nearest
    patch-polygon vertex (deterministic, all three distinct)."""
    k = patch.owner
    corners = coarse.vertices[coarse.triangles[k]]
    xc = coarse.centroids[k]
    images = xc + patch.rho * (corners - xc)
    poly = patch.polygon
    chosen_pts = []
    used = set()
    for q in images:
        inside = (-1e-12 <= q[0] <= 1.0 + 1e-12) and (-1e-12 <= q[1] <= 1.0 + 1e-12)
        d2 = np.sum((poly - q) ** 2, axis=1)
        order = np.argsort(d2, kind="stable")
        if inside and d2[order[0]] < 1e-20:
            pick = order[0]
        else:
            pick = next(i for i in order if i not in used)
        used.add(pick)
        chosen_pts.append(poly[pick])
    # map the chosen polygon vertices to patch node ids (nearest node)
    ids = []
    for p in chosen_pts:
        ids.append(int(np.argmin(np.sum((patch.points - p) ** 2, axis=1))))
    if len(set(ids)) != 3:
        raise ValueError("degenerate corner selection on patch")
    return np.array(ids)


def patch_domain(coarse: CoarseMesh, patch: PatchGeometry) -> LocalDomain:
    """An oversampling patch as a local domain.

    The face chains are the dilated-face chains in local face order; the
    corner ids follow the deterministic vertex selection above.
    """
    dilated = sorted(patch.dilated, key=lambda d: d.face_local)
    chains = tuple(d.chain.astype(np.int64) for d in dilated)
    boundary = np.unique(patch.boundary_edges[:, :2].astype(np.int64).ravel())
    return LocalDomain(points=patch.points,
                       triangles=patch.triangles.astype(np.int64),
                       corner_ids=_select_patch_corners(coarse, patch),
                       face_chains=chains, boundary_nodes=boundary,
                       centroid=coarse.centroids[patch.owner].copy())


def _chain_average_weights(points: np.ndarray, chain: np.ndarray) -> np.ndarray:
    """Composite trapezoid weights turning nodal values into a face average."""
    pts = points[chain]
    seg = np.linalg.norm(np.diff(pts, axis=0), axis=1)
    w = np.zeros(len(chain))
    w[:-1] += 0.5 * seg
    w[1:] += 0.5 * seg
    total = seg.sum()
    if total <= 0.0:
        raise ValueError("zero-length face chain")
    return w / total


def dof_eval(variant, domain: LocalDomain, v: np.ndarray) -> np.ndarray:
    """The three DOF functionals of a nodal field on a local domain.

    Lagrange: values at the three corner nodes.  Crouzeix-Raviart: averages
    over the three face chains by composite trapezoid (exact for P1 traces).
    """
    tag = _variant_tag(variant)
    v = np.asarray(v, dtype=float)
    if v.shape[-1] != domain.num_points:
        raise ValueError("field size does not match the domain")
    if tag == "lagrange":
        return v[..., domain.corner_ids]
    out = [np.einsum("...i,i->...", v[..., chain],
                     _chain_average_weights(domain.points, chain))
           for chain in domain.face_chains]
    return np.stack(out, axis=-1)


def affine_dof_matrix(variant, domain: LocalDomain) -> np.ndarray:
    """DOFs of the affine functions {1, x1-xc, x2-xc}; columns per function."""
    drivers = _drivers(domain)
    return np.stack([dof_eval(variant, domain, d) for d in drivers], axis=1)


def _drivers(domain: LocalDomain) -> np.ndarray:
    """Nodal values of the drivers {1, x1-xc, x2-xc} on the domain."""
    ones = np.ones(domain.num_points)
    d1 = domain.points[:, 0] - domain.centroid[0]
    d2 = domain.points[:, 1] - domain.centroid[1]
    return np.stack([ones, d1, d2])


def sampling_matrix(domain: LocalDomain, spec: ProblemSpec,
                    sampling: str = "full"):
    """Assembled sampling form s_K on the domain's P1 nodal space.

    `full` uses the problem's own bilinear form (diffusion plus any
    advection/reaction the spec carries, skew-symmetrized per the spec);
    `diffusion` keeps only the second-order term.
    """
    if sampling not in ("full", "diffusion"):
        raise ValueError(f"unknown sampling form: {sampling!r}")
    c = domain.tri_centroids
    A = coefficient_at(spec, c)
    b = sigma = None
    if sampling == "full":
        if spec.has_advection:
            b = advection_at(spec, c)
        if spec.has_reaction:
            sigma = reaction_at(spec, c)
    local = core.local_matrices(domain.areas, domain.grads, np.full(3, 1.0 / 3.0),
                                A=A, b=b, sigma=sigma,
                                skew=spec.skew_symmetrized)
    rows, cols, vals = core.scatter_triplets(domain.triangles, local)
    return csr_from_triplets(domain.num_points, (rows, cols, vals))


def _is_symmetric_form(spec: ProblemSpec, sampling: str) -> bool:
    return sampling == "diffusion" or not spec.has_advection


def corrector_extended(domain: LocalDomain, spec: ProblemSpec, variant,
                       sampling: str = "full", tol: float = 1e-12) -> np.ndarray:
    """Solve the three corrector problems on a local domain.

    Returns (3, N) nodal fields V^alpha with s_K(V^alpha, w) =
    -s_K(driver_alpha, w) for every w in the sampling test space.  In the
    pure-diffusion case the constant driver annihilates the form and V^0 is
    returned as exact zeros without solving.
    """
    tag = _variant_tag(variant)
    S = sampling_matrix(domain, spec, sampling)
    drivers = _drivers(domain)
    n = domain.num_points
    out = np.zeros((3, n))

    solve_zeroth = not (spec.pure_diffusion or sampling == "diffusion")
    alphas = [0, 1, 2] if solve_zeroth else [1, 2]
    rhs = np.column_stack([-S.matvec(drivers[a]) for a in alphas])
    symmetric = _is_symmetric_form(spec, sampling)

    if tag == "lagrange":
        keep = np.ones(n, dtype=bool)
        keep[domain.boundary_nodes] = False
        sub = S.backend[np.flatnonzero(keep)][:, np.flatnonzero(keep)].tocsr()
        reduced = SparseMatrix(sub.shape[0], sub.shape[1], sub.indptr,
                               sub.indices, sub.data)
        inner = cg_solve if symmetric else bicgstab_solve
        for col, a in enumerate(alphas):
            r = rhs[keep][:, col]
            if np.linalg.norm(r) > 0.0:
                out[a, keep] = inner(reduced, r, tol=tol)
        return out

    C = np.zeros((3, n))
    for l, chain in enumerate(domain.face_chains):
        C[l, chain] += _chain_average_weights(domain.points, chain)
    cb = ConstraintBlock(C=C, g=np.zeros(3))
    X, _ = constrained_solve(S, rhs, cb, tol=tol, symmetric=symmetric)
    for col, a in enumerate(alphas):
        out[a] = X[:, col]
    return out


def restrict_to_element(patch: PatchGeometry, fields: np.ndarray) -> np.ndarray:
    """Restrict patch nodal fields to the owner element's fine submesh.

    The submesh nodes are the leading block of the patch points, so this is
    an exact node-for-node copy.
    """
    fields = np.asarray(fields)
    return fields[..., :patch.n_sub].copy()


def _glue_fields(domain_k: LocalDomain, fields_on_k: np.ndarray) -> np.ndarray:
    """The glue candidates W on the element: affine drivers + correctors."""
    return _drivers(domain_k) + fields_on_k


def glue_matrix(domain_k: LocalDomain, fields_on_k: np.ndarray,
                variant) -> np.ndarray:
    """The 3x3 system of element DOFs of the fields W^beta = driver + V^beta.

    Column beta holds the element DOFs of W^beta; the DOF-continuous
    construction solves against this matrix.
    """
    W = _glue_fields(domain_k, np.asarray(fields_on_k, dtype=float))
    return np.stack([dof_eval(variant, domain_k, W[b]) for b in range(3)], axis=1)


def solve_glue(M: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    """Solve the glue system, guarding against (near-)singular matrices."""
    M = np.asarray(M, dtype=float)
    norm = np.linalg.norm(M)
    if abs(np.linalg.det(M)) < 1e-12 * norm ** 3:
        raise GlueSingularError(
            f"glue matrix is numerically singular (|det| = {abs(np.linalg.det(M)):.3e}, "
            f"norm = {norm:.3e})")
    return dense_lu_solve(M, rhs)


def corrector_continuous(patch: PatchGeometry, domain_k: LocalDomain,
                         ext_fields: np.ndarray, variant) -> np.ndarray:
    """DOF-continuous correctors from the extended ones.

    Subtracts the combination of W fields that cancels the element DOFs of
    each extended corrector: V^cont = V^ext - sum_beta c_beta W^beta with
    M c = element DOFs of V^ext.  Raises GlueSingularError when the glue
    system is numerically singular.
    """
    ext_fields = np.asarray(ext_fields, dtype=float)
    on_k = restrict_to_element(patch, ext_fields)
    M = glue_matrix(domain_k, on_k, variant)
    targets = np.stack([dof_eval(variant, domain_k, on_k[a]) for a in range(3)],
                       axis=1)
    coeffs = solve_glue(M, targets)           # (3, 3): column alpha
    # patch-wide W fields
    drivers = _drivers_patch(patch, domain_k.centroid)
    W = drivers + ext_fields
    return ext_fields - np.einsum("ba,bn->an", coeffs, W)


def _drivers_patch(patch: PatchGeometry, centroid: np.ndarray) -> np.ndarray:
    ones = np.ones(patch.num_points)
    d1 = patch.points[:, 0] - centroid[0]
    d2 = patch.points[:, 1] - centroid[1]
    return np.stack([ones, d1, d2])


def _p1_basis_on_points(corners: np.ndarray, points: np.ndarray) -> np.ndarray:
    """Barycentric coordinates of points w.r.t. a triangle; (3, N)."""
    e1 = corners[1] - corners[0]
    e2 = corners[2] - corners[0]
    det = e1[0] * e2[1] - e1[1] * e2[0]
    rel = points - corners[0]
    lam1 = (rel[:, 0] * e2[1] - rel[:, 1] * e2[0]) / det
    lam2 = (e1[0] * rel[:, 1] - e1[1] * rel[:, 0]) / det
    return np.stack([1.0 - lam1 - lam2, lam1, lam2])


def multiscale_basis(domain_k: LocalDomain, correctors: CorrectorSet,
                     i: int) -> np.ndarray:
    """Nodal values of the i-th multiscale basis function on the element.

    The basis is the affine function of the coarse space (hat function for
    Lagrange, 1 - 2*lambda_opp for Crouzeix-Raviart) plus its centroid value
    times V^0 and its gradient components times V^1, V^2.
    """
    corners = domain_k.points[domain_k.corner_ids]
    lam = _p1_basis_on_points(corners, domain_k.points)
    # gradients of the barycentric coordinates on the element
    e1 = corners[1] - corners[0]
    e2 = corners[2] - corners[0]
    det = e1[0] * e2[1] - e1[1] * e2[0]
    lam_grads = np.empty((3, 2))
    for l in range(3):
        opp = corners[(l + 2) % 3] - corners[(l + 1) % 3]
        lam_grads[l] = np.array([-opp[1], opp[0]]) / det

    if correctors.space == "lagrange":
        phi = lam[i]
        phi_c = 1.0 / 3.0
        phi_grad = lam_grads[i]
    else:
        phi = 1.0 - 2.0 * lam[i]
        phi_c = 1.0 / 3.0
        phi_grad = -2.0 * lam_grads[i]
    V = correctors.fields
    return phi + phi_c * V[0] + phi_grad[0] * V[1] + phi_grad[1] * V[2]


def build_correctors(coarse: CoarseMesh, fine: FineMesh, k: int,
                     spec: ProblemSpec, variant, oversampling: str = "none",
                     rho: float = 1.0, sampling: str = "full",
                     keep_patch_fields: bool = False) -> CorrectorSet:
    """Full corrector pipeline for one element.

    oversampling "none" solves on the element submesh (rho must be 1);
    "extended" solves on the homothety patch and restricts; "continuous"
    additionally glues the element DOFs to zero before restricting.
    """
    tag = _variant_tag(variant)
    if oversampling not in OVERSAMPLING:
        raise ValueError(f"unknown oversampling mode: {oversampling!r}")
    if oversampling == "none":
        if abs(rho - 1.0) > 1e-12:
            raise ValueError("oversampling 'none' requires rho = 1")
        dom = element_domain(coarse, fine, k)
        fields = corrector_extended(dom, spec, tag, sampling)
        return CorrectorSet(owner=k, space=tag, variant="none", fields=fields,
                            patch_fields=fields if keep_patch_fields else None)
    patch = build_patch(coarse, fine, k, rho)
    pdom = patch_domain(coarse, patch)
    ext = corrector_extended(pdom, spec, tag, sampling)
    if oversampling == "continuous":
        dom_k = element_domain(coarse, fine, k)
        ext = corrector_continuous(patch, dom_k, ext, tag)
    fields = restrict_to_element(patch, ext)
    return CorrectorSet(owner=k, space=tag, variant=oversampling, fields=fields,
                        patch_fields=ext if keep_patch_fields else None)
