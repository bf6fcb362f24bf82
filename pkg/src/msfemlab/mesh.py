"""Structured triangle meshes on the unit square and oversampling patches.

The coarse mesh splits an n-by-n grid of squares along the bottom-left to
top-right diagonal.  The fine mesh is the same construction at resolution
n*r, so every coarse element owns a nested submesh of r*r fine triangles.
A patch is the homothetic dilation of one coarse element (ratio rho >= 1)
clipped to the unit square; it is triangulated so that the nested fine
submesh of the element is reused verbatim while the surrounding annulus is
meshed compatibly with the fine trace on the element boundary.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

__all__ = [
    "CoarseMesh",
    "FineMesh",
    "PatchGeometry",
    "DilatedFace",
    "PatchDegenerateError",
    "build_coarse_mesh",
    "build_fine_mesh",
    "clip_polygon",
    "build_patch",
    "polygon_area",
]

_DEDUP_TOL = 1e-12
_LINE_TOL = 1e-10
_UNIT_SQUARE = np.array([[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]])


class PatchDegenerateError(RuntimeError):
    """Raised when a dilated patch does not expose exactly three dilated faces."""


@dataclass
class CoarseMesh:
    """Conforming triangulation of the unit square.

    Vertex (i, j) of the (n+1)^2 grid has id j*(n+1)+i and coordinates
    (i/n, j/n).  Cell (i, j) is split into triangles 2*(j*n+i) and
    2*(j*n+i)+1, both counter-clockwise.  Face l of an element is the edge
    opposite its local vertex l.
    """

    n: int
    vertices: np.ndarray          # (V, 2) float
    triangles: np.ndarray         # (T, 3) int, CCW
    faces: np.ndarray             # (F, 2) int, endpoints as sorted pairs
    face_is_boundary: np.ndarray  # (F,) bool
    vertex_is_boundary: np.ndarray  # (V,) bool
    element_faces: np.ndarray     # (T, 3) int, face opposite local vertex l
    centroids: np.ndarray         # (T, 2)
    areas: np.ndarray             # (T,)
    grads: np.ndarray             # (T, 3, 2) gradients of the P1 hat functions

    @property
    def num_vertices(self) -> int:
        return self.vertices.shape[0]

    @property
    def num_triangles(self) -> int:
        return self.triangles.shape[0]

    @property
    def num_faces(self) -> int:
        return self.faces.shape[0]


@dataclass
class FineMesh(CoarseMesh):
    """Uniform refinement of a coarse mesh, with the nesting map.

    ``owner[t]`` is the coarse element containing fine triangle t.  The
    per-element views list, for each coarse element, its fine triangles
    (``sub_tris``), its fine nodes in ascending global order (``sub_nodes``)
    and the submesh connectivity in local numbering (``sub_conn``).
    """

    r: int = 1
    owner: np.ndarray = None        # (Tf,) int
    sub_tris: np.ndarray = None     # (Tc, r*r) int
    sub_nodes: np.ndarray = None    # (Tc, nsub) int
    sub_conn: np.ndarray = None     # (Tc, r*r, 3) int32, local numbering

    @property
    def nodes_per_element(self) -> int:
        return self.sub_nodes.shape[1]


class DilatedFace(NamedTuple):
    """One dilated boundary face of a patch.

    ``face_local`` is the local face index of the owner element (face l is
    opposite vertex l), ``face_id`` the coarse-mesh face id, ``segment`` the
    (possibly clipped) endpoints on the patch boundary, and ``chain`` the
    patch node ids lying on the segment, ordered along it.
    """

    face_local: int
    face_id: int
    segment: np.ndarray
    chain: np.ndarray


@dataclass
class PatchGeometry:
    """Triangulated oversampling patch of one coarse element.

    The first ``n_sub`` points and first ``m_sub`` triangles are the owner
    element's nested fine submesh, copied verbatim; ``embedding`` maps that
    block back to global fine node ids.  ``boundary_edges`` holds one row
    (i, j, tag) per patch boundary edge, where tag is the local face index
    of the dilated face the edge lies on, or -1 for an additional face.
    """

    owner: int
    rho: float
    polygon: np.ndarray
    points: np.ndarray
    triangles: np.ndarray
    n_sub: int
    m_sub: int
    embedding: np.ndarray
    dilated: tuple
    additional: list
    boundary_edges: np.ndarray
    h_target: float

    @property
    def num_points(self) -> int:
        return self.points.shape[0]


def polygon_area(poly) -> float:
    """Signed (shoelace) area of a polygon given as an (P, 2) vertex loop."""
    p = np.asarray(poly, dtype=float)
    if len(p) < 3:
        return 0.0
    x, y = p[:, 0], p[:, 1]
    return 0.5 * float(np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y))


def _grid_arrays(n: int):
    idx = np.arange((n + 1) * (n + 1))
    vertices = np.column_stack([(idx % (n + 1)) / n, (idx // (n + 1)) / n])
    c = np.arange(n * n)
    ci, cj = c % n, c // n
    v00 = cj * (n + 1) + ci
    v10, v01 = v00 + 1, v00 + (n + 1)
    v11 = v01 + 1
    triangles = np.empty((2 * n * n, 3), dtype=np.int64)
    triangles[0::2] = np.column_stack([v00, v10, v11])
    triangles[1::2] = np.column_stack([v00, v11, v01])
    return vertices, triangles


def _face_structure(triangles: np.ndarray, num_vertices: int):
    t = triangles
    T = len(t)
    edges = np.concatenate([t[:, [1, 2]], t[:, [2, 0]], t[:, [0, 1]]])
    lo = np.minimum(edges[:, 0], edges[:, 1])
    hi = np.maximum(edges[:, 0], edges[:, 1])
    packed = lo * num_vertices + hi
    keys, inverse, counts = np.unique(packed, return_inverse=True, return_counts=True)
    faces = np.column_stack([keys // num_vertices, keys % num_vertices])
    element_faces = inverse.reshape(3, T).T.copy()
    return faces, element_faces, counts == 1


def _p1_geometry(vertices: np.ndarray, triangles: np.ndarray):
    p = vertices[triangles]
    e1 = p[:, 1] - p[:, 0]
    e2 = p[:, 2] - p[:, 0]
    twice_area = e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0]
    if np.any(twice_area <= 0.0):
        raise ValueError("triangulation contains non-CCW or degenerate elements")
    grads = np.empty_like(p)
    for l in range(3):
        edge = p[:, (l + 2) % 3] - p[:, (l + 1) % 3]
        grads[:, l, 0] = -edge[:, 1]
        grads[:, l, 1] = edge[:, 0]
    grads /= twice_area[:, None, None]
    return 0.5 * twice_area, p.mean(axis=1), grads


def build_coarse_mesh(n: int) -> CoarseMesh:
    """Build the structured n-by-n coarse mesh of the unit square."""
    if n < 1:
        raise ValueError(f"mesh resolution must be >= 1, got {n}")
    vertices, triangles = _grid_arrays(n)
    faces, element_faces, face_is_boundary = _face_structure(triangles, len(vertices))
    vertex_is_boundary = np.zeros(len(vertices), dtype=bool)
    vertex_is_boundary[faces[face_is_boundary].ravel()] = True
    areas, centroids, grads = _p1_geometry(vertices, triangles)
    return CoarseMesh(
        n=n,
        vertices=vertices,
        triangles=triangles,
        faces=faces,
        face_is_boundary=face_is_boundary,
        vertex_is_boundary=vertex_is_boundary,
        element_faces=element_faces,
        centroids=centroids,
        areas=areas,
        grads=grads,
    )


def build_fine_mesh(coarse: CoarseMesh, r: int) -> FineMesh:
    """Refine every coarse element into r*r congruent triangles.

    The result is bit-identical to ``build_coarse_mesh(n*r)`` as a mesh; the
    nesting map assigns each fine triangle to the coarse element containing
    its centroid (integer arithmetic, never ambiguous).
    """
    if r < 1:
        raise ValueError(f"refinement factor must be >= 1, got {r}")
    n = coarse.n
    N = n * r
    vertices, triangles = _grid_arrays(N)
    faces, element_faces, face_is_boundary = _face_structure(triangles, len(vertices))
    vertex_is_boundary = np.zeros(len(vertices), dtype=bool)
    vertex_is_boundary[faces[face_is_boundary].ravel()] = True
    areas, centroids, grads = _p1_geometry(vertices, triangles)

    tf = np.arange(2 * N * N)
    cell = tf // 2
    fi, fj = cell % N, cell // N
    lower = np.where(tf % 2 == 0, (fj % r) <= (fi % r), (fj % r) < (fi % r))
    owner = 2 * ((fj // r) * n + (fi // r)) + np.where(lower, 0, 1)

    Tc = 2 * n * n
    counts = np.bincount(owner, minlength=Tc)
    if not np.all(counts == r * r):
        raise AssertionError("nesting map does not give r*r fine triangles per element")
    order = np.argsort(owner, kind="stable")
    sub_tris = order.reshape(Tc, r * r)

    nsub = (r + 1) * (r + 2) // 2
    sub_nodes = np.empty((Tc, nsub), dtype=np.int64)
    sub_conn = np.empty((Tc, r * r, 3), dtype=np.int32)
    for k in range(Tc):
        tri_k = triangles[sub_tris[k]]
        nodes = np.unique(tri_k)
        if nodes.size != nsub:
            raise AssertionError("unexpected submesh node count")
        sub_nodes[k] = nodes
        sub_conn[k] = np.searchsorted(nodes, tri_k)

    return FineMesh(
        n=N,
        vertices=vertices,
        triangles=triangles,
        faces=faces,
        face_is_boundary=face_is_boundary,
        vertex_is_boundary=vertex_is_boundary,
        element_faces=element_faces,
        centroids=centroids,
        areas=areas,
        grads=grads,
        r=r,
        owner=owner,
        sub_tris=sub_tris,
        sub_nodes=sub_nodes,
        sub_conn=sub_conn,
    )


def clip_polygon(polygon, window) -> np.ndarray:
    """Clip a convex polygon by a convex window (both CCW, Sutherland-Hodgman).

    Returns the clipped vertex loop; an empty (0, 2) array if the
    intersection is lower-dimensional.
    """
    poly = [np.asarray(v, dtype=float) for v in np.asarray(polygon, dtype=float)]
    win = np.asarray(window, dtype=float)
    for k in range(len(win)):
        if not poly:
            break
        a, b = win[k], win[(k + 1) % len(win)]
        ex, ey = b[0] - a[0], b[1] - a[1]
        dist = [ex * (p[1] - a[1]) - ey * (p[0] - a[0]) for p in poly]
        out = []
        for i, p in enumerate(poly):
            q = poly[(i + 1) % len(poly)]
            dp, dq = dist[i], dist[(i + 1) % len(poly)]
            if dp >= 0.0:
                out.append(p)
            if (dp > 0.0 > dq) or (dp < 0.0 < dq):
                t = dp / (dp - dq)
                out.append(p + t * (q - p))
        poly = out
    cleaned = []
    for p in poly:
        if not cleaned or np.max(np.abs(p - cleaned[-1])) > _DEDUP_TOL:
            cleaned.append(p)
    if len(cleaned) > 1 and np.max(np.abs(cleaned[0] - cleaned[-1])) <= _DEDUP_TOL:
        cleaned.pop()
    if len(cleaned) < 3:
        return np.zeros((0, 2))
    return np.array(cleaned)


def _point_seg_dist(p, a, b) -> float:
    ab = b - a
    denom = float(ab @ ab)
    if denom == 0.0:
        return float(np.hypot(*(p - a)))
    t = min(1.0, max(0.0, float((p - a) @ ab) / denom))
    return float(np.hypot(*(p - a - t * ab)))


def _edge_chain_local(points, sub_ids, a, b, expected=None):
    """Ids among ``sub_ids`` whose points lie on segment a-b, ordered along it."""
    p = points[sub_ids]
    ab = b - a
    L2 = float(ab @ ab)
    cross = (p[:, 0] - a[0]) * ab[1] - (p[:, 1] - a[1]) * ab[0]
    t = ((p[:, 0] - a[0]) * ab[0] + (p[:, 1] - a[1]) * ab[1]) / L2
    on = (np.abs(cross) <= _LINE_TOL * math.sqrt(L2)) & (t >= -_LINE_TOL) & (t <= 1.0 + _LINE_TOL)
    chain = sub_ids[on][np.argsort(t[on], kind="stable")]
    if expected is not None and len(chain) != expected:
        raise AssertionError(f"expected {expected} nodes on element edge, found {len(chain)}")
    return chain


def _boundary_edges_of(triangles: np.ndarray, num_points: int) -> np.ndarray:
    edges = np.concatenate([triangles[:, [1, 2]], triangles[:, [2, 0]], triangles[:, [0, 1]]])
    lo = np.minimum(edges[:, 0], edges[:, 1])
    hi = np.maximum(edges[:, 0], edges[:, 1])
    packed = lo * num_points + hi
    keys, counts = np.unique(packed, return_counts=True)
    if np.any(counts > 2):
        raise AssertionError("non-conforming triangulation: edge shared by > 2 triangles")
    single = keys[counts == 1]
    return np.column_stack([single // num_points, single % num_points])


_EDGE_OF_FACE = ((1, 2), (2, 0), (0, 1))  # face l is opposite local vertex l


def _trivial_patch(coarse: CoarseMesh, fine: FineMesh, k: int, rho: float,
                   h_target: float) -> PatchGeometry:
    tri = coarse.triangles[k]
    P = coarse.vertices[tri]
    nodes = fine.sub_nodes[k]
    points = fine.vertices[nodes].copy()
    conn = fine.sub_conn[k].astype(np.int64)
    local_ids = np.arange(len(nodes))

    boundary = _boundary_edges_of(conn, len(points))
    mids = 0.5 * (points[boundary[:, 0]] + points[boundary[:, 1]])
    tags = np.full(len(boundary), -2, dtype=np.int64)
    dilated = []
    for l in range(3):
        ia, ib = _EDGE_OF_FACE[l]
        a, b = P[ia], P[ib]
        seg = np.array([a, b])
        chain = _edge_chain_local(points, local_ids, a, b, expected=fine.r + 1)
        dilated.append(DilatedFace(l, int(coarse.element_faces[k, l]), seg, chain))
        for e in range(len(boundary)):
            if tags[e] == -2 and _point_seg_dist(mids[e], a, b) <= _LINE_TOL:
                tags[e] = l
    if np.any(tags == -2):
        raise AssertionError("untagged boundary edge on trivial patch")

    return PatchGeometry(
        owner=k,
        rho=rho,
        polygon=P.copy(),
        points=points,
        triangles=conn,
        n_sub=len(points),
        m_sub=len(conn),
        embedding=nodes.copy(),
        dilated=tuple(dilated),
        additional=[],
        boundary_edges=np.column_stack([boundary, tags]),
        h_target=h_target,
    )


def _locate_on_loop(poly: np.ndarray, p: np.ndarray, tol: float):
    """Position of a boundary point as (edge index, fraction along edge)."""
    P = len(poly)
    for e in range(P):
        a, b = poly[e], poly[(e + 1) % P]
        if _point_seg_dist(p, a, b) <= tol:
            ab = b - a
            t = float((p - a) @ ab) / float(ab @ ab)
            t = min(1.0, max(0.0, t))
            if t >= 1.0 - 1e-12:
                return (e + 1) % P, 0.0
            return e, t
    raise AssertionError("point not found on polygon boundary")


def _walk_loop(poly: np.ndarray, start: np.ndarray, stop: np.ndarray, tol: float):
    """CCW chain along the polygon boundary from ``start`` to ``stop``."""
    P = len(poly)
    e0, t0 = _locate_on_loop(poly, start, tol)
    e1, t1 = _locate_on_loop(poly, stop, tol)
    chain = [start]
    e, t = e0, t0
    for _ in range(P + 2):
        if e == e1 and t <= t1 + 1e-12:
            break
        chain.append(poly[(e + 1) % P])
        e, t = (e + 1) % P, 0.0
    else:
        raise AssertionError("failed to walk patch polygon boundary")
    chain.append(stop)
    out = [chain[0]]
    for q in chain[1:]:
        if np.max(np.abs(q - out[-1])) > _DEDUP_TOL:
            out.append(q)
    return out


class _NodeRegistry:
    """Exact-coordinate node pool; identical bit patterns share one id."""

    def __init__(self, seed_points: np.ndarray):
        self.points = [row for row in seed_points]
        self.lookup = {(float(row[0]), float(row[1])): i
                       for i, row in enumerate(seed_points)}

    def add(self, p) -> int:
        key = (float(p[0]), float(p[1]))
        hit = self.lookup.get(key)
        if hit is not None:
            return hit
        idx = len(self.points)
        self.lookup[key] = idx
        self.points.append(np.array(key))
        return idx


def _lerp(a: np.ndarray, b: np.ndarray, t: float) -> np.ndarray:
    out = (1.0 - t) * a + t * b
    same = a == b
    out[same] = a[same]  # keep shared coordinates exact (axis-aligned runs)
    return out


def _tri_is_sound(a, b, c):
    """Positive orientation with area bounded away from the rounding floor.

    The test is relative to the squared edge lengths so that exactly (or
    nearly) collinear triples are rejected even when the cross product rounds
    to a tiny positive value; chain pinch points on clipped patches produce
    such triples.
    """
    det = (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])
    scale = max(((b - a) ** 2).sum(), ((c - b) ** 2).sum(), ((a - c) ** 2).sum())
    return det > 1e-12 * scale


def _zip_strip(pts, tris, bot_ids, bot_par, top_ids, top_par):
    """Triangulate between two node chains with monotone parameters."""
    nb, nt = len(bot_ids), len(top_ids)
    i = j = 0

    def sound(ids):
        return _tri_is_sound(pts[ids[0]], pts[ids[1]], pts[ids[2]])

    while i < nb - 1 or j < nt - 1:
        can_b = i < nb - 1
        can_t = j < nt - 1
        if can_b and can_t:
            adv_bottom = bot_par[i + 1] <= top_par[j + 1] + 1e-12
        else:
            adv_bottom = can_b
        cand = (bot_ids[i], bot_ids[i + 1], top_ids[j]) if adv_bottom else \
               (bot_ids[i], top_ids[j + 1], top_ids[j])
        if not sound(cand):
            alt_ok = can_t if adv_bottom else can_b
            if alt_ok:
                other = (bot_ids[i], top_ids[j + 1], top_ids[j]) if adv_bottom else \
                        (bot_ids[i], bot_ids[i + 1], top_ids[j])
                if sound(other):
                    cand, adv_bottom = other, not adv_bottom
        if sound(cand):
            tris.append(cand)
        if adv_bottom:
            i += 1
        else:
            j += 1


def _quad_strips(pts, tris, layer_ids):
    """Split the quads between successive equal-parameter layers."""
    for j in range(len(layer_ids) - 1):
        lo, hi = layer_ids[j], layer_ids[j + 1]
        A, B = pts[lo[:-1]], pts[lo[1:]]
        C, D = pts[hi[1:]], pts[hi[:-1]]

        def tri_ok(p, q, s):
            det = (q[:, 0] - p[:, 0]) * (s[:, 1] - p[:, 1]) - \
                  (q[:, 1] - p[:, 1]) * (s[:, 0] - p[:, 0])
            scale = np.maximum(np.sum((q - p) ** 2, axis=1),
                               np.maximum(np.sum((s - q) ** 2, axis=1),
                                          np.sum((p - s) ** 2, axis=1)))
            return det > 1e-12 * scale

        shorter_ac = (np.sum((C - A) ** 2, axis=1) <= np.sum((D - B) ** 2, axis=1))
        ac_ok = tri_ok(A, B, C) & tri_ok(A, C, D)
        bd_ok = tri_ok(A, B, D) & tri_ok(B, C, D)
        use_ac = np.where(ac_ok & bd_ok, shorter_ac, ac_ok)
        for k in range(len(A)):
            a, b = lo[k], lo[k + 1]
            c, d = hi[k + 1], hi[k]
            if use_ac[k]:
                pairs = ((a, b, c), (a, c, d))
            else:
                pairs = ((a, b, d), (b, c, d))
            for t in pairs:
                p, q, s = pts[t[0]], pts[t[1]], pts[t[2]]
                if _tri_is_sound(p, q, s):
                    tris.append(t)


def build_patch(coarse: CoarseMesh, fine: FineMesh, k: int, rho: float) -> PatchGeometry:
    """Build the oversampling patch of element k with homothety ratio rho.

    Raises ValueError for rho < 1 and PatchDegenerateError when the clipped
    patch does not expose exactly three dilated faces (ratio too large for
    the element's position in the domain).
    """
    if rho < 1.0 - 1e-12:
        raise ValueError(f"homothety ratio must be >= 1, got {rho}")
    h_target = math.sqrt(2.0) / fine.n
    if rho <= 1.0 + 1e-12:
        return _trivial_patch(coarse, fine, k, rho, h_target)

    tri = coarse.triangles[k]
    P = coarse.vertices[tri]
    c = coarse.centroids[k]
    Q = c + rho * (P - c)
    scale = math.sqrt(2.0 * coarse.areas[k])

    poly = clip_polygon(Q, _UNIT_SQUARE)
    if len(poly) < 3:
        raise PatchDegenerateError(f"patch of element {k} clips away entirely")

    # Classify the boundary segments of the patch polygon.  A segment is a
    # dilated face if it lies on a supporting line of the homothety image,
    # or on a domain-boundary line that contains a full edge of the element;
    # every other segment must lie on the domain boundary (additional face).
    omega_lines = [(0, 0.0), (0, 1.0), (1, 0.0), (1, 1.0)]  # (axis, value)
    edge_on_omega = {}
    for l in range(3):
        ia, ib = _EDGE_OF_FACE[l]
        for axis, val in omega_lines:
            if abs(P[ia][axis] - val) <= _LINE_TOL and abs(P[ib][axis] - val) <= _LINE_TOL:
                edge_on_omega[(axis, val)] = l
    dilated_segs: dict[int, np.ndarray] = {}
    additional = []
    npoly = len(poly)
    for s in range(npoly):
        a, b = poly[s], poly[(s + 1) % npoly]
        tagged = False
        for i in range(3):
            qa, qb = Q[i], Q[(i + 1) % 3]
            d = qb - qa
            nrm = math.hypot(d[0], d[1])
            off_a = abs((a[0] - qa[0]) * d[1] - (a[1] - qa[1]) * d[0]) / nrm
            off_b = abs((b[0] - qa[0]) * d[1] - (b[1] - qa[1]) * d[0]) / nrm
            if off_a <= _LINE_TOL * scale and off_b <= _LINE_TOL * scale:
                l = (i + 2) % 3
                if l in dilated_segs:
                    raise PatchDegenerateError(
                        f"patch of element {k}: face {l} dilated by two segments")
                dilated_segs[l] = np.array([a, b])
                tagged = True
                break
        if tagged:
            continue
        for axis, val in omega_lines:
            if abs(a[axis] - val) <= _LINE_TOL and abs(b[axis] - val) <= _LINE_TOL:
                l = edge_on_omega.get((axis, val))
                if l is not None:
                    if l in dilated_segs:
                        raise PatchDegenerateError(
                            f"patch of element {k}: face {l} dilated by two segments")
                    dilated_segs[l] = np.array([a, b])
                else:
                    additional.append(np.array([a, b]))
                tagged = True
                break
        if not tagged:
            raise AssertionError("patch boundary segment on neither a dilation "
                                 "line nor the domain boundary")
    if sorted(dilated_segs) != [0, 1, 2]:
        raise PatchDegenerateError(
            f"patch of element {k} (rho={rho}) has {len(dilated_segs)} dilated "
            f"faces, expected 3")

    # Lateral exit points: the segment from each element vertex towards its
    # homothety image, clipped to the domain.  Computed once per patch so the
    # two pieces sharing a lateral agree bitwise.
    W = []
    for i in range(3):
        t_max = 1.0
        axis_hit = None
        for axis in (0, 1):
            d = Q[i][axis] - P[i][axis]
            if d > 0.0 and Q[i][axis] > 1.0:
                t_ax = (1.0 - P[i][axis]) / d
                if t_ax < t_max:
                    t_max, axis_hit = t_ax, (axis, 1.0)
            elif d < 0.0 and Q[i][axis] < 0.0:
                t_ax = (0.0 - P[i][axis]) / d
                if t_ax < t_max:
                    t_max, axis_hit = t_ax, (axis, 0.0)
        if axis_hit is None:
            W.append(Q[i].copy())
        else:
            w = _lerp(P[i], Q[i], t_max)
            w[axis_hit[0]] = axis_hit[1]
            W.append(w)

    nodes = fine.sub_nodes[k]
    sub_points = fine.vertices[nodes]
    registry = _NodeRegistry(sub_points)
    local_ids = np.arange(len(nodes))
    bottom_chains = []
    for i in range(3):
        a, b = P[i], P[(i + 1) % 3]
        bottom_chains.append(_edge_chain_local(sub_points, local_ids, a, b,
                                               expected=fine.r + 1))

    # Outer chains per piece, subdivided to the target edge length; then a
    # patch-global layer count so shared lateral fibers match across pieces.
    pieces = []
    area_k = float(coarse.areas[k])
    for i in range(3):
        a, b = P[i], P[(i + 1) % 3]
        wa, wb = W[i], W[(i + 1) % 3]
        loop_chain = _walk_loop(poly, wa, wb, _LINE_TOL * max(1.0, scale))
        piece_loop = [b, a] + loop_chain
        if abs(polygon_area(piece_loop)) <= 1e-12 * area_k:
            continue
        top_pts, top_par = [], []
        arc = 0.0
        for sseg in range(len(loop_chain) - 1):
            u, v = loop_chain[sseg], loop_chain[sseg + 1]
            seg_len = math.hypot(*(v - u))
            m = max(1, math.ceil(seg_len / h_target))
            for q in range(m):
                top_pts.append(_lerp(u, v, q / m))
                top_par.append(arc + seg_len * q / m)
            arc += seg_len
        top_pts.append(loop_chain[-1])
        top_par.append(arc)
        top_par = np.array(top_par) / arc
        fiber_max = max(math.hypot(*(tp - _lerp(a, b, up)))
                        for tp, up in zip(top_pts, top_par))
        pieces.append((i, a, b, top_pts, top_par, fiber_max))

    layers = max(1, max((math.ceil(p[5] / h_target) for p in pieces), default=1))

    # The annulus lies on the outer (right) side of each directed element
    # edge, so both chains are traversed reversed to keep triangles CCW.
    tris: list = []
    for i, a, b, top_pts, top_par, _ in pieces:
        bot = bottom_chains[i][::-1]
        bot_par = np.arange(fine.r + 1) / fine.r
        top_ids = np.array([registry.add(p) for p in top_pts])[::-1]
        rev_par = (1.0 - top_par)[::-1]
        layer_ids = [np.array([registry.add(_lerp(_lerp(a, b, up), tp, j / layers))
                               for tp, up in zip(top_pts, top_par)])[::-1]
                     for j in range(1, layers)]
        layer_ids.append(top_ids)
        pts_arr = np.array(registry.points)
        _zip_strip(pts_arr, tris, bot, bot_par, layer_ids[0], rev_par)
        _quad_strips(pts_arr, tris, layer_ids)

    points = np.array(registry.points)
    conn_sub = fine.sub_conn[k].astype(np.int64)
    triangles = np.vstack([conn_sub, np.array(tris, dtype=np.int64)])

    areas, _, _ = _p1_geometry(points, triangles)
    total = float(np.sum(areas))
    target_area = abs(polygon_area(poly))
    if abs(total - target_area) > 1e-11 * max(1.0, target_area):
        raise AssertionError(
            f"patch triangulation covers {total}, polygon area {target_area}")

    boundary = _boundary_edges_of(triangles, len(points))
    mids = 0.5 * (points[boundary[:, 0]] + points[boundary[:, 1]])
    tags = np.full(len(boundary), -2, dtype=np.int64)
    for l, seg in dilated_segs.items():
        for e in range(len(boundary)):
            if tags[e] == -2 and _point_seg_dist(mids[e], seg[0], seg[1]) <= _LINE_TOL:
                tags[e] = l
    for seg in additional:
        for e in range(len(boundary)):
            if tags[e] == -2 and _point_seg_dist(mids[e], seg[0], seg[1]) <= _LINE_TOL:
                tags[e] = -1
    if np.any(tags == -2):
        raise AssertionError("untagged boundary edge on dilated patch")

    dilated = []
    for l in range(3):
        seg = dilated_segs[l]
        on_face = boundary[tags == l]
        ids = np.unique(on_face)
        ab = seg[1] - seg[0]
        t = (points[ids] - seg[0]) @ ab
        chain = ids[np.argsort(t, kind="stable")]
        dilated.append(DilatedFace(l, int(coarse.element_faces[k, l]), seg, chain))

    return PatchGeometry(
        owner=k,
        rho=rho,
        polygon=poly,
        points=points,
        triangles=triangles,
        n_sub=len(nodes),
        m_sub=len(conn_sub),
        embedding=nodes.copy(),
        dilated=tuple(dilated),
        additional=additional,
        boundary_edges=np.column_stack([boundary, tags]),
        h_target=h_target,
    )
