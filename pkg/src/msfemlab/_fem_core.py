"""Vectorized P1 element kernels shared by the assembly routines.

Everything here operates on plain arrays: element areas, per-element basis
gradients of shape (T, k, 2) and basis values at the element centroid of
shape (k,).  Both the vertex-based (Lagrange) and face-based
(Crouzeix-Raviart) spaces reduce to this interface, as do local problems on
arbitrary triangulations.  Coefficients enter as per-element constants
(one-point centroid sampling).
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "local_matrices",
    "load_exact_p1",
    "load_exact_p1_cr",
    "scatter_triplets",
    "interior_system",
]


def local_matrices(areas: np.ndarray, basis_grads: np.ndarray,
                   basis_cvals: np.ndarray, A: np.ndarray | None = None,
                   b: np.ndarray | None = None, sigma: np.ndarray | None = None,
                   skew: bool = True) -> np.ndarray:
    """Per-element matrices of the (possibly advective/reactive) form.

    Entry [t, i, j] holds a_K(phi_j, phi_i) on element t: the diffusion term
    grad(phi_i) . A grad(phi_j), plus (skew-symmetrized) advection and
    centroid-rule reaction when b / sigma are given.
    """
    T, k = basis_grads.shape[0], basis_grads.shape[1]
    out = np.zeros((T, k, k))
    if A is not None:
        out += np.einsum("t,tia,tab,tjb->tij", areas, basis_grads, A,
                         basis_grads, optimize=True)
    if b is not None:
        # conv[t, i, j] = phi_i(x_c) * (b . grad(phi_j))
        b_dot = np.einsum("ta,tja->tj", b, basis_grads)
        conv = areas[:, None, None] * basis_cvals[None, :, None] * b_dot[:, None, :]
        if skew:
            out += 0.5 * (conv - conv.transpose(0, 2, 1))
        else:
            out += conv
    if sigma is not None:
        out += (areas * sigma)[:, None, None] * np.outer(basis_cvals, basis_cvals)
    return out


def load_exact_p1(areas: np.ndarray, f_vals: np.ndarray) -> np.ndarray:
    """Element load for vertex test functions against the P1 interpolant.

    f_vals holds f at the three element vertices; the exact integral of
    (P1 interpolant of f) * lambda_l is |K|/12 * (f_l + sum of all three).
    """
    total = f_vals.sum(axis=1, keepdims=True)
    return (areas[:, None] / 12.0) * (f_vals + total)


def load_exact_p1_cr(areas: np.ndarray, f_vals: np.ndarray) -> np.ndarray:
    """Element load for face test functions against the P1 interpolant.

    Face l sits opposite vertex l; the exact integral of the interpolant
    times the face function is |K|/6 * (sum of vertex values - f_l).
    """
    total = f_vals.sum(axis=1, keepdims=True)
    return (areas[:, None] / 6.0) * (total - f_vals)


def scatter_triplets(dofs: np.ndarray, local: np.ndarray):
    """Spread (T, k, k) element matrices into COO triplet arrays."""
    T, k = dofs.shape
    rows = np.broadcast_to(dofs[:, :, None], (T, k, k)).ravel()
    cols = np.broadcast_to(dofs[:, None, :], (T, k, k)).ravel()
    return rows.astype(np.int64), cols.astype(np.int64), local.ravel()


def interior_system(rows, cols, vals, rhs, keep_mask: np.ndarray):
    """Restrict triplets and load to the kept (non-Dirichlet) DOFs.

    Returns (rows, cols, vals) renumbered to the kept DOFs, the restricted
    right-hand side, and the kept-index array.  Homogeneous boundary values
    mean dropped couplings contribute nothing to the load.
    """
    keep_idx = np.flatnonzero(keep_mask)
    renumber = -np.ones(len(keep_mask), dtype=np.int64)
    renumber[keep_idx] = np.arange(len(keep_idx))
    ok = keep_mask[rows] & keep_mask[cols]
    return (renumber[rows[ok]], renumber[cols[ok]], vals[ok],
            rhs[keep_idx], keep_idx)
