"""Per-element effective coefficients condensed from local corrector fields.

Each coarse element K carries three enriched functions

    VV0 = 1 + V0,   VV1 = (x1 - xc1) + V1,   VV2 = (x2 - xc2) + V2,

built from the numerical correctors restricted to K.  Pairing them against a
family of test functions under the local bilinear form a_K and dividing by
|K| yields a 3x3 table E[beta, alpha] = a_K(VV^alpha, test^beta) / |K| whose
blocks are the effective mass (E[0,0]), the two advection vectors (E[0,1:]
and E[1:,0]) and the effective diffusion tensor (E[1:,1:]).

Two test families are supported: the affine drivers {1, x - xc} give the
Petrov-Galerkin flavor, while testing against the enriched functions
themselves gives the Galerkin flavor.  Without oversampling the two coincide
because the correctors are a_K-orthogonal to the test space; with
oversampling they genuinely differ.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .legacy_fem import EffectiveCoefficients
from .local import CorrectorSet, LocalDomain, _drivers, sampling_matrix
from .problem import ProblemSpec

__all__ = [
    "CoercivityReport",
    "coercivity_check",
    "effective_galerkin",
    "effective_pair",
    "effective_pg",
]


def _enriched_and_products(domain: LocalDomain, correctors: CorrectorSet,
                           spec: ProblemSpec):
    """Enriched functions VV and their images S_a VV under the local form."""
    fields = np.asarray(correctors.fields, dtype=float)
    if fields.shape != (3, domain.num_points):
        raise ValueError(
            f"corrector fields of shape {fields.shape} do not match the "
            f"element domain with {domain.num_points} nodes")
    # the true local form, regardless of the sampling form the correctors
    # were computed with
    S = sampling_matrix(domain, spec, "full")
    VV = _drivers(domain) + fields
    SVV = np.column_stack([S.matvec(VV[a]) for a in range(3)])
    return VV, SVV


def _split(E: np.ndarray):
    return float(E[0, 0]), E[0, 1:].copy(), E[1:, 0].copy(), E[1:, 1:].copy()


def _zero_lower_order(E: np.ndarray) -> None:
    # For pure diffusion the zeroth corrector vanishes identically, so every
    # term of the first row and column contains the gradient of a constant;
    # the identity is exact and is enforced exactly rather than left to
    # assembly rounding.
    E[0, :] = 0.0
    E[:, 0] = 0.0


def effective_pg(domain: LocalDomain, correctors: CorrectorSet,
                 spec: ProblemSpec):
    """Effective coefficients of the Petrov-Galerkin flavor on one element.

    Returns (Mbar, B1, B2, Abar) with B1[a] = a_K(VV^a, 1)/|K|,
    B2[b] = a_K(VV^0, x^b - xc^b)/|K| and Abar[b, a] = a_K(VV^a,
    x^b - xc^b)/|K|.
    """
    VV, SVV = _enriched_and_products(domain, correctors, spec)
    area = float(domain.areas.sum())
    E = (_drivers(domain) @ SVV) / area
    if spec.pure_diffusion:
        _zero_lower_order(E)
    return _split(E)


def effective_galerkin(domain: LocalDomain, correctors: CorrectorSet,
                       spec: ProblemSpec):
    """Effective coefficients of the Galerkin flavor on one element.

    Identical to the Petrov-Galerkin table except that the tests are the
    enriched functions themselves, which adds a_K(VV^a, V^b)/|K| to every
    entry.
    """
    VV, SVV = _enriched_and_products(domain, correctors, spec)
    area = float(domain.areas.sum())
    E = (VV @ SVV) / area
    if spec.pure_diffusion:
        _zero_lower_order(E)
    return _split(E)


def effective_pair(domain: LocalDomain, correctors: CorrectorSet,
                   spec: ProblemSpec):
    """Both flavors from a single assembly; returns (pg, galerkin) tuples."""
    VV, SVV = _enriched_and_products(domain, correctors, spec)
    area = float(domain.areas.sum())
    E_pg = (_drivers(domain) @ SVV) / area
    E_g = (VV @ SVV) / area
    if spec.pure_diffusion:
        _zero_lower_order(E_pg)
        _zero_lower_order(E_g)
    return _split(E_pg), _split(E_g)


@dataclass(frozen=True)
class CoercivityReport:
    """Elementwise spectral floor of the effective diffusion tensor."""

    m: float
    min_eigs: np.ndarray     # (T,) smallest eigenvalue of sym(Abar) per element
    fan_min: np.ndarray      # (T,) min of xi.Abar xi over a 16-direction fan
    flagged: np.ndarray      # indices of elements with min_eigs < m - 1e-8

    @property
    def ok(self) -> bool:
        return self.flagged.size == 0

    def __str__(self) -> str:
        state = "ok" if self.ok else f"{self.flagged.size} flagged"
        return (f"coercivity vs m={self.m:g}: min eig "
                f"{self.min_eigs.min():.6g} ({state})")


def coercivity_check(coeffs: EffectiveCoefficients, m: float) -> CoercivityReport:
    """Check the elementwise coercivity bound xi . Abar xi >= m |xi|^2.

    The bound holds with the continuous coercivity constant for the vertex
    space without oversampling and for the face-average space without
    oversampling or with DOF-continuous oversampling; for the vertex space
    with oversampling the bound has no guarantee and the report is
    informational.
    """
    A = coeffs.Abar
    sym = 0.5 * (A + np.transpose(A, (0, 2, 1)))
    a, b, d = sym[:, 0, 0], sym[:, 0, 1], sym[:, 1, 1]
    min_eigs = 0.5 * ((a + d) - np.sqrt((a - d) ** 2 + 4.0 * b ** 2))

    theta = np.pi * np.arange(16) / 16.0
    xi = np.stack([np.cos(theta), np.sin(theta)], axis=1)   # (16, 2)
    quad = np.einsum("fa,tab,fb->tf", xi, A, xi)
    fan_min = quad.min(axis=1)

    flagged = np.flatnonzero(min_eigs < m - 1e-8)
    return CoercivityReport(m=float(m), min_eigs=min_eigs, fan_min=fan_min,
                            flagged=flagged)
