"""PDE data: coefficient fields, right-hand sides, and element bilinear forms.

The coefficient registry holds the named diffusion tensors used across the
library (a rapidly oscillating periodic field, its non-periodic modulation,
laminate and checkerboard microstructures, and constants).  All evaluation
is vectorized: points of shape (..., 2) map to tensors of shape (..., 2, 2).

Quadrature convention: coefficients are sampled at element centroids
(one-point rule), making A piecewise constant on the fine mesh; this keeps
the discrete identities between the assembly routes exact.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

__all__ = [
    "ProblemSpec",
    "UnknownCoefficientError",
    "COEFFICIENTS",
    "RHS_FIELDS",
    "eval_coefficient",
    "coefficient_at",
    "advection_at",
    "reaction_at",
    "rhs_at",
    "element_bilinear",
]


class UnknownCoefficientError(KeyError):
    """Requested coefficient (or right-hand side) is not in the registry."""


def _isotropic(nu: np.ndarray) -> np.ndarray:
    """Expand a scalar field (...,) into nu * Id of shape (..., 2, 2)."""
    out = np.zeros(nu.shape + (2, 2))
    out[..., 0, 0] = nu
    out[..., 1, 1] = nu
    return out


def _periodic_scalar(x: np.ndarray, eps: float) -> np.ndarray:
    x1 = x[..., 0]
    x2 = x[..., 1]
    return 1.0 + 100.0 * np.cos(np.pi * x1 / eps) ** 2 * np.sin(np.pi * x2 / eps) ** 2


def _coeff_constant(a0: float, a1: float | None = None):
    d0 = float(a0)
    d1 = d0 if a1 is None else float(a1)

    def f(x, eps):
        out = np.zeros(np.shape(x)[:-1] + (2, 2))
        out[..., 0, 0] = d0
        out[..., 1, 1] = d1
        return out

    return f, min(abs(d0), abs(d1)), max(abs(d0), abs(d1))


def _coeff_periodic():
    def f(x, eps):
        return _isotropic(_periodic_scalar(x, eps))
    return f, 1.0, 101.0


def _coeff_nonperiodic():
    def f(x, eps):
        nu = _periodic_scalar(x, eps)
        return _isotropic((1.0 + np.cos(2.0 * np.pi * x[..., 0]) ** 2) * nu)
    return f, 1.0, 202.0


def _coeff_laminate(a1: float, a2: float):
    def f(x, eps):
        y1 = np.mod(x[..., 0] / eps, 1.0)
        return _isotropic(np.where(y1 < 0.5, a1, a2))
    return f, min(a1, a2), max(a1, a2)


def _coeff_checkerboard(a: float, b: float):
    def f(x, eps):
        y1 = np.mod(x[..., 0] / eps, 1.0)
        y2 = np.mod(x[..., 1] / eps, 1.0)
        parity = (np.floor(2.0 * y1) + np.floor(2.0 * y2)).astype(np.int64) % 2
        return _isotropic(np.where(parity == 0, a, b))
    return f, min(a, b), max(a, b)


# name -> (factory accepting parsed parameters, arity)
_COEFF_FACTORIES = {
    "constant": (_coeff_constant, (1, 2)),
    "periodic": (_coeff_periodic, (0,)),
    "nonperiodic": (_coeff_nonperiodic, (0,)),
    "laminate": (_coeff_laminate, (2,)),
    "checkerboard": (_coeff_checkerboard, (2,)),
}

COEFFICIENTS = tuple(_COEFF_FACTORIES)

_NAME_RE = re.compile(r"^\s*([a-z]+)\s*(?:\(\s*([^()]*)\s*\))?\s*$")


def _parse_coefficient(name: str):
    match = _NAME_RE.match(name)
    if not match:
        raise UnknownCoefficientError(f"malformed coefficient name: {name!r}")
    base, arg_str = match.group(1), match.group(2)
    if base not in _COEFF_FACTORIES:
        raise UnknownCoefficientError(f"unknown coefficient: {base!r}")
    factory, arities = _COEFF_FACTORIES[base]
    args = []
    if arg_str:
        try:
            args = [float(a) for a in arg_str.split(",")]
        except ValueError as exc:
            raise UnknownCoefficientError(
                f"non-numeric parameter in coefficient {name!r}") from exc
    if len(args) not in arities:
        wanted = " or ".join(str(a) for a in arities)
        raise UnknownCoefficientError(
            f"coefficient {base!r} takes {wanted} parameter(s), got {len(args)}")
    return factory(*args)


def _rhs_sine(x):
    return np.sin(x[..., 0]) * np.sin(x[..., 1])


def _rhs_zero(x):
    return np.zeros(np.shape(x)[:-1])


def _rhs_one(x):
    return np.ones(np.shape(x)[:-1])


def _rhs_manufactured(x):
    return (2.0 * np.pi ** 2
            * np.sin(np.pi * x[..., 0]) * np.sin(np.pi * x[..., 1]))


RHS_FIELDS = {
    "sine": _rhs_sine,
    "zero": _rhs_zero,
    "one": _rhs_one,
    "manufactured": _rhs_manufactured,
}


@dataclass
class ProblemSpec:
    """A full problem description: coefficients, lower-order terms, data.

    coefficient is a registry name such as "periodic" or "laminate(1,4)";
    advection is an optional constant 2-vector or callable b(x); reaction an
    optional constant or callable sigma(x) >= 0.  m and M are the coercivity
    and continuity bounds of the diffusion tensor, filled in from the
    registry when not given.
    """

    coefficient: str = "constant(1)"
    epsilon: float = 1.0
    advection: object = None
    reaction: object = None
    skew_symmetrized: bool = True
    f: object = "sine"
    m: float = None
    M: float = None
    _A: Callable = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if self.epsilon <= 0.0:
            raise ValueError("epsilon must be positive")
        A, m, M = _parse_coefficient(self.coefficient)
        self._A = A
        if self.m is None:
            self.m = m
        if self.M is None:
            self.M = M
        if isinstance(self.f, str) and self.f not in RHS_FIELDS:
            raise UnknownCoefficientError(f"unknown right-hand side: {self.f!r}")

    @property
    def has_advection(self) -> bool:
        return self.advection is not None

    @property
    def has_reaction(self) -> bool:
        return self.reaction is not None

    @property
    def pure_diffusion(self) -> bool:
        return not (self.has_advection or self.has_reaction)


def coefficient_at(spec: ProblemSpec, x: np.ndarray) -> np.ndarray:
    """Diffusion tensor A(x); x of shape (..., 2) gives (..., 2, 2)."""
    return spec._A(np.asarray(x, dtype=float), spec.epsilon)


def advection_at(spec: ProblemSpec, x: np.ndarray) -> np.ndarray:
    """Advection field b(x) of shape (..., 2); zero when absent."""
    x = np.asarray(x, dtype=float)
    if spec.advection is None:
        return np.zeros(x.shape)
    if callable(spec.advection):
        return np.asarray(spec.advection(x), dtype=float)
    return np.broadcast_to(np.asarray(spec.advection, dtype=float), x.shape).copy()


def reaction_at(spec: ProblemSpec, x: np.ndarray) -> np.ndarray:
    """Reaction field sigma(x) of shape (...,); zero when absent."""
    x = np.asarray(x, dtype=float)
    if spec.reaction is None:
        return np.zeros(x.shape[:-1])
    if callable(spec.reaction):
        return np.asarray(spec.reaction(x), dtype=float)
    return np.full(x.shape[:-1], float(spec.reaction))


def rhs_at(spec: ProblemSpec, x: np.ndarray) -> np.ndarray:
    """Right-hand side f(x) of shape (...,)."""
    x = np.asarray(x, dtype=float)
    if callable(spec.f):
        return np.asarray(spec.f(x), dtype=float)
    return RHS_FIELDS[spec.f](x)


def eval_coefficient(spec: ProblemSpec, x) -> tuple:
    """All coefficient fields at x: (A (...,2,2), b (...,2), sigma (...,))."""
    x = np.asarray(x, dtype=float)
    return coefficient_at(spec, x), advection_at(spec, x), reaction_at(spec, x)


def element_bilinear(spec: ProblemSpec, tri_pts: np.ndarray,
                     u: np.ndarray, v: np.ndarray) -> float:
    """The element bilinear form a_K(u, v) for P1 fields on one triangle.

    tri_pts is (3, 2); u and v hold the three nodal values.  Coefficients
    are sampled at the centroid; the advection term uses the
    skew-symmetrized form (1/2)(v b.grad(u) - u b.grad(v)) when the spec
    requests it, the plain form v b.grad(u) otherwise.
    """
    tri_pts = np.asarray(tri_pts, dtype=float)
    u = np.asarray(u, dtype=float)
    v = np.asarray(v, dtype=float)
    e1 = tri_pts[1] - tri_pts[0]
    e2 = tri_pts[2] - tri_pts[0]
    det = e1[0] * e2[1] - e1[1] * e2[0]
    area = 0.5 * abs(det)
    # gradients of the barycentric coordinates
    grads = np.empty((3, 2))
    for l in range(3):
        opp = tri_pts[(l + 2) % 3] - tri_pts[(l + 1) % 3]
        grads[l] = np.array([-opp[1], opp[0]]) / det
    grad_u = u @ grads
    grad_v = v @ grads
    centroid = tri_pts.mean(axis=0)
    A, b, sigma = eval_coefficient(spec, centroid)

    value = area * float(grad_v @ A @ grad_u)
    u_c = float(u.mean())
    v_c = float(v.mean())
    if spec.has_advection:
        if spec.skew_symmetrized:
            value += 0.5 * area * (v_c * float(b @ grad_u) - u_c * float(b @ grad_v))
        else:
            value += area * v_c * float(b @ grad_u)
    if spec.has_reaction:
        value += area * float(sigma) * u_c * v_c
    return value
