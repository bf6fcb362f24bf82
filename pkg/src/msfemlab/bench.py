"""Experiment harness: configs, error norms, sweeps, caching, CSV.

The pieces here orchestrate the library for convergence studies: a small
``key = value`` configuration format, the broken H1 error used for all
reported numbers, a binary on-disk cache for the offline corrector data,
and ``run_experiment``, which emits one CSV row per (method, coarse size).

Everything is written so that a fixed configuration produces a
byte-identical CSV across repeated runs and across offline thread counts
(timing columns are zeroed unless wall-clock timings are requested).
"""

from __future__ import annotations

import hashlib
import os
import struct
import time
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from .legacy_fem import EffectiveCoefficients, reference_solve
from .local import CorrectorSet, _variant_tag
from .mesh import CoarseMesh, FineMesh, build_coarse_mesh, build_fine_mesh
from .msfem import (MethodConfig, OfflineData, offline, run_intrusive_galerkin,
                    run_intrusive_pg, run_nonintrusive)
from .problem import ProblemSpec, UnknownCoefficientError

__all__ = [
    "ConfigError",
    "CacheCorruptError",
    "ExperimentConfig",
    "parse_config",
    "serialize_config",
    "method_config",
    "broken_h1_error",
    "fine_broken_field",
    "CorrectorCache",
    "corrector_cache",
    "cache_write",
    "cache_read",
    "run_experiment",
]


class ConfigError(ValueError):
    """A configuration file could not be parsed or violates an invariant."""


class CacheCorruptError(RuntimeError):
    """A cache file exists but its contents are not trustworthy."""


# ---------------------------------------------------------------------------
# method tokens
# ---------------------------------------------------------------------------

_SPACES = {"lin": "lin", "lagrange": "lin", "cr": "cr"}
_OS_MODES = ("none", "extended", "continuous")
_FORMULATIONS = {"g": "galerkin-intrusive", "gni": "galerkin-ni", "pg": "pg"}


def _canonical_method(token: str) -> tuple[str, str, str]:
    """Split a ``space:os:formulation`` token into canonical parts."""
    parts = [p.strip().lower() for p in token.split(":")]
    if len(parts) != 3:
        raise ValueError(f"method {token!r} is not space:os:formulation")
    space, osmode, form = parts
    if space not in _SPACES:
        raise ValueError(f"method {token!r}: unknown space {space!r}")
    if osmode not in _OS_MODES:
        raise ValueError(f"method {token!r}: unknown oversampling {osmode!r}")
    if form not in _FORMULATIONS:
        raise ValueError(f"method {token!r}: unknown formulation {form!r}")
    return _SPACES[space], osmode, form


def method_config(token: str, rho: float = 3.0) -> MethodConfig:
    """Build the method description for a ``space:os:formulation`` token."""
    space, osmode, form = _canonical_method(token)
    return MethodConfig(space=space, oversampling=osmode,
                        rho=1.0 if osmode == "none" else rho,
                        formulation=_FORMULATIONS[form])


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ExperimentConfig:
    """One convergence study: problem data, mesh sizes, methods, outputs."""

    coefficient: str
    epsilon: float = 1.0
    f: str = "sine"
    coarse: tuple = (8,)
    fine: int = 256
    methods: tuple = ("lin:none:pg",)
    rho: float = 3.0
    tol: float = 1e-12
    timings: str = "none"
    out: str = "results.csv"
    cache: str = ""
    threads: int = 1

    def __post_init__(self):
        object.__setattr__(self, "coarse", tuple(int(n) for n in self.coarse))
        object.__setattr__(self, "methods", tuple(self.methods))
        if self.epsilon <= 0.0:
            raise ValueError("epsilon must be positive")
        if self.fine < 1:
            raise ValueError("fine size must be positive")
        if not self.coarse:
            raise ValueError("at least one coarse size is required")
        for n in self.coarse:
            if n < 1:
                raise ValueError("coarse sizes must be positive")
            if self.fine % n != 0:
                raise ValueError(
                    f"fine size {self.fine} is not divisible by coarse {n}")
        if not self.methods:
            raise ValueError("at least one method is required")
        for token in self.methods:
            method_config(token, self.rho)
        if self.rho < 1.0:
            raise ValueError("rho must be at least 1")
        if self.tol <= 0.0:
            raise ValueError("tol must be positive")
        if self.timings not in ("none", "wall"):
            raise ValueError("timings must be 'none' or 'wall'")
        if self.threads < 1:
            raise ValueError("threads must be at least 1")
        # Validates the coefficient name and right-hand side selector.
        self.problem()

    def problem(self) -> ProblemSpec:
        return ProblemSpec(coefficient=self.coefficient,
                           epsilon=self.epsilon, f=self.f)


def _parse_int_list(value: str) -> tuple:
    items = [p for chunk in value.split(",") for p in chunk.split()]
    if not items:
        raise ValueError("expected at least one integer")
    return tuple(int(p) for p in items)


def _parse_str_list(value: str) -> tuple:
    items = [p for chunk in value.split(",") for p in chunk.split()]
    if not items:
        raise ValueError("expected at least one entry")
    return tuple(items)


_KEY_PARSERS = {
    "coefficient": str,
    "epsilon": float,
    "f": str,
    "coarse": _parse_int_list,
    "fine": int,
    "methods": _parse_str_list,
    "rho": float,
    "tol": float,
    "timings": str,
    "out": str,
    "cache": str,
    "threads": int,
}


def parse_config(text: str) -> ExperimentConfig:
    """Parse ``key = value`` lines (UTF-8, ``#`` comments) into a config.

    Unknown keys, malformed values, duplicate keys, and violated
    invariants all raise ConfigError carrying the offending line number.
    """
    entries = {}
    where = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, _, value = line.partition("=")
        key = key.strip()
        value = value.strip()
        if key not in _KEY_PARSERS:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key in entries:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        try:
            entries[key] = _KEY_PARSERS[key](value)
        except ValueError as exc:
            raise ConfigError(
                f"line {lineno}: bad value for {key!r}: {exc}") from exc
        where[key] = lineno
    if "coefficient" not in entries:
        raise ConfigError("missing required key 'coefficient'")
    try:
        return ExperimentConfig(**entries)
    except (ValueError, UnknownCoefficientError) as exc:
        lineno = max(where.values())
        raise ConfigError(
            f"line {lineno}: invalid configuration: {exc}") from exc


def serialize_config(config: ExperimentConfig) -> str:
    """Canonical text form; parsing it reproduces an equal config."""
    def fmt(value):
        if isinstance(value, float):
            return repr(value)
        if isinstance(value, tuple):
            return ", ".join(str(v) for v in value)
        return str(value)

    lines = [f"{f.name} = {fmt(getattr(config, f.name))}"
             for f in fields(config)]
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# error norms
# ---------------------------------------------------------------------------

def _as_broken(mesh: CoarseMesh, arr: np.ndarray) -> np.ndarray:
    arr = np.asarray(arr, dtype=float)
    if arr.shape == (mesh.num_vertices,):
        return arr[mesh.triangles]
    if arr.shape == (mesh.num_triangles, 3):
        return arr
    raise ValueError(
        f"field shape {arr.shape} matches neither nodal ({mesh.num_vertices},) "
        f"nor broken ({mesh.num_triangles}, 3) layout")


def _broken_h1_sq(mesh: CoarseMesh, broken: np.ndarray) -> float:
    """Exact elementwise integral of v^2 + |grad v|^2 for P1 pieces."""
    total = broken.sum(axis=1)
    mass = mesh.areas / 12.0 * (total * total + (broken * broken).sum(axis=1))
    g = np.einsum("tic,ti->tc", mesh.grads, broken)
    stiff = mesh.areas * (g * g).sum(axis=1)
    return float(mass.sum() + stiff.sum())


def broken_h1_error(u, v, mesh: CoarseMesh) -> tuple:
    """Broken H1 distance between two fields and its size relative to v.

    Fields may be nodal (one value per vertex) or broken (one value per
    element corner); the integrals are exact for P1 pieces.  The relative
    value is inf when v has zero norm but the difference does not.
    """
    ub = _as_broken(mesh, u)
    vb = _as_broken(mesh, v)
    diff_sq = _broken_h1_sq(mesh, ub - vb)
    ref_sq = _broken_h1_sq(mesh, vb)
    absolute = float(np.sqrt(diff_sq))
    if diff_sq == 0.0:
        return 0.0, 0.0
    relative = absolute / np.sqrt(ref_sq) if ref_sq > 0.0 else float("inf")
    return absolute, float(relative)


def fine_broken_field(fine: FineMesh, fields: np.ndarray) -> np.ndarray:
    """Scatter per-coarse-element nodal values to fine broken layout.

    ``fields`` has one row per coarse element holding values at that
    element's fine sub-nodes (the multiscale solution layout); the result
    has shape (fine triangles, 3).
    """
    T = fields.shape[0]
    broken = np.empty((fine.num_triangles, 3))
    broken[fine.sub_tris] = fields[np.arange(T)[:, None, None], fine.sub_conn]
    return broken


# ---------------------------------------------------------------------------
# corrector cache
# ---------------------------------------------------------------------------

_CACHE_MAGIC = b"MSFC"
_CACHE_VERSION = 1
_HEADER = struct.Struct("<4sI32sII")  # magic, version, digest, T, nsub


@dataclass(frozen=True)
class CorrectorCache:
    """Handle for one offline data set on disk (one config, one coarse n)."""

    path: Path
    digest: bytes
    space: str
    oversampling: str


def _spec_key(spec: ProblemSpec, cfg: MethodConfig, fine_n: int,
              coarse_n: int) -> str:
    def scalarish(value):
        if value is None:
            return "-"
        if callable(value):
            raise ValueError(
                "cannot cache offline data for callable problem fields")
        arr = np.atleast_1d(np.asarray(value, dtype=float))
        return ",".join(f"{v:.17g}" for v in arr)

    return "|".join([
        spec.coefficient, f"{spec.epsilon:.17g}", scalarish(spec.advection),
        scalarish(spec.reaction), str(spec.skew_symmetrized), str(spec.f),
        cfg.space, cfg.oversampling, f"{cfg.rho:.17g}", cfg.sampling,
        f"fine={fine_n}", f"coarse={coarse_n}",
    ])


def corrector_cache(directory, spec: ProblemSpec, cfg: MethodConfig,
                    fine_n: int, coarse_n: int) -> CorrectorCache:
    """Locate the cache file for one offline data set."""
    digest = hashlib.sha256(
        _spec_key(spec, cfg, fine_n, coarse_n).encode()).digest()
    name = f"msfc_{digest.hex()[:16]}_n{coarse_n}.bin"
    return CorrectorCache(path=Path(directory) / name, digest=digest,
                          space=cfg.space, oversampling=cfg.oversampling)


def _pack_coeffs(coeffs: EffectiveCoefficients) -> np.ndarray:
    return np.column_stack([coeffs.Mbar, coeffs.B1, coeffs.B2,
                            coeffs.Abar.reshape(-1, 4)])


def _unpack_coeffs(block: np.ndarray, flavor: str) -> EffectiveCoefficients:
    return EffectiveCoefficients(Mbar=block[:, 0], B1=block[:, 1:3],
                                 B2=block[:, 3:5],
                                 Abar=block[:, 5:9].reshape(-1, 2, 2),
                                 flavor=flavor)


def cache_write(cache: CorrectorCache, data: OfflineData) -> None:
    """Persist correctors and both coefficient flavors (atomic replace)."""
    stacked = np.ascontiguousarray(
        np.stack([cs.fields for cs in data.correctors]), dtype="<f8")
    T, _, nsub = stacked.shape
    payload = b"".join([
        _HEADER.pack(_CACHE_MAGIC, _CACHE_VERSION, cache.digest, T, nsub),
        stacked.tobytes(),
        np.ascontiguousarray(_pack_coeffs(data.pg), dtype="<f8").tobytes(),
        np.ascontiguousarray(_pack_coeffs(data.galerkin),
                             dtype="<f8").tobytes(),
    ])
    cache.path.parent.mkdir(parents=True, exist_ok=True)
    tmp = cache.path.with_suffix(".tmp")
    tmp.write_bytes(payload)
    os.replace(tmp, cache.path)


def cache_read(cache: CorrectorCache):
    """Load offline data, or None on a miss (absent file / stale digest)."""
    try:
        blob = cache.path.read_bytes()
    except FileNotFoundError:
        return None
    if len(blob) < _HEADER.size:
        raise CacheCorruptError(f"{cache.path}: truncated header")
    magic, version, digest, T, nsub = _HEADER.unpack_from(blob)
    if magic != _CACHE_MAGIC:
        raise CacheCorruptError(f"{cache.path}: bad magic {magic!r}")
    if version != _CACHE_VERSION:
        raise CacheCorruptError(f"{cache.path}: unsupported version {version}")
    if digest != cache.digest:
        return None
    expected = _HEADER.size + 8 * (T * 3 * nsub + 2 * T * 9)
    if len(blob) != expected:
        raise CacheCorruptError(
            f"{cache.path}: expected {expected} bytes, found {len(blob)}")
    body = np.frombuffer(blob, dtype="<f8", offset=_HEADER.size)
    stacked = body[:T * 3 * nsub].reshape(T, 3, nsub)
    pg_block = body[T * 3 * nsub:T * 3 * nsub + T * 9].reshape(T, 9)
    g_block = body[T * 3 * nsub + T * 9:].reshape(T, 9)
    variant = _variant_tag(cache.space)
    correctors = [CorrectorSet(owner=k, space=variant,
                               variant=cache.oversampling,
                               fields=stacked[k].copy())
                  for k in range(T)]
    return OfflineData(correctors=correctors,
                       pg=_unpack_coeffs(pg_block, "pg"),
                       galerkin=_unpack_coeffs(g_block, "galerkin"))


# ---------------------------------------------------------------------------
# experiment driver
# ---------------------------------------------------------------------------

_CSV_COLUMNS = ("H", "space", "os", "formulation", "rel_H1_err_vs_ref",
                "rel_H1_diff_G_vs_variant", "offline_seconds",
                "online_seconds", "error")


def _fmt(value) -> str:
    return "" if value is None else f"{value:.12e}"


def _sanitize(message: str) -> str:
    return str(message).replace(",", ";").replace("\n", " ")


@dataclass
class _Row:
    token: str
    n: int
    rel_err: float = None
    rel_diff: float = None
    offline_s: float = None
    online_s: float = None
    error: str = ""

    def render(self) -> str:
        space, osmode, form = self.token.split(":")
        return ",".join([
            _fmt(1.0 / self.n), space, osmode, form, _fmt(self.rel_err),
            _fmt(self.rel_diff), _fmt(self.offline_s), _fmt(self.online_s),
            self.error,
        ])


def _obtain_offline(coarse, fine, spec, cfg, threads, cache_dir, fine_n):
    if cache_dir:
        handle = corrector_cache(cache_dir, spec, cfg, fine_n, coarse.n)
        data = cache_read(handle)
        if data is None:
            data = offline(coarse, fine, spec, cfg, threads=threads)
            cache_write(handle, data)
        return data
    return offline(coarse, fine, spec, cfg, threads=threads)


_RUNNERS = {
    "g": run_intrusive_galerkin,
    "gni": run_nonintrusive,
    "pg": run_nonintrusive,
}


def run_experiment(config: ExperimentConfig, threads: int = None,
                   cache_dir: str = None) -> str:
    """Run the configured study and return the CSV text.

    The reference problem is solved once; offline data is shared by all
    formulations of a (space, oversampling) pair and optionally cached on
    disk.  Per-run failures become rows with a populated error column and
    the sweep continues.  Rows are sorted by (method token, H).
    """
    threads = config.threads if threads is None else threads
    cache_dir = config.cache if cache_dir is None else cache_dir
    spec = config.problem()
    timed = config.timings == "wall"

    ref_mesh = build_coarse_mesh(config.fine)
    ref = reference_solve(ref_mesh, spec)

    tokens = [":".join(_canonical_method(t)) for t in config.methods]
    rows = []
    for n in sorted(set(config.coarse), reverse=True):
        coarse = build_coarse_mesh(n)
        fine = build_fine_mesh(coarse, config.fine // n)
        ref_broken = ref[fine.triangles]
        ref_norm = np.sqrt(_broken_h1_sq(fine, ref_broken))
        if not ref_norm > 0.0:
            raise RuntimeError("reference solution has zero norm")

        groups = {}
        for token in tokens:
            space, osmode, form = token.split(":")
            groups.setdefault((space, osmode), []).append((token, form))

        for (space, osmode), members in sorted(groups.items()):
            base = f"{space}:{osmode}"
            try:
                t0 = time.perf_counter()
                off = _obtain_offline(coarse, fine, spec,
                                      method_config(f"{base}:pg", config.rho),
                                      threads, cache_dir, config.fine)
                offline_s = time.perf_counter() - t0
            except Exception as exc:
                rows.extend(_Row(token, n, error=_sanitize(exc))
                            for token, _ in members)
                continue

            g_cache = {}

            def galerkin_broken():
                if "broken" not in g_cache:
                    sol = run_intrusive_galerkin(
                        coarse, fine, spec, method_config(f"{base}:g",
                                                          config.rho),
                        threads=threads, offline_data=off)
                    g_cache["broken"] = fine_broken_field(fine, sol.fields)
                return g_cache["broken"]

            for token, form in members:
                row = _Row(token, n)
                try:
                    cfg = method_config(token, config.rho)
                    t0 = time.perf_counter()
                    sol = _RUNNERS[form](coarse, fine, spec, cfg,
                                         threads=threads, offline_data=off)
                    online_s = time.perf_counter() - t0
                    broken = fine_broken_field(fine, sol.fields)
                    if form == "g":
                        g_cache["broken"] = broken
                    row.rel_err = broken_h1_error(broken, ref_broken, fine)[1]
                    diff = broken_h1_error(broken, galerkin_broken(), fine)[0]
                    row.rel_diff = diff / ref_norm
                    row.offline_s = offline_s if timed else 0.0
                    row.online_s = online_s if timed else 0.0
                except Exception as exc:
                    row.error = _sanitize(exc)
                rows.append(row)

    rows.sort(key=lambda r: (r.token, 1.0 / r.n))
    lines = [",".join(_CSV_COLUMNS)] + [r.render() for r in rows]
    return "\n".join(lines) + "\n"
