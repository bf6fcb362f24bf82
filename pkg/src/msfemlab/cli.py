"""Command-line front end.

Four subcommands wrap the library for shell use:

- ``solve``    one method at one coarse size, errors printed to stdout
- ``sweep``    the full configured study, CSV written to disk
- ``cell``     periodic cell problems, homogenized tensor printed
- ``compare``  G / G-ni / PG side by side at one coarse size

All of them read the same ``key = value`` configuration files; flags
override the file where noted.  Exit code 0 on success, 1 on any hard
error (with a message on stderr), 2 on usage errors.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import replace
from pathlib import Path

from .bench import (ConfigError, _canonical_method, parse_config,
                    run_experiment)
from .homogenization import periodic_profile, solve_cell_problems

__all__ = ["main"]


def _load_config(path: str):
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path!r}: {exc}") from exc
    return parse_config(text)


def _csv_rows(csv: str):
    lines = csv.strip().split("\n")
    header = lines[0].split(",")
    return [dict(zip(header, line.split(","))) for line in lines[1:]]


def _print_rows(rows, columns):
    widths = [max(len(c), max((len(r[c]) for r in rows), default=0))
              for c in columns]
    print("  ".join(c.ljust(w) for c, w in zip(columns, widths)).rstrip())
    for row in rows:
        print("  ".join(row[c].ljust(w)
                        for c, w in zip(columns, widths)).rstrip())


def _cmd_solve(args) -> int:
    config = _load_config(args.config)
    method = args.method or config.methods[0]
    n = args.n or config.coarse[0]
    config = replace(config, methods=(method,), coarse=(n,))
    csv = run_experiment(config, threads=args.threads, cache_dir=args.cache)
    row = _csv_rows(csv)[0]
    if row["error"]:
        print(f"error: {row['error']}", file=sys.stderr)
        return 1
    for key in ("H", "space", "os", "formulation", "rel_H1_err_vs_ref",
                "rel_H1_diff_G_vs_variant"):
        print(f"{key} = {row[key]}")
    return 0


def _cmd_sweep(args) -> int:
    config = _load_config(args.config)
    csv = run_experiment(config, threads=args.threads, cache_dir=args.cache)
    out = Path(args.out or config.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(csv, encoding="utf-8")
    failures = sum(1 for row in _csv_rows(csv) if row["error"])
    print(f"wrote {out} ({len(_csv_rows(csv))} rows, {failures} failed)")
    return 1 if failures else 0


def _cmd_cell(args) -> int:
    config = _load_config(args.config)
    cell = solve_cell_problems(periodic_profile(config.problem()), args.n)
    print(f"homogenized tensor (cell resolution {args.n}):")
    for row in cell.A_star:
        print("  ".join(f"{v: .12e}" for v in row))
    return 0


def _cmd_compare(args) -> int:
    config = _load_config(args.config)
    n = args.n or config.coarse[0]
    bases = []
    for token in config.methods:
        space, osmode, _ = _canonical_method(token)
        if (space, osmode) not in bases:
            bases.append((space, osmode))
    methods = tuple(f"{space}:{osmode}:{form}"
                    for space, osmode in bases for form in ("g", "gni", "pg"))
    config = replace(config, methods=methods, coarse=(n,))
    csv = run_experiment(config, threads=args.threads, cache_dir=args.cache)
    rows = _csv_rows(csv)
    _print_rows(rows, ["space", "os", "formulation", "rel_H1_err_vs_ref",
                       "rel_H1_diff_G_vs_variant", "error"])
    return 1 if any(row["error"] for row in rows) else 0


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="msfemlab",
        description="Multiscale finite element studies on the unit square.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, cache=True):
        p.add_argument("--config", required=True, help="key = value file")
        p.add_argument("--threads", type=int, default=None,
                       help="offline worker threads")
        if cache:
            p.add_argument("--cache", default=None,
                           help="directory for offline corrector caches")

    p = sub.add_parser("solve", help="run one method at one coarse size")
    common(p)
    p.add_argument("--method", default=None,
                   help="space:os:formulation token (default: first in config)")
    p.add_argument("--n", type=int, default=None,
                   help="coarse size (default: first in config)")
    p.set_defaults(func=_cmd_solve)

    p = sub.add_parser("sweep", help="run the full study, write the CSV")
    common(p)
    p.add_argument("--out", default=None, help="CSV path (default: config)")
    p.set_defaults(func=_cmd_sweep)

    p = sub.add_parser("cell", help="solve the periodic cell problems")
    p.add_argument("--config", required=True, help="key = value file")
    p.add_argument("--n", type=int, default=128, help="cell resolution")
    p.set_defaults(func=_cmd_cell)

    p = sub.add_parser("compare", help="G vs G-ni vs PG at one coarse size")
    common(p)
    p.add_argument("--n", type=int, default=None,
                   help="coarse size (default: first in config)")
    p.set_defaults(func=_cmd_compare)
    return parser


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # hard errors become messages, not tracebacks
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
