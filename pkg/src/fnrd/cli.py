"""Command-line surface: solve, convergence studies, regularity estimate.

Subcommands: `solve`, `study spatial|temporal|first-step`, `estimate-gamma`,
`cache clear`.  Exit codes: 0 success, 1 configuration error, 2 numerical
failure.  The cache directory defaults to $FNRD_CACHE.
"""

import argparse
import json
import math
import os
import shutil
import sys
from pathlib import Path

import numpy as np

from . import study as study_mod
from .errors import ConfigurationError, NumericalError
from .integrator import integrate
from .model import DATUM_IDS
from .study import (ConvergenceTable, StudyConfig, TableRow, default_config,
                    get_context, make_initial_state, precompute_references)

CSV_HEADER = "resolution,error_L2,order_L2,error_H1,order_H1"


def _fmt_error(v: float) -> str:
    return f"{v:.3E}"


def _fmt_order(v) -> str:
    if v is None or (isinstance(v, float) and math.isnan(v)):
        return "--"
    return f"{v:.3f}"


def write_table(table: ConvergenceTable, out_dir) -> tuple:
    """Write a study table as CSV plus a JSON metadata sidecar."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    protocol = table.meta.get("protocol", "study").replace("-", "_")
    datum = table.meta.get("datum", "x")
    stem = f"{protocol}_{datum}"
    csv_path = out_dir / f"{stem}.csv"
    json_path = out_dir / f"{stem}.json"
    lines = [CSV_HEADER]
    for r in table.rows:
        lines.append(",".join([
            r.resolution, _fmt_error(r.error_L2), _fmt_order(r.order_L2),
            _fmt_error(r.error_H1), _fmt_order(r.order_H1)]))
    csv_path.write_text("\n".join(lines) + "\n")
    json_path.write_text(json.dumps(table.meta, indent=1, sort_keys=True))
    return csv_path, json_path


def read_table(csv_path) -> ConvergenceTable:
    """Parse a table written by write_table (orders '--' become None)."""
    lines = Path(csv_path).read_text().strip().splitlines()
    if lines[0] != CSV_HEADER:
        raise ConfigurationError(f"unexpected CSV header in {csv_path}")
    rows = []
    for line in lines[1:]:
        res, e0, o0, e1, o1 = line.split(",")
        rows.append(TableRow(
            res, float(e0), None if o0 == "--" else float(o0),
            float(e1), None if o1 == "--" else float(o1)))
    return ConvergenceTable(rows=rows, meta={})


def _default_cache_dir() -> Path:
    env = os.environ.get("FNRD_CACHE")
    if env:
        return Path(env)
    return Path.home() / ".cache" / "fnrd"


def _load_config_file(path) -> dict:
    try:
        data = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigurationError(f"cannot read config file {path}: {exc}")
    if isinstance(data, dict) and isinstance(data.get("config"), dict):
        data = data["config"]  # accept a study sidecar directly
    if not isinstance(data, dict):
        raise ConfigurationError(f"config file {path} must hold a JSON object")
    return data


def _make_config(args, datum: str, ref_overrides: bool = True) -> StudyConfig:
    base = {}
    if args.config:
        base.update(_load_config_file(args.config))
    quick = bool(base.pop("quick", False) or getattr(args, "quick", False))
    base["datum"] = datum
    if getattr(args, "T", None) is not None:
        base["T"] = args.T
    if ref_overrides and getattr(args, "level", None) is not None:
        base["ref_level"] = args.level
    if ref_overrides and getattr(args, "steps", None) is not None:
        T = base.get("T", 0.1)
        base["ref_dt"] = T / args.steps
    if quick:
        datum = base.pop("datum")
        return default_config(datum, quick=True, **base)
    return StudyConfig.from_dict(base)


def _build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="fnrd",
        description="Field-Noyes reaction-diffusion solver and convergence "
                    "studies")
    p.add_argument("--cache-dir", type=Path, default=None,
                   help="reference/spectrum cache (default: $FNRD_CACHE)")
    sub = p.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--datum", default="iii",
                        help="initial datum id i..iv, const:<v>, or 'all'")
    common.add_argument("--config", type=Path, default=None,
                        help="JSON config file (study sidecars accepted)")
    common.add_argument("--T", type=float, default=None, help="final time")
    common.add_argument("--out", type=Path, default=Path("fnrd_out"),
                        help="output directory")

    ps = sub.add_parser("solve", parents=[common],
                        help="integrate once and dump the final state")
    ps.add_argument("--level", type=int, default=4, help="mesh level")
    ps.add_argument("--steps", type=int, default=32, help="time steps")

    pt = sub.add_parser("study", parents=[common],
                        help="run a convergence study and write CSV + JSON")
    pt.add_argument("protocol", choices=["spatial", "temporal", "first-step"])
    pt.add_argument("--quick", action="store_true",
                    help="CI-sized reference (level 5, dt = 1/10240)")
    pt.add_argument("--level", type=int, default=None,
                    help="override the reference mesh level")
    pt.add_argument("--steps", type=int, default=None,
                    help="override the reference step count (sets ref_dt)")

    pg = sub.add_parser("estimate-gamma", parents=[common],
                        help="estimate the datum regularity")
    pg.add_argument("--levels", default="3,4,5,6",
                    help="comma-separated mesh levels")
    pg.add_argument("--s", type=float, default=None,
                    help="fractional order of the probing norm")

    pc = sub.add_parser("cache", help="cache maintenance")
    pc.add_argument("action", choices=["clear"])
    return p


_STUDIES = {
    "spatial": study_mod.run_spatial_study,
    "temporal": study_mod.run_temporal_study,
    "first-step": study_mod.run_first_step_study,
}


def _cmd_solve(args, cache_dir: Path) -> int:
    T = args.T if args.T is not None else 0.1
    config = _make_config(args, args.datum, ref_overrides=False)
    ctx = get_context(args.level, config.params, cache_dir)
    state0 = make_initial_state(config, args.level)
    final = integrate(ctx, state0, T / args.steps, args.steps,
                      nonlinearity=config.nonlinearity)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    stem = f"solution_{args.datum}_l{args.level}_n{args.steps}"
    (out / f"{stem}.bin").write_bytes(
        np.ascontiguousarray(final.u, dtype="<f8").tobytes())
    meta = {"t": final.t, "n": final.n, "level": args.level,
            "datum": args.datum, "steps": args.steps, "T": T,
            "layout": "row-major (node, species), little-endian float64",
            "config": config.as_dict()}
    (out / f"{stem}.json").write_text(json.dumps(meta, indent=1,
                                                 sort_keys=True))
    print(f"wrote {out / (stem + '.bin')} (t = {final.t:.6g})")
    return 0


def _cmd_study(args, cache_dir: Path) -> int:
    datums = list(DATUM_IDS) if args.datum == "all" else [args.datum]
    configs = [_make_config(args, d) for d in datums]
    if len(configs) > 1:
        precompute_references(configs[0], datums, cache_dir)
    runner = _STUDIES[args.protocol]
    for config in configs:
        table = runner(config, cache_dir=cache_dir)
        csv_path, json_path = write_table(table, args.out)
        print(f"wrote {csv_path} and {json_path}")
    return 0


def _cmd_estimate_gamma(args, cache_dir: Path) -> int:
    from .model import get_datum
    levels = tuple(int(t) for t in str(args.levels).split(","))
    s = args.s
    if s is None:
        nominal = get_datum(args.datum).gamma
        s = None if nominal is None else (1.0 if nominal <= 1.0 else 2.0)
    gamma = study_mod.estimate_gamma(args.datum, levels=levels, s=s,
                                     cache_dir=cache_dir)
    print(f"datum {args.datum}: gamma-hat = {gamma:.4f}")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        payload = {"datum": args.datum, "levels": list(levels),
                   "s": s, "gamma_hat": gamma}
        (out / f"gamma_{args.datum}.json").write_text(
            json.dumps(payload, indent=1, sort_keys=True))
    return 0


def _cmd_cache(args, cache_dir: Path) -> int:
    if cache_dir.exists():
        shutil.rmtree(cache_dir)
    cache_dir.mkdir(parents=True, exist_ok=True)
    print(f"cleared cache {cache_dir}")
    return 0


def run_cli(argv) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code == 0 else 1
    cache_dir = args.cache_dir or _default_cache_dir()
    try:
        cache_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        print(f"error: cannot create cache dir {cache_dir}: {exc}",
              file=sys.stderr)
        return 1
    try:
        if args.command == "solve":
            return _cmd_solve(args, cache_dir)
        if args.command == "study":
            return _cmd_study(args, cache_dir)
        if args.command == "estimate-gamma":
            return _cmd_estimate_gamma(args, cache_dir)
        if args.command == "cache":
            return _cmd_cache(args, cache_dir)
        raise ConfigurationError(f"unknown command {args.command!r}")
    except ConfigurationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(run_cli(sys.argv[1:]))


if __name__ == "__main__":
    main()
