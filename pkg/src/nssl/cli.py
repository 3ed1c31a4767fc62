"""Command-line entry point.

Exit codes: 0 all monitors pass, 1 a monitor failed, 2 configuration error,
3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import estimates as est
from .errors import ConfigurationError, DegenerateInputError, NumericalError, WindowError
from .harness import RunManifest, execute, load_config, verify_manifest
from .snapshot import read_snapshot, snapshot_info

EXIT_PASS, EXIT_MONITOR, EXIT_CONFIG, EXIT_NUMERICAL = 0, 1, 2, 3


def _window(text: str) -> tuple[float, float]:
    try:
        t0, t1 = (float(x) for x in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"window must be 't0,t1', got {text!r}") from None
    if not 0 < t0 < t1:
        raise argparse.ArgumentTypeError(f"window needs 0 < t0 < t1, got {text!r}")
    return t0, t1


def cmd_run(args) -> int:
    cfg = load_config(args.config)
    manifest, result = execute(cfg, Path(args.output) if args.output else None)
    out = Path(args.output) if args.output else cfg.output
    for r in result.reports:
        print(f"{r.verdict:12s} {r.monitor:36s} lhs={r.lhs:.6g} rhs={r.rhs:.6g}")
    print(f"wrote {len(manifest.files)} files to {out} ({manifest.wall_clock:.1f} s)")
    return EXIT_MONITOR if manifest.failed else EXIT_PASS


def cmd_fit(args) -> int:
    series = est.NormSeries.from_csv(args.series)
    names = [args.name] if args.name else series.names()
    for name in names:
        f = est.decay_fit_series(series, name, args.window)
        print(f"{name}: slope={f.slope:.6f} intercept={f.intercept:.6f} r2={f.r2:.6f} "
              f"samples={f.nsamples} window={f.window[0]:g},{f.window[1]:g}")
    return EXIT_PASS


def cmd_report(args) -> int:
    out = Path(args.dir)
    if not (out / "reports.txt").exists():
        raise ConfigurationError(f"{out} has no reports.txt")
    reports = est.parse_reports((out / "reports.txt").read_text(encoding="utf-8"))
    for r in reports:
        print(f"{r.verdict:12s} {r.monitor:36s} ratio={r.ratio:.4g}  {r.anchor}")
    status = EXIT_MONITOR if any(r.failed for r in reports) else EXIT_PASS
    if (out / "manifest.json").exists():
        m = RunManifest.from_json((out / "manifest.json").read_text(encoding="utf-8"))
        bad = verify_manifest(out)
        print(f"kind={m.kind} version={m.code_version} wall_clock={m.wall_clock:.2f}s config={m.config_hash[:12]}")
        if bad:
            print("checksum mismatch: " + ", ".join(bad))
            status = max(status, EXIT_MONITOR)
        else:
            print(f"checksums ok for {len(m.files)} files")
    return status


def cmd_snapshot(args) -> int:
    info = snapshot_info(args.file)
    if args.action == "info":
        print(json.dumps({"version": info.version, "ndim": info.ndim, "ncomp": info.ncomp,
                          "dims": list(info.dims), "box_lengths": list(info.box_lengths)}, indent=2))
        return EXIT_PASS
    data = read_snapshot(args.file).physical()
    flat = data.reshape(data.shape[0], -1).T
    np.savetxt(sys.stdout, flat, fmt="%.17g", delimiter=",",
               header=",".join(f"c{i}" for i in range(data.shape[0])), comments="")
    return EXIT_PASS


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="nssl", description="Periodic spectral Navier-Stokes experiments and monitors.")
    sub = p.add_subparsers(dest="command", required=True)
    r = sub.add_parser("run", help="run an experiment config")
    r.add_argument("config")
    r.add_argument("-o", "--output", help="output directory (overrides experiment.output)")
    r.set_defaults(func=cmd_run)
    f = sub.add_parser("fit", help="log-log decay fit of a NormSeries CSV")
    f.add_argument("--series", required=True)
    f.add_argument("--window", type=_window, required=True)
    f.add_argument("--name", help="series name (default: all)")
    f.set_defaults(func=cmd_fit)
    rep = sub.add_parser("report", help="summarize a run directory and verify checksums")
    rep.add_argument("dir")
    rep.set_defaults(func=cmd_report)
    s = sub.add_parser("snapshot", help="inspect a binary snapshot")
    s.add_argument("action", choices=("dump", "info"))
    s.add_argument("file")
    s.set_defaults(func=cmd_snapshot)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_PASS if exc.code == 0 else EXIT_CONFIG
    try:
        return args.func(args)
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (ConfigurationError, WindowError, DegenerateInputError, OSError, KeyError, ValueError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
