"""Command line entry point: ``run``, ``compare`` and ``sweep``.

Exit codes: 0 success, 2 filter divergence, 3 configuration error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import scenario as sc

EXIT_OK = 0
EXIT_DIVERGED = 2
EXIT_CONFIG = 3

log = logging.getLogger("ostnav")


def _floats(text: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma separated numbers, got {text!r}")


def _ints(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma separated integers, got {text!r}")


def _out_dir(arg) -> Path:
    return Path(arg) if arg else sc.log_dir()


def cmd_run(args) -> int:
    cfg = sc.load_config(args.config)
    ost = None if args.ost is None else args.ost == "on"
    cfg = cfg.with_overrides(seed=args.seed, ost=ost)
    log.info("running %s (seed %d, OST %s, %d epochs)", cfg.name, cfg.seed,
             "on" if cfg.ost.enabled else "off", cfg.n_epochs())
    result = sc.run(cfg)
    path = result.write(_out_dir(args.out))
    if args.gnuplot:
        path.with_suffix(".gp").write_text(sc.gnuplot_script(path.name))
    print(f"log: {path}")
    if result.status != "ok":
        print(f"status: {result.status} after {len(result.rows)} epochs", file=sys.stderr)
        return EXIT_DIVERGED
    for k in sc.SUMMARY_KEYS:
        print(f"{k:16s} {result.summary[k]:.6g}")
    return EXIT_OK


def cmd_compare(args) -> int:
    logs = [sc.RunLog.read(p) for p in args.logs]
    per_run, grouped = sc.compare(logs)
    print(sc.table_text(per_run))
    print(sc.table_text(grouped))
    if args.csv:
        Path(args.csv).write_text(sc.table_csv(grouped))
        Path(args.csv).with_name(Path(args.csv).stem + "_runs.csv").write_text(sc.table_csv(per_run))
    return EXIT_OK


def cmd_sweep(args) -> int:
    cfg = sc.load_config(args.config)
    if args.duration is not None:
        cfg = replace(cfg, duration_orbits=args.duration)

    def progress(sev, seed, ost):
        log.info("severity %g seed %d OST %s done", sev, seed, "on" if ost else "off")

    results = sc.sweep(cfg, args.severities, args.seeds, progress=progress)
    rows = [g for _, _, grouped in results for g in grouped]
    print(sc.table_text(rows))
    out = _out_dir(args.out)
    out.mkdir(parents=True, exist_ok=True)
    path = out / f"{cfg.name}_sweep.csv"
    path.write_text(sc.table_csv(rows))
    print(f"table: {path}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ostnav", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="simulate one scenario and write its log")
    r.add_argument("config")
    r.add_argument("--seed", type=int)
    r.add_argument("--ost", choices=("on", "off"))
    r.add_argument("--out", help=f"output directory (default ${sc.LOG_DIR_ENV} or ./runs)")
    r.add_argument("--gnuplot", action="store_true", help="also write a gnuplot script")
    r.set_defaults(func=cmd_run)

    c = sub.add_parser("compare", help="summarize run logs")
    c.add_argument("logs", nargs="+")
    c.add_argument("--csv", help="write the grouped table here")
    c.set_defaults(func=cmd_compare)

    s = sub.add_parser("sweep", help="OST on/off over detector-gap severities")
    s.add_argument("config")
    s.add_argument("--severities", type=_floats, default=[0.5, 1.0, 1.5, 2.0])
    s.add_argument("--seeds", type=_ints, default=[0, 1, 2])
    s.add_argument("--duration", type=float, help="override run length in orbits")
    s.add_argument("--out")
    s.set_defaults(func=cmd_sweep)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except sc.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
