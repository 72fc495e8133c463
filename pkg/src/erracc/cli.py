"""Command-line entry point: ``erracc gen-data | train | evaluate | report``.

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 numeric failure (divergence, integration blow-up).
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from contextlib import nullcontext

import numpy as np

from .config import ROSTER, TRAINED, ConfigError, load_config
from .data import DataError
from .dynamics import ConfigurationError, IntegrationError
from .neuralnet import TrainingDivergence
from .report import ReportError, report

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

logger = logging.getLogger("erracc")


def _config_args(p: argparse.ArgumentParser):
    p.add_argument("--config", help="JSON experiment config")
    p.add_argument("--preset", choices=("desk", "paper"), help="preset filling unset values (default desk)")
    p.add_argument("--out", help="output directory (overrides out_dir)")
    p.add_argument("--seed", type=int, help="run seed (fallback: RUN_SEED, then 0)")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config value, e.g. eval.n_ics=50")
    p.add_argument("--single-thread", action="store_true", help="limit BLAS to one thread for bit-reproducible runs")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="erracc", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="integrate a Lorenz system and write a dataset")
    g.add_argument("system", choices=("l63", "l96"))
    _config_args(g)

    t = sub.add_parser("train", help="train one roster model (or 'all')")
    t.add_argument("kind", help=f"one of {', '.join(TRAINED)}, or 'all'")
    t.add_argument("--system", choices=("l63", "l96"))
    _config_args(t)

    e = sub.add_parser("evaluate", help="sample the roster on test ICs and write metrics.csv")
    e.add_argument("--system", choices=("l63", "l96"))
    _config_args(e)

    r = sub.add_parser("report", help="render SVG panels from a metrics CSV")
    r.add_argument("--csv", required=True)
    r.add_argument("--out", required=True)
    return parser


def _load(args, system=None):
    overrides = list(args.set)
    if args.out:
        overrides.append(f"out_dir={json.dumps(args.out)}")
    return load_config(args.config, system=system or getattr(args, "system", None), preset=args.preset, overrides=overrides, seed=args.seed)


def _threads(args):
    if getattr(args, "single_thread", False):
        from threadpoolctl import threadpool_limits

        return threadpool_limits(limits=1)
    return nullcontext()


def _run(args) -> int:
    from . import experiment

    if args.command == "report":
        paths = report(args.csv, args.out)
        print(f"wrote {len(paths)} figure(s) to {args.out}")
        return EXIT_OK
    if args.command == "gen-data":
        cfg = _load(args, args.system)
        with _threads(args):
            ds = experiment.generate(cfg)
        lo, hi = ds.splits.test
        print(
            f"{cfg.dataset_path}: {ds.values.shape[0]} rows x {ds.values.shape[1]} state vars, "
            f"observed {list(ds.observed)}, splits train={ds.splits.train} val={ds.splits.val} test={(lo, hi)}"
        )
        print(f"observed mean {np.round(ds.standardizer.mean, 4).tolist()} std {np.round(ds.standardizer.std, 4).tolist()}")
        return EXIT_OK
    cfg = _load(args)
    if args.command == "train":
        if args.kind != "all" and args.kind not in TRAINED:
            print(f"unknown model kind {args.kind!r}; roster: {', '.join(ROSTER)} (trainable: {', '.join(TRAINED)}, or 'all')", file=sys.stderr)
            return EXIT_USAGE
        cfg.save(f"{cfg.out_dir}/config.json")
        with _threads(args):
            if args.kind == "all":
                reports = experiment.train_roster(cfg)
            else:
                reports = {args.kind: experiment.train_model(cfg, args.kind)[1]}
        for kind, rep in reports.items():
            last = rep.epochs[-1] if rep.epochs else {}
            print(f"{kind}: {len(rep.epochs)} epochs, val_nll {last.get('val_nll', float('nan')):.4f}, checkpoint {rep.checkpoint}")
        return EXIT_OK
    if args.command == "evaluate":
        with _threads(args):
            curves, meta = experiment.evaluate(cfg)
        print(f"wrote {len(curves)} curves for {meta.n_ics} ICs to {cfg.out_dir}/metrics.csv ({meta.wall_time:.1f} s)")
        return EXIT_OK
    raise AssertionError(args.command)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return _run(args)
    except (ConfigError, ConfigurationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, ReportError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (TrainingDivergence, IntegrationError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
