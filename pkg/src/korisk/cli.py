"""Command-line entry point.

Exit status: 0 success, 1 usage or input error, 2 infeasible target,
3 theorem-verification failure.
"""

import argparse
import logging
import sys

from . import harness
from .errors import InfeasibleTargetError, InputError, NumericError, ParseError
from .plot import emit_plot
from .riskbound import deep_risk_bound

EXIT_OK, EXIT_USAGE, EXIT_INFEASIBLE, EXIT_VERIFY = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def build_parser():
    p = _Parser(prog="korisk", description="Risk bounds and CT sample-efficiency sweeps.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("sweep", help="run the KO/FC learning-curve sweep")
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--workers", type=int, help=f"overrides ${harness.WORKERS_ENV}")

    s = sub.add_parser("calibrate", help="fit floor and sigma per (arch, h)")
    s.add_argument("--in", dest="inp", required=True)
    s.add_argument("--out", required=True)

    s = sub.add_parser("predict-n", help="smallest N meeting a target error")
    s.add_argument("--calib", required=True)
    s.add_argument("--arch", choices=("ko", "fc"), required=True)
    s.add_argument("--h", type=int, required=True)
    s.add_argument("--eps", type=float, required=True)

    s = sub.add_parser("scale-table", help="parameter and memory table")
    s.add_argument("--config")
    s.add_argument("--csv", help="also write the table as CSV")

    s = sub.add_parser("verify-theorem", help="randomized check of the pointwise bound")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--networks", type=int, default=200)
    s.add_argument("--inputs", type=int, default=100)
    s.add_argument("--perturbation", type=float, default=0.1)

    s = sub.add_parser("plot", help="SVG learning curves with the calibrated bound")
    s.add_argument("--sweep", required=True)
    s.add_argument("--calib", required=True)
    s.add_argument("--out", required=True)

    s = sub.add_parser("bound", help="deep risk bound of a layered network config")
    s.add_argument("--config", required=True)
    s.add_argument("--n", type=int, required=True)
    s.add_argument("--csv")
    return p


def _sweep(args):
    config = harness.load_sweep_config(args.config)
    if args.workers is not None:
        config.parallelism = max(1, args.workers)
    result = harness.run_sweep(config, out=args.out)
    failed = sum(not r.ok for r in result.records)
    print(f"{len(result.records)} rows ({failed} failed) in {result.wall_s:.1f} s -> {args.out}")
    return EXIT_OK


def _calibrate(args):
    fits = harness.run_calibrate(args.inp, args.out)
    for f in fits:
        note = f"  [{f.warning}]" if f.warning else ""
        print(f"{f.arch} h={f.h} {f.metric}: floor={f.floor:.4g} sigma={f.sigma:.4g}{note}")
    return EXIT_OK


def _predict(args):
    try:
        pred = harness.run_predict(args.calib, args.arch, args.h, args.eps)
    except LookupError as exc:
        print(f"error: {exc.args[0]}", file=sys.stderr)
        return EXIT_USAGE
    except InfeasibleTargetError as exc:
        print(f"infeasible: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    print(pred.report())
    return EXIT_OK


def _scale_table(args):
    scales = harness.REFERENCE_GEOMETRIES
    if args.config:
        scales = harness.load_scales(args.config)
    text, _ = harness.run_scale_table(scales, out_csv=args.csv)
    print(text, end="")
    return EXIT_OK


def _verify(args):
    report = harness.run_verify(args.seed, args.networks, args.inputs, args.perturbation)
    print(report.summary())
    return EXIT_OK if report.passed else EXIT_VERIFY


def _plot(args):
    emit_plot(args.sweep, args.calib, args.out)
    print(f"wrote {args.out}")
    return EXIT_OK


def _bound(args):
    report = deep_risk_bound(harness.load_network_spec(args.config), args.n)
    for i, (a, t) in enumerate(zip(report.amplifications, report.per_layer_terms), 1):
        print(f"layer {i}: A = {a:.6g}  term = {t:.6g}")
    print(f"total = {report.total:.6g}")
    if args.csv:
        report.to_csv(args.csv)
    return EXIT_OK


COMMANDS = {
    "sweep": _sweep,
    "calibrate": _calibrate,
    "predict-n": _predict,
    "scale-table": _scale_table,
    "verify-theorem": _verify,
    "plot": _plot,
    "bound": _bound,
}


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except InfeasibleTargetError as exc:
        print(f"infeasible: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except (ParseError, InputError, NumericError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
