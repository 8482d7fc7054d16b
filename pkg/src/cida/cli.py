"""Command-line entry point: ``cida <subcommand> ...``.

Exit codes: 0 success, 1 usage, 2 data/config error, 3 numeric failure,
4 a check (oracle or gradient suite) failed.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys

from .autodiff import NonFiniteError
from .datasets import GENERATORS, generate, read_csv, write_csv
from .evaluation import (
    GridSpec,
    StageError,
    evaluate,
    export_boundary,
    probe_independence,
    run_dir,
    run_experiment,
)
from .losses import loss_gradient_suite
from .oracle import SUITES, run_suite
from .trainer import ExperimentConfig, TrainingDiverged, load_checkpoint, save_checkpoint, train, write_history

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC, EXIT_CHECK = 0, 1, 2, 3, 4


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _write(path: str, text: str) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(text)


def cmd_generate(args) -> int:
    data = generate(args.dataset, args.seed, args.n)
    write_csv(data, args.out)
    print(f"wrote {len(data)} rows to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    config = ExperimentConfig.from_file(args.config)
    data = read_csv(config.dataset_path, config.dataset_name) if config.dataset_path else generate(
        config.dataset_name, config.seed, config.n_per_domain
    )
    result = train(config, data, progress=args.verbose)
    out = run_dir(config)
    os.makedirs(out, exist_ok=True)
    save_checkpoint(result.checkpoint, out / "checkpoint.txt")
    write_history(result.history, out / "history.csv")
    print(f"checkpoint: {out / 'checkpoint.txt'}")
    return EXIT_OK


def cmd_eval(args) -> int:
    table = evaluate(load_checkpoint(args.ckpt), read_csv(args.data))
    _write(args.out, table.to_csv())
    for split in ("source", "target"):
        mean = getattr(table, f"{split}_mean")
        if mean is not None:
            print(f"{split} accuracy {mean:.4f}")
    return EXIT_OK


def cmd_boundary(args) -> int:
    try:
        u = [float(v) for v in args.u.split(",")]
    except ValueError:
        raise ValueError(f"--u must be a number or comma-separated numbers, got '{args.u}'") from None
    _write(args.out, export_boundary(load_checkpoint(args.ckpt), GridSpec.parse(args.grid), u))
    return EXIT_OK


def cmd_probe(args) -> int:
    report = probe_independence(load_checkpoint(args.ckpt), read_csv(args.data), args.ridge)
    _write(args.out, report.to_csv())
    print(f"probe R2 mean {report.mean:.6f}")
    return EXIT_OK


def cmd_oracle(args) -> int:
    report = run_suite(args.suite)
    print(report)
    n_fail = len(report.failures)
    print(f"{len(report.checks) - n_fail}/{len(report.checks)} checks passed")
    return EXIT_OK if report.passed else EXIT_CHECK


def cmd_gradcheck(args) -> int:
    results = loss_gradient_suite(n_points=args.points, step=args.step, seed=args.seed)
    for r in results:
        print(r.line())
    return EXIT_OK if all(r.passed for r in results) else EXIT_CHECK


def cmd_run(args) -> int:
    bundle = run_experiment(args.config, progress=args.verbose)
    print(f"output: {bundle.directory}")
    print(f"target accuracy {bundle.table.target_mean:.4f}  probe R2 {bundle.probe.mean:.6f}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="cida", description="Continuously indexed domain adaptation toolkit.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("generate", help="write a synthetic dataset CSV")
    p.add_argument("--dataset", required=True, choices=sorted(GENERATORS))
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n", type=int, default=100, help="samples per domain")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="train from a config file")
    p.add_argument("--config", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="per-domain accuracy of a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("boundary", help="export predictions over a 2-D grid")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--u", required=True, help="raw index value (comma-separated if multi-dimensional)")
    p.add_argument("--grid", required=True, help="X1MIN:X1MAX:X2MIN:X2MAX:RES")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_boundary)

    p = sub.add_parser("probe", help="linear probe R2 from encodings to the index")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--ridge", type=float, default=1e-6)
    p.set_defaults(func=cmd_probe)

    p = sub.add_parser("oracle", help="run the exact discrete verification suites")
    p.add_argument("--suite", default="all", choices=[*SUITES, "all"])
    p.set_defaults(func=cmd_oracle)

    p = sub.add_parser("gradcheck", help="finite-difference check of every loss")
    p.add_argument("--points", type=int, default=50)
    p.add_argument("--step", type=float, default=1e-6)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("run", help="train, evaluate and export a full result bundle")
    p.add_argument("--config", required=True)
    p.set_defaults(func=cmd_run)
    return parser


def _numeric(exc: BaseException) -> bool:
    return isinstance(exc, (TrainingDiverged, NonFiniteError, FloatingPointError, ZeroDivisionError))


def _glue_values(argv: list[str]) -> list[str]:
    # "--grid -12:12:..." would otherwise be read as an unknown option
    out, i = [], 0
    while i < len(argv):
        if argv[i] in ("--grid", "--u") and i + 1 < len(argv):
            out.append(f"{argv[i]}={argv[i + 1]}")
            i += 2
        else:
            out.append(argv[i])
            i += 1
    return out


def main(argv=None) -> int:
    parser = build_parser()
    argv = _glue_values(list(sys.argv[1:] if argv is None else argv))
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    if args.verbose:
        logging.basicConfig(level=logging.INFO, format="%(message)s")
    try:
        return args.func(args)
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC if _numeric(exc.cause) else EXIT_DATA
    except Exception as exc:
        if _numeric(exc):
            print(f"numeric failure: {exc}", file=sys.stderr)
            return EXIT_NUMERIC
        if isinstance(exc, (ValueError, OSError, KeyError)):
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_DATA
        raise


if __name__ == "__main__":
    sys.exit(main())
