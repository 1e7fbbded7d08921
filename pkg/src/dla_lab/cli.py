"""Command-line entry point: ``dla-lab <subcommand> [flags]``.

Every subcommand takes ``--seed`` and ``--out`` (default: ``$DLA_LAB_OUT`` or
``./dla_lab_out``) and prints its resolved configuration as one JSON line.
Artifacts are written only under the output directory. Exit codes: 0 on
success, 2 on usage errors, 3 when a verification fails, 1 for any other
error. Failures end with a single line ``error[<ClassName>]: <message>`` on
stderr.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from pathlib import Path

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_USAGE = 2
EXIT_CHECK = 3


class UsageError(Exception):
    pass


class CheckFailure(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _int_tuple(text: str) -> tuple[int, ...]:
    try:
        vals = tuple(int(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    if not vals or min(vals) < 1:
        raise argparse.ArgumentTypeError(f"values must be positive integers, got {text!r}")
    return vals


def _float_tuple(text: str) -> tuple[float, ...]:
    try:
        return tuple(float(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _size(text: str) -> tuple[int, int]:
    vals = _int_tuple(text.replace("x", ","))
    if len(vals) == 1:
        return vals[0], vals[0]
    if len(vals) != 2:
        raise argparse.ArgumentTypeError(f"size must be N or HxW, got {text!r}")
    return vals[0], vals[1]


def _write_json(path: Path, obj) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")
    return path


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_gradcheck(args, out: Path) -> int:
    from .verify import CheckReport, GROUP_TOLERANCE, gradcheck_detector, gradcheck_dla

    report = CheckReport(GROUP_TOLERANCE)
    gradcheck_dla(args.seed, args.configs, jobs=args.jobs, report=report)
    if not args.skip_detector:
        gradcheck_detector(args.seed, report=report)
    for key, err in report.per_group().items():
        print(f"{key:60s} {err:.3e}")
    print(f"max relative error {report.max_error:.3e} (tolerance {report.tolerance:g})")
    _write_json(out / "gradcheck.json", report.to_dict())
    if not report.passed:
        worst = max(report.rows, key=lambda r: r.error)
        raise CheckFailure(f"{worst.suite}:{worst.group} case {worst.case} relative error {worst.error:.3e}")
    return EXIT_OK


def cmd_fuse_verify(args, out: Path) -> int:
    from .verify import fuse_verify

    report = fuse_verify(args.seed, args.draws)
    for key, err in report.per_group().items():
        print(f"{key:20s} max |train - deploy| {err:.3e}")
    _write_json(out / "fuse_verify.json", report.to_dict())
    if not report.passed:
        raise CheckFailure(f"fused output differs by {report.max_error:.3e} (tolerance {report.tolerance:g})")
    return EXIT_OK


def cmd_gen_data(args, out: Path) -> int:
    from .data import gen_synthetic, save_dataset

    records = gen_synthetic(args.n, args.size, args.max_lines, args.seed, start=args.start, jobs=args.jobs)
    path = save_dataset(out / args.name, records,
                        meta={"seed": args.seed, "size": list(args.size), "max_lines": args.max_lines,
                              "start": args.start})
    print(f"wrote {len(records)} records to {path}")
    return EXIT_OK


def _datasets(args):
    from .data import gen_synthetic, load_dataset

    if args.train:
        train = load_dataset(args.train)
    else:
        train = gen_synthetic(args.n_train, args.size, args.max_lines, args.seed, jobs=args.jobs)
    if args.val:
        val = load_dataset(args.val)
    else:
        val = gen_synthetic(args.n_val, args.size, args.max_lines, args.seed, start=args.n_train, jobs=args.jobs)
    return train, val


def cmd_train_toy(args, out: Path) -> int:
    from .detector.config import get_preset
    from .detector.train import train_toy

    cfg = get_preset(args.preset)
    if args.queries is not None:
        cfg = cfg.replace(num_queries=args.queries)
    if args.points is not None:
        cfg = cfg.replace(points_per_level=args.points)
    if args.heads is not None:
        cfg = cfg.replace(dla_heads=args.heads)
    train, val = _datasets(args)

    def report(row):
        print(json.dumps(row, sort_keys=True), flush=True)

    result = train_toy(train, val, cfg, seed=args.seed, epochs=args.epochs, out_dir=out, progress=report)
    print(f"loss {result.initial_loss:.4f} -> {result.final_loss:.4f}; "
          f"val sAP10 {result.log[0]['val_sap10']:.2f} -> {result.log[-1]['val_sap10']:.2f}")
    return EXIT_OK


def _load_model(path):
    from .data import load_checkpoint, read_checkpoint
    from .detector.config import DetectorConfig
    from .detector.model import LineDetector

    manifest = read_checkpoint(path).manifest
    cfg = DetectorConfig.from_dict(manifest["config"])
    model = LineDetector(cfg, tuple(manifest["extra"]["image_size"]), seed=0)
    load_checkpoint(path, model)
    return model


def cmd_eval_sap(args, out: Path) -> int:
    from .data import load_dataset, stack_images
    from .evaluation import evaluate, write_pr_csv

    model = _load_model(args.checkpoint)
    records = load_dataset(args.data)
    lines, scores = model.predict(stack_images(records))
    result = evaluate(list(zip(lines, scores)), [r.lines for r in records], args.thresholds)
    for th, ap in result.sap.items():
        print(f"sAP{th:g} {ap:.3f}")
        write_pr_csv(out / f"pr_{th:g}.csv", result.pr_points[th])
    _write_json(out / "sap.json", {f"{k:g}": v for k, v in result.sap.items()})
    return EXIT_OK


def cmd_bench(args, out: Path) -> int:
    from .detector.config import get_preset
    from .evaluation import bench_latency

    cfg = get_preset(args.preset)
    if args.decoder_layers is not None:
        cfg = cfg.replace(decoder_layers=args.decoder_layers)
    if args.queries is not None:
        cfg = cfg.replace(num_queries=args.queries)
    stats = bench_latency(cfg, args.size, warmup=args.warmup, reps=args.reps, seed=args.seed, batch=args.batch,
                          deploy=not args.train_mode)
    for stage, st in stats.items():
        print(f"{stage:9s} mean {st['mean']:9.3f} ms  p50 {st['p50']:9.3f} ms  p95 {st['p95']:9.3f} ms")
    # wall-clock values differ between runs, so they go to stdout and never into --out
    print("stats: " + json.dumps(stats, sort_keys=True))
    return EXIT_OK


def cmd_flops(args, out: Path) -> int:
    from .dla import DlaConfig, count_flops, count_mda_flops

    cfg = DlaConfig(n_heads=args.heads, points_per_level=args.points, d_model=args.d_model)
    dla, mda = count_flops(cfg, args.queries), count_mda_flops(cfg, args.queries)
    table = {"points_per_level": list(args.points), "queries": args.queries, "heads": args.heads,
             "d_model": args.d_model, "dla_flops": dla, "mda_flops": mda}
    print(f"{'operator':10s} {'FLOPs':>16s}")
    print(f"{'DLA':10s} {dla:16d}")
    print(f"{'MDA':10s} {mda:16d}")
    _write_json(out / "flops.json", table)
    return EXIT_OK


def cmd_plot(args, out: Path) -> int:
    from .evaluation import read_pr_csv, write_pr_svg

    inputs = [Path(p) for p in args.inputs]
    if not inputs:
        inputs = sorted(out.glob("pr_*.csv"))
    if not inputs:
        raise FileNotFoundError(f"no pr_*.csv files given or found in {out}")
    for src in inputs:
        dst = out / (src.stem + ".svg")
        write_pr_svg(dst, read_pr_csv(src), title=src.stem)
        print(f"wrote {dst}")
    return EXIT_OK


COMMANDS = {
    "gradcheck": cmd_gradcheck,
    "fuse-verify": cmd_fuse_verify,
    "gen-data": cmd_gen_data,
    "train-toy": cmd_train_toy,
    "eval-sap": cmd_eval_sap,
    "bench": cmd_bench,
    "flops": cmd_flops,
    "plot": cmd_plot,
}


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--out", default=os.environ.get("DLA_LAB_OUT", "dla_lab_out"),
                        help="output directory (default: $DLA_LAB_OUT or ./dla_lab_out)")
    common.add_argument("--jobs", type=int, default=1, help="worker processes where work is parallel")

    parser = _Parser(prog="dla-lab", description="Deformable line attention toolkit.")
    sub = parser.add_subparsers(dest="command", metavar="subcommand", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("gradcheck", parents=[common], help="analytic vs finite-difference gradients")
    p.add_argument("--configs", type=int, default=20)
    p.add_argument("--skip-detector", action="store_true")

    p = sub.add_parser("fuse-verify", parents=[common], help="train vs deploy GELAN outputs")
    p.add_argument("--draws", type=int, default=100)

    p = sub.add_parser("gen-data", parents=[common], help="write a synthetic line dataset")
    p.add_argument("--n", type=int, default=512)
    p.add_argument("--size", type=_size, default=(32, 32))
    p.add_argument("--max-lines", type=int, default=3)
    p.add_argument("--start", type=int, default=0, help="index of the first record")
    p.add_argument("--name", default="dataset")

    p = sub.add_parser("train-toy", parents=[common], help="train a toy detector")
    p.add_argument("--preset", default="linea-n-toy")
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--train", help="dataset directory (default: generate)")
    p.add_argument("--val", help="dataset directory (default: generate)")
    p.add_argument("--n-train", type=int, default=512)
    p.add_argument("--n-val", type=int, default=64)
    p.add_argument("--size", type=_size, default=(32, 32))
    p.add_argument("--max-lines", type=int, default=3)
    p.add_argument("--queries", type=int)
    p.add_argument("--points", type=_int_tuple)
    p.add_argument("--heads", type=int)

    p = sub.add_parser("eval-sap", parents=[common], help="sAP and PR curves of a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--thresholds", type=_float_tuple, default=(5.0, 10.0, 15.0))

    p = sub.add_parser("bench", parents=[common], help="forward latency per stage")
    p.add_argument("--preset", default="linea-n-toy")
    p.add_argument("--size", type=_size, default=(32, 32))
    p.add_argument("--warmup", type=int, default=2)
    p.add_argument("--reps", type=int, default=10)
    p.add_argument("--batch", type=int, default=1)
    p.add_argument("--decoder-layers", type=int)
    p.add_argument("--queries", type=int)
    p.add_argument("--train-mode", action="store_true", help="time unfused encoder branches")

    p = sub.add_parser("flops", parents=[common], help="DLA vs MDA cost model")
    p.add_argument("--points", type=_int_tuple, default=(4, 1, 1))
    p.add_argument("--queries", type=int, default=1100)
    p.add_argument("--heads", type=int, default=8)
    p.add_argument("--d-model", type=int, default=256)

    p = sub.add_parser("plot", parents=[common], help="SVG plots from PR CSV files")
    p.add_argument("inputs", nargs="*", help="CSV files (default: pr_*.csv in --out)")
    return parser


def _resolved(args) -> dict:
    cfg = {k: (list(v) if isinstance(v, tuple) else v) for k, v in sorted(vars(args).items())}
    return cfg


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.jobs < 1:
            raise UsageError(f"--jobs must be >= 1, got {args.jobs}")
    except UsageError as exc:
        print(f"error[UsageError]: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    out = Path(args.out)
    print("config: " + json.dumps(_resolved(args), sort_keys=True))
    # the only line that varies between identical runs
    print(f"started: {time.strftime('%Y-%m-%dT%H:%M:%S')}", file=sys.stderr)
    try:
        return COMMANDS[args.command](args, out)
    except CheckFailure as exc:
        print(f"error[CheckFailure]: {exc}", file=sys.stderr)
        return EXIT_CHECK
    except UsageError as exc:
        print(f"error[UsageError]: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:
        msg = str(exc).replace("\n", " ")
        print(f"error[{type(exc).__name__}]: {msg}", file=sys.stderr)
        return EXIT_ERROR


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
