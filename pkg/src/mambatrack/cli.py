"""Command-line entry point: synth, train, eval, ablate, bench, gradcheck.

Exit codes: 0 ok, 1 usage/config error, 2 numerical failure, 3 I/O error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

from . import diagnostics
from .config import ConfigError
from .evaluate import ABLATIONS, evaluate, run_ablations
from .head import format_report
from .synth import SynthConfig, find_sequences, load_sequence, synth_sequence
from .train import TrainConfig, TrainingError, load_checkpoint, save_checkpoint, train

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC, EXIT_IO = 0, 1, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _sequences(data):
    return [load_sequence(p) for p in find_sequences(data)]


def _write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def cmd_synth(args) -> int:
    cfg = SynthConfig.from_json(args.config) if args.config else SynthConfig()
    out = synth_sequence(cfg, args.out)
    print(f"wrote sequence to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = TrainConfig.from_json(args.config) if args.config else TrainConfig()
    seqs = _sequences(args.data)
    t0 = time.perf_counter()
    trainer = train(cfg, seqs)
    save_checkpoint(args.out, trainer)
    hist = trainer.history
    if hist:
        print(f"steps {len(hist)} loss {hist[0]:.5f} -> {hist[-1]:.5f} in {time.perf_counter() - t0:.1f}s")
    print(f"checkpoint written to {args.out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    seqs = _sequences(args.data)
    model = load_checkpoint(args.ckpt).model
    report = evaluate(model, seqs, args.sr_mode)
    for name, m in report.per_sequence.items():
        print(f"{name}: {format_report(m)} mIoU {m['mean_iou']:.3f}")
    print(f"overall: {format_report(report.overall)} mIoU {report.overall['mean_iou']:.3f}")
    if args.json:
        _write_json(args.json, {"per_sequence": report.per_sequence, "overall": report.overall,
                                "sr_mode": args.sr_mode})
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = TrainConfig.from_json(args.config) if args.config else TrainConfig()
    seqs = _sequences(args.data)
    rows = [r for r in ABLATIONS if not args.rows or r[0].split()[0] in args.rows]
    reports = run_ablations(cfg, seqs, args.sr_mode, rows)
    for label, rep in reports.items():
        print(f"{label:<12s} {format_report(rep.overall)} mIoU {rep.overall['mean_iou']:.3f}")
    if args.json:
        _write_json(args.json, {k: r.overall for k, r in reports.items()})
    return EXIT_OK


def cmd_bench(args) -> int:
    res = diagnostics.bench_scan(args.L, args.D, args.N, args.reps, args.chunk, args.seed)
    print(json.dumps(res, indent=2))
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    report = diagnostics.gradcheck(args.scope, args.seed, args.corrupt)
    for line in report.lines():
        print(line)
    print(f"{args.scope}: {'PASS' if report.passed else 'FAIL'} in {report.seconds:.1f}s")
    return EXIT_OK if report.passed else EXIT_NUMERIC


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="mambatrack", description="RGB+event tracker with density-driven state space blocks.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress at INFO level")
    sub = p.add_subparsers(dest="cmd", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="generate a synthetic RGB+event sequence")
    s.add_argument("--config", help="flat JSON SynthConfig (defaults if omitted)")
    s.add_argument("--out", required=True, help="output sequence directory")
    s.set_defaults(fn=cmd_synth)

    s = sub.add_parser("train", help="train end to end and write a checkpoint")
    s.add_argument("--config", help="flat JSON TrainConfig (defaults if omitted)")
    s.add_argument("--data", required=True, help="sequence directory or a directory of sequences")
    s.add_argument("--out", required=True, help="checkpoint path")
    s.set_defaults(fn=cmd_train)

    s = sub.add_parser("eval", help="track every sequence and report SR/PR/NPR")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--sr-mode", choices=("auc", "t50"), default="auc")
    s.add_argument("--json", help="also write the report here")
    s.set_defaults(fn=cmd_eval)

    s = sub.add_parser("ablate", help="train and evaluate one model per component ablation row")
    s.add_argument("--config", help="base TrainConfig JSON")
    s.add_argument("--data", required=True)
    s.add_argument("--rows", nargs="*", help="subset of row ids, e.g. '#1' '#5'")
    s.add_argument("--sr-mode", choices=("auc", "t50"), default="auc")
    s.add_argument("--json")
    s.set_defaults(fn=cmd_ablate)

    s = sub.add_parser("bench", help="time the sequential and chunked selective scan")
    s.add_argument("--L", type=int, default=512)
    s.add_argument("--D", type=int, default=16)
    s.add_argument("--N", type=int, default=8)
    s.add_argument("--reps", type=int, default=5)
    s.add_argument("--chunk", type=int, help="chunk length (default sqrt(L))")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(fn=cmd_bench)

    s = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    s.add_argument("--scope", choices=("primitives", "blocks", "full"), default="primitives")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--corrupt", metavar="OP", help="scale one adjoint rule to self-test the checker")
    s.set_defaults(fn=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FloatingPointError, TrainingError, diagnostics.BenchmarkError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
