"""Command line: synth, train, predict, eval, gradcheck."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from .config import Config
from .data import SyntheticSpec, load_annotations, load_dataset, load_predictions, synthesize, write_predictions
from .decoder import Segment
from .metrics import evaluate, write_report

log = logging.getLogger("nlqformer")


def _floats(text: str) -> list[float]:
    return [float(x) for x in text.split(",") if x]


def _ints(text: str) -> list[int]:
    return [int(x) for x in text.split(",") if x]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="nlqformer", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a seeded synthetic dataset")
    p.add_argument("--spec", type=Path, help="JSON SyntheticSpec (defaults if omitted)")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--seed", type=int)

    p = sub.add_parser("train", help="train a model")
    p.add_argument("--config", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--annotations", default="annotations.jsonl")

    p = sub.add_parser("predict", help="write ranked predictions per query")
    p.add_argument("--ckpt", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--topk", type=int, default=5)
    p.add_argument("--annotations", default="annotations.jsonl")

    p = sub.add_parser("eval", help="Recall@k at tIoU thresholds")
    p.add_argument("--preds", type=Path, required=True)
    p.add_argument("--ann", type=Path, required=True)
    p.add_argument("--thresholds", type=_floats, default=[0.3, 0.5])
    p.add_argument("--topk", type=_ints, default=[1, 5])
    p.add_argument("--json", type=Path, help="also write the report as JSON")

    sub.add_parser("gradcheck", help="run the finite-difference gradient suite")
    return parser


def cmd_synth(args) -> int:
    spec = SyntheticSpec.load(args.spec) if args.spec else SyntheticSpec()
    if args.seed is not None:
        spec = replace(spec, seed=args.seed)
    records = synthesize(spec, args.out)
    print(f"wrote {len(records)} clips to {args.out}")
    return 0


def cmd_train(args) -> int:
    from .trainer import fit

    config = Config.load(args.config)
    dataset = load_dataset(args.data, args.annotations)
    result = fit(config, dataset, out=args.out)
    for i, row in enumerate(result.epoch_losses):
        print(f"epoch {i:3d} loss {row['total']:.6f}")
    print(f"checkpoint: {args.out} (best epoch {result.best_epoch})")
    return 0


def cmd_predict(args) -> int:
    from .pipeline import predict
    from .trainer import load_model

    model, config = load_model(args.ckpt)
    dataset = load_dataset(args.data, args.annotations)
    records = predict(model, dataset, config.decode, batch_size=config.train.batch_size, topk=args.topk)
    write_predictions(records, args.out)
    print(f"wrote {len(records)} predictions to {args.out}")
    return 0


def cmd_eval(args) -> int:
    gts = {}
    for rec in load_annotations(args.ann, check_files=False):
        if rec.query_id in gts:
            raise ValueError(f"duplicate query id in annotations: {rec.query_id!r}")
        gts[rec.query_id] = Segment(rec.start_sec, rec.end_sec)
    preds = [(r.query_id, [Segment(s, e, sc) for s, e, sc in r.segments]) for r in load_predictions(args.preds)]
    result = evaluate(preds, gts, args.topk, args.thresholds)
    result.check_monotone()
    print(result.report())
    if args.json:
        write_report(result, args.json)
    return 0


def cmd_gradcheck(args) -> int:
    from .gradsuite import run_suite

    result = run_suite()
    print("\n".join(result.lines()))
    return 0 if result.passed else 1


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "predict": cmd_predict, "eval": cmd_eval,
            "gradcheck": cmd_gradcheck}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (OSError, ValueError, KeyError, json.JSONDecodeError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
