"""Synthesize the toy dataset, train, predict and evaluate on the training set.

    python3 scripts/run_synthetic.py --out runs/synthetic [--config configs/synthetic.json]
"""

import argparse
import json
import logging
import time
from pathlib import Path

from nlqformer.config import Config
from nlqformer.data import SyntheticSpec, load_dataset, synthesize, write_predictions
from nlqformer.decoder import Segment
from nlqformer.metrics import evaluate, write_report
from nlqformer.pipeline import predict
from nlqformer.trainer import fit

ROOT = Path(__file__).resolve().parents[1]


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--out", type=Path, default=ROOT / "runs" / "synthetic")
    parser.add_argument("--config", type=Path, default=ROOT / "configs" / "synthetic.json")
    parser.add_argument("--seed", type=int, default=0, help="dataset seed")
    parser.add_argument("--epochs", type=int, help="override the config's epoch count")
    args = parser.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    config = Config.load(args.config)
    if args.epochs is not None:
        config.train.epochs = args.epochs
    args.out.mkdir(parents=True, exist_ok=True)
    synthesize(SyntheticSpec(seed=args.seed), args.out / "data")
    dataset = load_dataset(args.out / "data")

    start = time.perf_counter()
    result = fit(config, dataset, out=args.out / "model.ckpt")
    seconds = time.perf_counter() - start
    preds = predict(result.model, dataset, config.decode, batch_size=config.train.batch_size)
    write_predictions(preds, args.out / "predictions.jsonl")

    gts = {s.query_id: Segment(s.start, s.end) for s in dataset}
    ranked = {p.query_id: [Segment(*seg) for seg in p.segments] for p in preds}
    res = evaluate(ranked, gts)
    write_report(res, args.out / "report.json")
    (args.out / "losses.json").write_text(json.dumps(result.epoch_losses, indent=1))
    first, last = result.epoch_losses[0]["total"], result.epoch_losses[-1]["total"]
    print(res.report())
    print(f"trained {config.train.epochs} epochs in {seconds:.0f}s; loss {first:.4f} -> {last:.4f}")


if __name__ == "__main__":
    main()
