"""Recall@k at temporal-IoU thresholds and the mean R@1 summary."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from decimal import ROUND_HALF_UP, Decimal
from typing import Iterable, Mapping, Sequence

from .decoder import Segment, tiou

DEFAULT_KS = (1, 5)
DEFAULT_THRESHOLDS = (0.3, 0.5)


def _as_mapping(items, what: str) -> dict:
    if isinstance(items, Mapping):
        return dict(items)
    out = {}
    for key, value in items:
        if key in out:
            raise ValueError(f"duplicate query id in {what}: {key!r}")
        out[key] = value
    return out


def recall_at_k(predictions, ground_truth, k: int, threshold: float) -> float:
    """Fraction of queries with a top-k prediction at tIoU >= ``threshold``.

    ``predictions``/``ground_truth`` are mappings (or iterables of pairs) keyed
    by query id; predictions are ranked lists of Segments. Queries without
    predictions count as misses.
    """
    preds = _as_mapping(predictions, "predictions")
    gts = _as_mapping(ground_truth, "ground truth")
    if not gts:
        return 0.0
    hits = 0
    for qid, gt in gts.items():
        ranked = preds.get(qid, [])[:k]
        if any(tiou(p, gt) >= threshold for p in ranked):
            hits += 1
    return hits / len(gts)


def round_half_up(value: float, places: int = 2) -> Decimal:
    # repr noise like 8.8249999999 must not decide the rounding direction
    steadied = Decimal(f"{value:.10f}")
    return steadied.quantize(Decimal(1).scaleb(-places), rounding=ROUND_HALF_UP)


@dataclass
class EvalResult:
    recall: dict[tuple[int, float], float]
    num_queries: int
    ks: tuple[int, ...] = DEFAULT_KS
    thresholds: tuple[float, ...] = DEFAULT_THRESHOLDS
    mean_r1: float = field(init=False)

    def __post_init__(self) -> None:
        r1 = [self.recall[(1, th)] for th in self.thresholds if (1, th) in self.recall]
        self.mean_r1 = sum(r1) / len(r1) if r1 else float("nan")

    def check_monotone(self) -> None:
        for k in self.ks:
            vals = [self.recall[(k, th)] for th in sorted(self.thresholds)]
            if any(b > a for a, b in zip(vals, vals[1:])):
                raise AssertionError(f"R@{k} increases with the tIoU threshold: {vals}")
        for th in self.thresholds:
            vals = [self.recall[(k, th)] for k in sorted(self.ks)]
            if any(b < a for a, b in zip(vals, vals[1:])):
                raise AssertionError(f"recall at tIoU={th} decreases with k: {vals}")

    def to_json(self) -> dict:
        cells = {f"R@{k}@{th:g}": self.recall[(k, th)] for k in self.ks for th in self.thresholds}
        return {"recall": cells, "mean_r1": self.mean_r1, "num_queries": self.num_queries}

    def report(self) -> str:
        lines = [f"queries: {self.num_queries}"]
        for k in self.ks:
            for th in self.thresholds:
                lines.append(f"R@{k} tIoU={th:g}: {round_half_up(100 * self.recall[(k, th)])}")
        lines.append(f"mean R@1: {round_half_up(100 * self.mean_r1)}")
        return "\n".join(lines)


def summarize(recall: dict[tuple[int, float], float], num_queries: int,
              ks: Sequence[int] = DEFAULT_KS, thresholds: Sequence[float] = DEFAULT_THRESHOLDS) -> EvalResult:
    missing = [(k, th) for k in ks for th in thresholds if (k, th) not in recall]
    if missing:
        raise ValueError(f"missing recall cells: {missing}")
    return EvalResult(dict(recall), num_queries, tuple(ks), tuple(thresholds))


def evaluate(predictions, ground_truth, ks: Iterable[int] = DEFAULT_KS,
             thresholds: Iterable[float] = DEFAULT_THRESHOLDS) -> EvalResult:
    preds = _as_mapping(predictions, "predictions")
    gts = _as_mapping(ground_truth, "ground truth")
    ks, thresholds = tuple(ks), tuple(thresholds)
    table = {(k, th): recall_at_k(preds, gts, k, th) for k in ks for th in thresholds}
    return summarize(table, len(gts), ks, thresholds)


def write_report(result: EvalResult, path) -> None:
    with open(path, "w") as fh:
        json.dump(result.to_json(), fh, indent=2)


__all__ = ["EvalResult", "Segment", "evaluate", "recall_at_k", "round_half_up", "summarize", "write_report"]
