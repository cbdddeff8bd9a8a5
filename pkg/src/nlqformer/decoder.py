"""Turn per-point scores and offsets into ranked temporal segments."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .supervision import Points


@dataclass(frozen=True)
class Segment:
    start: float
    end: float
    score: float = 1.0
    clip_id: str = ""
    query_id: str = ""


def tiou(a: Segment, b: Segment) -> float:
    inter = max(0.0, min(a.end, b.end) - max(a.start, b.start))
    union = (a.end - a.start) + (b.end - b.start) - inter
    return inter / union if union > 0 else 0.0


def tiou_many(start: float, end: float, starts: np.ndarray, ends: np.ndarray) -> np.ndarray:
    """tIoU of one segment against many; same arithmetic as ``tiou``."""
    inter = np.maximum(0.0, np.minimum(end, ends) - np.maximum(start, starts))
    union = (end - start) + (ends - starts) - inter
    safe = np.where(union > 0, union, 1.0)
    return np.where(union > 0, inter / safe, 0.0)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def _rank(scores: np.ndarray, starts: np.ndarray) -> np.ndarray:
    """Order by score descending, then earlier start, then earlier index."""
    return np.lexsort((np.arange(len(scores)), starts, -scores))


def decode_candidates(cls_logits: np.ndarray, offsets: np.ndarray, points: Points, duration: float,
                      score_threshold: float = 1e-3, pre_nms_topk: int = 2000,
                      clip_id: str = "", query_id: str = "") -> list[Segment]:
    """Decode every point above threshold, keeping at most ``pre_nms_topk``.

    ``cls_logits`` (N_total,) and ``offsets`` (N_total, 2) use the concatenated
    level layout that ``points.flat`` indexes into.
    """
    logits = np.asarray(cls_logits, dtype=np.float64)[points.flat]
    offs = np.asarray(offsets, dtype=np.float64)[points.flat]
    scores = _sigmoid(logits)
    keep = scores >= score_threshold
    if not keep.any():
        return []
    unit = points.stride[keep] * points.delta
    t = points.timestamp[keep]
    starts = np.clip(t - offs[keep, 0] * unit, 0.0, duration)
    ends = np.clip(t + offs[keep, 1] * unit, 0.0, duration)
    scores = scores[keep]
    order = _rank(scores, starts)[:pre_nms_topk]
    return [Segment(float(starts[i]), float(ends[i]), float(scores[i]), clip_id, query_id) for i in order]


def soft_nms(candidates: list[Segment], sigma: float = 0.5, min_score: float = 1e-3,
             max_keep: int = 5) -> list[Segment]:
    """Gaussian SoftNMS: select the best, decay the rest by exp(-tiou^2 / sigma)."""
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    if not candidates:
        return []
    starts = np.array([c.start for c in candidates], dtype=np.float64)
    ends = np.array([c.end for c in candidates], dtype=np.float64)
    scores = np.array([c.score for c in candidates], dtype=np.float64)
    alive = scores >= min_score
    picked: list[Segment] = []
    while alive.any() and len(picked) < max_keep:
        idx = np.flatnonzero(alive)
        best = idx[_rank(scores[idx], starts[idx])[0]]
        src = candidates[best]
        picked.append(Segment(src.start, src.end, float(scores[best]), src.clip_id, src.query_id))
        alive[best] = False
        rest = np.flatnonzero(alive)
        if len(rest) == 0:
            break
        overlap = tiou_many(starts[best], ends[best], starts[rest], ends[rest])
        # libm exp per element: numpy's SIMD exp may differ in the last ulp across CPUs
        decay = np.array([math.exp(-(o * o) / sigma) for o in overlap.tolist()])
        scores[rest] = scores[rest] * decay
        alive[rest[scores[rest] < min_score]] = False
    return picked
