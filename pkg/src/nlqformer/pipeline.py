"""Batch assembly and inference over samples."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import DecodeConfig
from .data import PredictionRecord, Sample
from .decoder import Segment, decode_candidates, soft_nms
from .model import GroundingModel, pad_to_multiple
from .numerics import no_grad
from .supervision import generate_points


@dataclass
class Batch:
    features: np.ndarray  # B, T, D
    mask: np.ndarray  # B, T
    tokens: np.ndarray  # B, L, D_t
    token_mask: np.ndarray  # B, L
    samples: list[Sample]

    @property
    def deltas(self) -> list[float]:
        return [s.delta for s in self.samples]

    @property
    def gts(self) -> list[tuple[float, float]]:
        return [(s.start, s.end) for s in self.samples]


def collate(samples: list[Sample], multiple: int = 32, dtype=np.float32) -> Batch:
    B = len(samples)
    T = max(s.features.shape[0] for s in samples)
    L = max(s.tokens.shape[0] for s in samples)
    feats = np.zeros((B, T, samples[0].features.shape[1]), dtype=dtype)
    mask = np.zeros((B, T), dtype=bool)
    tokens = np.zeros((B, L, samples[0].tokens.shape[1]), dtype=dtype)
    tmask = np.zeros((B, L), dtype=bool)
    for b, s in enumerate(samples):
        feats[b, :len(s.features)] = s.features
        mask[b, :len(s.features)] = True
        tokens[b, :len(s.tokens)] = s.tokens
        tmask[b, :len(s.tokens)] = True
    feats, mask = pad_to_multiple(feats, mask, multiple)
    return Batch(feats, mask, tokens, tmask, list(samples))


def candidates_for_batch(model: GroundingModel, batch: Batch, decode: DecodeConfig) -> list[list[Segment]]:
    """Pre-NMS candidates for every sample of a batch."""
    with no_grad():
        out = model(batch.features, batch.mask, batch.tokens, batch.token_mask)
    logits = np.concatenate([t.data for t in out.heads.cls_logits], axis=1)
    offsets = np.concatenate([t.data for t in out.heads.offsets], axis=1)
    level_masks = [lv.mask for lv in out.fused]
    result = []
    for b, s in enumerate(batch.samples):
        points = generate_points([m[b] for m in level_masks], s.delta)
        result.append(decode_candidates(logits[b], offsets[b], points, s.duration,
                                        decode.score_threshold, decode.pre_nms_topk,
                                        s.clip_id, s.query_id))
    return result


def predict(model: GroundingModel, samples: list[Sample], decode: DecodeConfig | None = None,
            batch_size: int = 16, topk: int | None = None) -> list[PredictionRecord]:
    """Ranked segments per (clip, query), ordered by (clip id, query id)."""
    decode = decode or DecodeConfig()
    keep = topk if topk is not None else decode.max_keep
    ordered = sorted(samples, key=lambda s: (s.clip_id, s.query_id))
    records = []
    for i in range(0, len(ordered), batch_size):
        batch = collate(ordered[i:i + batch_size], model.cfg.max_stride, model.dtype)
        for s, cands in zip(batch.samples, candidates_for_batch(model, batch, decode)):
            kept = soft_nms(cands, decode.nms_sigma, decode.min_score, keep)
            records.append(PredictionRecord(s.clip_id, s.query_id,
                                            [(seg.start, seg.end, seg.score) for seg in kept]))
    return records
