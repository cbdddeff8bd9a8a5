"""Pyramid points, label assignment and the three training losses."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .config import REGRESSION_RANGES
from .numerics import Tensor


@dataclass
class PointSpec:
    level: int
    stride: int
    index: int
    timestamp: float
    range_min: float
    range_max: float


@dataclass
class Points:
    """Valid pyramid points of one clip, stored column-wise.

    ``flat`` is each point's position in the level-concatenated layout
    (all padded positions included), which is how head outputs are stacked.
    """

    level: np.ndarray
    stride: np.ndarray
    index: np.ndarray
    timestamp: np.ndarray
    range_min: np.ndarray
    range_max: np.ndarray
    flat: np.ndarray
    delta: float
    total: int

    def __len__(self) -> int:
        return len(self.level)

    def __getitem__(self, i: int) -> PointSpec:
        return PointSpec(int(self.level[i]), int(self.stride[i]), int(self.index[i]),
                         float(self.timestamp[i]), float(self.range_min[i]), float(self.range_max[i]))

    def subset(self, keep: np.ndarray) -> Points:
        """The points selected by a boolean or index array, same flat layout."""
        return Points(self.level[keep], self.stride[keep], self.index[keep], self.timestamp[keep],
                      self.range_min[keep], self.range_max[keep], self.flat[keep], self.delta, self.total)


@dataclass
class Targets:
    labels: np.ndarray  # N, {0,1}
    offsets: np.ndarray  # N, 2 in grid units of each point's level; zero for negatives

    @property
    def num_pos(self) -> int:
        return int(self.labels.sum())


def generate_points(level_masks: list[np.ndarray], delta: float,
                    ranges=REGRESSION_RANGES) -> Points:
    """One point per valid position; ``level_masks[l]`` is the validity of level l."""
    if delta <= 0:
        raise ValueError(f"seconds per step must be positive, got {delta}")
    cols = {k: [] for k in ("level", "stride", "index", "timestamp", "range_min", "range_max", "flat")}
    offset = 0
    for l, mask in enumerate(level_masks):
        mask = np.asarray(mask, dtype=bool)
        stride = 2 ** l
        idx = np.flatnonzero(mask)
        cols["level"].append(np.full(len(idx), l))
        cols["stride"].append(np.full(len(idx), stride))
        cols["index"].append(idx)
        cols["timestamp"].append((idx + 0.5) * stride * delta)
        cols["range_min"].append(np.full(len(idx), ranges[l][0]))
        cols["range_max"].append(np.full(len(idx), ranges[l][1]))
        cols["flat"].append(idx + offset)
        offset += len(mask)
    arrays = {k: np.concatenate(v) for k, v in cols.items()}
    return Points(**arrays, delta=float(delta), total=offset)


def level_masks_for_length(length: int, num_levels: int = 6, padded: int | None = None) -> list[np.ndarray]:
    """Validity masks of each level for ``length`` valid steps padded to ``padded``."""
    top = 2 ** (num_levels - 1)
    padded = padded or max(top, -(-length // top) * top)
    mask = np.arange(padded) < length
    masks = [mask]
    for _ in range(num_levels - 1):
        masks.append(nx.downsample_mask(masks[-1], 2))
    return masks


def assign_labels(points: Points, gt_start: float, gt_end: float,
                  center_sample: bool = False, center_radius: float = 1.5) -> Targets:
    """Positive iff the point lies in the ground truth and its larger offset fits its level.

    Ranges are compared in input steps (seconds / delta) and are half-open
    (min, max]; regression targets are expressed in the point's own level units.
    """
    if not gt_start < gt_end:
        raise ValueError(f"ground truth must satisfy start < end, got [{gt_start}, {gt_end}]")
    t = points.timestamp
    left = t - gt_start
    right = gt_end - t
    inside = (left >= 0) & (right >= 0)
    reach = np.maximum(left, right) / points.delta
    fits = (reach > points.range_min) & (reach <= points.range_max)
    positive = inside & fits
    if center_sample:
        center = 0.5 * (gt_start + gt_end)
        positive &= np.abs(t - center) <= center_radius * points.stride * points.delta
    unit = points.stride * points.delta
    offsets = np.where(positive[:, None], np.stack([left / unit, right / unit], axis=1), 0.0)
    return Targets(positive.astype(np.int64), offsets)


# ---------------------------------------------------------------- losses


def focal_loss(logits: Tensor, labels: np.ndarray, valid: np.ndarray | None = None,
               alpha: float = 0.25, gamma: float = 2.0) -> Tensor:
    """Sigmoid focal loss summed over valid points, divided by max(N_pos, 1)."""
    y = np.asarray(labels, dtype=logits.dtype)
    weight = np.ones_like(y) if valid is None else np.asarray(valid, dtype=logits.dtype)
    num_pos = max(float((y * weight).sum()), 1.0)
    p = nx.sigmoid(logits)
    ce = nx.softplus(logits) - logits * y
    p_t = p * y + (1.0 - p) * (1.0 - y)
    alpha_t = alpha * y + (1.0 - alpha) * (1.0 - y)
    modulator = nx.power(1.0 - p_t, gamma)
    return (modulator * ce * (alpha_t * weight)).sum() * (1.0 / num_pos)


def segment_diou(pred: Tensor, target, eps: float = 1e-8) -> Tensor:
    """Per-row ``1 - IoU + (center gap / enclosing length)^2`` for (start, end) rows."""
    target = nx.as_tensor(target, like=pred)
    ps, pe = pred[:, 0], pred[:, 1]
    ts, te = target[:, 0], target[:, 1]
    inter = nx.maximum(nx.minimum(pe, te) - nx.maximum(ps, ts), 0.0)
    union = (pe - ps) + (te - ts) - inter
    iou = inter / (union + eps)
    enclose = nx.maximum(pe, te) - nx.minimum(ps, ts)
    gap = ((ps + pe) - (ts + te)) * 0.5
    return 1.0 - iou + nx.square(gap) / (nx.square(enclose) + eps)


def offsets_to_segments(offsets):
    """Map (left, right) distances around a point at 0 to (start, end)."""
    if isinstance(offsets, Tensor):
        return nx.concat([-offsets[:, 0:1], offsets[:, 1:2]], axis=1)
    offsets = np.asarray(offsets)
    return np.stack([-offsets[:, 0], offsets[:, 1]], axis=1)


def diou_loss(pred_offsets: Tensor, target_offsets: np.ndarray) -> Tensor:
    """Mean DIoU loss over positive points; zero when there are none."""
    if pred_offsets.shape[0] == 0:
        return Tensor(np.zeros((), dtype=pred_offsets.dtype))
    losses = segment_diou(offsets_to_segments(pred_offsets), offsets_to_segments(target_offsets))
    return losses.mean()


def cosine_scores(features: Tensor, query: Tensor, temperature: float, eps: float = 1e-8) -> Tensor:
    """cos(z_t, q) / temperature for every point; norms are guarded by ``eps``."""
    zn = features / nx.sqrt((nx.square(features)).sum(axis=-1, keepdims=True) + eps)
    qn = query / nx.sqrt((nx.square(query)).sum(axis=-1, keepdims=True) + eps)
    if features.ndim == 3:
        qn = qn.reshape(qn.shape[0], 1, qn.shape[1])
    return (zn * qn).sum(axis=-1) * (1.0 / temperature)


def nce_loss(features: Tensor, positive: np.ndarray, valid: np.ndarray | None, query: Tensor,
             temperature: float = 0.07) -> Tensor:
    """-log of the softmax mass on positive points, averaged over clips with positives.

    ``features`` is (N, C) or (B, N, C) with ``query`` (C,) or (B, C).
    """
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    batched = features.ndim == 3
    positive = np.asarray(positive, dtype=bool)
    if not batched:
        features = features.reshape(1, *features.shape)
        query = query.reshape(1, query.shape[0])
        positive = positive[None]
        valid = None if valid is None else np.asarray(valid, bool)[None]
    valid = np.ones(positive.shape, dtype=bool) if valid is None else np.asarray(valid, bool)
    positive = positive & valid
    has_pos = positive.any(axis=1)
    if not has_pos.any():
        return Tensor(np.zeros((), dtype=features.dtype))
    rows = np.flatnonzero(has_pos)
    scores = cosine_scores(features[rows], query[rows], temperature)
    probs = nx.softmax_lastdim(scores, valid[rows])
    pos_mass = (probs * positive[rows].astype(probs.dtype)).sum(axis=-1)
    return -(nx.log(pos_mass).mean())


def total_loss(cls: Tensor, reg: Tensor, nce: Tensor, lambda_reg: float = 1.0,
               lambda_nce: float = 1.0) -> Tensor:
    return cls + reg * lambda_reg + nce * lambda_nce


@dataclass
class BatchTargets:
    labels: np.ndarray  # B, N
    valid: np.ndarray  # B, N
    offsets: np.ndarray  # B, N, 2


def batch_targets(level_masks: list[np.ndarray], deltas, gts, center_sample: bool = False,
                  center_radius: float = 1.5) -> BatchTargets:
    """Dense per-point targets in the concatenated level layout for a batch."""
    B = level_masks[0].shape[0]
    N = sum(m.shape[1] for m in level_masks)
    labels = np.zeros((B, N), dtype=np.int64)
    valid = np.zeros((B, N), dtype=bool)
    offsets = np.zeros((B, N, 2))
    for b in range(B):
        pts = generate_points([m[b] for m in level_masks], deltas[b])
        tg = assign_labels(pts, gts[b][0], gts[b][1], center_sample, center_radius)
        valid[b, pts.flat] = True
        labels[b, pts.flat] = tg.labels
        offsets[b, pts.flat] = tg.offsets
    return BatchTargets(labels, valid, offsets)


def compute_losses(outputs, targets: BatchTargets, temperature: float, lambda_reg: float = 1.0,
                   lambda_nce: float = 1.0, alpha: float = 0.25, gamma: float = 2.0) -> dict[str, Tensor]:
    """Focal + DIoU + NCE on a batch of model outputs (see ``GroundingModel.__call__``)."""
    logits = nx.concat(outputs.heads.cls_logits, axis=1)
    offsets = nx.concat(outputs.heads.offsets, axis=1)
    fused = nx.concat([lv.features for lv in outputs.fused], axis=1)
    cls = focal_loss(logits, targets.labels, targets.valid, alpha, gamma)
    pos = (targets.labels > 0) & targets.valid
    b_idx, n_idx = np.nonzero(pos)
    reg = diou_loss(offsets[b_idx, n_idx], targets.offsets[b_idx, n_idx])
    nce = nce_loss(fused, pos, targets.valid, outputs.text.pooled, temperature)
    return {"cls": cls, "reg": reg, "nce": nce,
            "total": total_loss(cls, reg, nce, lambda_reg, lambda_nce)}
