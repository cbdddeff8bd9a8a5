"""AdamW, the warmup/cosine schedule, the training loop and checkpoint files."""

from __future__ import annotations

import json
import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import Config
from .data import Sample
from .model import GroundingModel
from .pipeline import collate
from .supervision import batch_targets, compute_losses

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"EGCK"
CHECKPOINT_VERSION = 1
OPTIM_MARKER = b"OPTM"
META_MARKER = b"META"
PRNG_NAME = "numpy.random.PCG64"


class NonFiniteGradient(FloatingPointError):
    pass


# ---------------------------------------------------------------- schedule / optimizer


@dataclass
class Schedule:
    base_lr: float = 1e-3
    warmup_steps: int = 0
    total_steps: int = 1

    def __post_init__(self) -> None:
        if not 0 <= self.warmup_steps < self.total_steps:
            raise ValueError(f"need 0 <= warmup_steps < total_steps, got {self.warmup_steps}, {self.total_steps}")


def lr_at(step: int, schedule: Schedule) -> float:
    """Linear warmup to ``base_lr`` then cosine decay to zero at ``total_steps``."""
    if not 0 <= step <= schedule.total_steps:
        raise ValueError(f"step {step} outside [0, {schedule.total_steps}]")
    if step < schedule.warmup_steps:
        return schedule.base_lr * (step + 1) / schedule.warmup_steps
    progress = (step - schedule.warmup_steps) / (schedule.total_steps - schedule.warmup_steps)
    return schedule.base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


@dataclass
class OptimState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0


def adamw_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: OptimState,
               lr: float) -> tuple[dict[str, np.ndarray], OptimState]:
    """One bias-corrected AdamW update; decay touches only rank >= 2 parameters."""
    if lr < 0:
        raise ValueError("learning rate must be non-negative")
    for name, g in grads.items():
        if g.shape != params[name].shape:
            raise ValueError(f"{name}: gradient shape {g.shape} != parameter shape {params[name].shape}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradient(f"non-finite gradient for {name}")
    t = state.step + 1
    b1, b2 = state.beta1, state.beta2
    new_params, new_m, new_v = {}, {}, {}
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p)
        m = b1 * state.m.get(name, np.zeros_like(p)) + (1 - b1) * g
        v = b2 * state.v.get(name, np.zeros_like(p)) + (1 - b2) * g * g
        m_hat = m / (1 - b1 ** t)
        v_hat = v / (1 - b2 ** t)
        updated = p
        if state.weight_decay and p.ndim >= 2:
            updated = updated * (1 - lr * state.weight_decay)
        updated = updated - lr * m_hat / (np.sqrt(v_hat) + state.eps)
        new_params[name] = updated.astype(p.dtype)
        new_m[name], new_v[name] = m.astype(p.dtype), v.astype(p.dtype)
    return new_params, OptimState(new_m, new_v, t, b1, b2, state.eps, state.weight_decay)


def clip_grad_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    total = math.sqrt(sum(float((g.astype(np.float64) ** 2).sum()) for g in grads.values()))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / (total + 1e-6)
        for name in grads:
            grads[name] = grads[name] * np.asarray(scale, dtype=grads[name].dtype)
    return total


# ---------------------------------------------------------------- checkpoints


def _pack_tensors(tensors: dict[str, np.ndarray]) -> bytes:
    parts = [struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        raw = name.encode("utf-8")
        arr = np.ascontiguousarray(arr, dtype="<f4")
        parts.append(struct.pack("<H", len(raw)) + raw + struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape) + arr.tobytes())
    return b"".join(parts)


def _unpack_tensors(blob: bytes, pos: int) -> tuple[dict[str, np.ndarray], int]:
    def take(fmt):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(blob):
            raise ValueError(f"truncated checkpoint at byte {pos}")
        vals = struct.unpack_from(fmt, blob, pos)
        pos += size
        return vals

    (count,) = take("<I")
    tensors = {}
    for _ in range(count):
        (n,) = take("<H")
        if pos + n > len(blob):
            raise ValueError(f"truncated checkpoint at byte {pos}")
        name = blob[pos:pos + n].decode("utf-8")
        pos += n
        (rank,) = take("<B")
        shape = take(f"<{rank}I") if rank else ()
        nbytes = 4 * int(np.prod(shape, dtype=np.int64))
        if pos + nbytes > len(blob):
            raise ValueError(f"truncated tensor {name!r} at byte {pos}")
        tensors[name] = np.frombuffer(blob, "<f4", int(np.prod(shape, dtype=np.int64)), pos) \
            .reshape(shape).astype(np.float32)
        pos += nbytes
    return tensors, pos


def save_checkpoint(path, params: dict[str, np.ndarray], optim: OptimState | None = None,
                    meta: dict | None = None) -> None:
    blob = [CHECKPOINT_MAGIC, struct.pack("<I", CHECKPOINT_VERSION), _pack_tensors(params)]
    if optim is not None:
        state = {f"m.{k}": v for k, v in optim.m.items()} | {f"v.{k}": v for k, v in optim.v.items()}
        blob += [OPTIM_MARKER, struct.pack("<I", optim.step), _pack_tensors(state)]
    if meta is not None:
        raw = json.dumps(meta, sort_keys=True).encode("utf-8")
        blob += [META_MARKER, struct.pack("<I", len(raw)), raw]
    Path(path).write_bytes(b"".join(blob))


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], OptimState | None, dict]:
    blob = Path(path).read_bytes()
    if blob[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint (magic {blob[:4]!r})")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    params, pos = _unpack_tensors(blob, 8)
    optim, meta = None, {}
    while pos < len(blob):
        marker = blob[pos:pos + 4]
        pos += 4
        if marker == OPTIM_MARKER:
            (step,) = struct.unpack_from("<I", blob, pos)
            state, pos = _unpack_tensors(blob, pos + 4)
            optim = OptimState({k[2:]: v for k, v in state.items() if k.startswith("m.")},
                               {k[2:]: v for k, v in state.items() if k.startswith("v.")}, step)
        elif marker == META_MARKER:
            (n,) = struct.unpack_from("<I", blob, pos)
            meta = json.loads(blob[pos + 4:pos + 4 + n].decode("utf-8"))
            pos += 4 + n
        else:
            raise ValueError(f"{path}: unknown section {marker!r} at byte {pos - 4}")
    return params, optim, meta


def load_model(path) -> tuple[GroundingModel, Config]:
    params, _, meta = load_checkpoint(path)
    if "config" not in meta:
        raise ValueError(f"{path}: checkpoint has no config metadata")
    config = Config.from_dict(meta["config"])
    model = GroundingModel(config.model, seed=config.train.seed)
    model.load_state_dict(params)
    return model, config


# ---------------------------------------------------------------- training loop


@dataclass
class FitResult:
    model: GroundingModel
    optim: OptimState
    epoch_losses: list[dict[str, float]]
    best_epoch: int


def num_batches(n: int, batch_size: int) -> int:
    return -(-n // batch_size)


def fit(config: Config, dataset: list[Sample], out: str | Path | None = None,
        model: GroundingModel | None = None) -> FitResult:
    """Train on ``dataset``; writes ``out`` at the end and ``<out>.best`` at the best epoch."""
    if not dataset:
        raise ValueError("cannot train on an empty dataset")
    tc = config.train
    model = model or GroundingModel(config.model, seed=tc.seed)
    rng = np.random.default_rng(tc.seed)
    steps_per_epoch = num_batches(len(dataset), tc.batch_size)
    total = tc.epochs * steps_per_epoch
    warmup = min(int(round(tc.warmup_fraction * total)), total - 1)
    schedule = Schedule(tc.base_lr, warmup, total)
    named = dict(model.named_parameters())
    optim = OptimState(weight_decay=tc.weight_decay)
    meta = {"config": config.to_dict(), "prng": PRNG_NAME, "seed": tc.seed}
    history: list[dict[str, float]] = []
    best, best_epoch = math.inf, -1
    step = 0
    for epoch in range(tc.epochs):
        order = rng.permutation(len(dataset))
        sums = {"cls": 0.0, "reg": 0.0, "nce": 0.0, "total": 0.0}
        for b in range(steps_per_epoch):
            batch = collate([dataset[i] for i in order[b * tc.batch_size:(b + 1) * tc.batch_size]],
                            config.model.max_stride, model.dtype)
            outputs = model(batch.features, batch.mask, batch.tokens, batch.token_mask)
            targets = batch_targets([lv.mask for lv in outputs.fused], batch.deltas, batch.gts,
                                    tc.center_sample, tc.center_radius)
            losses = compute_losses(outputs, targets, config.model.nce_temperature, tc.lambda_reg,
                                    tc.lambda_nce, tc.focal_alpha, tc.focal_gamma)
            model.zero_grad()
            losses["total"].backward()
            grads = {k: (p.grad if p.grad is not None else np.zeros_like(p.data)) for k, p in named.items()}
            clip_grad_norm(grads, tc.grad_clip)
            try:
                new_params, optim = adamw_step({k: p.data for k, p in named.items()}, grads, optim,
                                               lr_at(step, schedule))
            except NonFiniteGradient as err:
                log.warning("epoch %d step %d skipped: %s", epoch, step, err)
            else:
                for k, p in named.items():
                    p.data = new_params[k]
            step += 1
            for key in sums:
                sums[key] += float(losses[key].data)
        epoch_loss = {k: v / steps_per_epoch for k, v in sums.items()}
        history.append(epoch_loss)
        log.info("epoch %d loss %.5f (cls %.4f reg %.4f nce %.4f)", epoch, epoch_loss["total"],
                 epoch_loss["cls"], epoch_loss["reg"], epoch_loss["nce"])
        if epoch_loss["total"] < best:
            best, best_epoch = epoch_loss["total"], epoch
            if out is not None:
                save_checkpoint(_best_path(out), model.state_dict(), optim, meta | {"epoch": epoch})
    model.zero_grad()
    if out is not None:
        save_checkpoint(out, model.state_dict(), optim,
                        meta | {"epoch": tc.epochs - 1, "epoch_losses": history})
    return FitResult(model, optim, history, best_epoch)


def _best_path(out) -> Path:
    out = Path(out)
    return out.with_name(out.name + ".best")
