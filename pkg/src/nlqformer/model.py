"""Grounding network: video pyramid encoder, text encoder, AdaAttN fusion, heads."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterator

import numpy as np

from . import numerics as nx
from .config import ModelConfig
from .numerics import Tensor


class Module:
    """Minimal parameter container; parameters are discovered by attribute order."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            if isinstance(value, Tensor) and value.requires_grad:
                yield prefix + name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{prefix}{name}.")
            elif isinstance(value, list):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{prefix}{name}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = set(own) - set(state)
        extra = set(state) - set(own)
        if missing or extra:
            raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(extra)}")
        for name, p in own.items():
            if state[name].shape != p.shape:
                raise ValueError(f"{name}: shape {state[name].shape} != {p.shape}")
            p.data = np.array(state[name], dtype=p.dtype)

    def astype(self, dtype) -> Module:
        for p in self.parameters():
            p.data = p.data.astype(dtype)
        return self

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None


def _param(array: np.ndarray, dtype) -> Tensor:
    return Tensor(np.asarray(array, dtype=dtype), requires_grad=True)


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, dtype=np.float32):
        bound = 1.0 / math.sqrt(d_in)
        self.weight = _param(rng.uniform(-bound, bound, (d_in, d_out)), dtype)
        self.bias = _param(np.zeros(d_out), dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return x @ self.weight + self.bias


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float, dtype=np.float32):
        self.gain = _param(np.ones(dim), dtype)
        self.bias = _param(np.zeros(dim), dtype)
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return nx.layer_norm(x, self.gain, self.bias, self.eps)


class Conv1d(Module):
    def __init__(self, c_in: int, c_out: int, kernel: int, rng: np.random.Generator,
                 stride: int = 1, depthwise: bool = False, dtype=np.float32):
        fan_in = kernel if depthwise else kernel * c_in
        bound = 1.0 / math.sqrt(fan_in)
        shape = (kernel, c_in) if depthwise else (kernel, c_in, c_out)
        self.weight = _param(rng.uniform(-bound, bound, shape), dtype)
        self.bias = _param(np.zeros(c_out), dtype)
        self.stride = stride
        self.depthwise = depthwise

    def __call__(self, x: Tensor, mask: np.ndarray) -> Tensor:
        return nx.conv1d(x, self.weight, self.bias, self.stride, mask, self.depthwise)


def apply_mask(x: Tensor, mask: np.ndarray) -> Tensor:
    return x * mask[..., None].astype(x.dtype)


class TransformerBlock(Module):
    """Pre-norm block: local self-attention then MLP, each with a residual.

    With ``downsample`` the block ends in a depthwise stride-2 convolution.
    ``window=None`` means full attention over the sequence.
    """

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator, window: int | None,
                 downsample: bool = False, dtype=np.float32):
        C = cfg.embed_dim
        self.heads = cfg.num_heads
        self.window = window
        self.norm_attn = LayerNorm(C, cfg.norm_eps, dtype)
        self.qkv = Linear(C, 3 * C, rng, dtype)
        self.proj = Linear(C, C, rng, dtype)
        self.norm_mlp = LayerNorm(C, cfg.norm_eps, dtype)
        self.fc1 = Linear(C, cfg.mlp_ratio * C, rng, dtype)
        self.fc2 = Linear(cfg.mlp_ratio * C, C, rng, dtype)
        self.down = Conv1d(C, C, 3, rng, stride=2, depthwise=True, dtype=dtype) if downsample else None

    def __call__(self, x: Tensor, mask: np.ndarray) -> tuple[Tensor, np.ndarray]:
        B, T, C = x.shape
        H = self.heads
        qkv = self.qkv(self.norm_attn(x)).reshape(B, T, 3, H, C // H)
        window = self.window if self.window is not None else 2 * T - 1
        att = nx.windowed_attention(qkv[:, :, 0], qkv[:, :, 1], qkv[:, :, 2], window, mask)
        x = apply_mask(x + self.proj(att.reshape(B, T, C)), mask)
        x = apply_mask(x + self.fc2(nx.gelu(self.fc1(self.norm_mlp(x)))), mask)
        if self.down is not None:
            x = self.down(x, mask)
            mask = nx.downsample_mask(mask, 2)
            x = apply_mask(x, mask)
        return x, mask


class AdaAttN(Module):
    """Attention-weighted mean/std of text values re-styles each video position."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator, dtype=np.float32):
        C = cfg.embed_dim
        self.heads = cfg.num_heads
        self.eps = cfg.fusion_eps
        self.norm_eps = cfg.norm_eps
        self.query = Linear(C, C, rng, dtype)
        self.key = Linear(C, C, rng, dtype)
        self.value = Linear(C, C, rng, dtype)
        self.out = Linear(C, C, rng, dtype)

    def modulate(self, x: Tensor, tokens: Tensor, token_mask: np.ndarray) -> Tensor:
        """Concatenated per-head ``S * ChannelNorm(X_h) + M`` before the output projection."""
        B, T, C = x.shape
        L = tokens.shape[1]
        H = self.heads
        dh = C // H
        q = self.query(x).reshape(B, T, H, dh).transpose(0, 2, 1, 3)
        k = self.key(tokens).reshape(B, L, H, dh).transpose(0, 2, 3, 1)
        v = self.value(tokens).reshape(B, L, H, dh).transpose(0, 2, 1, 3)
        attn = nx.softmax_lastdim((q @ k) * (1.0 / math.sqrt(dh)), token_mask[:, None, None, :])
        m = attn @ v
        var = attn @ nx.square(v) - nx.square(m)
        scale = nx.sqrt(nx.maximum(var, 0.0) + self.eps)
        xh = x.reshape(B, T, H, dh).transpose(0, 2, 1, 3)
        styled = scale * nx.layer_norm(xh, eps=self.norm_eps) + m
        return styled.transpose(0, 2, 1, 3).reshape(B, T, C)

    def __call__(self, x: Tensor, mask: np.ndarray, tokens: Tensor, token_mask: np.ndarray) -> Tensor:
        return apply_mask(x + self.out(self.modulate(x, tokens, token_mask)), mask)


class Head(Module):
    def __init__(self, cfg: ModelConfig, out_channels: int, rng: np.random.Generator,
                 prior_bias: float = 0.0, dtype=np.float32):
        C = cfg.embed_dim
        self.convs = [Conv1d(C, C, 3, rng, dtype=dtype) for _ in range(cfg.head_layers)]
        self.norms = [LayerNorm(C, cfg.norm_eps, dtype) for _ in range(cfg.head_layers)]
        self.final = Conv1d(C, out_channels, 3, rng, dtype=dtype)
        self.final.bias.data[:] = prior_bias

    def __call__(self, x: Tensor, mask: np.ndarray) -> Tensor:
        for conv, norm in zip(self.convs, self.norms):
            x = apply_mask(nx.relu(norm(conv(x, mask))), mask)
        return apply_mask(self.final(x, mask), mask)


@dataclass
class Level:
    stride: int
    features: Tensor  # B, T_l, C
    mask: np.ndarray  # B, T_l

    @property
    def length(self) -> int:
        return self.features.shape[1]


@dataclass
class TextEmbedding:
    tokens: Tensor  # B, L, C
    mask: np.ndarray  # B, L
    pooled: Tensor  # B, C


@dataclass
class HeadOutputs:
    cls_logits: list[Tensor]  # per level: B, T_l
    offsets: list[Tensor]  # per level: B, T_l, 2 (grid units of the level)


@dataclass
class ForwardOutputs:
    pyramid: list[Level]
    fused: list[Level]
    text: TextEmbedding
    heads: HeadOutputs
    input_length: np.ndarray  # B, valid steps before padding


def pad_to_multiple(features: np.ndarray, mask: np.ndarray, multiple: int) -> tuple[np.ndarray, np.ndarray]:
    """Right-pad the time axis with zeros / invalid entries to a multiple of ``multiple``."""
    T = features.shape[-2]
    target = max(multiple, -(-T // multiple) * multiple)
    if target == T:
        return features, mask
    pad_feat = [(0, 0)] * features.ndim
    pad_feat[-2] = (0, target - T)
    pad_mask = [(0, 0)] * mask.ndim
    pad_mask[-1] = (0, target - T)
    return np.pad(features, pad_feat), np.pad(mask, pad_mask)


class GroundingModel(Module):
    def __init__(self, cfg: ModelConfig, seed: int = 0, dtype=np.float32):
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        C = cfg.embed_dim
        self.embed1 = Conv1d(cfg.input_dim, C, 3, rng, dtype=dtype)
        self.embed_norm1 = LayerNorm(C, cfg.norm_eps, dtype)
        self.embed2 = Conv1d(C, C, 3, rng, dtype=dtype)
        self.embed_norm2 = LayerNorm(C, cfg.norm_eps, dtype)
        n_plain = cfg.num_blocks - cfg.num_downsample
        self.blocks = [TransformerBlock(cfg, rng, cfg.window, downsample=i >= n_plain, dtype=dtype)
                       for i in range(cfg.num_blocks)]
        self.text_proj = Linear(cfg.text_dim, C, rng, dtype)
        self.text_blocks = [TransformerBlock(cfg, rng, None, dtype=dtype) for _ in range(cfg.text_layers)]
        self.fusion = AdaAttN(cfg, rng, dtype)
        prior = -math.log((1 - 0.01) / 0.01)
        self.cls_head = Head(cfg, 1, rng, prior_bias=prior, dtype=dtype)
        self.reg_head = Head(cfg, 2, rng, dtype=dtype)

    @property
    def dtype(self):
        return self.embed1.weight.dtype

    def embed_video(self, features, mask: np.ndarray | None = None) -> tuple[Tensor, np.ndarray]:
        """Pad to a multiple of the top stride, then two conv + LayerNorm + ReLU stages."""
        feats = features.data if isinstance(features, Tensor) else np.asarray(features)
        if feats.ndim == 2:
            feats = feats[None]
            mask = None if mask is None else np.asarray(mask, bool)[None]
        if feats.shape[1] < 1:
            raise ValueError("video features need at least one time step")
        if feats.shape[-1] != self.cfg.input_dim:
            raise ValueError(f"feature dim {feats.shape[-1]} != configured input_dim {self.cfg.input_dim}")
        if mask is None:
            mask = np.ones(feats.shape[:2], dtype=bool)
        feats, mask = pad_to_multiple(feats.astype(self.dtype, copy=False), np.asarray(mask, bool),
                                      self.cfg.max_stride)
        x = Tensor(feats)
        x = apply_mask(nx.relu(self.embed_norm1(self.embed1(x, mask))), mask)
        x = apply_mask(nx.relu(self.embed_norm2(self.embed2(x, mask))), mask)
        return x, mask

    def encode_video(self, x: Tensor, mask: np.ndarray) -> list[Level]:
        if x.shape[1] % self.cfg.max_stride:
            raise ValueError(f"embedded length {x.shape[1]} is not a multiple of {self.cfg.max_stride}")
        n_plain = self.cfg.num_blocks - self.cfg.num_downsample
        levels = []
        for i, block in enumerate(self.blocks):
            x, mask = block(x, mask)
            if i >= n_plain - 1:
                levels.append(Level(2 ** len(levels), x, mask))
        return levels

    def encode_text(self, tokens, mask: np.ndarray | None = None) -> TextEmbedding:
        raw = tokens.data if isinstance(tokens, Tensor) else np.asarray(tokens)
        if raw.ndim == 2:
            raw = raw[None]
            mask = None if mask is None else np.asarray(mask, bool)[None]
        if raw.shape[-1] != self.cfg.text_dim:
            raise ValueError(f"text dim {raw.shape[-1]} != configured text_dim {self.cfg.text_dim}")
        mask = np.ones(raw.shape[:2], dtype=bool) if mask is None else np.asarray(mask, bool)
        if not mask.any(axis=1).all():
            raise ValueError("every query needs at least one valid token")
        x = apply_mask(self.text_proj(Tensor(raw.astype(self.dtype, copy=False))), mask)
        for block in self.text_blocks:
            x, _ = block(x, mask)
        weights = (mask / mask.sum(axis=1, keepdims=True)).astype(self.dtype)
        pooled = (x * weights[..., None]).sum(axis=1)
        return TextEmbedding(x, mask, pooled)

    def fuse(self, levels: list[Level], text: TextEmbedding) -> list[Level]:
        return [Level(lv.stride, self.fusion(lv.features, lv.mask, text.tokens, text.mask), lv.mask)
                for lv in levels]

    def run_heads(self, levels: list[Level]) -> HeadOutputs:
        logits, offsets = [], []
        for lv in levels:
            B, T, _ = lv.features.shape
            logits.append(self.cls_head(lv.features, lv.mask).reshape(B, T))
            offsets.append(nx.relu(self.reg_head(lv.features, lv.mask)))
        return HeadOutputs(logits, offsets)

    def __call__(self, features, mask, tokens, token_mask) -> ForwardOutputs:
        feats = np.asarray(features)
        if feats.ndim == 2:
            feats, mask = feats[None], np.asarray(mask, bool)[None]
            tokens, token_mask = np.asarray(tokens)[None], np.asarray(token_mask, bool)[None]
        x, vmask = self.embed_video(feats, mask)
        pyramid = self.encode_video(x, vmask)
        text = self.encode_text(tokens, token_mask)
        fused = self.fuse(pyramid, text)
        heads = self.run_heads(fused)
        return ForwardOutputs(pyramid, fused, text, heads, np.asarray(mask, bool).sum(axis=1))

    def receptive_radius(self, level: int) -> float:
        """Farthest distance, in input steps, from a point's timestamp to an input step that reaches it.

        Index k of level l is anchored at input index 2^l * k (stride-2 convs
        with padding 1), half a point-width before its timestamp.
        """
        cfg = self.cfg
        r = (cfg.window - 1) // 2
        n_plain = cfg.num_blocks - cfg.num_downsample
        radius = 2 + r * n_plain
        for l in range(1, level + 1):
            below = 2 ** (l - 1)
            radius += r * below + below
        radius += (cfg.head_layers + 1) * 2 ** level
        return radius + (2 ** level - 1) / 2
