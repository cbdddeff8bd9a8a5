"""Dense tensors with reverse-mode gradients on top of numpy.

Every differentiable op records its inputs and a vector-Jacobian product;
``Tensor.backward`` walks the recorded graph in reverse topological order.
Training runs in float32, gradient checks in float64.
"""

from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

_DEFAULT_DTYPE = np.float32
_FLOAT_TYPES = (np.float32, np.float64, np.longdouble)
_GRAD_ENABLED = True


@contextlib.contextmanager
def default_dtype(dtype):
    """Temporarily change the dtype used for tensors built from python data."""
    global _DEFAULT_DTYPE
    prev, _DEFAULT_DTYPE = _DEFAULT_DTYPE, np.dtype(dtype).type
    try:
        yield
    finally:
        _DEFAULT_DTYPE = prev


@contextlib.contextmanager
def no_grad():
    global _GRAD_ENABLED
    prev, _GRAD_ENABLED = _GRAD_ENABLED, False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            if isinstance(data, (np.ndarray, np.generic)) and data.dtype in _FLOAT_TYPES:
                arr = np.asarray(data)
            else:
                arr = np.asarray(data, dtype=_DEFAULT_DTYPE)
        else:
            arr = np.asarray(data, dtype=dtype)
        self.data: np.ndarray = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def backward(self, grad: np.ndarray | None = None) -> None:
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without a seed gradient needs a scalar output")
            grad = np.ones_like(self.data)
        order = _topological_order(self)
        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=self.data.dtype)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g if node.grad is None else node.grad + g
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.data.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype or _DEFAULT_DTYPE))


def _result(data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    return _result(a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    return _result(a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    return _result(a.data * b.data, (a, b),
                   lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = a.data / b.data
    return _result(out, (a, b),
                   lambda g: (_unbroadcast(g / b.data, a.shape),
                              _unbroadcast(-g * out / b.data, b.shape)))


def neg(a: Tensor) -> Tensor:
    return _result(-a.data, (a,), lambda g: (-g,))


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        return a, as_tensor(b, like=a)
    b = as_tensor(b)
    return as_tensor(a, like=b), b


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _result(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    return _result(np.log(a.data), (a,), lambda g: (g / a.data,))


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return _result(out, (a,), lambda g: (g * 0.5 / out,))


def square(a: Tensor) -> Tensor:
    return _result(a.data * a.data, (a,), lambda g: (2.0 * g * a.data,))


def power(a: Tensor, exponent: float) -> Tensor:
    out = a.data ** exponent
    return _result(out, (a,), lambda g: (g * exponent * a.data ** (exponent - 1),))


def relu(a: Tensor) -> Tensor:
    pos = a.data > 0
    return _result(np.where(pos, a.data, 0).astype(a.dtype), (a,), lambda g: (g * pos,))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Tensor) -> Tensor:
    """tanh approximation of GELU."""
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x ** 3)
    th = np.tanh(inner)
    out = 0.5 * x * (1.0 + th)

    def backward(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
        return (g * (0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * dinner),)

    return _result(out, (a,), backward)


def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype)


def sigmoid(a: Tensor) -> Tensor:
    out = _sigmoid_np(a.data)
    return _result(out, (a,), lambda g: (g * out * (1.0 - out),))


def softplus(a: Tensor) -> Tensor:
    x = a.data
    out = np.maximum(x, 0) + np.log1p(np.exp(-np.abs(x)))
    return _result(out, (a,), lambda g: (g * _sigmoid_np(x),))


def maximum(a, b) -> Tensor:
    a, b = _pair(a, b)
    pick_a = a.data >= b.data
    return _result(np.maximum(a.data, b.data), (a, b),
                   lambda g: (_unbroadcast(g * pick_a, a.shape), _unbroadcast(g * ~pick_a, b.shape)))


def minimum(a, b) -> Tensor:
    a, b = _pair(a, b)
    pick_a = a.data <= b.data
    return _result(np.minimum(a.data, b.data), (a, b),
                   lambda g: (_unbroadcast(g * pick_a, a.shape), _unbroadcast(g * ~pick_a, b.shape)))


# ---------------------------------------------------------------- shape / reductions


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _result(np.asarray(out), (a,), backward)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = a.data.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = int(np.prod([a.shape[ax] for ax in axes]))
    return tsum(a, axis, keepdims) * (1.0 / count)


def reshape(a: Tensor, shape) -> Tensor:
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes=None) -> Tensor:
    out = np.transpose(a.data, axes)
    inv = None if axes is None else np.argsort(axes)
    return _result(out, (a,), lambda g: (np.transpose(g, inv),))


def _is_basic_index(index) -> bool:
    parts = index if isinstance(index, tuple) else (index,)
    return all(p is None or p is Ellipsis or isinstance(p, (int, slice)) for p in parts)


def getitem(a: Tensor, index) -> Tensor:
    basic = _is_basic_index(index)

    def backward(g):
        full = np.zeros_like(a.data)
        if basic:
            full[index] = g
        else:
            np.add.at(full, index, g)
        return (full,)

    return _result(np.asarray(a.data[index]), (a,), backward)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _result(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product over the last two axes."""
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")

    def backward(g):
        ga = g @ np.swapaxes(b.data, -1, -2) if a.requires_grad else None
        gb = None
        if b.requires_grad:
            if b.ndim == 2 and a.ndim > 2:
                gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        if ga is not None:
            ga = _unbroadcast(ga, a.shape)
        return ga, gb

    return _result(a.data @ b.data, (a, b), backward)


# ---------------------------------------------------------------- fused ops


def _masked_softmax_np(x: np.ndarray, mask: np.ndarray | None) -> np.ndarray:
    if mask is None:
        z = x - x.max(axis=-1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=-1, keepdims=True)
    mask = np.broadcast_to(mask, x.shape)
    neg_inf = np.asarray(-np.inf, dtype=x.dtype)
    masked = np.where(mask, x, neg_inf)
    peak = masked.max(axis=-1, keepdims=True)
    peak = np.where(np.isfinite(peak), peak, 0)
    e = np.where(mask, np.exp(masked - peak), 0).astype(x.dtype)
    total = e.sum(axis=-1, keepdims=True)
    return e / np.where(total > 0, total, 1)


def softmax_lastdim(x: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis; masked-out entries are exactly zero."""
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if not np.broadcast_to(mask, x.shape).any(axis=-1).all():
            raise ValueError("softmax_lastdim: a row has no valid entries")
    p = _masked_softmax_np(x.data, mask)

    def backward(g):
        return (p * (g - (p * g).sum(axis=-1, keepdims=True)),)

    return _result(p, (x,), backward)


def layer_norm(x: Tensor, gain: Tensor | None = None, bias: Tensor | None = None,
               eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis; ``gain``/``bias`` of None means no affine."""
    if eps <= 0:
        raise ValueError("layer_norm eps must be positive")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat
    if gain is not None:
        out = out * gain.data
    if bias is not None:
        out = out + bias.data
    parents = [x] + [t for t in (gain, bias) if t is not None]

    def backward(g):
        reduce_axes = tuple(range(g.ndim - 1))
        dxhat = g * gain.data if gain is not None else g
        dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        grads = [dx]
        if gain is not None:
            grads.append((g * xhat).sum(axis=reduce_axes))
        if bias is not None:
            grads.append(g.sum(axis=reduce_axes))
        return grads

    return _result(out, parents, backward)


def conv1d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1,
           mask: np.ndarray | None = None, depthwise: bool = False) -> Tensor:
    """1-D convolution over the time axis of ``x`` ([B,] T, C_in).

    Dense weights are (K, C_in, C_out); depthwise weights are (K, C).
    Zero padding of (K-1)/2 each side, output length ceil(T / stride).
    Input positions where ``mask`` is False contribute zero.
    """
    if stride not in (1, 2):
        raise ValueError(f"conv1d stride must be 1 or 2, got {stride}")
    squeeze = x.ndim == 2
    xd = x.data[None] if squeeze else x.data
    B, T, C_in = xd.shape
    K = weight.shape[0]
    if K % 2 == 0:
        raise ValueError(f"conv1d kernel width must be odd, got {K}")
    if depthwise:
        if weight.shape != (K, C_in):
            raise ValueError(f"depthwise kernel shape {weight.shape} does not fit {C_in} channels")
    elif weight.ndim != 3 or weight.shape[1] != C_in:
        raise ValueError(f"conv1d kernel shape {weight.shape} does not fit input {x.shape}")
    pad = (K - 1) // 2
    if K > T + 2 * pad:
        raise ValueError(f"kernel width {K} exceeds padded input length {T + 2 * pad}")
    T_out = -(-T // stride)
    right = max(pad, stride * (T_out - 1) + K - pad - T)
    if mask is not None:
        m = np.asarray(mask, dtype=bool)
        m = m[None] if squeeze else m
        xd = xd * m[..., None]
    xp = np.zeros((B, T + pad + right, C_in), dtype=xd.dtype)
    xp[:, pad:pad + T] = xd
    span = stride * (T_out - 1) + 1
    cols = np.stack([xp[:, k:k + span:stride] for k in range(K)], axis=2)  # B,T_out,K,C_in
    w = weight.data
    if depthwise:
        out = np.einsum("btkc,kc->btc", cols, w)
    else:
        C_out = w.shape[2]
        out = (cols.reshape(B * T_out, K * C_in) @ w.reshape(K * C_in, C_out)).reshape(B, T_out, C_out)
    if bias is not None:
        out = out + bias.data
    parents = [x, weight] + ([bias] if bias is not None else [])

    def backward(g):
        g3 = g[None] if squeeze else g
        if depthwise:
            dw = np.einsum("btkc,btc->kc", cols, g3)
            dcols = g3[:, :, None, :] * w[None, None]
        else:
            C_out = w.shape[2]
            g2 = g3.reshape(B * T_out, C_out)
            dw = (cols.reshape(B * T_out, K * C_in).T @ g2).reshape(w.shape)
            dcols = (g2 @ w.reshape(K * C_in, C_out).T).reshape(B, T_out, K, C_in)
        dxp = np.zeros_like(xp)
        for k in range(K):
            dxp[:, k:k + span:stride] += dcols[:, :, k]
        dx = dxp[:, pad:pad + T]
        if mask is not None:
            dx = dx * m[..., None]
        if squeeze:
            dx = dx[0]
        grads = [dx, dw]
        if bias is not None:
            grads.append(g3.sum(axis=(0, 1)))
        return grads

    return _result(out[0] if squeeze else out, parents, backward)


def downsample_mask(mask: np.ndarray, stride: int = 2) -> np.ndarray:
    """A downsampled position is valid if any input in its stride window is."""
    mask = np.asarray(mask, dtype=bool)
    T = mask.shape[-1]
    T_out = -(-T // stride)
    padded = np.zeros(mask.shape[:-1] + (T_out * stride,), dtype=bool)
    padded[..., :T] = mask
    return padded.reshape(mask.shape[:-1] + (T_out, stride)).any(axis=-1)


def windowed_attention(q: Tensor, k: Tensor, v: Tensor, window: int,
                       mask: np.ndarray | None = None) -> Tensor:
    """Scaled dot-product attention restricted to a local window.

    Inputs are ([B,] T, H, d). Position t attends to valid positions within
    +-(window-1)/2. Invalid query positions produce zeros.
    """
    if window < 1 or window % 2 == 0:
        raise ValueError(f"attention window must be a positive odd integer, got {window}")
    squeeze = q.ndim == 3
    qd, kd, vd = (t.data[None] if squeeze else t.data for t in (q, k, v))
    B, T, H, d = qd.shape
    if kd.shape != qd.shape or vd.shape != qd.shape:
        raise ValueError(f"q/k/v shapes differ: {q.shape}, {k.shape}, {v.shape}")
    if mask is None:
        m = np.ones((B, T), dtype=bool)
    else:
        m = np.asarray(mask, dtype=bool)
        m = m[None] if squeeze else m
    r = (window - 1) // 2
    scale = 1.0 / math.sqrt(d)

    def windows(a):
        ap = np.zeros((B, T + 2 * r, H, d), dtype=a.dtype)
        ap[:, r:r + T] = a
        return sliding_window_view(ap, window, axis=1)  # B,T,H,d,w

    kw = windows(kd)
    vw = windows(vd)
    mp = np.zeros((B, T + 2 * r), dtype=bool)
    mp[:, r:r + T] = m
    allowed = sliding_window_view(mp, window, axis=1) & m[:, :, None]  # B,T,w
    allowed = allowed[:, :, None, :]  # B,T,1,w
    scores = (qd[..., None, :] @ kw)[..., 0, :] * scale  # B,T,H,w
    p = _masked_softmax_np(scores, allowed)
    out = np.einsum("bthw,bthdw->bthd", p, vw)

    def scatter(dw):
        full = np.zeros((B, T + 2 * r, H, d), dtype=dw.dtype)
        for j in range(window):
            full[:, j:j + T] += dw[..., j]
        return full[:, r:r + T]

    def backward(g):
        g4 = g[None] if squeeze else g
        dp = np.einsum("bthd,bthdw->bthw", g4, vw)
        ds = p * (dp - (p * dp).sum(axis=-1, keepdims=True))
        dq = np.einsum("bthw,bthdw->bthd", ds, kw) * scale
        dkw = ds[:, :, :, None, :] * qd[..., None] * scale
        dvw = p[:, :, :, None, :] * g4[..., None]
        grads = [dq, scatter(dkw), scatter(dvw)]
        return [gr[0] for gr in grads] if squeeze else grads

    return _result(out[0] if squeeze else out, (q, k, v), backward)


# ---------------------------------------------------------------- gradient checking


@dataclass
class GradCheckReport:
    op: str
    max_rel_error: float
    per_input: list[float] = field(default_factory=list)
    finite: bool = True

    def passed(self, tol: float) -> bool:
        return self.finite and self.max_rel_error <= tol


def grad_check(op: Callable[..., Tensor], inputs: Sequence[np.ndarray], probes: int = 20,
               h: float = 1e-5, seed: int = 0, name: str | None = None,
               wrt: Iterable[int] | None = None) -> GradCheckReport:
    """Compare analytic gradients of ``op`` against central differences.

    The output is reduced to a scalar with a fixed random weighting so every
    coordinate of the gradient is exercised. Runs in float64.
    """
    rng = np.random.default_rng(seed)
    arrays = [np.array(a, dtype=np.float64) for a in inputs]
    wrt = list(range(len(arrays))) if wrt is None else list(wrt)
    label = name or getattr(op, "__name__", "op")

    with default_dtype(np.float64):
        probe_out = op(*[Tensor(a) for a in arrays])
        weights = rng.standard_normal(probe_out.shape)

        def evaluate(arrs) -> np.ndarray:
            with no_grad():
                return op(*[Tensor(a) for a in arrs]).data

        tensors = [Tensor(a, requires_grad=(i in wrt)) for i, a in enumerate(arrays)]
        out = op(*tensors)
        if not np.all(np.isfinite(out.data)):
            return GradCheckReport(label, math.inf, [], finite=False)
        tsum(mul(out, Tensor(weights))).backward()

        per_input = []
        finite = True
        for i in wrt:
            analytic = tensors[i].grad
            if analytic is None:
                analytic = np.zeros_like(arrays[i])
            flat_size = arrays[i].size
            coords = (np.arange(flat_size) if flat_size <= probes
                      else rng.choice(flat_size, size=probes, replace=False))
            worst = 0.0
            for c in coords:
                idx = np.unravel_index(c, arrays[i].shape)
                plus = [a.copy() for a in arrays]
                minus = [a.copy() for a in arrays]
                plus[i][idx] += h
                minus[i][idx] -= h
                # difference before reducing: untouched outputs cancel exactly
                numeric = float(((evaluate(plus) - evaluate(minus)) * weights).sum()) / (2 * h)
                a_val = float(analytic[idx])
                if not (math.isfinite(numeric) and math.isfinite(a_val)):
                    finite = False
                    worst = math.inf
                    continue
                err = abs(a_val - numeric) / max(abs(a_val), abs(numeric), 1e-8)
                worst = max(worst, err)
            per_input.append(worst)
    return GradCheckReport(label, max(per_input, default=0.0), per_input, finite)


def grad_check_params(loss_fn: Callable[[], Tensor], params: dict[str, Tensor], probes: int = 3,
                      h: float = 1e-5, seed: int = 0, name: str = "loss",
                      reference_dtype=np.longdouble) -> GradCheckReport:
    """Finite-difference check of a scalar loss against parameters held in place.

    The analytic gradient comes from the parameters' own (float64) dtype. The
    central differences are evaluated with parameters cast to ``reference_dtype``:
    one float64 ulp of an O(10) loss over 2h is ~1e-10, which alone exceeds the
    1e-8 relative-error floor on zero-gradient coordinates.
    """
    rng = np.random.default_rng(seed)
    for p in params.values():
        p.grad = None
    loss = loss_fn()
    if not np.isfinite(loss.data):
        return GradCheckReport(name, math.inf, [], finite=False)
    loss.backward()
    analytic = {k: (p.grad if p.grad is not None else np.zeros_like(p.data)) for k, p in params.items()}
    coords = {k: (np.arange(p.data.size) if p.data.size <= probes
                  else rng.choice(p.data.size, size=probes, replace=False)) for k, p in params.items()}
    originals = {k: p.data for k, p in params.items()}
    for p in params.values():
        p.data = p.data.astype(reference_dtype)
    per_input = []
    finite = True
    try:
        for pname, p in params.items():
            worst = 0.0
            for c in coords[pname]:
                idx = np.unravel_index(c, p.shape)
                original = p.data[idx]
                with no_grad():
                    p.data[idx] = original + h
                    up = loss_fn().data
                    p.data[idx] = original - h
                    down = loss_fn().data
                p.data[idx] = original
                numeric = float((up - down) / (2 * h))
                a_val = float(analytic[pname][idx])
                if not (math.isfinite(numeric) and math.isfinite(a_val)):
                    finite, worst = False, math.inf
                    continue
                worst = max(worst, abs(a_val - numeric) / max(abs(a_val), abs(numeric), 1e-8))
            per_input.append(worst)
    finally:
        for k, p in params.items():
            p.data = originals[k]
    return GradCheckReport(name, max(per_input, default=0.0), per_input, finite)
