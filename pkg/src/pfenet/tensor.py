"""Dense float64 tensors with a small reverse-mode gradient tape.

Only the operations the network needs are provided. Every op takes and
returns :class:`Tensor`; gradients are accumulated by :meth:`Tensor.backward`
in reverse topological order.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np


class ContractError(ValueError):
    """Raised when an operation is called outside its documented contract."""


def _check(cond: bool, msg: str) -> None:
    if not cond:
        raise ContractError(msg)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False,
                 _parents: tuple["Tensor", ...] = (),
                 _backward: Callable[[np.ndarray], None] | None = None):
        arr = np.asarray(data, dtype=np.float64)
        _check(arr.ndim <= 4, f"tensor rank {arr.ndim} exceeds 4")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(arr) if self.requires_grad and _backward is None else None
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Backpropagate from this tensor. A scalar output seeds with 1."""
        if grad is None:
            _check(self.data.size == 1, "backward() without a seed needs a scalar output")
            grad = np.ones_like(self.data)
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=np.float64)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad += g
            else:
                for parent, pg in zip(node._parents, node._backward(g)):
                    if pg is None or not parent.requires_grad:
                        continue
                    if id(parent) in grads:
                        grads[id(parent)] = grads[id(parent)] + pg
                    else:
                        grads[id(parent)] = pg


def _make(data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    if any(p.requires_grad for p in parents):
        return Tensor(data, True, tuple(parents), backward)
    return Tensor(data)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------- elementwise

def add(a: Tensor, b: Tensor) -> Tensor:
    _check(a.shape == b.shape, f"add shape mismatch {a.shape} vs {b.shape}")
    return _make(a.data + b.data, (a, b), lambda g: (g, g))


def scale(a: Tensor, k: float) -> Tensor:
    return _make(a.data * k, (a,), lambda g: (g * k,))


def mul_const(a: Tensor, m: np.ndarray) -> Tensor:
    """Multiply by a constant array broadcastable to ``a``'s shape."""
    m = np.asarray(m, dtype=np.float64)
    out = a.data * m
    _check(out.shape == a.shape, f"constant of shape {m.shape} does not broadcast to {a.shape}")
    return _make(out, (a,), lambda g: (g * m,))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _make(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    """Concatenate along ``axis`` (channels by default)."""
    _check(len(tensors) > 0, "concat of an empty list")
    sizes = [t.shape[axis] for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        idx = [slice(None)] * g.ndim
        res = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            idx[axis] = slice(lo, hi)
            res.append(g[tuple(idx)])
        return res

    return _make(out, tensors, backward)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    old = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def tile_spatial(a: Tensor, h: int, w: int) -> Tensor:
    """Broadcast a ``[b,c,1,1]`` tensor to ``[b,c,h,w]``."""
    _check(a.shape[2:] == (1, 1), f"tile_spatial expects [b,c,1,1], got {a.shape}")
    out = np.broadcast_to(a.data, a.shape[:2] + (h, w)).copy()
    return _make(out, (a,), lambda g: (g.sum(axis=(2, 3), keepdims=True),))


def group_mean(a: Tensor, k: int) -> Tensor:
    """Average consecutive groups of ``k`` along the batch axis.

    Each element is summed in sorted order, so the result is bitwise
    independent of the order of members within a group.
    """
    n = a.shape[0]
    _check(k >= 1 and n % k == 0, f"batch {n} not divisible into groups of {k}")
    grouped = a.data.reshape((n // k, k) + a.shape[1:])
    out = np.sort(grouped, axis=1).sum(axis=1) / k

    def backward(g):
        return (np.repeat(g / k, k, axis=0),)

    return _make(out, (a,), backward)


def masked_gap(a: Tensor, mask: np.ndarray, eps: float = 1e-7) -> Tensor:
    """Masked global average pooling: ``sum(a*m) / (sum(m) + eps)`` per channel.

    ``mask`` has shape ``[b,1,h,w]`` and is treated as a constant.
    """
    mask = np.asarray(mask, dtype=np.float64)
    _check(mask.shape[0] == a.shape[0] and mask.shape[2:] == a.shape[2:],
           f"mask {mask.shape} does not match features {a.shape}")
    denom = mask.sum(axis=(2, 3), keepdims=True) + eps
    weight = mask / denom
    out = (a.data * weight).sum(axis=(2, 3), keepdims=True)
    return _make(out, (a,), lambda g: (g * weight,))


# ---------------------------------------------------------------- convolution

def _pad(x: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, padding: int) -> np.ndarray:
    """Patches of a ``[b,c,h,w]`` array as rows ``[b*ho*wo, c*kh*kw]``."""
    b, c = x.shape[:2]
    if kh == 1 and kw == 1 and padding == 0:
        return x[:, :, ::stride, ::stride].transpose(0, 2, 3, 1).reshape(-1, c)
    win = np.lib.stride_tricks.sliding_window_view(_pad(x, padding), (kh, kw), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(-1, c * kh * kw)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation over a ``[b,cin,h,w]`` input."""
    _check(x.data.ndim == 4 and weight.data.ndim == 4, "conv2d expects rank-4 input and weight")
    b, cin, h, w = x.shape
    cout, wcin, kh, kw = weight.shape
    _check(cin == wcin, f"conv2d channel mismatch: input has {cin}, weight expects {wcin}")
    _check(stride >= 1, "stride must be positive")
    hp, wp = h + 2 * padding, w + 2 * padding
    _check(hp >= kh and wp >= kw, "kernel larger than padded input")
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    wmat = weight.data.reshape(cout, -1)
    cols = _im2col(x.data, kh, kw, stride, padding)
    out = cols @ wmat.T
    if bias is not None:
        out = out + bias.data
    out = out.reshape(b, ho, wo, cout).transpose(0, 3, 1, 2)
    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        gm = g.transpose(0, 2, 3, 1).reshape(-1, cout)
        gw = (gm.T @ cols).reshape(weight.shape) if weight.requires_grad else None
        gb = gm.sum(axis=0) if bias is not None and bias.requires_grad else None
        gx = None
        if x.requires_grad:
            if stride == 1 and padding <= kh - 1 and padding <= kw - 1 and kh == kw:
                # full correlation of the output gradient with the flipped kernel
                flipped = weight.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3).reshape(cin, -1)
                gcols = _im2col(g, kh, kw, 1, kh - 1 - padding)
                gx = (gcols @ flipped.T).reshape(b, h, w, cin).transpose(0, 3, 1, 2)
            else:
                d = (gm @ wmat).reshape(b, ho, wo, cin, kh, kw).transpose(0, 3, 4, 5, 1, 2)
                gxp = np.zeros((b, cin, hp, wp))
                for i in range(kh):
                    for j in range(kw):
                        gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += d[:, :, i, j]
                gx = gxp[:, :, padding:padding + h, padding:padding + w]
        return (gx, gw, gb) if bias is not None else (gx, gw)

    return _make(out, parents, backward)


# ---------------------------------------------------------------- resampling

def pool_matrix(n: int, bins: int) -> np.ndarray:
    """Row-stochastic ``[bins, n]`` matrix averaging adaptive-pool bins along one axis."""
    m = np.zeros((bins, n))
    for i in range(bins):
        lo = (i * n) // bins
        hi = -((-(i + 1) * n) // bins)
        m[i, lo:hi] = 1.0 / (hi - lo)
    return m


def interp_matrix(n_out: int, n_in: int) -> np.ndarray:
    """Corner-aligned linear interpolation weights, shape ``[n_out, n_in]``."""
    m = np.zeros((n_out, n_in))
    if n_in == 1 or n_out == 1:
        m[:, 0] = 1.0
        return m
    pos = np.arange(n_out) * (n_in - 1) / (n_out - 1)
    lo = np.clip(np.floor(pos).astype(int), 0, n_in - 2)
    frac = pos - lo
    m[np.arange(n_out), lo] = 1.0 - frac
    m[np.arange(n_out), lo + 1] += frac
    return m


def _separable(x: Tensor, rows: np.ndarray, cols: np.ndarray) -> Tensor:
    out = np.einsum("ih,bchw,jw->bcij", rows, x.data, cols, optimize=True)
    return _make(out, (x,),
                 lambda g: (np.einsum("ih,bcij,jw->bchw", rows, g, cols, optimize=True),))


def adaptive_avg_pool(x: Tensor, out_size: int) -> Tensor:
    h, w = x.shape[2:]
    _check(1 <= out_size <= h and out_size <= w,
           f"pool size {out_size} invalid for {h}x{w} input")
    if out_size == h == w:
        return x
    return _separable(x, pool_matrix(h, out_size), pool_matrix(w, out_size))


def bilinear_resize(x: Tensor, out_h: int, out_w: int) -> Tensor:
    _check(out_h >= 1 and out_w >= 1, "resize target must be at least 1x1")
    h, w = x.shape[2:]
    if (h, w) == (out_h, out_w):
        return x
    return _separable(x, interp_matrix(out_h, h), interp_matrix(out_w, w))


def resize_array(x: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Corner-aligned bilinear resize of a plain ``[..., h, w]`` array."""
    h, w = x.shape[-2:]
    if (h, w) == (out_h, out_w):
        return x
    return np.einsum("ih,...hw,jw->...ij", interp_matrix(out_h, h), x,
                     interp_matrix(out_w, w), optimize=True)


# ---------------------------------------------------------------- loss

def softmax_cross_entropy(logits: Tensor, target: np.ndarray) -> Tensor:
    """Mean pixel-wise cross entropy of ``[b,C,h,w]`` logits against class indices."""
    target = np.asarray(target)
    b, c, h, w = logits.shape
    _check(target.shape == (b, h, w), f"target shape {target.shape} != {(b, h, w)}")
    _check(np.issubdtype(target.dtype, np.integer) or np.all(target == np.round(target)),
           "target must hold integer class indices")
    t = target.astype(np.int64)
    _check(t.min() >= 0 and t.max() < c, f"target index outside [0, {c})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - logsum
    onehot = np.zeros_like(z)
    np.put_along_axis(onehot, t[:, None], 1.0, axis=1)
    n = b * h * w
    loss = -(logp * onehot).sum() / n

    def backward(g):
        return ((np.exp(logp) - onehot) * (g / n),)

    return _make(np.array(loss), (logits,), backward)


# ---------------------------------------------------------------- training state

@dataclass
class Parameter:
    """A trainable tensor plus its SGD momentum buffer."""

    tensor: Tensor
    weight_decay_exempt: bool = False
    momentum_buffer: np.ndarray = field(init=False)

    def __post_init__(self):
        self.tensor.requires_grad = True
        if self.tensor.grad is None:
            self.tensor.grad = np.zeros_like(self.tensor.data)
        self.momentum_buffer = np.zeros_like(self.tensor.data)

    @property
    def data(self) -> np.ndarray:
        return self.tensor.data

    @property
    def grad(self) -> np.ndarray | None:
        return self.tensor.grad


def sgd_step(params: Iterable[Parameter], lr: float, momentum: float = 0.9,
             weight_decay: float = 1e-4) -> None:
    """Classic momentum SGD; clears gradients afterwards."""
    for p in params:
        g = p.tensor.grad
        _check(g is not None, "parameter has no gradient; run backward() first")
        d = g if p.weight_decay_exempt or weight_decay == 0 else g + weight_decay * p.tensor.data
        p.momentum_buffer = momentum * p.momentum_buffer + d
        p.tensor.data = p.tensor.data - lr * p.momentum_buffer
        p.tensor.grad = np.zeros_like(p.tensor.data)


@dataclass(frozen=True)
class LrSchedule:
    base_lr: float
    max_iter: int
    power: float = 0.9

    def __post_init__(self):
        _check(self.max_iter > 0, "max_iter must be positive")


def poly_lr(schedule: LrSchedule, it: int) -> float:
    _check(0 <= it <= schedule.max_iter, f"iteration {it} outside [0, {schedule.max_iter}]")
    return schedule.base_lr * (1.0 - it / schedule.max_iter) ** schedule.power


# ---------------------------------------------------------------- layers

class Conv2d:
    """Convolution layer holding its weight and bias as :class:`Parameter`."""

    def __init__(self, cin: int, cout: int, k: int, rng: np.random.Generator, bias: bool = True):
        _check(k in (1, 3), f"kernel size must be 1 or 3, got {k}")
        bound = math.sqrt(6.0 / (cin * k * k))
        self.weight = Parameter(Tensor(rng.uniform(-bound, bound, (cout, cin, k, k))))
        self.bias = Parameter(Tensor(np.zeros(cout)), weight_decay_exempt=True) if bias else None
        self.padding = k // 2

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight.tensor, self.bias.tensor if self.bias else None,
                      padding=self.padding)

    def parameters(self) -> list[Parameter]:
        return [self.weight] + ([self.bias] if self.bias else [])


def repeat_batch(a: Tensor, k: int) -> Tensor:
    """Repeat each batch entry ``k`` times consecutively (inverse of :func:`group_mean`'s grouping)."""
    n = a.shape[0]
    out = np.repeat(a.data, k, axis=0)
    return _make(out, (a,), lambda g: (g.reshape((n, k) + a.shape[1:]).sum(axis=1),))
