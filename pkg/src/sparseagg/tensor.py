"""Minimal reverse-mode autodiff over numpy arrays.

Layout conventions: activations are NCHW, conv kernels OIHW, linear weights
(in, out).  Tensors are float32 or float64; float64 is used by the gradient
checker.  No op mutates its inputs; ``backward`` accumulates into ``.grad``
with ``+=`` and leaves it in place until the caller zeroes it.

Set ``SPARSEAGG_DEBUG=1`` (or call ``set_debug(True)``) to assert every op
output is finite and to warn when batch norm is evaluated before any
training step has populated its running statistics.
"""

from __future__ import annotations

import json
import os
import warnings
from contextlib import contextmanager
from dataclasses import dataclass

import numpy as np

from . import _kernels as K
from .errors import NonFiniteError

__all__ = [
    "Tensor",
    "BatchNormState",
    "no_grad",
    "set_debug",
    "conv2d",
    "batch_norm",
    "relu",
    "avg_pool2d",
    "max_pool2d",
    "global_avg_pool",
    "linear",
    "softmax_cross_entropy",
    "aggregate",
    "weighted_sum",
    "save_array",
    "load_array",
]

_GRAD_ENABLED = True
_DEBUG = os.environ.get("SPARSEAGG_DEBUG", "").strip().lower() in ("1", "true", "yes", "on")


def set_debug(enabled: bool) -> None:
    global _DEBUG
    _DEBUG = bool(enabled)


def debug_enabled() -> bool:
    return _DEBUG


@contextmanager
def no_grad():
    """Disable graph construction inside the block (cheap inference)."""
    global _GRAD_ENABLED
    previous = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = previous


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def zero_grad(self) -> None:
        self.grad = None

    def accumulate_grad(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self, grad: np.ndarray | None = None, free_graph: bool = True) -> None:
        """Reverse-mode sweep from this tensor through recorded ops."""
        if not self.requires_grad:
            raise ValueError("backward on a tensor that does not require grad")
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward without an explicit gradient needs a scalar tensor")
            grad = np.ones_like(self.data)
        topo: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in visited:
                    stack.append((parent, False))
        self.accumulate_grad(np.asarray(grad, dtype=self.data.dtype))
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
                if free_graph:
                    node._backward = None
                    node._parents = ()

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"


def _finite_or_raise(arr: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"non-finite values produced by {op}")


def _result(data: np.ndarray, parents: tuple[Tensor, ...], backward, op: str) -> Tensor:
    if _DEBUG:
        _finite_or_raise(data, op)
    requires = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=requires)
    if requires:
        out._parents = parents
        out._backward = backward
    return out


def _check_float(t: Tensor, name: str, op: str) -> None:
    if not isinstance(t, Tensor):
        raise TypeError(f"{op}: {name} must be a Tensor, got {type(t).__name__}")


# ---------------------------------------------------------------------------
# convolution


def conv2d(x: Tensor, w: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """2D convolution (cross-correlation), no bias, exact output sizing."""
    _check_float(x, "x", "conv2d")
    _check_float(w, "w", "conv2d")
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ValueError("conv2d expects x (N,C,H,W) and w (O,C,KH,KW)")
    n, c, h, wdt = x.data.shape
    o, ci, kh, kw = w.data.shape
    if ci != c:
        raise ValueError(f"conv2d channel mismatch: input has {c}, kernel expects {ci}")
    if x.data.dtype != w.data.dtype:
        raise ValueError("conv2d requires matching dtypes for input and kernel")
    if (h + 2 * padding - kh) % stride or (wdt + 2 * padding - kw) % stride:
        raise ValueError(
            f"conv2d output size is not integral: input {h}x{wdt}, kernel {kh}x{kw}, "
            f"stride {stride}, padding {padding}"
        )
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (wdt + 2 * padding - kw) // stride + 1

    if kh == 1 and kw == 1 and stride == 1 and padding == 0:
        w2d = w.data.reshape(o, c)
        xc = x.data.transpose(1, 0, 2, 3).reshape(c, -1)
        out = (w2d @ xc).reshape(o, n, h, wdt).transpose(1, 0, 2, 3)

        def backward_1x1(g):
            gc = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(o, -1)
            if w.requires_grad:
                w.accumulate_grad((gc @ xc.T).reshape(w.data.shape))
            if x.requires_grad:
                dxc = w2d.T @ gc
                x.accumulate_grad(dxc.reshape(c, n, h, wdt).transpose(1, 0, 2, 3))

        return _result(np.ascontiguousarray(out), (x, w), backward_1x1, "conv2d")

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    xp_shape = xp.shape
    cols = K.im2col(xp, kh, kw, stride, oh, ow)
    w2d = w.data.reshape(o, -1)
    out = (w2d @ cols).reshape(o, n, oh, ow).transpose(1, 0, 2, 3)

    def backward(g):
        g2d = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(o, -1)
        if w.requires_grad:
            w.accumulate_grad(np.ascontiguousarray((cols @ g2d.T).T).reshape(w.data.shape))
        if x.requires_grad:
            dcols = w2d.T @ g2d
            dxp = K.col2im(dcols, xp_shape, kh, kw, stride, oh, ow)
            if padding:
                dxp = dxp[:, :, padding:padding + h, padding:padding + wdt]
            x.accumulate_grad(dxp)

    return _result(np.ascontiguousarray(out), (x, w), backward, "conv2d")


# ---------------------------------------------------------------------------
# batch normalization


@dataclass
class BatchNormState:
    """Running statistics for one batch-norm site (not trainable)."""

    running_mean: np.ndarray
    running_var: np.ndarray
    eps: float = 1e-5
    momentum: float = 0.9
    steps: int = 0

    @classmethod
    def create(cls, channels: int, dtype=np.float32, eps: float = 1e-5,
               momentum: float = 0.9) -> "BatchNormState":
        return cls(np.zeros(channels, dtype=dtype), np.ones(channels, dtype=dtype),
                   eps=eps, momentum=momentum)


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, state: BatchNormState,
               training: bool) -> Tensor:
    """Per-channel batch norm over an NCHW tensor.

    Training mode normalizes by batch statistics (biased variance) and
    updates ``state``; eval mode uses the running statistics.
    """
    _check_float(x, "x", "batch_norm")
    if x.data.ndim != 4:
        raise ValueError("batch_norm expects an NCHW tensor")
    c = x.data.shape[1]
    if gamma.data.shape != (c,) or beta.data.shape != (c,):
        raise ValueError(f"batch_norm parameter shape mismatch for {c} channels")
    g4 = gamma.data.reshape(1, c, 1, 1)
    b4 = beta.data.reshape(1, c, 1, 1)

    if training:
        mu = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        m = state.momentum
        state.running_mean = (m * state.running_mean + (1.0 - m) * mu).astype(state.running_mean.dtype)
        state.running_var = (m * state.running_var + (1.0 - m) * var).astype(state.running_var.dtype)
        state.steps += 1
        inv = 1.0 / np.sqrt(var + state.eps)
        xhat = (x.data - mu.reshape(1, c, 1, 1)) * inv.reshape(1, c, 1, 1)
        out = g4 * xhat + b4
        count = x.data.shape[0] * x.data.shape[2] * x.data.shape[3]

        def backward_train(g):
            if beta.requires_grad:
                beta.accumulate_grad(g.sum(axis=(0, 2, 3)))
            if gamma.requires_grad:
                gamma.accumulate_grad((g * xhat).sum(axis=(0, 2, 3)))
            if x.requires_grad:
                dxhat = g * g4
                s1 = dxhat.sum(axis=(0, 2, 3), keepdims=True)
                s2 = (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
                dx = (inv.reshape(1, c, 1, 1) / count) * (count * dxhat - s1 - xhat * s2)
                x.accumulate_grad(dx.astype(x.data.dtype, copy=False))

        return _result(out.astype(x.data.dtype, copy=False), (x, gamma, beta), backward_train, "batch_norm")

    if state.steps == 0 and _DEBUG:
        warnings.warn("batch_norm evaluated before any training step; using (0, 1) defaults",
                      RuntimeWarning, stacklevel=2)
    inv = 1.0 / np.sqrt(state.running_var + state.eps)
    xhat = (x.data - state.running_mean.reshape(1, c, 1, 1)) * inv.reshape(1, c, 1, 1)
    out = g4 * xhat + b4

    def backward_eval(g):
        if beta.requires_grad:
            beta.accumulate_grad(g.sum(axis=(0, 2, 3)))
        if gamma.requires_grad:
            gamma.accumulate_grad((g * xhat).sum(axis=(0, 2, 3)))
        if x.requires_grad:
            x.accumulate_grad((g * g4 * inv.reshape(1, c, 1, 1)).astype(x.data.dtype, copy=False))

    return _result(out.astype(x.data.dtype, copy=False), (x, gamma, beta), backward_eval, "batch_norm")


# ---------------------------------------------------------------------------
# simple elementwise / pooling / linear ops


def relu(x: Tensor) -> Tensor:
    _check_float(x, "x", "relu")
    mask = x.data > 0
    out = np.where(mask, x.data, 0)

    def backward(g):
        if x.requires_grad:
            x.accumulate_grad(np.where(mask, g, 0))

    return _result(out.astype(x.data.dtype, copy=False), (x,), backward, "relu")


def avg_pool2d(x: Tensor, kernel: int) -> Tensor:
    """Non-overlapping average pooling (stride == kernel)."""
    _check_float(x, "x", "avg_pool2d")
    n, c, h, w = x.data.shape
    if h % kernel or w % kernel:
        raise ValueError(f"avg_pool2d needs sizes divisible by {kernel}, got {h}x{w}")
    oh, ow = h // kernel, w // kernel
    out = x.data.reshape(n, c, oh, kernel, ow, kernel).mean(axis=(3, 5))

    def backward(g):
        if x.requires_grad:
            ge = np.broadcast_to(
                g.reshape(n, c, oh, 1, ow, 1), (n, c, oh, kernel, ow, kernel)
            ) / (kernel * kernel)
            x.accumulate_grad(ge.reshape(n, c, h, w).astype(x.data.dtype, copy=False))

    return _result(out.astype(x.data.dtype, copy=False), (x,), backward, "avg_pool2d")


def max_pool2d(x: Tensor, kernel: int, stride: int, padding: int = 0) -> Tensor:
    _check_float(x, "x", "max_pool2d")
    n, c, h, w = x.data.shape
    if h + 2 * padding < kernel or w + 2 * padding < kernel:
        raise ValueError("max_pool2d window larger than padded input")
    out, arg = K.maxpool_forward(x.data, kernel, stride, padding)

    def backward(g):
        if x.requires_grad:
            x.accumulate_grad(K.maxpool_backward(np.ascontiguousarray(g), arg,
                                                 x.data.shape, kernel, stride, padding))

    return _result(out, (x,), backward, "max_pool2d")


def global_avg_pool(x: Tensor) -> Tensor:
    """(N,C,H,W) -> (N,C) spatial mean."""
    _check_float(x, "x", "global_avg_pool")
    n, c, h, w = x.data.shape
    out = x.data.mean(axis=(2, 3))

    def backward(g):
        if x.requires_grad:
            ge = np.broadcast_to(g.reshape(n, c, 1, 1), x.data.shape) / (h * w)
            x.accumulate_grad(ge.astype(x.data.dtype, copy=False))

    return _result(out, (x,), backward, "global_avg_pool")


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Affine map: x (N,F) @ w (F,O) + b (O,)."""
    _check_float(x, "x", "linear")
    _check_float(w, "w", "linear")
    if x.data.ndim != 2 or w.data.ndim != 2 or x.data.shape[1] != w.data.shape[0]:
        raise ValueError(f"linear shape mismatch: x {x.data.shape}, w {w.data.shape}")
    out = x.data @ w.data
    if b is not None:
        out = out + b.data

    parents = (x, w) if b is None else (x, w, b)

    def backward(g):
        if x.requires_grad:
            x.accumulate_grad(g @ w.data.T)
        if w.requires_grad:
            w.accumulate_grad(x.data.T @ g)
        if b is not None and b.requires_grad:
            b.accumulate_grad(g.sum(axis=0))

    return _result(out, parents, backward, "linear")


def softmax_cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean cross-entropy between softmax(logits) and integer labels."""
    _check_float(logits, "logits", "softmax_cross_entropy")
    labels = np.asarray(labels)
    n, k = logits.data.shape
    if labels.shape != (n,):
        raise ValueError(f"labels must have shape ({n},), got {labels.shape}")
    if labels.min() < 0 or labels.max() >= k:
        raise ValueError(f"labels must lie in [0, {k})")
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    probs = exp / exp.sum(axis=1, keepdims=True)
    picked = shifted[np.arange(n), labels] - np.log(exp.sum(axis=1))
    loss = np.asarray(-picked.mean(), dtype=logits.data.dtype)

    def backward(g):
        if logits.requires_grad:
            d = probs.copy()
            d[np.arange(n), labels] -= 1.0
            logits.accumulate_grad((g * d / n).astype(logits.data.dtype, copy=False))

    return _result(loss, (logits,), backward, "softmax_cross_entropy")


def aggregate(op: str, tensors: list[Tensor]) -> Tensor:
    """Combine predecessor outputs: 'sum', 'average', or channel 'concat'.

    Concat joins along channels in the order given (callers pass sources
    nearest-first).
    """
    if op not in ("sum", "concat", "average"):
        raise ValueError(f"unknown aggregation op {op!r}")
    if not tensors:
        raise ValueError("aggregate needs at least one tensor")
    for t in tensors:
        _check_float(t, "input", "aggregate")

    if op == "concat":
        base = tensors[0].data.shape
        for t in tensors[1:]:
            s = t.data.shape
            if len(s) != len(base) or s[0] != base[0] or s[2:] != base[2:]:
                raise ValueError("concat inputs must agree on all dims except channels")
        out = np.concatenate([t.data for t in tensors], axis=1)
        sizes = [t.data.shape[1] for t in tensors]
        offsets = np.cumsum([0] + sizes)

        def backward_cat(g):
            for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
                if t.requires_grad:
                    t.accumulate_grad(g[:, lo:hi])

        return _result(out, tuple(tensors), backward_cat, "aggregate")

    base = tensors[0].data.shape
    for t in tensors[1:]:
        if t.data.shape != base:
            raise ValueError(f"{op} aggregation needs equal shapes, got {base} and {t.data.shape}")
    total = tensors[0].data.copy()
    for t in tensors[1:]:
        total += t.data
    scale = 1.0 / len(tensors) if op == "average" else 1.0
    out = total * scale if op == "average" else total

    def backward_sum(g):
        gs = g * scale if op == "average" else g
        for t in tensors:
            if t.requires_grad:
                t.accumulate_grad(gs)

    return _result(out.astype(tensors[0].data.dtype, copy=False), tuple(tensors), backward_sum, "aggregate")


def weighted_sum(x: Tensor, weights: np.ndarray) -> Tensor:
    """Scalar projection sum(x * weights); handy for reducing ops under test."""
    _check_float(x, "x", "weighted_sum")
    weights = np.asarray(weights, dtype=x.data.dtype)
    if weights.shape != x.data.shape:
        raise ValueError("weights must match the tensor shape")
    out = np.asarray((x.data * weights).sum(), dtype=x.data.dtype)

    def backward(g):
        if x.requires_grad:
            x.accumulate_grad(g * weights)

    return _result(out, (x,), backward, "weighted_sum")


# ---------------------------------------------------------------------------
# flat binary serialization

_DTYPE_CODES = {"float32": "<f4", "float64": "<f8"}


def save_array(arr: np.ndarray, base_path) -> None:
    """Write ``<base>.bin`` (flat little-endian) plus ``<base>.json`` sidecar."""
    name = str(arr.dtype)
    if name not in _DTYPE_CODES:
        raise ValueError(f"unsupported dtype {name} for serialization")
    base = str(base_path)
    with open(base + ".bin", "wb") as fh:
        fh.write(np.ascontiguousarray(arr).astype(_DTYPE_CODES[name]).tobytes())
    with open(base + ".json", "w", encoding="utf-8") as fh:
        json.dump({"shape": list(arr.shape), "dtype": name}, fh)
        fh.write("\n")


def load_array(base_path) -> np.ndarray:
    base = str(base_path)
    with open(base + ".json", "r", encoding="utf-8") as fh:
        meta = json.load(fh)
    name = meta["dtype"]
    if name not in _DTYPE_CODES:
        raise ValueError(f"unsupported dtype {name} in {base}.json")
    with open(base + ".bin", "rb") as fh:
        raw = fh.read()
    arr = np.frombuffer(raw, dtype=_DTYPE_CODES[name]).astype(name)
    return arr.reshape(meta["shape"])
