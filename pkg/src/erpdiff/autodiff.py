"""Small dense-tensor kernel with reverse-mode automatic differentiation.

Only the operations needed by the score network and the FID feature
extractor are provided. A graph is recorded only when at least one input
requires a gradient, so inference on plain parameter arrays builds nothing.
"""
from __future__ import annotations

from typing import Callable, Iterable, Mapping, Sequence

import numpy as np


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.op = "leaf"
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None

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

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return slice_(self, key)

    def backward(self):
        return backward(self)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if dtype is None and isinstance(x, (int, float)):
        # python scalars adopt the dtype of the array they meet
        return Tensor(np.asarray(x))
    return Tensor(x, dtype=dtype)


def _node(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable, op: str) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.op = op
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _scalar_like(x: Tensor, ref: Tensor) -> Tensor:
    if x.data.ndim == 0 and x.data.dtype != ref.data.dtype and not x.requires_grad:
        return Tensor(x.data.astype(ref.data.dtype))
    return x


# ----------------------------------------------------------------------
# elementwise
# ----------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    a, b = _scalar_like(a, b), _scalar_like(b, a)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _node(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    a, b = _scalar_like(a, b), _scalar_like(b, a)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _node(a.data - b.data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    a, b = _scalar_like(a, b), _scalar_like(b, a)

    def bw(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _node(a.data * b.data, (a, b), bw, "mul")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    s = _sigmoid(x.data)
    return _node(s, (x,), lambda g: (g * s * (1.0 - s),), "sigmoid")


def tanh(x) -> Tensor:
    x = as_tensor(x)
    y = np.tanh(x.data)
    return _node(y, (x,), lambda g: (g * (1.0 - y * y),), "tanh")


def silu(x) -> Tensor:
    x = as_tensor(x)
    s = _sigmoid(x.data)
    return _node(x.data * s, (x,), lambda g: (g * s * (1.0 + x.data * (1.0 - s)),), "silu")


# ----------------------------------------------------------------------
# linear algebra
# ----------------------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError(f"matmul needs operands of rank >= 2, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")

    def bw(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape) if b.requires_grad else None
        return ga, gb

    return _node(a.data @ b.data, (a, b), bw, "matmul")


def conv1d(x, w, dilation: int = 1) -> Tensor:
    """Dilated 1-D convolution over the last axis with zero "same" padding.

    ``x`` is ``(batch, in_channels, time)``, ``w`` is ``(out_channels,
    in_channels, kernel)``. The kernel must be odd so that
    ``(kernel - 1) * dilation / 2`` zeros fit on each side.
    """
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 3 or w.ndim != 3:
        raise ValueError(f"conv1d expects x (B, C, T) and w (O, C, K), got {x.shape} and {w.shape}")
    bsz, cin, n = x.shape
    cout, wcin, k = w.shape
    if wcin != cin:
        raise ValueError(f"conv1d channel mismatch: input has {cin}, kernel expects {wcin}")
    if k % 2 != 1:
        raise ValueError("conv1d kernel size must be odd for 'same' padding")
    if k == 1:
        w2 = w.data[:, :, 0]
        out = np.matmul(w2, x.data)

        def bw1(g):
            gx = np.matmul(w2.T, g) if x.requires_grad else None
            gw = np.tensordot(g, x.data, axes=([0, 2], [0, 2]))[:, :, None] if w.requires_grad else None
            return gx, gw

        return _node(out, (x, w), bw1, "conv1d")

    pad = (k - 1) * dilation // 2
    xp = np.zeros((bsz, cin, n + 2 * pad), dtype=x.data.dtype)
    xp[:, :, pad:pad + n] = x.data
    cols = np.empty((bsz, cin, k, n), dtype=x.data.dtype)
    for j in range(k):
        cols[:, :, j, :] = xp[:, :, j * dilation:j * dilation + n]
    cols = cols.reshape(bsz, cin * k, n)
    w2 = w.data.reshape(cout, cin * k)
    out = np.matmul(w2, cols)

    def bw(g):
        gw = np.tensordot(g, cols, axes=([0, 2], [0, 2])).reshape(w.shape) if w.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = np.matmul(w2.T, g).reshape(bsz, cin, k, n)
            gxp = np.zeros_like(xp)
            for j in range(k):
                gxp[:, :, j * dilation:j * dilation + n] += gcols[:, :, j, :]
            gx = gxp[:, :, pad:pad + n]
        return gx, gw

    return _node(out, (x, w), bw, "conv1d")


def bias_add(x, b) -> Tensor:
    """Add a per-feature bias; features sit on axis 1 (``(B, F)`` or ``(B, F, T)``)."""
    x, b = as_tensor(x), as_tensor(b)
    if b.ndim != 1 or x.ndim < 2 or x.shape[1] != b.shape[0]:
        raise ValueError(f"bias of shape {b.shape} does not match features of {x.shape}")
    view = b.data.reshape((1, -1) + (1,) * (x.ndim - 2))
    axes = (0,) + tuple(range(2, x.ndim))

    def bw(g):
        return g, g.sum(axis=axes)

    return _node(x.data + view, (x, b), bw, "bias_add")


def embedding(table, index) -> Tensor:
    """Row lookup ``table[index]``; the gradient touches only the selected rows."""
    table = as_tensor(table)
    idx = np.asarray(index, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise IndexError(f"embedding index out of range for table with {table.shape[0]} rows")

    def bw(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, idx, g)
        return (gt,)

    return _node(table.data[idx], (table,), bw, "embedding")


# ----------------------------------------------------------------------
# shape
# ----------------------------------------------------------------------

def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    src = x.shape
    return _node(x.data.reshape(shape), (x,), lambda g: (g.reshape(src),), "reshape")


def concat(xs: Sequence, axis: int = 0) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    sizes = [x.shape[axis] for x in xs]
    bounds = np.cumsum([0] + sizes)

    def bw(g):
        out = []
        for i in range(len(xs)):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(bounds[i], bounds[i + 1])
            out.append(g[tuple(sl)])
        return tuple(out)

    return _node(np.concatenate([x.data for x in xs], axis=axis), xs, bw, "concat")


def slice_(x, key) -> Tensor:
    x = as_tensor(x)

    def bw(g):
        gx = np.zeros_like(x.data)
        gx[key] = g
        return (gx,)

    return _node(x.data[key], (x,), bw, "slice")


# ----------------------------------------------------------------------
# reductions and losses
# ----------------------------------------------------------------------

def sum(x, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001 - mirrors numpy naming
    x = as_tensor(x)
    src = x.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, src).copy(),)

    return _node(np.asarray(x.data.sum(axis=axis, keepdims=keepdims)), (x,), bw, "sum")


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    src = x.shape
    count = x.data.size if axis is None else np.prod([src[a] for a in np.atleast_1d(axis)])
    scale = x.data.dtype.type(1.0 / count)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g * scale, src).copy(),)

    return _node(np.asarray(x.data.mean(axis=axis, keepdims=keepdims)), (x,), bw, "mean")


def mse_loss(pred, target) -> Tensor:
    pred, target = as_tensor(pred), as_tensor(target)
    if pred.shape != target.shape:
        raise ValueError(f"mse_loss shape mismatch: {pred.shape} vs {target.shape}")
    diff = pred.data - target.data
    scale = pred.data.dtype.type(2.0 / diff.size)

    def bw(g):
        gd = g * scale * diff
        return gd, -gd

    return _node(np.asarray(np.mean(diff * diff)), (pred, target), bw, "mse_loss")


def bce_with_logits(logits, labels, weights=None) -> Tensor:
    """Weighted binary cross-entropy on raw logits, normalised by the weight sum."""
    logits = as_tensor(logits)
    z = logits.data
    y = np.asarray(labels, dtype=z.dtype).reshape(z.shape)
    w = np.ones_like(z) if weights is None else np.asarray(weights, dtype=z.dtype).reshape(z.shape)
    wsum = w.sum()
    # softplus(z) - y*z, written to avoid overflow
    loss = (np.maximum(z, 0) - z * y + np.log1p(np.exp(-np.abs(z)))) * w
    value = np.asarray(loss.sum() / wsum)

    def bw(g):
        return (g * w * (_sigmoid(z) - y) / wsum,)

    return _node(value, (logits,), bw, "bce_with_logits")


# ----------------------------------------------------------------------
# reverse pass
# ----------------------------------------------------------------------

def _topological(root: Tensor) -> list[Tensor]:
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


def backward(loss: Tensor) -> dict[int, np.ndarray]:
    """Populate ``.grad`` on every leaf reachable from the scalar ``loss``.

    Gradients from several consumers of one tensor are summed. Returns a
    map ``id(leaf) -> gradient`` for convenience.
    """
    if loss.data.size != 1 or loss.data.ndim != 0:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not np.isfinite(loss.data):
        raise FloatingPointError(f"loss is not finite ({loss.data})")
    if not loss.requires_grad:
        return {}
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[int, np.ndarray] = {}
    for node in reversed(_topological(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g if node.grad is None else node.grad + g
            leaves[id(node)] = node.grad
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    return leaves


# ----------------------------------------------------------------------
# parameters, optimiser, EMA
# ----------------------------------------------------------------------

class ParamStore:
    """Named trainable arrays plus an exponential-moving-average shadow copy."""

    def __init__(self, params: Mapping[str, np.ndarray] | None = None):
        self.raw: dict[str, np.ndarray] = {}
        self.ema: dict[str, np.ndarray] = {}
        for name, value in (params or {}).items():
            self.add(name, value)

    def add(self, name: str, value: np.ndarray):
        if name in self.raw:
            raise KeyError(f"parameter {name!r} already exists")
        self.raw[name] = np.array(value)
        self.ema[name] = np.array(value)

    def names(self) -> list[str]:
        return list(self.raw)

    def __getitem__(self, name: str) -> np.ndarray:
        try:
            return self.raw[name]
        except KeyError:
            raise KeyError(f"unknown parameter name {name!r}") from None

    def __contains__(self, name: str) -> bool:
        return name in self.raw

    def __len__(self) -> int:
        return len(self.raw)

    def n_parameters(self) -> int:
        return int(np.sum([v.size for v in self.raw.values()]))

    def tensors(self, which: str = "raw", requires_grad: bool = False) -> dict[str, Tensor]:
        source = self.raw if which == "raw" else self.ema
        out = {}
        for k, v in source.items():
            t = Tensor(v)
            t.requires_grad = requires_grad
            out[k] = t
        return out

    def astype(self, dtype) -> "ParamStore":
        store = ParamStore()
        for k in self.raw:
            store.raw[k] = self.raw[k].astype(dtype)
            store.ema[k] = self.ema[k].astype(dtype)
        return store

    def ema_update(self, decay: float):
        ema_update(self, decay)

    def copy(self) -> "ParamStore":
        store = ParamStore()
        store.raw = {k: v.copy() for k, v in self.raw.items()}
        store.ema = {k: v.copy() for k, v in self.ema.items()}
        return store


def ema_update(store: ParamStore, decay: float):
    """shadow <- decay * shadow + (1 - decay) * raw, in place."""
    if not 0.0 <= decay < 1.0:
        raise ValueError(f"EMA decay must lie in [0, 1), got {decay}")
    for name, raw in store.raw.items():
        shadow = store.ema[name]
        shadow *= decay
        shadow += (1.0 - decay) * raw


def adam_step(param: np.ndarray, grad: np.ndarray, m: np.ndarray, v: np.ndarray, *,
              lr: float, beta1: float, beta2: float, eps: float, step: int):
    """One bias-corrected Adam update, in place on ``param``, ``m`` and ``v``.

    ``step`` counts from 1 for the first update.
    """
    if lr <= 0:
        raise ValueError(f"learning rate must be positive, got {lr}")
    m *= beta1
    m += (1.0 - beta1) * grad
    v *= beta2
    v += (1.0 - beta2) * (grad * grad)
    m_hat = m / (1.0 - beta1 ** step)
    v_hat = v / (1.0 - beta2 ** step)
    param -= lr * m_hat / (np.sqrt(v_hat) + eps)


class Adam:
    def __init__(self, lr: float = 1e-4, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        if lr <= 0:
            raise ValueError(f"learning rate must be positive, got {lr}")
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.step_count = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray]):
        self.step_count += 1
        for name, g in grads.items():
            if name not in params:
                raise KeyError(f"gradient for unknown parameter {name!r}")
            p = params[name]
            if name not in self.m:
                self.m[name] = np.zeros_like(p)
                self.v[name] = np.zeros_like(p)
            adam_step(p, g.astype(p.dtype, copy=False), self.m[name], self.v[name],
                      lr=self.lr, beta1=self.beta1, beta2=self.beta2, eps=self.eps,
                      step=self.step_count)


def collect_grads(tensors: Mapping[str, Tensor]) -> dict[str, np.ndarray]:
    """Gradients of named leaves after :func:`backward`; untouched leaves get zeros."""
    return {k: (t.grad if t.grad is not None else np.zeros_like(t.data)) for k, t in tensors.items()}


def numerical_grad(f: Callable[[], float], x: np.ndarray, h: float = 1e-5,
                   indices: Iterable[tuple] | None = None) -> np.ndarray:
    """Central finite differences of scalar ``f`` w.r.t. array ``x`` (mutated then restored)."""
    out = np.zeros_like(x)
    it = indices if indices is not None else np.ndindex(x.shape)
    for idx in it:
        orig = x[idx]
        x[idx] = orig + h
        fp = f()
        x[idx] = orig - h
        fm = f()
        x[idx] = orig
        out[idx] = (fp - fm) / (2 * h)
    return out
