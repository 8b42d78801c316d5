"""Dense reverse-mode autodiff over numpy arrays.

Every op records a closure that pushes the upstream gradient to its parents.
``Tensor.backward`` runs the closures once each in reverse topological order.
Embedding gathers from tables flagged ``sparse`` accumulate row gradients
instead of materialising a full dense gradient.
"""
from __future__ import annotations

import contextlib

import numpy as np
from scipy.special import erf

_GRAD_ENABLED = True
_NEG_BIG = -1e30


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled() -> bool:
    return _GRAD_ENABLED


class SparseGrad:
    """Row-sparse gradient of a 2-D table: a list of (row ids, row grads)."""

    def __init__(self, shape, dtype):
        self.shape = shape
        self.dtype = dtype
        self._idx: list[np.ndarray] = []
        self._rows: list[np.ndarray] = []

    def add(self, idx: np.ndarray, rows: np.ndarray) -> None:
        self._idx.append(np.asarray(idx, dtype=np.int64).ravel())
        self._rows.append(rows.reshape(-1, self.shape[1]))

    def coalesce(self) -> tuple[np.ndarray, np.ndarray]:
        """Unique row ids (sorted) and their summed gradients."""
        if not self._idx:
            return np.zeros(0, dtype=np.int64), np.zeros((0, self.shape[1]), self.dtype)
        idx = np.concatenate(self._idx)
        rows = np.concatenate(self._rows)
        uniq, inv = np.unique(idx, return_inverse=True)
        out = np.zeros((len(uniq), self.shape[1]), dtype=self.dtype)
        np.add.at(out, inv, rows)
        self._idx, self._rows = [uniq], [out]
        return uniq, out

    def scale(self, factor: float) -> None:
        self._rows = [r * factor for r in self._rows]

    def to_dense(self) -> np.ndarray:
        dense = np.zeros(self.shape, dtype=self.dtype)
        idx, rows = self.coalesce()
        dense[idx] = rows
        return dense


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _acc(t: "Tensor", g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = g
    elif isinstance(t.grad, SparseGrad):
        t.grad = t.grad.to_dense() + g
    else:
        t.grad = t.grad + g


class Tensor:
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if dtype is None and not isinstance(data, (np.ndarray, np.generic)):
            dtype = np.float32
        self.data = np.asarray(data, dtype=dtype)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents: tuple = ()
        self._backward = None

    # -- basic attributes -------------------------------------------------
    @property
    def shape(self) -> tuple:
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
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def __len__(self) -> int:
        return len(self.data)

    # -- autodiff ---------------------------------------------------------
    def backward(self) -> None:
        if self.data.size != 1:
            raise ValueError(f"backward needs a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            raise ValueError("loss does not depend on any tensor requiring grad")
        order: list[Tensor] = []
        seen: set[int] = set()
        stack = [(self, False)]
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
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None:
                if node.grad is not None:
                    node._backward(node.grad)
                node.grad = None
                node._backward = None
                node._parents = ()

    # -- operators --------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_lift(other, self), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_lift(other, self), self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, p: float):
        return pow_scalar(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)


class Parameter(Tensor):
    """Leaf tensor that an optimizer updates."""

    def __init__(self, data, sparse: bool = False):
        data = np.asarray(data)
        if not np.issubdtype(data.dtype, np.floating):
            data = data.astype(np.float32)
        super().__init__(data, requires_grad=True)
        self.sparse = sparse


def _lift(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.data.dtype if like is not None else np.float32
    return Tensor(np.asarray(x, dtype=dtype))


def _make(data: np.ndarray, parents: tuple, backward) -> Tensor:
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


# -- elementwise ----------------------------------------------------------
def add(a, b) -> Tensor:
    a = _lift(a)
    b = _lift(b, a)

    def bw(g):
        _acc(a, _unbroadcast(g, a.shape))
        _acc(b, _unbroadcast(g, b.shape))

    return _make(a.data + b.data, (a, b), bw)


def sub(a, b) -> Tensor:
    a = _lift(a)
    b = _lift(b, a)

    def bw(g):
        _acc(a, _unbroadcast(g, a.shape))
        _acc(b, _unbroadcast(-g, b.shape))

    return _make(a.data - b.data, (a, b), bw)


def mul(a, b) -> Tensor:
    a = _lift(a)
    b = _lift(b, a)

    def bw(g):
        if a.requires_grad:
            _acc(a, _unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            _acc(b, _unbroadcast(g * a.data, b.shape))

    return _make(a.data * b.data, (a, b), bw)


def div(a, b) -> Tensor:
    a = _lift(a)
    b = _lift(b, a)
    out = a.data / b.data

    def bw(g):
        if a.requires_grad:
            _acc(a, _unbroadcast(g / b.data, a.shape))
        if b.requires_grad:
            _acc(b, _unbroadcast(-g * out / b.data, b.shape))

    return _make(out, (a, b), bw)


def pow_scalar(a: Tensor, p: float) -> Tensor:
    def bw(g):
        _acc(a, g * p * a.data ** (p - 1))

    return _make(a.data ** p, (a,), bw)


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: _acc(a, g * out))


def log(a: Tensor) -> Tensor:
    return _make(np.log(a.data), (a,), lambda g: _acc(a, g / a.data))


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: _acc(a, g * 0.5 / out))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: _acc(a, g * (1 - out * out)))


def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    return np.exp(-np.logaddexp(0, -x)).astype(x.dtype, copy=False)


def sigmoid(a: Tensor) -> Tensor:
    out = _sigmoid_np(a.data)
    return _make(out, (a,), lambda g: _acc(a, g * out * (1 - out)))


def log_sigmoid(a: Tensor) -> Tensor:
    """log(sigmoid(x)) without overflow."""
    out = -np.logaddexp(0, -a.data).astype(a.dtype, copy=False)
    return _make(out, (a,), lambda g: _acc(a, g * _sigmoid_np(-a.data)))


def gelu(a: Tensor) -> Tensor:
    x = a.data
    cdf = 0.5 * (1.0 + erf(x / np.sqrt(2.0)))
    out = (x * cdf).astype(x.dtype, copy=False)

    def bw(g):
        pdf = np.exp(-0.5 * x * x) / np.sqrt(2 * np.pi)
        _acc(a, (g * (cdf + x * pdf)).astype(x.dtype, copy=False))

    return _make(out, (a,), bw)


def masked_fill(a: Tensor, mask: np.ndarray, value: float) -> Tensor:
    mask = np.asarray(mask, dtype=bool)
    out = np.where(mask, np.asarray(value, dtype=a.dtype), a.data)
    return _make(out, (a,), lambda g: _acc(a, _unbroadcast(np.where(mask, 0, g), a.shape)))


def stop_gradient(a: Tensor) -> Tensor:
    return Tensor(a.data)


# -- reductions and shape ops --------------------------------------------
def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _acc(a, np.broadcast_to(g, a.shape).copy())

    return _make(np.asarray(out), (a,), bw)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return tsum(a, axis, keepdims) * (1.0 / n)


def reshape(a: Tensor, shape) -> Tensor:
    return _make(a.data.reshape(shape), (a,), lambda g: _acc(a, g.reshape(a.shape)))


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = np.argsort(axes)
    return _make(a.data.transpose(axes), (a,), lambda g: _acc(a, g.transpose(inv)))


def swapaxes(a: Tensor, i: int, j: int) -> Tensor:
    axes = list(range(a.ndim))
    axes[i], axes[j] = axes[j], axes[i]
    return transpose(a, tuple(axes))


def _is_fancy(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return any(isinstance(i, (np.ndarray, list)) for i in items)


def getitem(a: Tensor, idx) -> Tensor:
    fancy = _is_fancy(idx)

    def bw(g):
        full = np.zeros_like(a.data)
        if fancy:
            np.add.at(full, idx, g)
        else:
            full[idx] = g
        _acc(a, full)

    return _make(a.data[idx], (a,), bw)


def concat(tensors: list, axis: int = -1) -> Tensor:
    tensors = [_lift(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]

    def bw(g):
        for t, part in zip(tensors, np.split(g, cuts, axis=axis)):
            _acc(t, part)

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), bw)


def stack(tensors: list, axis: int = 0) -> Tensor:
    return concat([reshape(t, t.shape[:axis % (t.ndim + 1)] + (1,) + t.shape[axis % (t.ndim + 1):])
                   for t in tensors], axis=axis)


# -- linear algebra -------------------------------------------------------
def matmul(a, b) -> Tensor:
    a = _lift(a)
    b = _lift(b, a)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul operands must be at least 2-D")

    def bw(g):
        if a.requires_grad:
            _acc(a, _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape))
        if b.requires_grad:
            _acc(b, _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape))

    return _make(a.data @ b.data, (a, b), bw)


# -- normalisation and softmax family -------------------------------------
def softmax(a: Tensor, axis: int = -1) -> Tensor:
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        _acc(a, out * (g - (g * out).sum(axis=axis, keepdims=True)))

    return _make(out, (a,), bw)


def logsumexp(a: Tensor, axis: int = -1, keepdims: bool = False) -> Tensor:
    m = a.data.max(axis=axis, keepdims=True)
    lse = m + np.log(np.exp(a.data - m).sum(axis=axis, keepdims=True))
    soft = np.exp(a.data - lse)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        _acc(a, g * soft)

    out = lse if keepdims else np.squeeze(lse, axis=axis)
    return _make(out, (a,), bw)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    m = a.data.max(axis=axis, keepdims=True)
    lse = m + np.log(np.exp(a.data - m).sum(axis=axis, keepdims=True))
    out = a.data - lse

    def bw(g):
        _acc(a, g - np.exp(out) * g.sum(axis=axis, keepdims=True))

    return _make(out, (a,), bw)


def rms_norm(x: Tensor, gain: Tensor | None = None, eps: float = 1e-6) -> Tensor:
    r = np.sqrt((x.data * x.data).mean(axis=-1, keepdims=True) + eps)
    y = x.data / r
    parents = (x,) if gain is None else (x, gain)
    out = y if gain is None else y * gain.data

    def bw(g):
        gy = g if gain is None else g * gain.data
        if x.requires_grad:
            _acc(x, (gy - y * (gy * y).mean(axis=-1, keepdims=True)) / r)
        if gain is not None and gain.requires_grad:
            _acc(gain, _unbroadcast(g * y, gain.shape))

    return _make(out, parents, bw)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    s = np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc / s

    def bw(g):
        if x.requires_grad:
            gx = g * gain.data
            gx = (gx - gx.mean(axis=-1, keepdims=True)
                  - xhat * (gx * xhat).mean(axis=-1, keepdims=True)) / s
            _acc(x, gx)
        if gain.requires_grad:
            _acc(gain, _unbroadcast(g * xhat, gain.shape))
        if bias.requires_grad:
            _acc(bias, _unbroadcast(g, bias.shape))

    return _make(xhat * gain.data + bias.data, (x, gain, bias), bw)


def l2_normalize(x: Tensor, axis: int = -1, eps: float = 0.0) -> Tensor:
    n = np.sqrt((x.data * x.data).sum(axis=axis, keepdims=True))
    if eps:
        n = np.maximum(n, eps)
    elif np.any(n == 0):
        raise ValueError("cannot normalize a zero-norm vector")
    y = x.data / n

    def bw(g):
        _acc(x, (g - y * (g * y).sum(axis=axis, keepdims=True)) / n)

    return _make(y, (x,), bw)


# -- lookups and regularisation -------------------------------------------
def embedding(table: Tensor, idx: np.ndarray) -> Tensor:
    """Gather rows ``table[idx]``; output shape ``idx.shape + (dim,)``."""
    idx = np.asarray(idx, dtype=np.int64)

    def bw(g):
        if getattr(table, "sparse", False):
            if table.grad is None:
                table.grad = SparseGrad(table.shape, table.dtype)
            if isinstance(table.grad, SparseGrad):
                table.grad.add(idx, g)
                return
        full = np.zeros_like(table.data)
        np.add.at(full, idx.ravel(), g.reshape(-1, table.shape[-1]))
        _acc(table, full)

    return _make(table.data[idx], (table,), bw)


def dropout(x: Tensor, p: float, rng: np.random.Generator | None, training: bool) -> Tensor:
    """Inverted dropout; identity in eval mode or for p == 0."""
    if not training or p <= 0.0:
        return x
    keep = (rng.random(x.shape) >= p).astype(x.dtype) / np.asarray(1.0 - p, dtype=x.dtype)
    return mul(x, Tensor(keep))


def causal_mask(n: int) -> np.ndarray:
    """Boolean [n, n] mask that is True where key position > query position."""
    return np.triu(np.ones((n, n), dtype=bool), k=1)


def causal_self_attention(q: Tensor, k: Tensor, v: Tensor, *, dropout_p: float = 0.0,
                          rng: np.random.Generator | None = None,
                          training: bool = False) -> Tensor:
    """Scaled dot-product attention where query i only sees keys <= i.

    Shapes are ``[..., N, d_head]``; the output matches ``v``.
    """
    if q.shape != k.shape or q.shape[:-1] != v.shape[:-1]:
        raise ValueError(f"attention shape mismatch: {q.shape}, {k.shape}, {v.shape}")
    n, dh = q.shape[-2], q.shape[-1]
    scores = matmul(q, swapaxes(k, -1, -2)) * (1.0 / np.sqrt(dh))
    scores = masked_fill(scores, causal_mask(n), _NEG_BIG)
    attn = dropout(softmax(scores, axis=-1), dropout_p, rng, training)
    return matmul(attn, v)
