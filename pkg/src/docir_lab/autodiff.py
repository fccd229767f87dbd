"""Minimal dense-tensor engine with reverse-mode differentiation.

Tensors wrap numpy arrays. Every op records a backward closure; calling
``backward()`` on a scalar loss walks the graph in reverse topological
order and accumulates gradients into every tensor created with
``requires_grad=True``. Only the ops the encoders, trunks and PPO loss
need are implemented: elementwise arithmetic, a few nonlinearities,
matmul, valid (no-padding) conv2d, reshape/concat, embedding lookup and
axis reductions.
"""

from __future__ import annotations

import json
import struct
from contextlib import contextmanager

import numpy as np

_grad_enabled = True


@contextmanager
def no_grad():
    """Disable graph construction (rollout / evaluation fast path)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, dtype=None):
        self.data = np.asarray(data, dtype=dtype)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self):
        if self.data.size != 1:
            raise ValueError("backward() requires a scalar loss")
        topo, seen = [], set()

        def visit(t):
            if id(t) in seen:
                return
            seen.add(id(t))
            for p in t._parents:
                visit(p)
            topo.append(t)

        visit(self)
        self._accumulate(np.ones_like(self.data))
        for t in reversed(topo):
            if t._backward is not None:
                t._backward(t.grad)

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __truediv__(self, other):
        return div(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self, axis=None):
        return tmean(self, axis)


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _make(data, parents, backward_fn):
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _unbroadcast(g, shape):
    """Reduce gradient g back to ``shape`` after numpy broadcasting."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise ops

def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    out_data = a.data + b.data

    def bwd(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.data.shape))

    return _make(out_data, (a, b), bwd)


def sub(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    out_data = a.data - b.data

    def bwd(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g, b.data.shape))

    return _make(out_data, (a, b), bwd)


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    out_data = a.data * b.data

    def bwd(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.data.shape))

    return _make(out_data, (a, b), bwd)


def div(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    out_data = a.data / b.data

    def bwd(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g / b.data, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g * a.data / (b.data ** 2), b.data.shape))

    return _make(out_data, (a, b), bwd)


def exp(a):
    out_data = np.exp(a.data)

    def bwd(g):
        a._accumulate(g * out_data)

    return _make(out_data, (a,), bwd)


def log(a):
    def bwd(g):
        a._accumulate(g / a.data)

    return _make(np.log(a.data), (a,), bwd)


def square(a):
    def bwd(g):
        a._accumulate(g * 2.0 * a.data)

    return _make(a.data ** 2, (a,), bwd)


def relu(a):
    mask = a.data > 0

    def bwd(g):
        a._accumulate(g * mask)

    return _make(a.data * mask, (a,), bwd)


def tanh(a):
    out_data = np.tanh(a.data)

    def bwd(g):
        a._accumulate(g * (1.0 - out_data ** 2))

    return _make(out_data, (a,), bwd)


def sigmoid(a):
    out_data = 1.0 / (1.0 + np.exp(-a.data))

    def bwd(g):
        a._accumulate(g * out_data * (1.0 - out_data))

    return _make(out_data, (a,), bwd)


def softplus(a):
    # log(1 + e^x), overflow-safe
    out_data = np.logaddexp(0.0, a.data)

    def bwd(g):
        a._accumulate(g / (1.0 + np.exp(-a.data)))

    return _make(out_data, (a,), bwd)


def clip(a, lo, hi):
    """Clamp values; gradient is zero outside [lo, hi]."""
    inside = (a.data >= lo) & (a.data <= hi)

    def bwd(g):
        a._accumulate(g * inside)

    return _make(np.clip(a.data, lo, hi), (a,), bwd)


def minimum(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    take_a = a.data <= b.data

    def bwd(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * take_a, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * ~take_a, b.data.shape))

    return _make(np.where(take_a, a.data, b.data), (a, b), bwd)


# ---------------------------------------------------------------------------
# shape ops

def reshape(a, shape):
    old = a.data.shape

    def bwd(g):
        a._accumulate(g.reshape(old))

    return _make(a.data.reshape(shape), (a,), bwd)


def flatten(a):
    """(B, ...) -> (B, prod)."""
    return reshape(a, (a.data.shape[0], -1))


def concat(tensors, axis=1):
    datas = [t.data for t in tensors]
    sizes = [d.shape[axis] for d in datas]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        for t, piece in zip(tensors, np.split(g, splits, axis=axis)):
            if t.requires_grad:
                t._accumulate(piece)

    return _make(np.concatenate(datas, axis=axis), tuple(tensors), bwd)


def tsum(a, axis=None):
    out_data = a.data.sum(axis=axis)

    def bwd(g):
        if axis is None:
            a._accumulate(np.broadcast_to(g, a.data.shape).copy())
        else:
            a._accumulate(np.broadcast_to(np.expand_dims(g, axis), a.data.shape).copy())

    return _make(out_data, (a,), bwd)


def tmean(a, axis=None):
    n = a.data.size if axis is None else a.data.shape[axis]
    return mul(tsum(a, axis), 1.0 / n)


# ---------------------------------------------------------------------------
# linear-algebra ops

def matmul(a, b):
    """(B, D) @ (D, M) -> (B, M)."""
    out_data = a.data @ b.data

    def bwd(g):
        if a.requires_grad:
            a._accumulate(g @ b.data.T)
        if b.requires_grad:
            b._accumulate(a.data.T @ g)

    return _make(out_data, (a, b), bwd)


def affine(x, w, b):
    """x @ w + b with x (B, D), w (D, M), b (M,)."""
    return add(matmul(x, w), b)


def conv2d(x, w, b=None, stride=1):
    """Valid cross-correlation: x (B,Cin,H,W), w (Cout,Cin,k,k) -> (B,Cout,H',W')."""
    bs, cin, h, wd = x.data.shape
    cout, cin_w, k, k2 = w.data.shape
    if cin != cin_w or k != k2:
        raise ValueError(f"kernel shape {w.data.shape} incompatible with input {x.data.shape}")
    if k > h or k > wd:
        raise ValueError("kernel larger than input")
    s = stride
    hp = (h - k) // s + 1
    wp = (wd - k) // s + 1
    win = np.lib.stride_tricks.sliding_window_view(x.data, (k, k), axis=(2, 3))
    win = win[:, :, ::s, ::s]  # (B, Cin, H', W', k, k)
    out_data = np.tensordot(win, w.data, axes=([1, 4, 5], [1, 2, 3]))  # (B,H',W',Cout)
    out_data = np.ascontiguousarray(out_data.transpose(0, 3, 1, 2))
    if b is not None:
        out_data = out_data + b.data[None, :, None, None]

    def bwd(g):
        if w.requires_grad:
            dw = np.tensordot(g, win, axes=([0, 2, 3], [0, 2, 3]))  # (Cout,Cin,k,k)
            w._accumulate(dw)
        if b is not None and b.requires_grad:
            b._accumulate(g.sum(axis=(0, 2, 3)))
        if x.requires_grad:
            dx = np.zeros_like(x.data)
            for u in range(k):
                for v in range(k):
                    dx[:, :, u:u + s * hp:s, v:v + s * wp:s] += np.einsum(
                        "boij,oc->bcij", g, w.data[:, :, u, v])
            x._accumulate(dx)

    parents = (x, w) if b is None else (x, w, b)
    return _make(out_data, parents, bwd)


def embedding(table, ids):
    """Row lookup: table (V, E), ids int (B,) -> (B, E)."""
    ids = np.asarray(ids, dtype=np.intp)
    out_data = table.data[ids]

    def bwd(g):
        dt = np.zeros_like(table.data)
        np.add.at(dt, ids, g)
        table._accumulate(dt)

    return _make(out_data, (table,), bwd)


# ---------------------------------------------------------------------------
# optimizer

class Adam:
    """Adaptive-moment optimizer with bias correction and optional global
    gradient-norm clipping applied before the update."""

    def __init__(self, params, lr=3e-4, beta1=0.9, beta2=0.999, eps=1e-8,
                 clip_norm=0.5):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.clip_norm = clip_norm
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data)
                 for p in self.params]
        if self.clip_norm is not None:
            total = np.sqrt(sum(float((g ** 2).sum()) for g in grads))
            if total > self.clip_norm:
                scale = self.clip_norm / (total + 1e-12)
                grads = [g * scale for g in grads]
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g ** 2
            p.data -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)


# ---------------------------------------------------------------------------
# checkpoint format: length-prefixed JSON header, then raw little-endian
# IEEE-754 payloads concatenated in header order.

def save_params(path, params):
    """params: ordered mapping name -> Tensor (or ndarray)."""
    entries = []
    payloads = []
    offset = 0
    for name, p in params.items():
        arr = p.data if isinstance(p, Tensor) else np.asarray(p)
        raw = arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes()
        entries.append({"name": name, "shape": list(arr.shape),
                        "dtype": arr.dtype.name, "offset": offset,
                        "nbytes": len(raw)})
        payloads.append(raw)
        offset += len(raw)
    header = json.dumps({"tensors": entries}).encode("utf-8")
    with open(path, "wb") as f:
        f.write(struct.pack("<Q", len(header)))
        f.write(header)
        for raw in payloads:
            f.write(raw)


def load_params(path):
    """Returns ordered dict name -> ndarray, bit-exact round trip."""
    with open(path, "rb") as f:
        (hlen,) = struct.unpack("<Q", f.read(8))
        header = json.loads(f.read(hlen).decode("utf-8"))
        blob = f.read()
    out = {}
    for e in header["tensors"]:
        dt = np.dtype(e["dtype"]).newbyteorder("<")
        arr = np.frombuffer(blob[e["offset"]:e["offset"] + e["nbytes"]], dtype=dt)
        out[e["name"]] = arr.reshape(e["shape"]).astype(np.dtype(e["dtype"]))
    return out
