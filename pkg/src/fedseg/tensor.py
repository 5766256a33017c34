"""Dense tensors with reverse-mode differentiation.

A deliberately small engine: numpy arrays carry the values, every operation
that touches a tensor requiring gradients appends a node to an implicit tape
(ordered by a global sequence number), and :meth:`Tensor.backward` replays the
reachable nodes in reverse creation order.

Only the operations the encoder and the losses need are provided.
"""

from __future__ import annotations

import contextlib
import itertools
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "Tensor",
    "TensorError",
    "DimensionError",
    "ModelParams",
    "no_grad",
    "set_default_dtype",
    "get_default_dtype",
    "tensor",
    "conv2d",
    "relu",
    "avg_pool2d",
    "avg_pool_mask",
    "resize_bilinear",
    "cosine_map",
    "cosine_scores",
    "pixel_cosine",
    "softmax",
    "matmul",
    "take",
    "concat",
    "clamp",
    "sgd_step",
]

COSINE_DELTA = 1e-8


class TensorError(Exception):
    """Contract violation in the tensor engine."""


class DimensionError(TensorError, ValueError):
    """Operand shapes are incompatible with an operation."""


_DEFAULT_DTYPE = np.float32
_GRAD_ENABLED = True
_SEQ = itertools.count()


def set_default_dtype(dtype) -> None:
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.float32, np.float64):
        raise TensorError(f"unsupported dtype {dtype}")
    _DEFAULT_DTYPE = dtype.type


def get_default_dtype():
    return _DEFAULT_DTYPE


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Evaluate without recording tape nodes."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


@dataclass(eq=False)
class _Node:
    seq: int
    op: str
    inputs: tuple
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_node", "__weakref__")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            arr = np.asarray(data)
            dtype = arr.dtype.type if arr.dtype in (np.float32, np.float64) else _DEFAULT_DTYPE
        arr = np.asarray(data, dtype=dtype)
        self.data = arr if arr.flags.c_contiguous else np.ascontiguousarray(arr)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._node: _Node | None = None

    # -- introspection ---------------------------------------------------
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
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype.type)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def __len__(self) -> int:
        return self.data.shape[0]

    # -- graph -----------------------------------------------------------
    def backward(self) -> None:
        """Populate ``grad`` on every leaf reachable from this scalar."""
        if self.data.size != 1:
            raise TensorError(f"backward() needs a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            raise TensorError("loss does not depend on any tensor requiring grad")

        nodes: dict[int, Tensor] = {}
        stack = [self]
        seen = set()
        while stack:
            t = stack.pop()
            if id(t) in seen:
                continue
            seen.add(id(t))
            if t._node is not None:
                nodes[t._node.seq] = t
                stack.extend(i for i in t._node.inputs if i.requires_grad)

        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for seq in sorted(nodes, reverse=True):
            t = nodes[seq]
            g = grads.pop(id(t), None)
            if g is None:
                continue
            for inp, gi in zip(t._node.inputs, t._node.backward(g)):
                if gi is None or not inp.requires_grad:
                    continue
                if inp._node is None:
                    if inp.grad is None:
                        inp.grad = np.array(gi, dtype=inp.data.dtype)
                    else:
                        inp.grad = inp.grad + gi
                else:
                    key = id(inp)
                    grads[key] = grads[key] + gi if key in grads else gi
        if self._node is None:
            self.grad = np.ones_like(self.data) if self.grad is None else self.grad + 1

    def zero_grad(self) -> None:
        self.grad = None

    # -- operators -------------------------------------------------------
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
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        n = self.data.size if axis is None else np.prod([self.shape[a] for a in np.atleast_1d(axis)])
        return tsum(self, axis, keepdims) * (1.0 / float(n))

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> "Tensor":
        return transpose(self, axes or None)

    @property
    def T(self) -> "Tensor":
        return transpose(self, None)

    def __getitem__(self, index) -> "Tensor":
        return getitem(self, index)


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype or _DEFAULT_DTYPE)


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.data.dtype.type if like is not None else _DEFAULT_DTYPE
    return Tensor(np.asarray(x, dtype=dtype), dtype=dtype)


def _make(data: np.ndarray, op: str, inputs: tuple, backward) -> Tensor:
    out = Tensor(data, dtype=data.dtype.type)
    if _GRAD_ENABLED and any(i.requires_grad for i in inputs):
        out.requires_grad = True
        out._node = _Node(next(_SEQ), op, inputs, backward)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _binary_operands(a, b):
    if isinstance(a, Tensor):
        return a, _as_tensor(b, a)
    b = _as_tensor(b)
    return _as_tensor(a, b), b


# -- elementwise -----------------------------------------------------------
def add(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, "add", (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, "sub", (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    ad, bd = a.data, b.data
    return _make(
        ad * bd, "mul", (a, b),
        lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
    )


def div(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    ad, bd = a.data, b.data
    out = ad / bd
    return _make(
        out, "div", (a, b),
        lambda g: (_unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape)),
    )


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _make(out, "exp", (x,), lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    xd = x.data
    return _make(np.log(xd), "log", (x,), lambda g: (g / xd,))


def sqrt(x: Tensor) -> Tensor:
    out = np.sqrt(x.data)
    return _make(out, "sqrt", (x,), lambda g: (g * 0.5 / out,))


def relu(x: Tensor) -> Tensor:
    pos = x.data > 0
    return _make(np.where(pos, x.data, 0).astype(x.dtype), "relu", (x,), lambda g: (g * pos,))


def clamp(x: Tensor, lo: float | None = None, hi: float | None = None) -> Tensor:
    """Clip values; gradient passes only where the input lies inside [lo, hi]."""
    xd = x.data
    keep = np.ones(xd.shape, dtype=bool)
    if lo is not None:
        keep &= xd >= lo
    if hi is not None:
        keep &= xd <= hi
    out = np.clip(xd, lo, hi).astype(xd.dtype)
    return _make(out, "clamp", (x,), lambda g: (g * keep,))


# -- shape ---------------------------------------------------------------
def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = x.shape
    out = np.sum(x.data, axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(np.asarray(out, dtype=x.dtype), "sum", (x,), backward)


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    return _make(x.data.reshape(shape), "reshape", (x,), lambda g: (g.reshape(old),))


def transpose(x: Tensor, axes=None) -> Tensor:
    inv = None if axes is None else tuple(np.argsort(axes))
    return _make(np.ascontiguousarray(np.transpose(x.data, axes)), "transpose", (x,),
                 lambda g: (np.transpose(g, inv),))


def getitem(x: Tensor, index) -> Tensor:
    shape, dtype = x.shape, x.dtype

    def backward(g):
        out = np.zeros(shape, dtype=dtype)
        np.add.at(out, index, g)
        return (out,)

    return _make(np.array(x.data[index]), "getitem", (x,), backward)


def take(x: Tensor, indices, axis: int) -> Tensor:
    """Gather slices along ``axis`` (indices may repeat)."""
    idx = np.asarray(indices, dtype=np.intp)
    shape, dtype = x.shape, x.dtype

    def backward(g):
        out = np.zeros(shape, dtype=dtype)
        moved = np.moveaxis(out, axis, 0)
        np.add.at(moved, idx, np.moveaxis(g, axis, 0))
        return (out,)

    return _make(np.take(x.data, idx, axis=axis), "take", (x,), backward)


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = tuple(xs)
    sizes = [t.shape[axis] for t in xs]
    bounds = np.cumsum(sizes)[:-1]
    return _make(np.concatenate([t.data for t in xs], axis=axis), "concat", xs,
                 lambda g: tuple(np.split(g, bounds, axis=axis)))


def matmul(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    if a.ndim != 2 or b.ndim not in (1, 2) or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    ad, bd = a.data, b.data

    def backward(g):
        if bd.ndim == 1:
            return np.outer(g, bd), ad.T @ g
        return g @ bd.T, ad.T @ g

    return _make(ad @ bd, "matmul", (a, b), backward)


# -- image ops -------------------------------------------------------------
def conv2d(x: Tensor, w: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """2-D cross-correlation of a single image ``[C_in,H,W]`` with ``[C_out,C_in,k,k]``."""
    if x.ndim != 3 or w.ndim != 4:
        raise DimensionError(f"conv2d expects [C,H,W] and [O,C,k,k], got {x.shape} and {w.shape}")
    c_in, h, wd = x.shape
    c_out, c_w, k, k2 = w.shape
    if c_w != c_in or k != k2:
        raise DimensionError(f"conv2d: kernel {w.shape} does not match input {x.shape}")
    if k % 2 != 1 or pad < 0 or stride < 1:
        raise DimensionError(f"conv2d: need odd kernel, pad >= 0, stride >= 1 (k={k}, pad={pad}, stride={stride})")
    span_h, span_w = h + 2 * pad - k, wd + 2 * pad - k
    if span_h < 0 or span_w < 0 or span_h % stride or span_w % stride:
        raise DimensionError(f"conv2d: output extent of {x.shape} with k={k}, pad={pad}, stride={stride} is not integral")
    ho, wo = span_h // stride + 1, span_w // stride + 1

    xp = np.pad(x.data, ((0, 0), (pad, pad), (pad, pad))) if pad else x.data
    win = sliding_window_view(xp, (k, k), axis=(1, 2))[:, ::stride, ::stride]
    cols = win.transpose(0, 3, 4, 1, 2).reshape(c_in * k * k, ho * wo)
    wm = w.data.reshape(c_out, -1)
    out = (wm @ cols).reshape(c_out, ho, wo)

    def backward(g):
        gm = g.reshape(c_out, -1)
        gw = (gm @ cols.T).reshape(w.shape) if w.requires_grad else None
        gx = None
        if x.requires_grad:
            dcols = (wm.T @ gm).reshape(c_in, k, k, ho, wo)
            gxp = np.zeros(xp.shape, dtype=xp.dtype)
            for i in range(k):
                for j in range(k):
                    gxp[:, i:i + stride * ho:stride, j:j + stride * wo:stride] += dcols[:, i, j]
            gx = gxp[:, pad:pad + h, pad:pad + wd] if pad else gxp
        return gx, gw

    return _make(out, "conv2d", (x, w), backward)


def avg_pool2d(x: Tensor, factor: int) -> Tensor:
    """Non-overlapping ``factor x factor`` mean pooling of ``[C,H,W]``."""
    c, h, w = x.shape
    if factor < 1 or h % factor or w % factor:
        raise DimensionError(f"avg_pool: extents {h}x{w} not divisible by {factor}")
    ho, wo = h // factor, w // factor
    out = x.data.reshape(c, ho, factor, wo, factor).mean(axis=(2, 4))
    scale = 1.0 / (factor * factor)

    def backward(g):
        gx = np.broadcast_to((g * scale)[:, :, None, :, None], (c, ho, factor, wo, factor))
        return (gx.reshape(c, h, w).astype(x.dtype),)

    return _make(out.astype(x.dtype), "avg_pool2d", (x,), backward)


def avg_pool_mask(mask, factor: int) -> Tensor:
    """Downsample a ``[1,H,W]`` (or ``[H,W]``) mask by block averaging."""
    m = _as_tensor(mask)
    if m.ndim == 2:
        m = reshape(m, (1,) + m.shape)
    if m.ndim != 3:
        raise DimensionError(f"avg_pool_mask expects [1,H,W], got {m.shape}")
    return avg_pool2d(m, factor)


def _bilinear_axis(n_in: int, n_out: int):
    src = (np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    i0 = np.floor(src).astype(np.intp)
    i1 = np.minimum(i0 + 1, n_in - 1)
    lam = src - i0
    m = np.zeros((n_out, n_in))
    np.add.at(m, (np.arange(n_out), i0), 1.0 - lam)
    np.add.at(m, (np.arange(n_out), i1), lam)
    return m


def resize_bilinear(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Bilinear resize of ``[C,h,w]`` with half-pixel centres (align_corners=False)."""
    if out_h < 1 or out_w < 1:
        raise DimensionError("resize_bilinear: output extents must be positive")
    c, h, w = x.shape
    rh = _bilinear_axis(h, out_h).astype(x.dtype)
    rw = _bilinear_axis(w, out_w).astype(x.dtype)
    out = np.einsum("oh,chw,pw->cop", rh, x.data, rw, optimize=True)

    def backward(g):
        return (np.einsum("oh,cop,pw->chw", rh, g, rw, optimize=True),)

    return _make(np.ascontiguousarray(out), "resize_bilinear", (x,), backward)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, "softmax", (x,), backward)


def _safe_inv(n: np.ndarray) -> np.ndarray:
    return np.divide(1.0, n, out=np.zeros_like(n), where=n > 0)


def cosine_scores(feats: Tensor, protos: Tensor, delta: float = COSINE_DELTA) -> Tensor:
    """Cosine similarity of every feature column of ``[C,h,w]`` with each row of ``[n,C]``."""
    if feats.ndim != 3 or protos.ndim != 2 or protos.shape[1] != feats.shape[0]:
        raise DimensionError(f"cosine_scores: {feats.shape} vs prototypes {protos.shape}")
    c, h, w = feats.shape
    q = feats.data.reshape(c, h * w)
    p = protos.data
    qn = np.sqrt((q * q).sum(axis=0))
    pn = np.sqrt((p * p).sum(axis=1))
    dot = p @ q
    den = pn[:, None] * qn[None, :] + delta
    out = dot / den

    def backward(g):
        g = g.reshape(p.shape[0], h * w)
        gd = g / den
        gden = -(g * out) / den
        gq = gp = None
        if feats.requires_grad:
            gqn = (gden * pn[:, None]).sum(axis=0)
            gq = (p.T @ gd + q * (gqn * _safe_inv(qn))[None, :]).reshape(c, h, w)
        if protos.requires_grad:
            gpn = (gden * qn[None, :]).sum(axis=1)
            gp = gd @ q.T + p * (gpn * _safe_inv(pn))[:, None]
        return gq, gp

    return _make(out.reshape(p.shape[0], h, w), "cosine_scores", (feats, protos), backward)


def cosine_map(query_feats: Tensor, proto: Tensor, delta: float = COSINE_DELTA) -> Tensor:
    """Per-location cosine similarity of ``[C,h,w]`` features with one ``[C]`` vector."""
    proto = _as_tensor(proto, query_feats)
    return reshape(cosine_scores(query_feats, reshape(proto, (1, -1)), delta), query_feats.shape[1:])


def pixel_cosine(a: Tensor, b: Tensor, delta: float = COSINE_DELTA) -> Tensor:
    """Cosine similarity between matching columns of two ``[C,h,w]`` tensors."""
    if a.shape != b.shape:
        raise DimensionError(f"pixel_cosine: {a.shape} vs {b.shape}")
    ad, bd = a.data, b.data
    na = np.sqrt((ad * ad).sum(axis=0))
    nb = np.sqrt((bd * bd).sum(axis=0))
    dot = (ad * bd).sum(axis=0)
    den = na * nb + delta
    out = dot / den

    def backward(g):
        gd = g / den
        gden = -(g * out) / den
        ga = bd * gd + ad * (gden * nb * _safe_inv(na)) if a.requires_grad else None
        gb = ad * gd + bd * (gden * na * _safe_inv(nb)) if b.requires_grad else None
        return ga, gb

    return _make(out, "pixel_cosine", (a, b), backward)


# -- parameters & optimisation ---------------------------------------------
@dataclass
class ModelParams:
    """Ordered, named parameter tensors; the unit of aggregation."""

    names: list[str]
    tensors: list[Tensor] = field(default_factory=list)

    def __post_init__(self):
        if len(self.names) != len(self.tensors):
            raise TensorError("names and tensors differ in length")

    def __iter__(self):
        return iter(self.tensors)

    def __len__(self) -> int:
        return len(self.tensors)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[self.names.index(name)]

    def items(self):
        return zip(self.names, self.tensors)

    def copy(self) -> "ModelParams":
        return ModelParams(list(self.names),
                           [Tensor(t.data.copy(), requires_grad=t.requires_grad) for t in self.tensors])

    def arrays(self) -> list[np.ndarray]:
        return [t.data for t in self.tensors]

    def zero_grad(self) -> None:
        for t in self.tensors:
            t.grad = None

    def num_parameters(self) -> int:
        return int(sum(t.data.size for t in self.tensors))

    def checksum(self) -> str:
        import hashlib

        h = hashlib.sha256()
        for name, t in self.items():
            h.update(name.encode())
            h.update(np.ascontiguousarray(t.data).tobytes())
        return h.hexdigest()


def sgd_step(params: ModelParams, lr: float) -> ModelParams:
    """Plain SGD: ``theta -= lr * grad`` then clear gradients."""
    for name, t in params.items():
        if t.grad is None:
            raise TensorError(f"sgd_step: parameter {name!r} has no gradient")
    for t in params.tensors:
        t.data = (t.data - np.asarray(lr, dtype=t.data.dtype) * t.grad).astype(t.data.dtype)
        t.grad = None
    return params
