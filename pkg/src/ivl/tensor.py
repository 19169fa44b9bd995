"""Dense tensors with reverse-mode automatic differentiation.

Values are numpy arrays (float32 working precision; float64 flows through
unchanged so checkers can re-run a program at higher precision). Every
operation that participates in differentiation records a closure that
scatters the output gradient back to its inputs; ``Tensor.backward`` replays
the tape in reverse topological order. Image data uses (N, C, H, W) layout.
"""

from __future__ import annotations

import struct
from contextlib import contextmanager

import numpy as np


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible for an operation."""


_grad_enabled = True


@contextmanager
def no_grad():
    """Disable tape recording inside the block (inference paths)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _as_array(data):
    arr = np.asarray(data)
    if arr.dtype not in (np.float32, np.float64):
        arr = arr.astype(np.float32)
    return arr


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad=False):
        self.data = _as_array(data)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward = None
        self.op = "leaf"

    # -- construction helpers -------------------------------------------------

    @staticmethod
    def _result(data, parents, backward, op):
        out = Tensor.__new__(Tensor)
        out.data = data
        out.grad = None
        if _grad_enabled and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
            out.op = op
        else:
            out.requires_grad = False
            out._parents = ()
            out._backward = None
            out.op = op
        return out

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        return float(self.data)

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, op={self.op}, requires_grad={self.requires_grad})"

    # -- autodiff engine ------------------------------------------------------

    def backward(self):
        """Accumulate d(self)/d(leaf) into every requires_grad leaf.

        ``self`` must be a scalar. Repeated calls without zeroing grads
        accumulate contributions.
        """
        if self.data.size != 1:
            raise ShapeError(f"backward requires a scalar loss, got shape {self.data.shape}")
        if not self.requires_grad:
            return
        topo = []
        visited = set()
        stack = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in visited:
                    stack.append((p, False))
        self._accum(np.ones_like(self.data))
        for node in reversed(topo):
            if node._backward is not None:
                node._backward(node.grad)

    def _accum(self, g):
        if self.grad is None:
            self.grad = g.copy() if isinstance(g, np.ndarray) else np.asarray(g)
        else:
            self.grad = self.grad + g

    # -- operator sugar --------------------------------------------------------

    def _coerce(self, other):
        if isinstance(other, Tensor):
            return other
        return Tensor(np.asarray(other, dtype=self.data.dtype))

    def __add__(self, other):
        return add(self, self._coerce(other))

    def __radd__(self, other):
        return add(self._coerce(other), self)

    def __sub__(self, other):
        return sub(self, self._coerce(other))

    def __rsub__(self, other):
        return sub(self._coerce(other), self)

    def __mul__(self, other):
        return mul(self, self._coerce(other))

    def __rmul__(self, other):
        return mul(self._coerce(other), self)

    def __truediv__(self, other):
        return div(self, self._coerce(other))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return tslice(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis, keepdims)


def _unbroadcast(g, shape):
    """Reduce gradient ``g`` back to ``shape`` after numpy broadcasting."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# -- elementwise arithmetic ----------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    data = a.data + b.data

    def backward(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(g, b.shape))

    return Tensor._result(data, (a, b), backward, "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    data = a.data - b.data

    def backward(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(-g, b.shape))

    return Tensor._result(data, (a, b), backward, "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    data = a.data * b.data

    def backward(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(g * a.data, b.shape))

    return Tensor._result(data, (a, b), backward, "mul")


def div(a: Tensor, b: Tensor) -> Tensor:
    data = a.data / b.data

    def backward(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g / b.data, a.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return Tensor._result(data, (a, b), backward, "div")


def neg(a: Tensor) -> Tensor:
    def backward(g):
        a._accum(-g)

    return Tensor._result(-a.data, (a,), backward, "neg")


# -- matmul ---------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul expects >=2-d operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    data = np.matmul(a.data, b.data)

    def backward(g):
        if a.requires_grad:
            ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
            a._accum(_unbroadcast(ga, a.shape))
        if b.requires_grad:
            gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
            b._accum(_unbroadcast(gb, b.shape))

    return Tensor._result(data, (a, b), backward, "matmul")


# -- nonlinearities ---------------------------------------------------------------

_corrupt_ops = set()  # populated only by the selftest negative control


def set_corrupt(op_name, enabled=True):
    """Deliberately corrupt an op's backward rule (gradient-check negative control)."""
    if enabled:
        _corrupt_ops.add(op_name)
    else:
        _corrupt_ops.discard(op_name)


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0

    def backward(g):
        gi = g * mask
        if "relu" in _corrupt_ops:
            gi = gi * 1.5 + 0.01
        a._accum(gi)

    return Tensor._result(a.data * mask, (a,), backward, "relu")


def tanh(a: Tensor) -> Tensor:
    out_data = np.tanh(a.data)

    def backward(g):
        a._accum(g * (1.0 - out_data * out_data))

    return Tensor._result(out_data, (a,), backward, "tanh")


def sigmoid(a: Tensor) -> Tensor:
    out_data = 1.0 / (1.0 + np.exp(-a.data))

    def backward(g):
        a._accum(g * out_data * (1.0 - out_data))

    return Tensor._result(out_data, (a,), backward, "sigmoid")


def exp(a: Tensor) -> Tensor:
    out_data = np.exp(a.data)

    def backward(g):
        a._accum(g * out_data)

    return Tensor._result(out_data, (a,), backward, "exp")


def log(a: Tensor) -> Tensor:
    def backward(g):
        a._accum(g / a.data)

    return Tensor._result(np.log(a.data), (a,), backward, "log")


def sqrt(a: Tensor) -> Tensor:
    out_data = np.sqrt(a.data)

    def backward(g):
        a._accum(g * 0.5 / out_data)

    return Tensor._result(out_data, (a,), backward, "sqrt")


# -- reductions -------------------------------------------------------------------

def tsum(a: Tensor, axis=None, keepdims=False) -> Tensor:
    data = np.asarray(a.data.sum(axis=axis, keepdims=keepdims))

    def backward(g):
        gx = np.asarray(g)
        if axis is not None and not keepdims:
            gx = np.expand_dims(gx, axis)
        a._accum(np.broadcast_to(gx, a.shape))

    return Tensor._result(data, (a,), backward, "sum")


def tmean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    data = np.asarray(a.data.mean(axis=axis, keepdims=keepdims))
    scale = a.data.size / max(data.size, 1)

    def backward(g):
        gx = np.asarray(g)
        if axis is not None and not keepdims:
            gx = np.expand_dims(gx, axis)
        a._accum(np.broadcast_to(gx, a.shape) / scale)

    return Tensor._result(data, (a,), backward, "mean")


# -- shape manipulation -------------------------------------------------------------

def reshape(a: Tensor, shape) -> Tensor:
    def backward(g):
        a._accum(g.reshape(a.shape))

    return Tensor._result(a.data.reshape(shape), (a,), backward, "reshape")


def transpose(a: Tensor, axes) -> Tensor:
    inverse = np.argsort(axes)

    def backward(g):
        a._accum(g.transpose(inverse))

    return Tensor._result(a.data.transpose(axes), (a,), backward, "transpose")


def tslice(a: Tensor, idx) -> Tensor:
    data = a.data[idx]

    def backward(g):
        gx = np.zeros_like(a.data)
        np.add.at(gx, idx, g)  # advanced indices may repeat (e.g. embedding rows)
        a._accum(gx)

    return Tensor._result(data, (a,), backward, "slice")


def concat(tensors, axis=0) -> Tensor:
    tensors = list(tensors)
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(lo, hi)
                t._accum(g[tuple(sl)])

    return Tensor._result(data, tuple(tensors), backward, "concat")


# -- softmax and losses ----------------------------------------------------------------

def softmax(a: Tensor, axis=-1) -> Tensor:
    """Numerically stable softmax along ``axis`` (max-subtraction)."""
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        dot = (g * out_data).sum(axis=axis, keepdims=True)
        a._accum((g - dot) * out_data)

    return Tensor._result(out_data, (a,), backward, "softmax")


def cross_entropy(logits: Tensor, targets, reduction="sum") -> Tensor:
    """Softmax cross-entropy against integer class targets.

    ``logits``: (N, K); ``targets``: int array (N,). Returns a scalar.
    """
    targets = np.asarray(targets, dtype=np.int64)
    if logits.ndim != 2 or targets.shape != (logits.shape[0],):
        raise ShapeError(f"cross_entropy expects (N,K) logits and (N,) targets, got {logits.shape}, {targets.shape}")
    z = logits.data
    m = z.max(axis=1, keepdims=True)
    e = np.exp(z - m)
    se = e.sum(axis=1, keepdims=True)
    logp = (z - m) - np.log(se)
    n = z.shape[0]
    losses = -logp[np.arange(n), targets]
    data = losses.sum() if reduction == "sum" else losses.mean()
    data = np.asarray(data, dtype=z.dtype)

    def backward(g):
        p = e / se
        p[np.arange(n), targets] -= 1.0
        if reduction == "mean":
            p /= n
        logits._accum(p * g)

    return Tensor._result(data, (logits,), backward, "cross_entropy")


def mse(pred: Tensor, target: Tensor) -> Tensor:
    """Mean squared error over all elements; target may be a constant."""
    if not isinstance(target, Tensor):
        target = Tensor(np.asarray(target, dtype=pred.data.dtype))
    if pred.shape != target.shape:
        raise ShapeError(f"mse shape mismatch: {pred.shape} vs {target.shape}")
    diff = pred.data - target.data
    data = np.asarray((diff * diff).mean(), dtype=pred.data.dtype)
    scale = 2.0 / diff.size

    def backward(g):
        if pred.requires_grad:
            pred._accum(g * scale * diff)
        if target.requires_grad:
            target._accum(-g * scale * diff)

    return Tensor._result(data, (pred, target), backward, "mse")


# -- spatial ops ------------------------------------------------------------------------

def _conv_geometry(extent, k, stride, dilation):
    out = -(-extent // stride)
    keff = (k - 1) * dilation + 1
    need = (out - 1) * stride + keff
    pad = max(need - extent, 0)
    return out, pad // 2, pad - pad // 2


def conv2d(x: Tensor, weight: Tensor, bias: Tensor, stride=1, dilation=1) -> Tensor:
    """2-d cross-correlation, 'same' spatial padding: H' = ceil(H/stride).

    ``x``: (N,C,H,W); ``weight``: (F,C,kh,kw) with odd kh,kw; ``bias``: (F,).
    Dilation spaces kernel taps ``dilation`` pixels apart.
    """
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d expects 4-d input/weight, got {x.shape}, {weight.shape}")
    n, c, h, w = x.shape
    f, cw, kh, kw = weight.shape
    if cw != c:
        raise ShapeError(f"conv2d channel mismatch: input has {c} channels, weight expects {cw} (input {x.shape}, weight {weight.shape})")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError(f"conv2d kernels must be odd-sized, got {kh}x{kw}")
    if dilation < 1 or stride < 1:
        raise ShapeError("conv2d stride and dilation must be >= 1")
    if bias.shape != (f,):
        raise ShapeError(f"conv2d bias must have shape ({f},), got {bias.shape}")

    ho, pt, pb = _conv_geometry(h, kh, stride, dilation)
    wo, pl, pr = _conv_geometry(w, kw, stride, dilation)
    xp = np.pad(x.data, ((0, 0), (0, 0), (pt, pb), (pl, pr)))

    def tap(i, j):
        return xp[:, :, i * dilation: i * dilation + (ho - 1) * stride + 1: stride,
                  j * dilation: j * dilation + (wo - 1) * stride + 1: stride]

    acc = np.zeros((n, ho, wo, f), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            acc += np.tensordot(tap(i, j), weight.data[:, :, i, j], axes=([1], [1]))
    acc += bias.data
    data = np.ascontiguousarray(np.moveaxis(acc, 3, 1))

    def backward(g):
        gn = np.moveaxis(g, 1, 3)  # (N,Ho,Wo,F)
        if weight.requires_grad:
            gw = np.empty_like(weight.data)
            for i in range(kh):
                for j in range(kw):
                    gw[:, :, i, j] = np.tensordot(gn, tap(i, j), axes=([0, 1, 2], [0, 2, 3]))
            weight._accum(gw)
        if bias.requires_grad:
            bias._accum(g.sum(axis=(0, 2, 3)))
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    dv = np.tensordot(gn, weight.data[:, :, i, j], axes=([3], [0]))
                    gxp[:, :, i * dilation: i * dilation + (ho - 1) * stride + 1: stride,
                        j * dilation: j * dilation + (wo - 1) * stride + 1: stride] += np.moveaxis(dv, 3, 1)
            x._accum(gxp[:, :, pt: pt + h, pl: pl + w])

    return Tensor._result(data, (x, weight, bias), backward, "conv2d")


def maxpool2x2(x: Tensor) -> Tensor:
    """2x2 max pooling, stride 2, ceil-mode (odd extents padded with -inf).

    Ties route the gradient to the first maximal element in row-major order.
    """
    if x.ndim != 4:
        raise ShapeError(f"maxpool2x2 expects 4-d input, got {x.shape}")
    n, c, h, w = x.shape
    ho, wo = -(-h // 2), -(-w // 2)
    xp = x.data
    if h % 2 or w % 2:
        xp = np.pad(xp, ((0, 0), (0, 0), (0, ho * 2 - h), (0, wo * 2 - w)),
                    constant_values=-np.inf)
    win = xp.reshape(n, c, ho, 2, wo, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho, wo, 4)
    idx = win.argmax(axis=-1)
    data = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]

    def backward(g):
        gwin = np.zeros((n, c, ho, wo, 4), dtype=g.dtype)
        np.put_along_axis(gwin, idx[..., None], g[..., None], axis=-1)
        gp = gwin.reshape(n, c, ho, wo, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho * 2, wo * 2)
        x._accum(gp[:, :, :h, :w])

    return Tensor._result(np.ascontiguousarray(data), (x,), backward, "maxpool2x2")


def global_max_pool(x: Tensor) -> Tensor:
    """Max over the spatial plane: (N,C,H,W) -> (N,C); first-index ties."""
    if x.ndim != 4:
        raise ShapeError(f"global_max_pool expects 4-d input, got {x.shape}")
    n, c, h, w = x.shape
    flat = x.data.reshape(n, c, h * w)
    idx = flat.argmax(axis=-1)
    data = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]

    def backward(g):
        gf = np.zeros((n, c, h * w), dtype=g.dtype)
        np.put_along_axis(gf, idx[..., None], g[..., None], axis=-1)
        x._accum(gf.reshape(n, c, h, w))

    return Tensor._result(np.ascontiguousarray(data), (x,), backward, "global_max_pool")


def upsample_to(x: Tensor, size) -> Tensor:
    """Nearest-neighbour resize of (N,C,h,w) to spatial ``size`` = (H,W)."""
    if x.ndim != 4:
        raise ShapeError(f"upsample_to expects 4-d input, got {x.shape}")
    n, c, h, w = x.shape
    hh, ww = size
    ri = (np.arange(hh) * h) // hh
    ci = (np.arange(ww) * w) // ww
    data = x.data[:, :, ri[:, None], ci[None, :]]

    def backward(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, (slice(None), slice(None), ri[:, None], ci[None, :]), g)
        x._accum(gx)

    return Tensor._result(np.ascontiguousarray(data), (x,), backward, "upsample_to")


# -- serialisation ---------------------------------------------------------------------

_MAGIC = b"IVLT"
_FORMAT_VERSION = 1


def dump_tensor(path, array):
    """Write an array in the checkpoint tensor format.

    Little-endian: magic "IVLT", format version u32, rank u32, extents u64
    each, then raw 32-bit values row-major.
    """
    arr = np.ascontiguousarray(np.asarray(array), dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<II", _FORMAT_VERSION, arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        fh.write(arr.tobytes())


def load_tensor(path):
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != _MAGIC:
            raise ValueError(f"{path}: not a tensor dump (bad magic {magic!r})")
        version, rank = struct.unpack("<II", fh.read(8))
        if version != _FORMAT_VERSION:
            raise ValueError(f"{path}: unsupported format version {version}")
        shape = struct.unpack(f"<{rank}Q", fh.read(8 * rank))
        count = int(np.prod(shape)) if rank else 1
        data = np.frombuffer(fh.read(4 * count), dtype="<f4", count=count)
        return data.reshape(shape).astype(np.float32)
