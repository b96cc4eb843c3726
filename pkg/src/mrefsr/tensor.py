"""Dense tensors with a reverse-mode tape, sized for the fusion network.

Only the operators the network needs are provided. Every operator builds
a new :class:`Tensor` holding its parents and a closure that pushes the
output gradient back to them; :meth:`Tensor.backward` walks that graph in
reverse topological order.

Layouts are ``(C, H, W)`` or ``(B, C, H, W)``. Double precision is the
default; float32 is accepted for inference and benchmarks.
"""

import threading
from contextlib import contextmanager

import numpy as np

from .errors import ContractViolation, NonFiniteError

DEFAULT_DTYPE = np.float64
# per thread, so concurrent inference workers cannot switch recording off for each other
_state = threading.local()


@contextmanager
def no_grad():
    """Inference mode: operator outputs keep no parents, so intermediates are freed early."""
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    """An ndarray plus optional gradient storage and graph bookkeeping."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad=False, name=None, _parents=(), _backward=None):
        data = np.asarray(data)
        if data.dtype not in (np.float64, np.float32):
            data = data.astype(DEFAULT_DTYPE)
        if not np.isfinite(data).all():
            raise NonFiniteError(f"non-finite values in tensor {name or ''}".strip())
        self.data = data
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def numpy(self):
        return self.data

    def zero_grad(self):
        self.grad = None

    def accumulate(self, g):
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    def backward(self, grad=None):
        """Backpropagate from this tensor; scalar outputs seed with 1."""
        if grad is None:
            if self.data.size != 1:
                raise ContractViolation("backward() without a seed needs a scalar output")
            grad = np.ones_like(self.data)
        order = _topological_order(self)
        self.accumulate(grad)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # arithmetic sugar used by the network code
    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __getitem__(self, index):
        return select(self, index)


def _topological_order(root):
    order, seen = [], set()
    stack = [(root, False)]
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


def as_tensor(x, dtype=None):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype or DEFAULT_DTYPE))


def grad_enabled():
    return getattr(_state, "enabled", True)


def make(data, parents, backward):
    """Build an operator output; the backward closure is dropped if no parent needs it."""
    needs = grad_enabled() and any(p.requires_grad for p in parents)
    return Tensor(data, requires_grad=needs, _parents=tuple(parents) if needs else (),
                  _backward=backward if needs else None)


def _check_same_shape(a, b, what):
    if a.shape != b.shape:
        raise ContractViolation(f"{what}: shape mismatch {a.shape} vs {b.shape}")


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_same_shape(a, b, "add")

    def backward(g):
        if a.requires_grad:
            a.accumulate(g)
        if b.requires_grad:
            b.accumulate(g)

    return make(a.data + b.data, (a, b), backward)


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_same_shape(a, b, "mul")

    def backward(g):
        if a.requires_grad:
            a.accumulate(g * b.data)
        if b.requires_grad:
            b.accumulate(g * a.data)

    return make(a.data * b.data, (a, b), backward)


def scale(a, factor):
    factor = float(factor)

    def backward(g):
        a.accumulate(g * factor)

    return make(a.data * factor, (a,), backward)


def select(a, index):
    """Basic (non-fancy) indexing, e.g. ``x[i]`` on a stacked tensor."""

    def backward(g):
        full = np.zeros_like(a.data)
        full[index] = g
        a.accumulate(full)

    return make(a.data[index], (a,), backward)


def stack(tensors):
    """Stack equally shaped tensors along a new leading axis."""
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ContractViolation("stack: empty input")
    for t in tensors[1:]:
        _check_same_shape(tensors[0], t, "stack")

    def backward(g):
        for i, t in enumerate(tensors):
            if t.requires_grad:
                t.accumulate(g[i])

    return make(np.stack([t.data for t in tensors]), tensors, backward)


def _as_batch(x):
    if x.ndim == 3:
        return x[None], True
    if x.ndim == 4:
        return x, False
    raise ContractViolation(f"expected (C,H,W) or (B,C,H,W), got shape {x.shape}")


def _im2col(xd):
    """``(B, C, H, W)`` -> ``(B, C*9, H*W)`` patches of the zero-padded input."""
    b, c, h, w = xd.shape
    padded = np.pad(xd, ((0, 0), (0, 0), (1, 1), (1, 1)))
    cols = np.empty((b, c, 3, 3, h, w), dtype=xd.dtype)
    for ky in range(3):
        for kx in range(3):
            cols[:, :, ky, kx] = padded[:, :, ky:ky + h, kx:kx + w]
    return cols.reshape(b, c * 9, h * w)


def conv2d(x, weight, bias):
    """3x3 cross-correlation, stride 1, zero padding 1.

    ``x`` is ``(C_in, H, W)`` or ``(B, C_in, H, W)``; ``weight`` is
    ``(C_out, C_in, 3, 3)``; ``bias`` is ``(C_out,)``.
    """
    x, weight, bias = as_tensor(x), as_tensor(weight), as_tensor(bias)
    xd, squeeze = _as_batch(x.data)
    if weight.data.ndim != 4 or weight.shape[2:] != (3, 3):
        raise ContractViolation(f"conv2d: kernel must be (C_out, C_in, 3, 3), got {weight.shape}")
    c_out, c_in = weight.shape[:2]
    if xd.shape[1] != c_in:
        raise ContractViolation(f"conv2d: input has {xd.shape[1]} channels, kernel expects {c_in}")
    if bias.shape != (c_out,):
        raise ContractViolation(f"conv2d: bias shape {bias.shape} != ({c_out},)")
    b, _, h, w = xd.shape

    cols = _im2col(xd)
    w2 = weight.data.reshape(c_out, c_in * 9)
    out = (np.matmul(w2, cols) + bias.data[None, :, None]).reshape(b, c_out, h, w)

    def backward(g):
        gb = g.reshape(b, c_out, h, w)
        g2 = gb.reshape(b, c_out, h * w)
        if weight.requires_grad:
            gw = np.matmul(g2, cols.transpose(0, 2, 1)).sum(axis=0)
            weight.accumulate(gw.reshape(weight.shape))
        if bias.requires_grad:
            bias.accumulate(g2.sum(axis=(0, 2)))
        if x.requires_grad:
            # input gradient = correlation of g with the spatially flipped, transposed kernel
            flipped = weight.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3).reshape(c_in, c_out * 9)
            gx = np.matmul(flipped, _im2col(gb)).reshape(b, c_in, h, w)
            x.accumulate(gx[0] if squeeze else gx)

    return make(out[0] if squeeze else out, (x, weight, bias), backward)


def leaky_relu(x, slope=0.1):
    if not 0.0 < slope < 1.0:
        raise ContractViolation(f"leaky_relu: slope must lie in (0, 1), got {slope}")
    x = as_tensor(x)
    pos = x.data >= 0
    out = np.where(pos, x.data, slope * x.data)

    def backward(g):
        x.accumulate(np.where(pos, g, slope * g))

    return make(out, (x,), backward)


def _sigmoid(z):
    # split by sign so exp never overflows
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def sigmoid(x):
    x = as_tensor(x)
    out = _sigmoid(x.data)

    def backward(g):
        x.accumulate(g * out * (1.0 - out))

    return make(out, (x,), backward)


def clamp(x, lo, hi):
    """Elementwise clip; gradient passes only where the input is strictly inside ``(lo, hi)``."""
    x = as_tensor(x)
    inside = (x.data > lo) & (x.data < hi)
    out = np.clip(x.data, lo, hi)

    def backward(g):
        x.accumulate(np.where(inside, g, 0.0))

    return make(out, (x,), backward)


def concat_channels(a, b):
    """Concatenate along the channel axis (axis 0 of ``(C, H, W)``, axis 1 when batched)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != b.data.ndim or a.shape[-2:] != b.shape[-2:] or a.shape[:-3] != b.shape[:-3]:
        raise ContractViolation(f"concat_channels: incompatible shapes {a.shape} and {b.shape}")
    axis = a.data.ndim - 3
    c1 = a.shape[axis]
    out = np.concatenate([a.data, b.data], axis=axis)

    def backward(g):
        ga, gb = np.split(g, [c1], axis=axis)
        if a.requires_grad:
            a.accumulate(ga)
        if b.requires_grad:
            b.accumulate(gb)

    return make(out, (a, b), backward)


def pixel_shuffle(x):
    """Depth-to-space by 2: ``out[c, 2h+i, 2w+j] = x[4c + 2i + j, h, w]``."""
    x = as_tensor(x)
    xd, squeeze = _as_batch(x.data)
    b, c4, h, w = xd.shape
    if c4 % 4:
        raise ContractViolation(f"pixel_shuffle: channel count {c4} not divisible by 4")
    c = c4 // 4
    out = xd.reshape(b, c, 2, 2, h, w).transpose(0, 1, 4, 2, 5, 3).reshape(b, c, 2 * h, 2 * w)

    def backward(g):
        gb = g[None] if squeeze else g
        gx = gb.reshape(b, c, h, 2, w, 2).transpose(0, 1, 3, 5, 2, 4).reshape(b, c4, h, w)
        x.accumulate(gx[0] if squeeze else gx)

    return make(out[0] if squeeze else out, (x,), backward)


def subsample(x, step=2):
    """Keep every ``step``-th row and column (turns a stride-1 conv into a strided one)."""
    x = as_tensor(x)
    out = x.data[..., ::step, ::step]

    def backward(g):
        full = np.zeros_like(x.data)
        full[..., ::step, ::step] = g
        x.accumulate(full)

    return make(np.ascontiguousarray(out), (x,), backward)


def gather_hw(x, iy, ix):
    """``out[c, y, x] = x[c, iy[y, x], ix[y, x]]`` for in-range integer index maps."""
    x = as_tensor(x)
    c, hr, wr = x.shape
    flat = (np.asarray(iy) * wr + np.asarray(ix)).ravel()
    out = x.data.reshape(c, hr * wr)[:, flat].reshape((c,) + np.shape(iy))

    def backward(g):
        gflat = g.reshape(c, -1)
        gx = np.empty((c, hr * wr), dtype=x.data.dtype)
        for ch in range(c):
            gx[ch] = np.bincount(flat, weights=gflat[ch], minlength=hr * wr)
        x.accumulate(gx.reshape(c, hr, wr))

    return make(out, (x,), backward)


def mean_abs_diff(pred, target):
    """Mean of ``|pred - target|``; ``target`` is constant (no gradient)."""
    pred = as_tensor(pred)
    target = np.asarray(target, dtype=pred.dtype)
    if pred.shape != target.shape:
        raise ContractViolation(f"mean_abs_diff: shape mismatch {pred.shape} vs {target.shape}")
    diff = pred.data - target
    n = diff.size

    def backward(g):
        pred.accumulate(g * np.sign(diff) / n)

    return make(np.array(np.abs(diff).mean()), (pred,), backward)


def total(x):
    x = as_tensor(x)

    def backward(g):
        x.accumulate(np.broadcast_to(g, x.shape))

    return make(np.array(x.data.sum()), (x,), backward)
