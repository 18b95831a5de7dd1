"""Dense tensors with reverse-mode automatic differentiation.

Data lives in row-major numpy arrays. Every differentiable operation returns
a new Tensor that remembers its parent tensors and a closure mapping the
output gradient to input gradients; ``Tensor.backward()`` replays those
closures once, in reverse topological order. Training runs in float32;
feeding float64 arrays promotes the whole downstream graph to float64, which
is how the finite-difference checks reach tight tolerances.

Kernels are plain numpy (convolutions go through im2col/col2im), so every
op is deterministic for fixed inputs.
"""

from __future__ import annotations

import math
from contextlib import contextmanager
from dataclasses import dataclass

import numpy as np
from scipy.special import erf

DEFAULT_DTYPE = np.float32

_grad_enabled = True


@contextmanager
def no_grad():
    """Disable graph recording inside the context (inference, FD evals)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """A dense array plus optional gradient and autodiff bookkeeping."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_grad_owned")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None
        self._grad_owned = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.item())

    def detach(self) -> "Tensor":
        """Constant view of this tensor's data, cut out of the graph."""
        return Tensor(self.data, requires_grad=False, dtype=self.data.dtype)

    def zero_grad(self):
        self.grad = None

    def backward(self, grad=None):
        """Backpropagate from this (scalar) tensor through the recorded graph."""
        if grad is None:
            if self.data.size != 1:
                raise ValueError(
                    f"backward() without a seed needs a scalar, got shape {self.data.shape}"
                )
            grad = np.ones_like(self.data)
        topo = _topological_order(self)
        self.grad = np.asarray(grad, dtype=self.data.dtype)
        self._grad_owned = True
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # Operator sugar; scalars become constant tensors.
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return neg(self)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])

    def transpose(self, axes):
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def __repr__(self):
        flag = ", grad" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{flag})"


def _topological_order(root: Tensor):
    """Iterative post-order DFS over the subgraph reachable from ``root``."""
    topo, visited, stack = [], set(), [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in visited:
                stack.append((parent, False))
    return topo


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


def _pair(a, b):
    """Coerce a binary-op operand pair; bare scalars adopt the tensor's dtype
    instead of numpy's float64 default, so float32 graphs stay float32."""
    if isinstance(a, Tensor):
        if not isinstance(b, Tensor):
            b = Tensor(b, dtype=a.data.dtype)
    elif isinstance(b, Tensor):
        a = Tensor(a, dtype=b.data.dtype)
    else:
        a, b = Tensor(a), Tensor(b)
    return a, b


def _make(data: np.ndarray, parents, backward) -> Tensor:
    """Build an op output, recording the graph only when it matters."""
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    track = _grad_enabled and any(p.requires_grad for p in parents)
    out.requires_grad = track
    out._parents = tuple(parents) if track else ()
    out._backward = backward if track else None
    out._grad_owned = False
    return out


def _accum(t: Tensor, g: np.ndarray):
    """Accumulate a gradient contribution, copying lazily.

    The first contribution is adopted by reference (it may alias another
    node's gradient or a view); in-place += happens only once this tensor
    owns a private buffer, so aliased arrays are never mutated.
    """
    if not t.requires_grad:
        return
    if g.dtype != t.data.dtype:
        g = g.astype(t.data.dtype)
    if t.grad is None:
        t.grad = g
        t._grad_owned = False
    elif t._grad_owned:
        t.grad += g
    else:
        t.grad = t.grad + g
        t._grad_owned = True


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum ``g`` down to ``shape``, undoing numpy broadcasting."""
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = a.data + b.data

    def backward(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(g, b.data.shape))

    return _make(out, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = a.data - b.data

    def backward(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(-g, b.data.shape))

    return _make(out, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = a.data * b.data

    def backward(g):
        _accum(a, _unbroadcast(g * b.data, a.data.shape))
        _accum(b, _unbroadcast(g * a.data, b.data.shape))

    return _make(out, (a, b), backward)


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = a.data / b.data

    def backward(g):
        _accum(a, _unbroadcast(g / b.data, a.data.shape))
        _accum(b, _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    return _make(out, (a, b), backward)


def neg(a) -> Tensor:
    a = as_tensor(a)

    def backward(g):
        _accum(a, -g)

    return _make(-a.data, (a,), backward)


def texp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)

    def backward(g):
        _accum(a, g * out)

    return _make(out, (a,), backward)


def tlog(a) -> Tensor:
    a = as_tensor(a)
    out = np.log(a.data)

    def backward(g):
        _accum(a, g / a.data)

    return _make(out, (a,), backward)


def gelu(a) -> Tensor:
    """Exact erf-based GELU."""
    a = as_tensor(a)
    x = a.data
    inner = erf(x * 0.7071067811865476)
    out = 0.5 * x * (1.0 + inner)

    def backward(g):
        pdf = np.exp(-0.5 * x * x) * 0.3989422804014327
        _accum(a, g * (0.5 * (1.0 + inner) + x * pdf))

    return _make(out.astype(x.dtype, copy=False), (a,), backward)


def silu(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    sig = 1.0 / (1.0 + np.exp(-x))
    out = x * sig

    def backward(g):
        _accum(a, g * sig * (1.0 + x * (1.0 - sig)))

    return _make(out.astype(x.dtype, copy=False), (a,), backward)


# ---------------------------------------------------------------------------
# shape manipulation


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    orig = a.data.shape
    out = a.data.reshape(shape)

    def backward(g):
        _accum(a, g.reshape(orig))

    return _make(out, (a,), backward)


def transpose(a, axes) -> Tensor:
    a = as_tensor(a)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = np.ascontiguousarray(np.transpose(a.data, axes))

    def backward(g):
        _accum(a, np.transpose(g, inv))

    return _make(out, (a,), backward)


def concat(tensors, axis: int) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            _accum(t, g[tuple(idx)])

    return _make(out, tuple(tensors), backward)


def slice_axis(a, axis: int, start: int, stop: int) -> Tensor:
    """Contiguous slice along one axis."""
    a = as_tensor(a)
    idx = [slice(None)] * a.data.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)
    out = np.ascontiguousarray(a.data[idx])

    def backward(g):
        full = np.zeros_like(a.data)
        full[idx] = g
        _accum(a, full)

    return _make(out, (a,), backward)


# ---------------------------------------------------------------------------
# reductions


def _expand_reduced(g, shape, axis, keepdims):
    if axis is None:
        return np.broadcast_to(g, shape)
    if not keepdims:
        axes = axis if isinstance(axis, tuple) else (axis,)
        for ax in sorted(a % len(shape) for a in axes):
            g = np.expand_dims(g, ax)
    return np.broadcast_to(g, shape)


def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        _accum(a, _expand_reduced(g, a.data.shape, axis, keepdims).astype(a.data.dtype))

    return _make(np.asarray(out), (a,), backward)


def tmean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    out = a.data.mean(axis=axis, keepdims=keepdims)
    count = a.data.size / max(out.size, 1)

    def backward(g):
        scaled = _expand_reduced(g, a.data.shape, axis, keepdims) / count
        _accum(a, scaled.astype(a.data.dtype))

    return _make(np.asarray(out), (a,), backward)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a, b) -> Tensor:
    """Matrix product with numpy stacking semantics (ndim >= 2 operands)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2 or a.data.shape[-1] != b.data.shape[-2]:
        raise ValueError(f"matmul shape mismatch: {a.data.shape} @ {b.data.shape}")
    out = a.data @ b.data
    # Stacked input against a plain matrix (the Linear-layer case) folds the
    # leading axes into one GEMM instead of a batched product plus a sum.
    flat = b.data.ndim == 2 and a.data.ndim > 2

    def backward(g):
        if a.requires_grad:
            if flat:
                g2 = g.reshape(-1, g.shape[-1])
                _accum(a, (g2 @ b.data.T).reshape(a.data.shape))
            else:
                bt = np.ascontiguousarray(np.swapaxes(b.data, -1, -2))
                _accum(a, _unbroadcast(g @ bt, a.data.shape))
        if b.requires_grad:
            if flat:
                a2 = a.data.reshape(-1, a.data.shape[-1])
                _accum(b, a2.T @ g.reshape(-1, g.shape[-1]))
            else:
                at = np.ascontiguousarray(np.swapaxes(a.data, -1, -2))
                _accum(b, _unbroadcast(at @ g, b.data.shape))

    return _make(out, (a, b), backward)


# ---------------------------------------------------------------------------
# normalization and softmax


def softmax(a, axis: int = -1) -> Tensor:
    """Row-stochastic softmax with max-subtraction for stability."""
    a = as_tensor(a)
    x = a.data
    if x.size and not (math.isfinite(float(x.min())) and math.isfinite(float(x.max()))):
        raise ValueError("softmax: non-finite input")
    shifted = x - x.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        _accum(a, y * (g - dot))

    return _make(y, (a,), backward)


def rms_norm(a, gain, eps: float = 1e-6) -> Tensor:
    """y = gain * x / sqrt(mean(x^2, last axis) + eps)."""
    a, gain = as_tensor(a), as_tensor(gain)
    x = a.data
    if gain.data.shape != x.shape[-1:]:
        raise ValueError(
            f"rms_norm gain shape {gain.data.shape} does not match last axis of {x.shape}"
        )
    d = x.shape[-1]
    inv = 1.0 / np.sqrt((x * x).mean(axis=-1, keepdims=True) + eps)
    xn = x * inv
    out = xn * gain.data

    def backward(g):
        if a.requires_grad:
            gg = g * gain.data
            dot = (gg * x).sum(axis=-1, keepdims=True)
            _accum(a, inv * gg - (inv ** 3 / d) * dot * x)
        if gain.requires_grad:
            red = tuple(range(x.ndim - 1))
            _accum(gain, (g * xn).sum(axis=red))

    return _make(out.astype(x.dtype, copy=False), (a, gain), backward)


def layer_norm(a, gain=None, bias=None, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean, unit variance; optional affine."""
    a = as_tensor(a)
    x = a.data
    d = x.shape[-1]
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xn = xc * inv
    parents = [a]
    gdata = None
    if gain is not None:
        gain = as_tensor(gain)
        parents.append(gain)
        gdata = gain.data
    if bias is not None:
        bias = as_tensor(bias)
        parents.append(bias)
    out = xn if gdata is None else xn * gdata
    if bias is not None:
        out = out + bias.data

    def backward(g):
        gxn = g if gdata is None else g * gdata
        if a.requires_grad:
            s1 = gxn.sum(axis=-1, keepdims=True)
            s2 = (gxn * xn).sum(axis=-1, keepdims=True)
            _accum(a, (inv / d) * (d * gxn - s1 - xn * s2))
        if gain is not None and gain.requires_grad:
            red = tuple(range(x.ndim - 1))
            _accum(gain, (g * xn).sum(axis=red))
        if bias is not None and bias.requires_grad:
            red = tuple(range(x.ndim - 1))
            _accum(bias, g.sum(axis=red))

    return _make(out.astype(x.dtype, copy=False), tuple(parents), backward)


# ---------------------------------------------------------------------------
# lookups and losses


def embedding(table, ids) -> Tensor:
    """Row lookup ``table[ids]`` with scatter-add backward into the table."""
    table = as_tensor(table)
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.data.shape[0]):
        raise ValueError(
            f"embedding ids out of range [0, {table.data.shape[0]}): "
            f"min={ids.min()}, max={ids.max()}"
        )
    out = table.data[ids]

    def backward(g):
        buf = np.zeros_like(table.data)
        np.add.at(buf, ids.reshape(-1), g.reshape(-1, table.data.shape[1]))
        _accum(table, buf)

    return _make(out, (table,), backward)


def cross_entropy_from_logits(logits, targets, weights=None) -> Tensor:
    """Weighted mean cross-entropy; rows with weight zero contribute nothing.

    ``logits`` is [n, K], ``targets`` int [n], ``weights`` float [n] or None
    (None means uniform). The mean is over total weight, so masking rows out
    leaves the loss bit-identical under any perturbation of those rows.
    """
    logits = as_tensor(logits)
    x = logits.data
    if x.ndim != 2:
        raise ValueError(f"cross_entropy expects [n, K] logits, got {x.shape}")
    n, k = x.shape
    t = np.asarray(targets).reshape(-1)
    if t.shape[0] != n:
        raise ValueError(f"cross_entropy targets length {t.shape[0]} != rows {n}")
    if t.size and (t.min() < 0 or t.max() >= k):
        raise ValueError(f"cross_entropy target out of range [0, {k})")
    w = np.ones(n, x.dtype) if weights is None else np.asarray(weights, x.dtype).reshape(-1)
    wsum = w.sum()
    if not wsum > 0:
        raise ValueError("cross_entropy: total weight is zero (no active rows)")
    m = x.max(axis=1, keepdims=True)
    z = x - m
    lse = np.log(np.exp(z).sum(axis=1)) + m[:, 0]
    picked = x[np.arange(n), t]
    loss = np.asarray(((lse - picked) * w).sum() / wsum, dtype=x.dtype)

    def backward(g):
        p = np.exp(z)
        p /= p.sum(axis=1, keepdims=True)
        scale = (w / wsum)[:, None]
        d = p * scale
        d[np.arange(n), t] -= w / wsum
        _accum(logits, d * g)

    return _make(loss, (logits,), backward)


# ---------------------------------------------------------------------------
# rotary pairs


def rope_rotate_pairs(a, cos: np.ndarray, sin: np.ndarray) -> Tensor:
    """Rotate trailing-dim pairs (x0,x1),(x2,x3),... by per-position angles.

    ``a`` is [..., S, D] with D even; ``cos``/``sin`` are [S, D/2] tables.
    Each pair is treated as one complex component, so the rotation is a
    single complex multiply; backward multiplies by the conjugate (the
    opposite rotation).
    """
    a = as_tensor(a)
    x = np.ascontiguousarray(a.data)
    if x.shape[-1] % 2:
        raise ValueError(f"rope needs an even trailing dim, got {x.shape[-1]}")
    ctype = np.complex64 if x.dtype == np.float32 else np.complex128
    rot = (cos + 1j * sin).astype(ctype)
    y = (x.view(ctype) * rot).view(x.dtype)

    def backward(g):
        gc = np.ascontiguousarray(g).view(ctype)
        _accum(a, (gc * rot.conj()).view(x.dtype))

    return _make(y, (a,), backward)


# ---------------------------------------------------------------------------
# convolutions (im2col / col2im)

_PAD_MODES = {"zero": "constant", "edge": "edge"}


def _im2col(xp: np.ndarray, k: int, s: int, oh: int, ow: int) -> np.ndarray:
    b, c, _, _ = xp.shape
    sb, sc, sh, sw = xp.strides
    view = np.lib.stride_tricks.as_strided(
        xp, (b, c, k, k, oh, ow), (sb, sc, sh, sw, sh * s, sw * s)
    )
    return view.reshape(b, c * k * k, oh * ow)


def _col2im(cols: np.ndarray, padded_shape, k: int, s: int, oh: int, ow: int) -> np.ndarray:
    b, c, hp, wp = padded_shape
    cols = cols.reshape(b, c, k, k, oh, ow)
    out = np.zeros(padded_shape, dtype=cols.dtype)
    for i in range(k):
        for j in range(k):
            out[:, :, i : i + s * oh : s, j : j + s * ow : s] += cols[:, :, i, j]
    return out


def _fold_pad_grad(gp: np.ndarray, pad: int, pad_mode: str) -> np.ndarray:
    """Map a padded-image gradient back onto the unpadded image."""
    if pad == 0:
        return gp
    if pad_mode == "zero":
        return gp[:, :, pad:-pad, pad:-pad]
    # Edge padding replicates border pixels, so pad-band gradient folds onto them.
    g = gp.copy()
    g[:, :, pad, :] += g[:, :, :pad, :].sum(axis=2)
    g[:, :, -pad - 1, :] += g[:, :, -pad:, :].sum(axis=2)
    g = g[:, :, pad:-pad, :]
    g[:, :, :, pad] += g[:, :, :, :pad].sum(axis=3)
    g[:, :, :, -pad - 1] += g[:, :, :, -pad:].sum(axis=3)
    return g[:, :, :, pad:-pad]


def conv2d(x, w, b=None, stride: int = 1, pad: int = 0, pad_mode: str = "zero") -> Tensor:
    """Cross-correlation of [B,C,H,W] with [O,C,k,k] filters."""
    x, w = as_tensor(x), as_tensor(w)
    if pad_mode not in _PAD_MODES:
        raise ValueError(f"unknown pad_mode {pad_mode!r}")
    bsz, c, h, wd = x.data.shape
    o, c2, kh, kw = w.data.shape
    if c != c2 or kh != kw:
        raise ValueError(f"conv2d weight {w.data.shape} incompatible with input {x.data.shape}")
    k, s = kh, stride
    if (h + 2 * pad - k) % s or (wd + 2 * pad - k) % s:
        raise ValueError(
            f"conv2d non-integral output extent for input {h}x{wd}, k={k}, stride={s}, pad={pad}"
        )
    oh = (h + 2 * pad - k) // s + 1
    ow = (wd + 2 * pad - k) // s + 1
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad)), mode=_PAD_MODES[pad_mode])
    cols = _im2col(xp, k, s, oh, ow)
    out = (w.data.reshape(o, -1) @ cols).reshape(bsz, o, oh, ow)
    if b is not None:
        b = as_tensor(b)
        out = out + b.data.reshape(1, o, 1, 1)
    parents = (x, w) if b is None else (x, w, b)

    def backward(g):
        g2 = g.reshape(bsz, o, oh * ow)
        if w.requires_grad:
            gw = np.matmul(g2, cols.transpose(0, 2, 1)).sum(axis=0)
            _accum(w, gw.reshape(w.data.shape))
        if x.requires_grad:
            gcols = w.data.reshape(o, -1).T @ g2
            gp = _col2im(gcols, xp.shape, k, s, oh, ow)
            _accum(x, _fold_pad_grad(gp, pad, pad_mode))
        if b is not None and b.requires_grad:
            _accum(b, g.sum(axis=(0, 2, 3)))

    return _make(out, parents, backward)


def conv_transpose2d(x, w, b=None, stride: int = 1, pad: int = 0) -> Tensor:
    """Transposed convolution (the adjoint of ``conv2d`` with zero padding).

    ``x`` is [B,Cin,H,W], ``w`` is [Cin,Cout,k,k]; output extent is
    (H-1)*stride - 2*pad + k.
    """
    x, w = as_tensor(x), as_tensor(w)
    bsz, cin, h, wd = x.data.shape
    cin2, cout, kh, kw = w.data.shape
    if cin != cin2 or kh != kw:
        raise ValueError(
            f"conv_transpose2d weight {w.data.shape} incompatible with input {x.data.shape}"
        )
    k, s = kh, stride
    oh = (h - 1) * s - 2 * pad + k
    ow = (wd - 1) * s - 2 * pad + k
    if oh <= 0 or ow <= 0:
        raise ValueError(f"conv_transpose2d non-positive output extent {oh}x{ow}")
    cols = np.matmul(w.data.reshape(cin, cout * k * k).T, x.data.reshape(bsz, cin, h * wd))
    padded = _col2im(cols, (bsz, cout, oh + 2 * pad, ow + 2 * pad), k, s, h, wd)
    out = padded[:, :, pad : pad + oh, pad : pad + ow]
    if b is not None:
        b = as_tensor(b)
        out = out + b.data.reshape(1, cout, 1, 1)
    parents = (x, w) if b is None else (x, w, b)

    def backward(g):
        gp = np.pad(g, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
        gcols = _im2col(gp, k, s, h, wd)
        if x.requires_grad:
            gx = np.matmul(w.data.reshape(cin, -1), gcols)
            _accum(x, gx.reshape(x.data.shape))
        if w.requires_grad:
            gw = np.matmul(x.data.reshape(bsz, cin, h * wd), gcols.transpose(0, 2, 1)).sum(axis=0)
            _accum(w, gw.reshape(w.data.shape))
        if b is not None and b.requires_grad:
            _accum(b, g.sum(axis=(0, 2, 3)))

    return _make(np.ascontiguousarray(out), parents, backward)


# ---------------------------------------------------------------------------
# gradient checking


@dataclass
class GradCheckReport:
    """Outcome of an analytic-vs-central-difference comparison."""

    max_rel_error: float
    per_input: list
    tol: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tol


def _fd_eval(fn, arrays) -> float:
    with no_grad():
        out = fn(*[Tensor(a, dtype=np.float64) for a in arrays])
    return float(out.data.item())


def _rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0), 1e-12)
    return float(np.abs(analytic - numeric).max(initial=0.0) / scale)


def grad_check(fn, inputs, tol: float = 1e-3, h: float = 1e-4, max_entries=None, seed: int = 0):
    """Compare analytic gradients of a scalar-valued closure to central differences.

    Runs entirely in float64. The relative error of each input is the largest
    elementwise deviation normalized by the larger gradient magnitude; the
    report's ``max_rel_error`` is the worst input. ``max_entries`` caps the
    number of coordinates probed per input (sampled deterministically), which
    keeps whole-model checks inside a time budget.
    """
    arrays = [np.array(a, dtype=np.float64) for a in inputs]
    ts = [Tensor(a.copy(), requires_grad=True, dtype=np.float64) for a in arrays]
    out = fn(*ts)
    if out.data.size != 1:
        raise ValueError("grad_check needs a scalar-valued closure")
    out.backward()
    analytic = []
    for t in ts:
        g = np.zeros_like(t.data) if t.grad is None else np.asarray(t.grad, dtype=np.float64)
        if not np.all(np.isfinite(g)):
            raise ValueError("grad_check: non-finite analytic gradient")
        analytic.append(g)
    rng = np.random.default_rng(seed)
    errs = []
    for a, ga in zip(arrays, analytic):
        flat = a.reshape(-1)
        n = flat.size
        if max_entries is None or n <= max_entries:
            coords = np.arange(n)
        else:
            coords = np.sort(rng.choice(n, size=max_entries, replace=False))
        numeric = np.empty(len(coords))
        for j, c in enumerate(coords):
            orig = flat[c]
            flat[c] = orig + h
            fp = _fd_eval(fn, arrays)
            flat[c] = orig - h
            fm = _fd_eval(fn, arrays)
            flat[c] = orig
            numeric[j] = (fp - fm) / (2.0 * h)
        errs.append(_rel_error(ga.reshape(-1)[coords], numeric))
    return GradCheckReport(max(errs, default=0.0), errs, tol)


def grad_check_params(loss_fn, params, tol: float = 1e-3, h: float = 1e-4,
                      max_entries: int = 16, seed: int = 0):
    """grad_check variant for in-place parameters (e.g. a whole model).

    ``loss_fn()`` takes no arguments and reads the live parameter tensors,
    which must already be float64. Coordinates are perturbed in place for the
    finite-difference evaluations and restored afterwards.
    """
    for p in params:
        if p.data.dtype != np.float64:
            raise ValueError("grad_check_params requires float64 parameters")
        p.zero_grad()
    out = loss_fn()
    if out.data.size != 1:
        raise ValueError("grad_check_params needs a scalar loss")
    out.backward()
    rng = np.random.default_rng(seed)
    errs = []
    for p in params:
        ga = np.zeros_like(p.data) if p.grad is None else np.asarray(p.grad, dtype=np.float64)
        if not np.all(np.isfinite(ga)):
            raise ValueError("grad_check_params: non-finite analytic gradient")
        flat = p.data.reshape(-1)
        n = flat.size
        if n <= max_entries:
            coords = np.arange(n)
        else:
            coords = np.sort(rng.choice(n, size=max_entries, replace=False))
        numeric = np.empty(len(coords))
        for j, c in enumerate(coords):
            orig = flat[c]
            flat[c] = orig + h
            with no_grad():
                fp = float(loss_fn().data.item())
            flat[c] = orig - h
            with no_grad():
                fm = float(loss_fn().data.item())
            flat[c] = orig
            numeric[j] = (fp - fm) / (2.0 * h)
        errs.append(_rel_error(ga.reshape(-1)[coords], numeric))
    return GradCheckReport(max(errs, default=0.0), errs, tol)
