"""Parameterized layers, initializers, optimizer, and gradient clipping.

Modules are plain attribute containers: any Tensor attribute with
``requires_grad`` is a parameter, nested Modules and lists of Modules are
walked recursively, and parameter names are the attribute paths. That keeps
checkpoints stable without a registration protocol.
"""

from __future__ import annotations

import numpy as np

from .tensor import (
    DEFAULT_DTYPE,
    Tensor,
    conv2d,
    conv_transpose2d,
    embedding,
    layer_norm,
    matmul,
    rms_norm,
)


class Module:
    """Base class providing parameter discovery and state I/O."""

    def params(self) -> dict:
        out = {}
        for name, val in vars(self).items():
            if isinstance(val, Tensor) and val.requires_grad:
                out[name] = val
            elif isinstance(val, Module):
                for k, v in val.params().items():
                    out[f"{name}.{k}"] = v
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        for k, v in item.params().items():
                            out[f"{name}.{i}.{k}"] = v
        return out

    def state(self) -> dict:
        return {k: v.data for k, v in self.params().items()}

    def load_state(self, state: dict):
        params = self.params()
        missing = sorted(set(params) - set(state))
        extra = sorted(set(state) - set(params))
        if missing or extra:
            raise ValueError(f"state mismatch: missing={missing}, unexpected={extra}")
        for k, p in params.items():
            arr = np.asarray(state[k])
            if arr.shape != p.data.shape:
                raise ValueError(
                    f"parameter {k}: stored shape {arr.shape} != expected {p.data.shape}"
                )
            p.data = arr.astype(p.data.dtype, copy=True)

    def cast(self, dtype):
        """Convert all parameters in place (float64 for verification runs)."""
        for p in self.params().values():
            p.data = p.data.astype(dtype)
        return self

    def zero_grad(self):
        for p in self.params().values():
            p.grad = None


def normal_param(rng: np.random.Generator, shape, std: float) -> Tensor:
    return Tensor(rng.normal(0.0, std, size=shape), requires_grad=True, dtype=DEFAULT_DTYPE)


def zeros_param(shape) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True, dtype=DEFAULT_DTYPE)


def ones_param(shape) -> Tensor:
    return Tensor(np.ones(shape), requires_grad=True, dtype=DEFAULT_DTYPE)


class Linear(Module):
    def __init__(self, in_dim, out_dim, rng, std=0.02, bias=True, zero_init=False):
        if zero_init:
            self.weight = zeros_param((in_dim, out_dim))
        else:
            self.weight = normal_param(rng, (in_dim, out_dim), std)
        self.bias = zeros_param(out_dim) if bias else None

    def __call__(self, x):
        y = matmul(x, self.weight)
        return y if self.bias is None else y + self.bias


class Embedding(Module):
    def __init__(self, num_rows, dim, rng, std=0.02):
        self.table = normal_param(rng, (num_rows, dim), std)

    def __call__(self, ids):
        return embedding(self.table, ids)


class RMSNorm(Module):
    def __init__(self, dim, eps=1e-6):
        self.gain = ones_param(dim)
        self.eps = eps

    def __call__(self, x):
        return rms_norm(x, self.gain, self.eps)


class LayerNorm(Module):
    def __init__(self, dim, eps=1e-5, affine=True):
        self.gain = ones_param(dim) if affine else None
        self.bias = zeros_param(dim) if affine else None
        self.eps = eps

    def __call__(self, x):
        return layer_norm(x, self.gain, self.bias, self.eps)


class Conv2d(Module):
    def __init__(self, cin, cout, k, rng, stride=1, pad=0, pad_mode="zero", bias=True):
        std = np.sqrt(2.0 / (cin * k * k))
        self.weight = normal_param(rng, (cout, cin, k, k), std)
        self.bias = zeros_param(cout) if bias else None
        self.stride, self.pad, self.pad_mode = stride, pad, pad_mode

    def __call__(self, x):
        return conv2d(x, self.weight, self.bias, self.stride, self.pad, self.pad_mode)


class ConvTranspose2d(Module):
    def __init__(self, cin, cout, k, rng, stride=1, pad=0, bias=True):
        std = np.sqrt(2.0 / (cin * k * k))
        self.weight = normal_param(rng, (cin, cout, k, k), std)
        self.bias = zeros_param(cout) if bias else None
        self.stride, self.pad = stride, pad

    def __call__(self, x):
        return conv_transpose2d(x, self.weight, self.bias, self.stride, self.pad)


def clip_global_norm(params, max_norm: float) -> float:
    """Scale all gradients so their global L2 norm is at most ``max_norm``.

    Returns the pre-clip norm.
    """
    if max_norm <= 0:
        raise ValueError("max_norm must be positive")
    total = 0.0
    with_grads = [p for p in params if p.grad is not None]
    for p in with_grads:
        total += float(np.vdot(p.grad, p.grad))
    norm = float(np.sqrt(total))
    if norm > max_norm:
        scale = max_norm / norm
        for p in with_grads:
            if getattr(p, "_grad_owned", True):
                p.grad *= scale
            else:
                p.grad = p.grad * scale
    return norm


class AdamW:
    """Decoupled weight-decay Adam; defaults beta=(0.9, 0.999), eps=1e-8, wd=0.01."""

    def __init__(self, params, lr=1e-4, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.01):
        self.params = list(params.values()) if isinstance(params, dict) else list(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self._m = [np.zeros_like(p.data) for p in self.params]
        self._v = [np.zeros_like(p.data) for p in self.params]

    def step(self):
        self.t += 1
        bc1 = 1.0 - self.b1 ** self.t
        bc2 = 1.0 - self.b2 ** self.t
        for p, m, v in zip(self.params, self._m, self._v):
            if p.grad is None:
                g = np.zeros_like(p.data)
            else:
                g = p.grad
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * (g * g)
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            if self.weight_decay:
                update = update + self.weight_decay * p.data
            p.data -= (self.lr * update).astype(p.data.dtype, copy=False)

    def zero_grad(self):
        for p in self.params:
            p.grad = None
