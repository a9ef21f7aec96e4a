"""Parameter containers and the layers shared by all models."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from ..errors import ShapeError
from .tensor import Tensor, as_tensor, concat, layer_norm, pad_axis, rms_norm, softmax


class Parameter(Tensor):
    def __init__(self, data):
        super().__init__(data, requires_grad=True)


class Module:
    """Minimal module tree: children are attributes that are Parameter, Module,
    or lists of Modules. Names follow attribute paths ('blocks.3.attn.wq')."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for key, val in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(val, Parameter):
                yield name, val
            elif isinstance(val, Module):
                yield from val.named_parameters(f"{name}.")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Parameter):
                        yield f"{name}.{i}", item
                    elif isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")

    def parameters(self) -> Iterator[Parameter]:
        for _, p in self.named_parameters():
            yield p

    def named_modules(self, prefix: str = "") -> Iterator[tuple[str, "Module"]]:
        yield prefix.rstrip("."), self
        for key, val in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(val, Module):
                yield from val.named_modules(f"{name}.")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_modules(f"{name}.{i}.")

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def freeze(self):
        for p in self.parameters():
            p.requires_grad = False
        return self

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]):
        own = dict(self.named_parameters())
        missing = set(own) - set(state)
        unexpected = set(state) - set(own)
        if missing or unexpected:
            raise KeyError(f"state mismatch: missing={sorted(missing)}, unexpected={sorted(unexpected)}")
        for name, p in own.items():
            if p.data.shape != state[name].shape:
                raise ShapeError(f"parameter {name}: shape {state[name].shape} != {p.data.shape}")
            p.data = np.array(state[name], dtype=np.float64)

    def num_parameters(self, trainable_only: bool = False) -> int:
        return sum(p.size for p in self.parameters() if p.requires_grad or not trainable_only)

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def lecun_normal(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    return rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=shape)


class Linear(Module):
    """y = x @ W + b with W of shape [d_in, d_out]."""

    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator,
                 bias: bool = True, zero_init: bool = False, scale: float = 1.0):
        self.d_in = d_in
        self.d_out = d_out
        if zero_init:
            w = np.zeros((d_in, d_out))
        else:
            w = lecun_normal(rng, d_in, (d_in, d_out)) * scale
        self.weight = Parameter(w)
        self.bias = Parameter(np.zeros(d_out)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        y = as_tensor(x) @ self.weight
        if self.bias is not None:
            y = y + self.bias
        return y


class LayerNorm(Module):
    """Layer norm over the last axis; affine is optional (DiT modulated norms
    keep it off and get scale/shift from the timestep instead)."""

    def __init__(self, dim: int, eps: float = 1e-6, affine: bool = True):
        self.eps = eps
        self.affine = affine
        if affine:
            self.gain = Parameter(np.ones(dim))
            self.shift = Parameter(np.zeros(dim))

    def forward(self, x: Tensor) -> Tensor:
        y = layer_norm(as_tensor(x), eps=self.eps)
        if self.affine:
            y = y * self.gain + self.shift
        return y


class RMSNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-6):
        self.eps = eps
        self.gain = Parameter(np.ones(dim))

    def forward(self, x: Tensor) -> Tensor:
        return rms_norm(as_tensor(x), eps=self.eps) * self.gain


class FeedForward(Module):
    def __init__(self, dim: int, mult: float, rng: np.random.Generator,
                 zero_out: bool = False, out_scale: float = 1.0):
        hidden = int(round(dim * mult))
        self.w_in = Linear(dim, hidden, rng)
        self.w_out = Linear(hidden, dim, rng, zero_init=zero_out, scale=out_scale)

    def forward(self, x: Tensor) -> Tensor:
        return self.w_out(self.w_in(x).gelu())


def split_heads(x: Tensor, heads: int) -> Tensor:
    """[..., L, H*dh] -> [..., H, L, dh]"""
    *lead, L, d = x.shape
    dh = d // heads
    y = x.reshape(*lead, L, heads, dh)
    return y.swapaxes(-2, -3)


def merge_heads(x: Tensor) -> Tensor:
    """[..., H, L, dh] -> [..., L, H*dh]"""
    y = x.swapaxes(-2, -3)
    *lead, L, H, dh = y.shape
    return y.reshape(*lead, L, H * dh)


def apply_rotary(x: Tensor, cos: np.ndarray, sin: np.ndarray) -> Tensor:
    """Rotate pairs of channels by precomputed per-position angles.

    x: [..., L, dh]; cos/sin: [L, rot/2] with rot <= dh even. Channels beyond
    `rot` pass through unrotated.
    """
    rot = 2 * cos.shape[-1]
    x1 = x[..., 0:rot:2]
    x2 = x[..., 1:rot:2]
    r1 = x1 * cos - x2 * sin
    r2 = x1 * sin + x2 * cos
    *lead, L, half = r1.shape
    inter = stacklast(r1, r2).reshape(*lead, L, rot)
    if rot == x.shape[-1]:
        return inter
    return concat([inter, x[..., rot:]], axis=-1)


def stacklast(a: Tensor, b: Tensor) -> Tensor:
    """Interleave two equal tensors along a new trailing axis: [..., n] x2 -> [..., n, 2]."""
    *lead, n = a.shape
    aa = a.reshape(*lead, n, 1)
    bb = b.reshape(*lead, n, 1)
    return concat([aa, bb], axis=-1)


class Attention(Module):
    """Multi-head attention; self-attention when kv is None, cross otherwise.

    qk_norm applies RMS normalization per head before the dot product. The
    output projection init is scaled down by out_scale (residual-stream
    convention); zeroing it makes the surrounding residual block an exact
    identity, which the contract tests exercise explicitly.
    """

    def __init__(self, dim: int, heads: int, rng: np.random.Generator,
                 dim_head: int | None = None, qk_norm: bool = False,
                 kv_dim: int | None = None, zero_out: bool = False,
                 out_scale: float = 1.0):
        self.heads = heads
        self.dim_head = dim_head if dim_head is not None else dim // heads
        inner = self.heads * self.dim_head
        kv_dim = kv_dim if kv_dim is not None else dim
        self.wq = Linear(dim, inner, rng)
        self.wk = Linear(kv_dim, inner, rng)
        self.wv = Linear(kv_dim, inner, rng)
        self.wo = Linear(inner, dim, rng, zero_init=zero_out, scale=out_scale)
        self.qk_norm = qk_norm
        if qk_norm:
            self.q_norm = RMSNorm(self.dim_head)
            self.k_norm = RMSNorm(self.dim_head)

    def forward(self, x: Tensor, kv: Tensor | None = None,
                rope: tuple[np.ndarray, np.ndarray] | None = None) -> Tensor:
        ctx = x if kv is None else kv
        q = split_heads(self.wq(x), self.heads)
        k = split_heads(self.wk(ctx), self.heads)
        v = split_heads(self.wv(ctx), self.heads)
        if self.qk_norm:
            q = self.q_norm(q)
            k = self.k_norm(k)
        if rope is not None:
            cos, sin = rope
            q = apply_rotary(q, cos, sin)
            k = apply_rotary(k, cos, sin)
        scores = (q @ k.swapaxes(-1, -2)) * (1.0 / np.sqrt(self.dim_head))
        attn = softmax(scores, axis=-1)
        out = merge_heads(attn @ v)
        return self.wo(out)


class CausalConv1d(Module):
    """Causal temporal convolution over axis 1 of [N, F, C_in] sequences.

    Left padding (kernel-1 steps) uses replicate mode so a constant input stays
    constant through the stack.
    """

    def __init__(self, c_in: int, c_out: int, kernel: int, rng: np.random.Generator):
        self.kernel = kernel
        self.weight = Parameter(lecun_normal(rng, c_in * kernel, (kernel, c_in, c_out)))
        self.bias = Parameter(np.zeros(c_out))

    def forward(self, x: Tensor) -> Tensor:
        padded = pad_axis(x, axis=1, before=self.kernel - 1, after=0, mode="edge")
        F = x.shape[1]
        y = None
        for k in range(self.kernel):
            term = padded[:, k:k + F, :] @ self.weight[k]
            y = term if y is None else y + term
        return y + self.bias


class DepthwiseConv1d(Module):
    """Depthwise 'same' convolution along one interior axis (kernel 3, zero pad).

    Used as the non-causal position-encoding generator over the view axis:
    x [..., V, C] -> y [..., V, C], one 3-tap filter per channel.
    """

    def __init__(self, channels: int, rng: np.random.Generator, kernel: int = 3):
        assert kernel % 2 == 1
        self.kernel = kernel
        self.taps = Parameter(rng.normal(0.0, 0.2, size=(kernel, channels)))

    def forward(self, x: Tensor) -> Tensor:
        half = self.kernel // 2
        padded = pad_axis(x, axis=-2, before=half, after=half, mode="constant")
        V = x.shape[-2]
        y = None
        for k in range(self.kernel):
            term = padded[..., k:k + V, :] * self.taps[k]
            y = term if y is None else y + term
        return y
