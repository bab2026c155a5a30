"""Composite blocks: convolution blocks, multi-head self-attention, transformer layers."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor


class Module:
    """Parameter container; parameters are discovered by walking attributes."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            key = f"{prefix}{name}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield key, value
            elif isinstance(value, Module):
                yield from value.named_parameters(key + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{key}.{i}.")
                    elif isinstance(item, Tensor) and item.requires_grad:
                        yield f"{key}.{i}", item

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: p.data.copy() for k, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = sorted(set(own) - set(state))
        if missing:
            raise KeyError(f"missing parameters: {missing[:5]}")
        for k, p in own.items():
            arr = np.asarray(state[k], dtype=np.float64)
            if arr.shape != p.shape:
                raise ShapeError(f"parameter {k}: stored shape {arr.shape} != model shape {p.shape}")
            p.data = arr.copy()

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())


class Linear(Module):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, std: float | None = None):
        std = np.sqrt(1.0 / n_in) if std is None else std
        self.weight = T.parameter(rng.normal(0.0, std, size=(n_in, n_out)))
        self.bias = T.parameter(np.zeros(n_out))

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.weight.shape[0]:
            raise ShapeError(f"linear: input width {x.shape[-1]} != weight rows {self.weight.shape[0]}")
        return x @ self.weight + self.bias


def activate(x: Tensor, kind: str) -> Tensor:
    if kind == "relu":
        return T.relu(x)
    if kind == "leaky":
        return T.leaky_relu(x, 0.2)
    if kind == "gelu":
        return T.gelu(x)
    if kind == "tanh":
        return T.tanh(x)
    if kind == "none":
        return x
    raise ValueError(f"unknown activation {kind!r}")


class ConvBlock(Module):
    """conv (or transposed conv) -> optional instance norm -> activation.

    Forward convs use odd kernels with same-style padding ``k // 2``; a stride-2
    forward block halves the spatial size. Transposed blocks use a 4x4 kernel,
    stride 2, padding 1, which doubles it.
    """

    def __init__(
        self,
        c_in: int,
        c_out: int,
        rng: np.random.Generator,
        kernel: int = 3,
        stride: int = 1,
        norm: bool = True,
        act: str = "relu",
        transpose: bool = False,
    ):
        if stride not in (1, 2):
            raise ValueError(f"stride must be 1 or 2, got {stride}")
        if not transpose and kernel % 2 == 0:
            raise ValueError(f"same-padding blocks need an odd kernel, got {kernel}")
        self.stride = stride
        self.transpose = transpose
        self.act = act
        self.use_norm = norm
        if transpose:
            self.padding = (kernel - stride) // 2
            fan_in = c_in * kernel * kernel / (stride * stride)
            shape = (c_in, c_out, kernel, kernel)
        else:
            self.padding = kernel // 2
            fan_in = c_in * kernel * kernel
            shape = (c_out, c_in, kernel, kernel)
        gain = 2.0 if act in ("relu", "leaky") else 1.0
        self.kernel = T.parameter(rng.normal(0.0, np.sqrt(gain / fan_in), size=shape))
        self.bias = T.parameter(np.zeros(c_out))
        if norm:
            self.norm_gain = T.parameter(np.ones((1, c_out, 1, 1)))
            self.norm_bias = T.parameter(np.zeros((1, c_out, 1, 1)))

    def __call__(self, x: Tensor) -> Tensor:
        if self.transpose:
            y = T.conv2d_transpose(x, self.kernel, self.bias, stride=self.stride, padding=self.padding)
        else:
            y = T.conv2d(x, self.kernel, self.bias, stride=self.stride, padding=self.padding)
        if self.use_norm:
            y = T.normalize(y, (2, 3), self.norm_gain, self.norm_bias)
        return activate(y, self.act)


class MultiHeadSelfAttention(Module):
    def __init__(self, width: int, heads: int, rng: np.random.Generator):
        if width % heads:
            raise ValueError(f"width {width} not divisible by {heads} heads")
        self.width = width
        self.heads = heads
        std = np.sqrt(1.0 / width)
        for name in ("query", "key", "value", "out"):
            setattr(self, name, Linear(width, width, rng, std))

    def __call__(self, z: Tensor) -> Tensor:
        """``z`` is ``[N, C]`` or ``[B, N, C]``."""
        if z.shape[-1] != self.width:
            raise ShapeError(f"self_attention: input width {z.shape[-1]} != model width {self.width}")
        squeeze = z.ndim == 2
        if squeeze:
            z = z.reshape(1, *z.shape)
        b, n, c = z.shape
        h, d = self.heads, c // self.heads

        def split(t):
            return t.reshape(b, n, h, d).transpose(0, 2, 1, 3)

        q, k, v = split(self.query(z)), split(self.key(z)), split(self.value(z))
        scores = (q @ k.transpose(0, 1, 3, 2)) * (1.0 / np.sqrt(d))
        attn = T.softmax(scores, axis=-1)
        mixed = (attn @ v).transpose(0, 2, 1, 3).reshape(b, n, c)
        out = self.out(mixed)
        return out.reshape(n, c) if squeeze else out


def self_attention(z: Tensor, params: MultiHeadSelfAttention) -> Tensor:
    return params(z)


class TransformerLayer(Module):
    """Pre-norm residual block: ``z + attn(ln(z))`` then ``+ ffn(ln(.))``."""

    def __init__(self, width: int, heads: int, rng: np.random.Generator, ffn_mult: int = 4):
        self.ln1_gain = T.parameter(np.ones(width))
        self.ln1_bias = T.parameter(np.zeros(width))
        self.attn = MultiHeadSelfAttention(width, heads, rng)
        self.ln2_gain = T.parameter(np.ones(width))
        self.ln2_bias = T.parameter(np.zeros(width))
        self.ffn_in = Linear(width, ffn_mult * width, rng)
        self.ffn_out = Linear(ffn_mult * width, width, rng)

    def __call__(self, z: Tensor) -> Tensor:
        z = z + self.attn(T.layer_norm(z, self.ln1_gain, self.ln1_bias))
        hidden = T.gelu(self.ffn_in(T.layer_norm(z, self.ln2_gain, self.ln2_bias)))
        return z + self.ffn_out(hidden)


def transformer_layer(z: Tensor, params: TransformerLayer) -> Tensor:
    return params(z)


def positional_encoding(n: int, width: int) -> np.ndarray:
    """Sinusoidal table ``[n, width]``: sin on even channels, cos on odd."""
    if width % 2:
        raise ValueError(f"positional encoding needs an even width, got {width}")
    pos = np.arange(n, dtype=np.float64)[:, None]
    i = np.arange(width // 2, dtype=np.float64)[None, :]
    angle = pos / 10000.0 ** (2 * i / width)
    table = np.empty((n, width))
    table[:, 0::2] = np.sin(angle)
    table[:, 1::2] = np.cos(angle)
    return table
