"""Parameters, a minimal module tree, and the standard layers built on it."""

from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from . import core as F
from .conv import conv2d, conv_transpose2d
from .core import Tensor, get_dtype
from .rng import Rng


class AdamState:
    __slots__ = ("m", "v", "step")

    def __init__(self, shape, dtype):
        self.m = np.zeros(shape, dtype=dtype)
        self.v = np.zeros(shape, dtype=dtype)
        self.step = 0


class Parameter(Tensor):
    """Trainable leaf tensor with a unique dotted name and Adam moments."""

    __slots__ = ("name", "adam_state")

    def __init__(self, data, name: str | None = None):
        super().__init__(data, requires_grad=True)
        self.name = name
        self.adam_state = AdamState(self.data.shape, self.data.dtype)

    def assign(self, value: np.ndarray) -> None:
        # rebinding (not in-place) keeps earlier views of the old array valid
        value = np.asarray(value, dtype=self.data.dtype)
        if value.shape != self.data.shape:
            raise F.ShapeError(f"{self.name}: cannot assign {value.shape} to {self.data.shape}")
        self.data = value

    def astype(self, dtype) -> None:
        self.data = self.data.astype(dtype)
        st = self.adam_state
        st.m = st.m.astype(dtype)
        st.v = st.v.astype(dtype)


class Module:
    """Parameters and sub-modules are discovered from attributes in definition order."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for key, val in vars(self).items():
            if key.startswith("_"):
                continue
            path = f"{prefix}.{key}" if prefix else key
            if isinstance(val, Parameter):
                yield path, val
            elif isinstance(val, Module):
                yield from val.named_parameters(path)
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{path}.{i}")
                    elif isinstance(item, Parameter):
                        yield f"{path}.{i}", item

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def bind_names(self, root: str) -> None:
        seen = set()
        for path, p in self.named_parameters(root):
            if path in seen:
                raise ValueError(f"duplicate parameter name {path}")
            seen.add(path)
            p.name = path

    def state_dict(self) -> dict[str, np.ndarray]:
        return {p.name: p.data for p in self.parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        for p in self.parameters():
            if p.name not in state:
                raise KeyError(f"missing parameter {p.name}")
            p.assign(state[p.name])

    def to_precision(self, dtype) -> None:
        for p in self.parameters():
            p.astype(dtype)

    def zero_biases(self) -> None:
        """Set every bias-like parameter to zero (test helper for zero-preservation checks)."""
        for name, p in self.named_parameters():
            leaf = name.rsplit(".", 1)[-1]
            if leaf in ("bias", "gain_offset", "dt_bias", "b_bias", "c_bias"):
                p.assign(np.zeros_like(p.data))


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: Rng, bias: bool = True, scale: float = 1.0):
        bound = scale / math.sqrt(d_in)
        self.weight = Parameter(rng.uniform(-bound, bound, (d_in, d_out), dtype=get_dtype()))
        self.bias = Parameter(np.zeros(d_out, dtype=get_dtype())) if bias else None

    def __call__(self, x) -> Tensor:
        y = F.matmul(x, self.weight)
        return F.add(y, self.bias) if self.bias is not None else y


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        self.gain_offset = Parameter(np.zeros(dim, dtype=get_dtype()))
        self.bias = Parameter(np.zeros(dim, dtype=get_dtype()))
        self.eps = eps

    def __call__(self, x) -> Tensor:
        return F.layer_norm(x, self.gain_offset, self.bias, self.eps)


class MLP(Module):
    """``Linear -> SiLU -> ... -> Linear``."""

    def __init__(self, sizes: list[int], rng: Rng, out_scale: float = 1.0):
        self.layers = [
            Linear(a, b, rng.spawn(i), scale=out_scale if i == len(sizes) - 2 else 1.0)
            for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:]))
        ]

    def __call__(self, x) -> Tensor:
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = F.silu(x)
        return x

    def trunk(self, x) -> Tensor:
        """All layers but the last, activations included."""
        for layer in self.layers[:-1]:
            x = F.silu(layer(x))
        return x


class Conv2d(Module):
    def __init__(self, c_in: int, c_out: int, k: int, rng: Rng, stride: int = 2, padding: int = 1):
        bound = 1.0 / math.sqrt(c_in * k * k)
        self.weight = Parameter(rng.uniform(-bound, bound, (c_out, c_in, k, k), dtype=get_dtype()))
        self.bias = Parameter(np.zeros(c_out, dtype=get_dtype()))
        self.stride, self.padding = stride, padding

    def __call__(self, x) -> Tensor:
        return conv2d(x, self.weight, self.bias, self.stride, self.padding)


class ConvTranspose2d(Module):
    def __init__(self, c_in: int, c_out: int, k: int, rng: Rng, stride: int = 2, padding: int = 1):
        bound = 1.0 / math.sqrt(c_in * k * k / (stride * stride))
        self.weight = Parameter(rng.uniform(-bound, bound, (c_in, c_out, k, k), dtype=get_dtype()))
        self.bias = Parameter(np.zeros(c_out, dtype=get_dtype()))
        self.stride, self.padding = stride, padding

    def __call__(self, x) -> Tensor:
        return conv_transpose2d(x, self.weight, self.bias, self.stride, self.padding)
