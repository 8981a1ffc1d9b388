"""Parameter containers and the handful of layers the networks need."""

from __future__ import annotations

from collections import OrderedDict
from typing import Iterator, Optional

import numpy as np

from segfuse.tensor.tensor import Tensor, conv1d, conv2d, layer_norm, matmul


def parameter(data, name: str = "") -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


class Module:
    """Base class: parameters are discovered from attributes in assignment order."""

    def named_parameters(self, prefix: str = "") -> "OrderedDict[str, Tensor]":
        out: "OrderedDict[str, Tensor]" = OrderedDict()
        for key, value in vars(self).items():
            full = f"{prefix}{key}"
            if isinstance(value, Tensor) and value.requires_grad:
                out[full] = value
            elif isinstance(value, Module):
                out.update(value.named_parameters(full + "."))
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        out.update(item.named_parameters(f"{full}.{i}."))
                    elif isinstance(item, Tensor) and item.requires_grad:
                        out[f"{full}.{i}"] = item
        return out

    def parameters(self) -> list:
        return list(self.named_parameters().values())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((k, v.data.copy()) for k, v in self.named_parameters().items())

    def load_state_dict(self, state) -> None:
        params = self.named_parameters()
        missing = set(params) - set(state)
        if missing:
            raise KeyError(f"state is missing parameters: {sorted(missing)}")
        for k, p in params.items():
            arr = np.asarray(state[k], dtype=np.float64)
            if arr.shape != p.shape:
                raise ValueError(f"parameter {k}: expected shape {p.shape}, got {arr.shape}")
            p.data = arr.copy()

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def _he(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    return rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)


class Conv2d(Module):
    def __init__(self, c_in: int, c_out: int, kernel: int, rng: np.random.Generator,
                 stride: int = 1, padding: Optional[int] = None, bias: bool = True):
        self.stride = stride
        self.padding = kernel // 2 if padding is None else padding
        self.weight = parameter(_he(rng, (c_out, c_in, kernel, kernel), c_in * kernel * kernel))
        self.bias = parameter(np.zeros(c_out)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)


class Conv1d(Module):
    def __init__(self, c_in: int, c_out: int, kernel: int, rng: np.random.Generator,
                 stride: int = 1, padding: int = 0, bias: bool = True):
        self.stride = stride
        self.padding = padding
        self.weight = parameter(_he(rng, (c_out, c_in, kernel), c_in * kernel))
        self.bias = parameter(np.zeros(c_out)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return conv1d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)


class Linear(Module):
    """Affine map on the last axis, Xavier-uniform initialised."""

    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True, init_scale: float = 1.0):
        limit = init_scale * np.sqrt(6.0 / (d_in + d_out))
        self.weight = parameter(rng.uniform(-limit, limit, size=(d_in, d_out)))
        self.bias = parameter(np.zeros(d_out)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        y = matmul(x, self.weight)
        return y + self.bias if self.bias is not None else y


class LayerNorm(Module):
    def __init__(self, d: int, eps: float = 1e-5):
        self.eps = eps
        self.gain = parameter(np.ones(d))
        self.shift = parameter(np.zeros(d))

    def forward(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.gain, self.shift, self.eps)


def iter_modules(module: Module) -> Iterator[Module]:
    yield module
    for value in vars(module).values():
        if isinstance(value, Module):
            yield from iter_modules(value)
        elif isinstance(value, (list, tuple)):
            for item in value:
                if isinstance(item, Module):
                    yield from iter_modules(item)
