"""Parameter containers for the small conv nets used by both branches."""

from __future__ import annotations

import numpy as np

from .tensor import Tensor, ops, parameter


class Module:
    """Holds named parameter tensors; submodules are collected by attribute name."""

    def __init__(self):
        self.params: dict[str, Tensor] = {}

    def named_parameters(self, prefix: str = "") -> dict[str, Tensor]:
        out = {prefix + k: v for k, v in self.params.items()}
        for name, val in vars(self).items():
            if isinstance(val, Module):
                out.update(val.named_parameters(f"{prefix}{name}."))
            elif isinstance(val, list):
                for i, m in enumerate(val):
                    if isinstance(m, Module):
                        out.update(m.named_parameters(f"{prefix}{name}.{i}."))
        return out


def he_normal(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(np.float32)


def glorot(rng: np.random.Generator, shape, fan_in: int, fan_out: int) -> np.ndarray:
    lim = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-lim, lim, size=shape).astype(np.float32)


class Conv(Module):
    def __init__(self, rng, cin: int, cout: int, k: int = 3, stride: int = 1, bias: bool = True, relu: bool = True):
        super().__init__()
        self.stride, self.relu = stride, relu
        self.params["w"] = parameter(he_normal(rng, (k, k, cin, cout), k * k * cin))
        if bias:
            self.params["b"] = parameter(np.zeros(cout, np.float32))

    def __call__(self, x: Tensor, pad_mode: str = "zero") -> Tensor:
        y = ops.conv2d(x, self.params["w"], self.params.get("b"), pad_mode=pad_mode, stride=self.stride)
        return ops.relu(y) if self.relu else y


class Deconv(Module):
    def __init__(self, rng, cin: int, cout: int, k: int = 3, relu: bool = True):
        super().__init__()
        self.relu = relu
        # each output pixel sees about a quarter of the kernel taps
        self.params["w"] = parameter(he_normal(rng, (k, k, cout, cin), max(1, (k * k * cin) // 4)))
        self.params["b"] = parameter(np.zeros(cout, np.float32))

    def __call__(self, x: Tensor) -> Tensor:
        y = ops.deconv2d(x, self.params["w"], self.params["b"])
        return ops.relu(y) if self.relu else y


class Dense(Module):
    def __init__(self, rng, cin: int, cout: int, bias: bool = False):
        super().__init__()
        self.params["w"] = parameter(glorot(rng, (cin, cout), cin, cout))
        if bias:
            self.params["b"] = parameter(np.zeros(cout, np.float32))

    def __call__(self, x: Tensor) -> Tensor:
        return ops.dense(x, self.params["w"], self.params.get("b"))
