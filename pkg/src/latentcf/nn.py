"""Layer and parameter helpers on top of the autodiff core."""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


class Dense:
    """Fully connected layer, Glorot-uniform initialized."""

    def __init__(self, rng: np.random.Generator, n_in: int, n_out: int, name: str):
        limit = np.sqrt(6.0 / (n_in + n_out))
        self.weight = Tensor(rng.uniform(-limit, limit, size=(n_in, n_out)), requires_grad=True)
        self.bias = Tensor(np.zeros(n_out), requires_grad=True)
        self.name = name

    def __call__(self, x: Tensor) -> Tensor:
        return ad.linear(x, self.weight, self.bias)

    def params(self) -> dict[str, Tensor]:
        return {f"{self.name}.weight": self.weight, f"{self.name}.bias": self.bias}


class Conv2d:
    """3x3-style convolution layer with explicit stride and padding."""

    def __init__(
        self,
        rng: np.random.Generator,
        c_in: int,
        c_out: int,
        kernel_size: int,
        name: str,
        stride: int = 1,
        padding: int = 0,
    ):
        fan_in = c_in * kernel_size * kernel_size
        fan_out = c_out * kernel_size * kernel_size
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        self.kernel = Tensor(
            rng.uniform(-limit, limit, size=(c_out, c_in, kernel_size, kernel_size)), requires_grad=True
        )
        self.bias = Tensor(np.zeros(c_out), requires_grad=True)
        self.stride = stride
        self.padding = padding
        self.name = name

    def __call__(self, x: Tensor) -> Tensor:
        return ad.conv2d(x, self.kernel, self.bias, stride=self.stride, padding=self.padding)

    def params(self) -> dict[str, Tensor]:
        return {f"{self.name}.kernel": self.kernel, f"{self.name}.bias": self.bias}


class MLP:
    """Dense stack with ReLU between layers and a configurable output activation."""

    def __init__(
        self,
        rng: np.random.Generator,
        sizes: list[int],
        name: str,
        out_activation: str | None = None,
    ):
        self.layers = [
            Dense(rng, sizes[i], sizes[i + 1], f"{name}.{i}") for i in range(len(sizes) - 1)
        ]
        self.out_activation = out_activation

    def __call__(self, x: Tensor) -> Tensor:
        for layer in self.layers[:-1]:
            x = ad.relu(layer(x))
        x = self.layers[-1](x)
        if self.out_activation is not None:
            x = ad.activation(x, self.out_activation)
        return x

    def params(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for layer in self.layers:
            out.update(layer.params())
        return out


def merge_params(*groups: dict[str, Tensor]) -> dict[str, Tensor]:
    out: dict[str, Tensor] = {}
    for group in groups:
        for key, value in group.items():
            if key in out:
                raise ValueError(f"duplicate parameter name {key!r}")
            out[key] = value
    return out


def flatten_params(params: dict[str, Tensor]) -> np.ndarray:
    """Concatenate parameter values (insertion order) into one float32 vector."""
    return np.concatenate([p.data.reshape(-1) for p in params.values()]).astype("<f4")


def load_flat_params(params: dict[str, Tensor], blob: np.ndarray) -> None:
    """Write a float32 vector back into parameter tensors, in insertion order."""
    blob = np.asarray(blob, dtype="<f4")
    offset = 0
    for p in params.values():
        n = p.data.size
        p.data = blob[offset : offset + n].astype(np.float64).reshape(p.shape)
        offset += n
    if offset != blob.size:
        raise ValueError(f"parameter blob has {blob.size} values, model expects {offset}")
