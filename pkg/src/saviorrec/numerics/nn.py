"""Parameter containers and small layers built on :mod:`tensor`."""

from __future__ import annotations

import zlib
from typing import Iterator

import numpy as np

from .tensor import Tensor, leaky_relu, matmul, relu, tanh

ACTIVATIONS = {
    "leaky_relu": leaky_relu,
    "relu": relu,
    "tanh": tanh,
}


def param_rng(seed: int, name: str) -> np.random.Generator:
    """Independent RNG stream per (seed, parameter-group name).

    Initializing each group from its own stream keeps the values of one group
    unchanged when another group is added or removed (e.g. by an ablation).
    """
    return np.random.default_rng([int(seed), zlib.crc32(name.encode())])


class Module:
    """Collects trainable tensors from attributes, in definition order."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for attr, value in vars(self).items():
            if isinstance(value, Tensor):
                if value.requires_grad:
                    yield prefix + attr, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{prefix}{attr}.")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{prefix}{attr}.{i}.")

    def parameters(self) -> dict[str, Tensor]:
        return dict(self.named_parameters())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = self.parameters()
        missing = set(params) - set(state)
        if missing:
            raise KeyError(f"state is missing parameters: {sorted(missing)}")
        for name, p in params.items():
            value = np.asarray(state[name], dtype=np.float64)
            if value.shape != p.shape:
                raise ValueError(f"{name}: expected shape {p.shape}, got {value.shape}")
            p.data = value.copy()

    def zero_grad(self) -> None:
        for _, p in self.named_parameters():
            p.grad = None


class Linear(Module):
    """``y = x @ weight + bias`` with weight stored as (in, out)."""

    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator | None = None,
                 zero: bool = False, random_bias: bool = False):
        bound = 1.0 / np.sqrt(in_dim)
        if zero:
            w = np.zeros((in_dim, out_dim))
            b = np.zeros(out_dim)
        else:
            w = rng.uniform(-bound, bound, size=(in_dim, out_dim))
            b = rng.uniform(-bound, bound, size=out_dim) if random_bias else np.zeros(out_dim)
        self.weight = Tensor(w, requires_grad=True)
        self.bias = Tensor(b, requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return matmul(x, self.weight) + self.bias


class MLP(Module):
    """Stack of Linear layers with an activation between (not after) them."""

    def __init__(self, dims: list[int], rng: np.random.Generator, activation: str = "leaky_relu",
                 zero_last: bool = False, random_bias: bool = False):
        if len(dims) < 2:
            raise ValueError(f"MLP needs at least input and output dims, got {dims}")
        self.layers = [
            Linear(dims[i], dims[i + 1], rng, zero=zero_last and i == len(dims) - 2,
                   random_bias=random_bias)
            for i in range(len(dims) - 1)
        ]
        self.activation = activation

    @property
    def in_dim(self) -> int:
        return self.layers[0].weight.shape[0]

    @property
    def out_dim(self) -> int:
        return self.layers[-1].weight.shape[1]

    def __call__(self, x: Tensor) -> Tensor:
        act = ACTIVATIONS[self.activation]
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = act(x)
        return x
