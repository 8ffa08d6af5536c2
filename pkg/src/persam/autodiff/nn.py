"""Parameter containers and the handful of layers the models are built from."""

from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import Tensor


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    """Normal(0, std) truncated at two standard deviations (resampled, not clipped)."""
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2 * std
    return out


def kaiming_uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(np.asarray(data, dtype=np.float64), requires_grad=True, name=name)


class Module:
    """Tree of named parameters.

    A module tagged with ``group`` assigns that optimizer group to every
    parameter beneath it unless a descendant overrides it.
    """

    group: str | None = None

    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self._children: dict[str, Module] = {}
        self.training = False

    def __setattr__(self, key, value):
        if isinstance(value, Tensor) and value.requires_grad and "_params" in self.__dict__:
            self._params[key] = value
        elif isinstance(value, Module) and "_children" in self.__dict__:
            self._children[key] = value
        object.__setattr__(self, key, value)

    def add_module(self, name: str, module: "Module") -> None:
        self._children[name] = module
        object.__setattr__(self, name, module)

    def named_parameters(self, prefix: str = "", group: str | None = None) -> Iterator[tuple[str, Tensor, str | None]]:
        g = self.group if self.group is not None else group
        for name, p in self._params.items():
            yield prefix + name, p, g
        for name, child in self._children.items():
            yield from child.named_parameters(prefix + name + ".", g)

    def parameters(self) -> list[Tensor]:
        return [p for _, p, _ in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def train(self, mode: bool = True) -> "Module":
        self.training = mode
        for child in self._children.values():
            child.train(mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p, _ in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = {name: p for name, p, _ in self.named_parameters()}
        missing = set(own) - set(state)
        extra = set(state) - set(own)
        if missing or extra:
            raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(extra)}")
        for name, p in own.items():
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise T.DimensionError(f"{name}: stored shape {arr.shape} != parameter shape {p.shape}")
            p.data[...] = arr

    def groups(self) -> dict[str, str | None]:
        return {name: g for name, _, g in self.named_parameters()}


class ModuleList(Module):
    def __init__(self, modules):
        super().__init__()
        self._items = []
        for i, m in enumerate(modules):
            self.add_module(str(i), m)
            self._items.append(m)

    def __iter__(self):
        return iter(self._items)

    def __len__(self):
        return len(self._items)

    def __getitem__(self, i):
        return self._items[i]


class Linear(Module):
    """``y = x W + b`` with ``W`` stored as (in_features, out_features)."""

    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator,
                 init: str = "kaiming", bias: bool = True, std: float = 0.02):
        super().__init__()
        if init == "kaiming":
            w = kaiming_uniform(rng, (in_features, out_features), in_features)
        elif init == "trunc_normal":
            w = trunc_normal(rng, (in_features, out_features), std)
        elif init == "zeros":
            w = np.zeros((in_features, out_features))
        else:
            raise ValueError(f"unknown init {init!r}")
        self.weight = parameter(w)
        if bias:
            if init == "kaiming":
                self.bias = parameter(kaiming_uniform(rng, (out_features,), in_features))
            else:
                self.bias = parameter(np.zeros(out_features))
        else:
            self.bias = None

    def __call__(self, x: Tensor) -> Tensor:
        return T.linear(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        super().__init__()
        self.weight = parameter(np.ones(dim))
        self.bias = parameter(np.zeros(dim))
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.weight, self.bias, self.eps)


class Conv2d(Module):
    """3x3-style strided convolution over NHWC batches."""

    def __init__(self, in_ch: int, out_ch: int, kernel: int, stride: int, pad: int,
                 rng: np.random.Generator):
        super().__init__()
        fan_in = in_ch * kernel * kernel
        self.weight = parameter(kaiming_uniform(rng, (out_ch, in_ch, kernel, kernel), fan_in))
        self.bias = parameter(kaiming_uniform(rng, (out_ch,), fan_in))
        self.stride = stride
        self.pad = pad

    def __call__(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, self.bias, self.stride, self.pad)


class MLP(Module):
    """Linear layers with ReLU between them (none after the last)."""

    def __init__(self, sizes, rng: np.random.Generator, final_init: str = "kaiming"):
        super().__init__()
        layers = []
        for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
            init = final_init if i == len(sizes) - 2 else "kaiming"
            layers.append(Linear(a, b, rng, init=init))
        self.layers = ModuleList(layers)

    def __call__(self, x: Tensor) -> Tensor:
        n = len(self.layers)
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < n - 1:
                x = T.relu(x)
        return x


class DropoutRNG:
    """Counter-based (Philox) generator for dropout masks.

    The stream is fully determined by ``seed`` and the number of masks drawn,
    so a run can be replayed or resumed from ``state``.
    """

    def __init__(self, seed: int = 0):
        self.seed = seed
        self.generator = np.random.Generator(np.random.Philox(seed))

    @property
    def state(self) -> dict:
        return self.generator.bit_generator.state

    @state.setter
    def state(self, value: dict) -> None:
        self.generator.bit_generator.state = value
