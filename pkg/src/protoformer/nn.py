"""Parameter containers and the small layer set the network is built from."""

from __future__ import annotations

import math

import numpy as np

from . import tensor as T
from .rng import SplitMix64
from .tensor import Tensor


class Module:
    """Tracks :class:`Tensor` parameters and child modules assigned as attributes."""

    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_children", {})

    def __setattr__(self, name, value):
        if isinstance(value, Tensor) and value.requires_grad:
            self._params[name] = value
        elif isinstance(value, Module):
            self._children[name] = value
        object.__setattr__(self, name, value)

    def named_parameters(self, prefix: str = "", trainable_only: bool = False):
        for name, p in self._params.items():
            if trainable_only and not p.requires_grad:
                continue
            yield prefix + name, p
        for cname, child in self._children.items():
            yield from child.named_parameters(f"{prefix}{cname}.", trainable_only)

    def parameters(self, trainable_only: bool = False) -> list[Tensor]:
        return [p for _, p in self.named_parameters(trainable_only=trainable_only)]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]):
        own = dict(self.named_parameters())
        missing = set(own) - set(state)
        unexpected = set(state) - set(own)
        if missing or unexpected:
            raise KeyError(f"state mismatch: missing {sorted(missing)}, unexpected {sorted(unexpected)}")
        for name, p in own.items():
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise ValueError(f"{name}: shape {arr.shape} does not match {p.shape}")
            p.data = arr.astype(p.dtype).copy()

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def set_trainable(self, flag: bool):
        for p in self.parameters():
            p.requires_grad = flag

    def astype(self, dtype):
        """Cast every parameter in place (used for 64-bit verification)."""
        for p in self.parameters():
            p.data = p.data.astype(dtype)
        return self

    def num_parameters(self, trainable_only: bool = False) -> int:
        return int(np.sum([p.size for p in self.parameters(trainable_only)], dtype=np.int64))


def uniform_param(rng: SplitMix64, shape, fan_in: int) -> Tensor:
    bound = 1.0 / math.sqrt(fan_in)
    return Tensor(rng.uniform(shape, -bound, bound), requires_grad=True)


class Conv2d(Module):
    def __init__(self, cin: int, cout: int, kernel: int, rng: SplitMix64, dilation: int = 1):
        super().__init__()
        fan_in = cin * kernel * kernel
        self.weight = uniform_param(rng, (cout, cin, kernel, kernel), fan_in)
        self.bias = uniform_param(rng, (cout,), fan_in)
        self.dilation = dilation

    def __call__(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, self.bias, self.dilation)


class Linear(Module):
    """``y = x @ W + b`` with ``W`` stored as ``[in, out]``."""

    def __init__(self, cin: int, cout: int, rng: SplitMix64):
        super().__init__()
        self.weight = uniform_param(rng, (cin, cout), cin)
        self.bias = uniform_param(rng, (cout,), cin)

    def __call__(self, x: Tensor) -> Tensor:
        return T.matmul(x, self.weight) + self.bias


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        super().__init__()
        self.gamma = Tensor(np.ones(dim), requires_grad=True)
        self.beta = Tensor(np.zeros(dim), requires_grad=True)
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gamma, self.beta, self.eps)
