"""Query-feature fusion and the multi-scale pixel decoder."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .exceptions import DimensionError
from .nn import Conv2d, Module
from .prototype import PriorMask, Prototype
from .rng import SplitMix64
from .tensor import Tensor


class QueryFusion(Module):
    """``1x1 conv(Cat(query features, prior mask, broadcast prototype))``."""

    def __init__(self, dim: int, rng: SplitMix64):
        super().__init__()
        self.dim = dim
        self.proj = Conv2d(2 * dim + 1, dim, 1, rng)

    def __call__(self, xqm: Tensor, prior: PriorMask, proto: Prototype) -> Tensor:
        c, h, w = xqm.shape
        if prior.m.shape != (1, h, w):
            raise DimensionError(f"prior mask {prior.m.shape} does not match query features {xqm.shape}")
        if proto.p.shape != (c, 1, 1):
            raise DimensionError(f"prototype {proto.p.shape} does not match query features {xqm.shape}")
        expanded = T.mul(proto.p, Tensor(np.ones((1, h, w))))
        return self.proj(T.concat([xqm, prior.m, expanded], axis=0))


def fuse_query_inputs(xqm: Tensor, prior: PriorMask, proto: Prototype, fusion: QueryFusion) -> Tensor:
    return fusion(xqm, prior, proto)


class MultiScaleDecoder(Module):
    """Parallel branches at several pooled scales with a top-down path.

    ``factors`` lists the pooling factor of each branch, finest first. Each
    branch is ``1x1 conv -> ReLU -> (+ upsampled coarser branch) -> 3x3 conv
    -> ReLU``; a final 1x1 convolution maps the finest branch back to
    ``dim`` channels. ``factors=(1,)`` is a plain conv stack.
    """

    def __init__(self, dim: int, rng: SplitMix64, factors: tuple[int, ...] = (1, 2, 4)):
        super().__init__()
        if not factors or factors[0] != 1 or list(factors) != sorted(factors):
            raise ValueError(f"factors must start at 1 and increase, got {factors}")
        self.dim = dim
        self.factors = tuple(factors)
        for i, _ in enumerate(self.factors):
            setattr(self, f"reduce{i}", Conv2d(dim, dim, 1, rng))
            setattr(self, f"refine{i}", Conv2d(dim, dim, 3, rng))
        self.out = Conv2d(dim, dim, 1, rng)

    def __call__(self, x: Tensor) -> Tensor:
        h, w = x.shape[-2:]
        coarser = None
        for i in reversed(range(len(self.factors))):
            f = self.factors[i]
            bh, bw = max(1, h // f), max(1, w // f)
            b = T.relu(getattr(self, f"reduce{i}")(T.adaptive_avg_pool2d(x, bh, bw)))
            if coarser is not None:
                b = b + T.bilinear_resize(coarser, bh, bw)
            coarser = T.relu(getattr(self, f"refine{i}")(b))
        return self.out(coarser)


def enrich_features(x: Tensor, decoder: MultiScaleDecoder) -> Tensor:
    return decoder(x)
