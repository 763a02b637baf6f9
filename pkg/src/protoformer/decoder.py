"""Transformer decoder that uses the prototype as its only Query token.

The query-image features supply Keys and Values; the decoder output is a
mask embedding that acts as a dynamic 1x1 kernel over the pixel embeddings.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .exceptions import ConfigError, DimensionError
from .nn import LayerNorm, Linear, Module
from .prototype import Prototype
from .rng import SplitMix64
from .tensor import Tensor


@dataclass
class AttentionTrace:
    weights: np.ndarray  # [heads, Lq, N]
    values: np.ndarray  # [heads, N, d]
    mixed: np.ndarray  # [heads, Lq, d], before the output projection


@dataclass
class MaskEmbedding:
    q: Tensor  # [1, C]
    self_attention: list[AttentionTrace] = field(default_factory=list)
    cross_attention: list[AttentionTrace] = field(default_factory=list)


@dataclass
class PredictedMask:
    logits: Tensor  # [1, h, w]
    m: Tensor  # sigmoid(logits)


class MultiHeadAttention(Module):
    def __init__(self, dim: int, heads: int, rng: SplitMix64):
        super().__init__()
        if dim % heads:
            raise ConfigError(f"dim {dim} is not divisible by n_heads {heads}")
        self.dim = dim
        self.heads = heads
        self.wq = Linear(dim, dim, rng)
        self.wk = Linear(dim, dim, rng)
        self.wv = Linear(dim, dim, rng)
        self.wo = Linear(dim, dim, rng)

    def _split(self, x: Tensor) -> Tensor:
        n = x.shape[0]
        return T.transpose(T.reshape(x, (n, self.heads, self.dim // self.heads)), (1, 0, 2))

    def __call__(self, query: Tensor, kv: Tensor) -> tuple[Tensor, AttentionTrace]:
        lq = query.shape[0]
        q = self._split(self.wq(query))
        k = self._split(self.wk(kv))
        v = self._split(self.wv(kv))
        scores = T.matmul(q, T.transpose(k, (0, 2, 1))) * (1.0 / math.sqrt(self.dim // self.heads))
        weights = T.softmax(scores, axis=-1)
        mixed = T.matmul(weights, v)
        merged = T.reshape(T.transpose(mixed, (1, 0, 2)), (lq, self.dim))
        return self.wo(merged), AttentionTrace(weights.data, v.data, mixed.data)


class DecoderLayer(Module):
    """Self-attention, cross-attention and FFN, each with residual + layer norm."""

    def __init__(self, dim: int, heads: int, d_ff: int, rng: SplitMix64):
        super().__init__()
        self.self_attn = MultiHeadAttention(dim, heads, rng)
        self.norm1 = LayerNorm(dim)
        self.cross_attn = MultiHeadAttention(dim, heads, rng)
        self.norm2 = LayerNorm(dim)
        self.ffn1 = Linear(dim, d_ff, rng)
        self.ffn2 = Linear(d_ff, dim, rng)
        self.norm3 = LayerNorm(dim)

    def __call__(self, t: Tensor, memory: Tensor, emb: MaskEmbedding) -> Tensor:
        sa, trace = self.self_attn(t, t)
        emb.self_attention.append(trace)
        t = self.norm1(t + sa)
        ca, trace = self.cross_attn(t, memory)
        emb.cross_attention.append(trace)
        t = self.norm2(t + ca)
        return self.norm3(t + self.ffn2(T.relu(self.ffn1(t))))


class ProtoQueryDecoder(Module):
    def __init__(self, dim: int, rng: SplitMix64, heads: int = 1, d_ff: int | None = None, layers: int = 1):
        super().__init__()
        if layers < 1:
            raise ConfigError(f"decoder needs at least one layer, got {layers}")
        if dim % heads:
            raise ConfigError(f"dim {dim} is not divisible by n_heads {heads}")
        self.dim = dim
        self.num_layers = layers
        self.pos = Tensor(rng.normal((1, dim), std=0.02), requires_grad=True)
        for i in range(layers):
            setattr(self, f"layer{i}", DecoderLayer(dim, heads, d_ff or 4 * dim, rng))

    def __call__(self, proto: Prototype, xqm: Tensor) -> MaskEmbedding:
        c = xqm.shape[0]
        if c != self.dim:
            raise DimensionError(f"query features have {c} channels, decoder expects {self.dim}")
        memory = T.transpose(T.reshape(xqm, (c, -1)), (1, 0))  # [h*w, C]
        emb = MaskEmbedding(q=None)
        t = T.reshape(proto.p, (1, c))
        for i in range(self.num_layers):
            t = getattr(self, f"layer{i}")(t + self.pos, memory, emb)
        emb.q = t
        return emb


def decode_mask_embedding(proto: Prototype, xqm: Tensor, decoder: ProtoQueryDecoder) -> MaskEmbedding:
    return decoder(proto, xqm)


def mask_logits(q: Tensor, feat: Tensor) -> Tensor:
    """Per-pixel dot product of the ``[1, C]`` embedding with ``[C, h, w]`` features."""
    c, h, w = feat.shape
    if q.shape != (1, c):
        raise DimensionError(f"mask embedding {q.shape} does not match features {feat.shape}")
    return T.reshape(T.matmul(q, T.reshape(feat, (c, h * w))), (1, h, w))


def predict_mask(q, feat: Tensor) -> PredictedMask:
    q = q.q if isinstance(q, MaskEmbedding) else q
    logits = mask_logits(q, feat)
    return PredictedMask(logits, T.sigmoid(logits))
