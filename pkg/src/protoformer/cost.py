"""Analytic attention cost and learnable-parameter counts.

Two attention schemes are compared at width ``C`` over ``N_q`` query-image
positions and ``N_s`` support positions:

* ``proto_query``: one prototype token attends over the ``N_q`` query
  positions. Scores ``N_q*C`` MACs, aggregation ``N_q*C`` MACs.
* ``pixel_wise``: every query position attends over all ``N_s`` support
  positions. Scores ``N_q*N_s*C``, aggregation ``N_q*N_s*C``.

Projections are counted per projection actually applied (``C*C`` MACs per
projected token): Q on the query tokens, K and V on the key/value tokens,
the output projection on the query tokens. Multi-head splitting does not
change MAC counts.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .config import Config

SCHEMES = ("proto_query", "pixel_wise")


@dataclass(frozen=True)
class CostEntry:
    scheme: str
    score_macs: int
    aggregate_macs: int
    projection_macs: dict
    peak_activation_floats: int
    formulas: dict

    @property
    def score_aggregate_macs(self) -> int:
        return self.score_macs + self.aggregate_macs

    @property
    def total_macs(self) -> int:
        return self.score_aggregate_macs + sum(self.projection_macs.values())


def attention_cost(scheme: str, dim: int, nq: int, ns: int, heads: int = 1) -> CostEntry:
    if min(dim, nq, ns, heads) < 1:
        raise ValueError("attention_cost needs positive dim, nq, ns and heads")
    c2 = dim * dim
    if scheme == "proto_query":
        tokens_q, tokens_kv = 1, nq
        score = nq * dim
        formulas = {"score": "N_q*C", "aggregate": "N_q*C", "projections": "C^2*(1 + 2*N_q + 1)"}
    elif scheme == "pixel_wise":
        tokens_q, tokens_kv = nq, ns
        score = nq * ns * dim
        formulas = {"score": "N_q*N_s*C", "aggregate": "N_q*N_s*C", "projections": "C^2*(2*N_q + 2*N_s)"}
    else:
        raise ValueError(f"unknown scheme {scheme!r}; choose from {SCHEMES}")
    projections = {"q": c2 * tokens_q, "k": c2 * tokens_kv, "v": c2 * tokens_kv, "o": c2 * tokens_q}
    # score matrix plus projected Q, K, V
    peak = heads * tokens_q * tokens_kv + dim * (tokens_q + 2 * tokens_kv)
    formulas["peak_activation_floats"] = "heads*Lq*Lkv + C*(Lq + 2*Lkv)"
    return CostEntry(scheme, score, score, projections, peak, formulas)


def cost_model(dim: int, nq: int, ns: int, heads: int = 1) -> dict[str, CostEntry]:
    return {s: attention_cost(s, dim, nq, ns, heads) for s in SCHEMES}


def format_cost_model(model: dict[str, CostEntry]) -> str:
    proto, pixel = model["proto_query"], model["pixel_wise"]
    lines = []
    for e in (proto, pixel):
        lines.append(f"{e.scheme}:")
        lines.append(f"  score+aggregation MACs = {e.score_aggregate_macs:,}  ({e.formulas['score']} + {e.formulas['aggregate']})")
        proj = " ".join(f"{k}={v:,}" for k, v in e.projection_macs.items())
        lines.append(f"  projection MACs = {sum(e.projection_macs.values()):,}  ({e.formulas['projections']}; {proj})")
        lines.append(f"  total MACs = {e.total_macs:,}")
        lines.append(f"  peak activation floats = {e.peak_activation_floats:,}  ({e.formulas['peak_activation_floats']})")
    ratio = pixel.score_aggregate_macs // proto.score_aggregate_macs
    lines.append(f"score+aggregation ratio pixel_wise/proto_query = {ratio:,} (= N_s)")
    return "\n".join(lines)


def measure_attention(dim: int, nq: int, ns: int, repeats: int = 3, seed: int = 0) -> dict[str, float]:
    """Best-of-``repeats`` wall-clock seconds of score+aggregation for both schemes."""
    rng = np.random.default_rng(seed)
    q_tok = rng.standard_normal((1, dim), dtype=np.float32)
    q_pix = rng.standard_normal((nq, dim), dtype=np.float32)
    k_q = rng.standard_normal((nq, dim), dtype=np.float32)
    k_s = rng.standard_normal((ns, dim), dtype=np.float32)

    def attend(q, k):
        s = q @ k.T
        s = np.exp(s - s.max(axis=1, keepdims=True))
        s /= s.sum(axis=1, keepdims=True)
        return s @ k

    timings = {}
    for name, (q, k) in {"proto_query": (q_tok, k_q), "pixel_wise": (q_pix, k_s)}.items():
        best = float("inf")
        for _ in range(repeats):
            t0 = time.perf_counter()
            attend(q, k)
            best = min(best, time.perf_counter() - t0)
        timings[name] = best
    return timings


def count_params(config: Config, include_backbone: bool = False) -> int:
    """Learnable scalars of the network built from ``config``.

    The convolution stages of the backbone are excluded unless
    ``include_backbone`` (the merge 1x1 convolution always counts).
    """
    from .model import build_model

    net = build_model(config)
    total = 0
    for name, p in net.named_parameters():
        if name.startswith("backbone."):
            if not include_backbone or not p.requires_grad:
                continue
        total += p.size
    return int(total)
