"""Class prototypes from support features and the training-free prior mask."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .exceptions import ContractError, DimensionError, EmptySupportWarning
from .tensor import Tensor

POOL_EPS = 1e-6
FLAT_RANGE = 1e-6
COSINE_EPS = 1e-8


@dataclass
class Prototype:
    p: Tensor  # [C, 1, 1]
    shots: int = 1

    @property
    def vector(self) -> Tensor:
        return self.p.reshape(-1)


@dataclass
class PriorMask:
    m: Tensor  # [1, h, w], values in [0, 1], never on the tape


def _mask_array(mask) -> np.ndarray:
    m = mask.data if isinstance(mask, Tensor) else np.asarray(mask, dtype=np.float64)
    if m.ndim == 2:
        m = m[None]
    return m


def masked_average_pool(x: Tensor, mask) -> Prototype:
    """Soft masked mean of ``x`` (``[C, h, w]``) under ``mask`` (``[1, H, W]``).

    The mask is bilinearly resized to ``h x w`` and used as pixel weights.
    An empty mask yields a zero prototype and an :class:`EmptySupportWarning`.
    """
    m = _mask_array(mask)
    if m.min() < 0 or m.max() > 1:
        raise ContractError("support mask values must lie in [0, 1]")
    h, w = x.shape[-2:]
    m = T.resize_array(m.astype(np.float64), h, w)
    total = float(m.sum())
    if total <= 0.0:
        warnings.warn("empty support foreground: prototype set to zero", EmptySupportWarning, stacklevel=2)
    weights = Tensor(m / max(total, POOL_EPS))
    p = T.sum(x * weights, axis=(-2, -1), keepdims=True)
    return Prototype(p, 1)


def average_prototypes(protos: list[Prototype]) -> Prototype:
    """Elementwise mean of the per-shot prototypes."""
    if not protos:
        raise ContractError("average_prototypes needs at least one prototype")
    shapes = {pr.p.shape for pr in protos}
    if len(shapes) != 1:
        raise DimensionError(f"prototypes disagree on shape: {sorted(shapes)}")
    if len(protos) == 1:
        return Prototype(protos[0].p, 1)
    acc = protos[0].p
    for pr in protos[1:]:
        acc = acc + pr.p
    return Prototype(acc * (1.0 / len(protos)), len(protos))


def _cosine_matrix(q: np.ndarray, s: np.ndarray) -> np.ndarray:
    """Cosine similarity between columns of ``q`` [C, Nq] and ``s`` [C, Ns]."""
    qn = np.linalg.norm(q, axis=0)
    sn = np.linalg.norm(s, axis=0)
    sim = (q.T @ s) / (qn[:, None] * sn[None, :] + COSINE_EPS)
    # zero feature vectors have no direction
    sim[qn == 0, :] = 0.0
    sim[:, sn == 0] = 0.0
    return sim


def prior_mask(q5, s5, support_mask) -> PriorMask:
    """Per query pixel, the best cosine match among support foreground pixels,
    min-max normalised over the query map.

    The support mask is resized to the feature size and thresholded at 0.5.
    Computed outside the tape; a constant response normalises to zeros.
    """
    qa = q5.data if isinstance(q5, Tensor) else np.asarray(q5)
    sa = s5.data if isinstance(s5, Tensor) else np.asarray(s5)
    if qa.shape[0] != sa.shape[0]:
        raise DimensionError(f"prior_mask channel mismatch: {qa.shape} vs {sa.shape}")
    c, h, w = qa.shape
    m = _mask_array(support_mask)
    fg = T.resize_array(m.astype(np.float64), sa.shape[1], sa.shape[2])[0] >= 0.5
    if not fg.any():
        warnings.warn("empty support foreground: prior mask set to zero", EmptySupportWarning, stacklevel=2)
        return PriorMask(Tensor(np.zeros((1, h, w))))
    q = qa.reshape(c, -1).astype(np.float64)
    s = sa.reshape(c, -1)[:, fg.reshape(-1)].astype(np.float64)
    r = _cosine_matrix(q, s).max(axis=1)
    lo, hi = r.min(), r.max()
    # a flat response carries no location; rounding noise must not be stretched to [0, 1]
    r = np.zeros_like(r) if hi - lo <= FLAT_RANGE else (r - lo) / (hi - lo)
    return PriorMask(Tensor(r.reshape(1, h, w)))


def average_prior_masks(masks: list[PriorMask]) -> PriorMask:
    if not masks:
        raise ContractError("average_prior_masks needs at least one mask")
    shapes = {pm.m.shape for pm in masks}
    if len(shapes) != 1:
        raise DimensionError(f"prior masks disagree on shape: {sorted(shapes)}")
    return PriorMask(Tensor(np.mean([pm.m.data for pm in masks], axis=0)))
