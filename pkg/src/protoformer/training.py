"""Dice loss, Adam and the episodic training loop."""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .config import Config
from .data import Manifest, jitter_colours, read_manifest, sample_episode, split_folds
from .decoder import PredictedMask
from .exceptions import ContractError
from .model import ProtoFormerNet, build_model, upsample_logits
from .rng import SplitMix64
from .tensor import Tensor, backward

log = logging.getLogger(__name__)

DICE_EPS = 1.0


def dice_loss(pred, gt, eps: float = DICE_EPS) -> Tensor:
    """``1 - (2 sum(p g) + eps) / (sum(p) + sum(g) + eps)``.

    ``pred`` is a :class:`PredictedMask` (its logits are upsampled to the
    ground-truth size before the sigmoid) or a probability tensor.
    """
    g = np.asarray(gt.data if isinstance(gt, Tensor) else gt)
    if not np.isin(g, (0.0, 1.0)).all():
        raise ContractError("ground-truth mask must be binary {0, 1}")
    if g.ndim == 2:
        g = g[None]
    h, w = g.shape[-2:]
    if isinstance(pred, PredictedMask):
        p = upsample_logits(pred, h, w)
    else:
        p = T.bilinear_resize(pred, h, w) if pred.shape[-2:] != (h, w) else pred
    gt_t = Tensor(g.reshape(p.shape))
    inter = T.sum(p * gt_t)
    return 1.0 - (2.0 * inter + eps) / (T.sum(p) + float(g.sum()) + eps)


@dataclass
class LossReport:
    loss: float
    dice: list[float]
    ep: int


def batch_loss(net: ProtoFormerNet, episodes, outputs=None) -> tuple[Tensor, LossReport]:
    """Mean dice loss over a batch of episodes; ``outputs`` reuses an existing forward pass."""
    outs = outputs if outputs is not None else net.forward(episodes)
    losses = [dice_loss(o.pred, ep.query_mask) for o, ep in zip(outs, episodes)]
    total = losses[0]
    for item in losses[1:]:
        total = total + item
    loss = total * (1.0 / len(losses))
    return loss, LossReport(loss.item(), [x.item() for x in losses], len(losses))


@dataclass
class OptimizerState:
    lr: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict[str, Tensor], state: OptimizerState):
    """One bias-corrected Adam update of every parameter in ``params`` (in place)."""
    for name, p in params.items():
        if p.requires_grad and p.grad is None:
            raise ContractError(f"parameter {name!r} has no gradient")
    state.step += 1
    b1, b2 = state.betas
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for name, p in params.items():
        if not p.requires_grad:
            continue
        g = p.grad
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data = p.data - (state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.dtype)


@dataclass
class TrainResult:
    net: ProtoFormerNet
    losses: list[float]
    checkpoint: Path | None = None
    seconds: float = 0.0


def train_run(config: Config, dataset, out_dir=None, net: ProtoFormerNet | None = None) -> TrainResult:
    """Episodic training on the train classes of ``config.fold``.

    ``dataset`` is a :class:`Manifest` or a manifest path. With ``out_dir``
    the checkpoint and ``loss.csv`` are written there.
    """
    manifest = dataset if isinstance(dataset, Manifest) else read_manifest(dataset)
    split = split_folds(manifest.num_classes, config.num_folds, config.fold)
    root = SplitMix64(config.seed)
    net = net or build_model(config)
    sampler = root.spawn(100)
    jitter = root.spawn(101)
    state = OptimizerState(lr=config.lr)
    params = net.trainable_parameters()
    losses = []
    start = time.perf_counter()
    for step in range(config.steps):
        episodes = [sample_episode(split, manifest, config.shots, sampler) for _ in range(config.batch)]
        if config.colour_jitter:
            episodes = [jitter_colours(ep, jitter) for ep in episodes]
        net.zero_grad()
        loss, report = batch_loss(net, episodes)
        backward(loss)
        adam_step(params, state)
        losses.append(report.loss)
        if config.log_every and (step + 1) % config.log_every == 0:
            recent = float(np.mean(losses[-config.log_every :]))
            log.info("step %d/%d loss %.4f (%.1fs)", step + 1, config.steps, recent, time.perf_counter() - start)
    result = TrainResult(net, losses, seconds=time.perf_counter() - start)
    if out_dir is not None:
        from .checkpoint import save_checkpoint

        out = Path(out_dir)
        result.checkpoint = save_checkpoint(net, out / "checkpoint")
        write_loss_csv(out / "loss.csv", losses)
    return result


def write_loss_csv(path, losses: list[float]):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "loss"])
        for i, value in enumerate(losses, 1):
            writer.writerow([i, repr(float(value))])
