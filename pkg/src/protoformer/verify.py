"""Gradient verification suite: every differentiable op plus the full network.

Each op check reduces the op output against a fixed random weighting so the
upstream gradient is not uniform, then compares analytic and central
difference gradients in float64.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .config import Config
from .data import Episode
from .decoder import PredictedMask
from .model import build_model
from .nn import LayerNorm
from .prototype import masked_average_pool
from .rng import SplitMix64
from .tensor import GradCheckReport, Tensor, grad_check_report, precision
from .training import dice_loss

TOLERANCE = 1e-4


@dataclass
class CheckResult:
    name: str
    report: GradCheckReport

    @property
    def passed(self) -> bool:
        return self.report.checked > 0 and self.report.max_error < TOLERANCE


def _weighted(out: Tensor, w: np.ndarray) -> Tensor:
    return T.sum(out * Tensor(w.reshape(out.shape)))


def _op_cases(rng: SplitMix64):
    """``(name, f, inputs)``; ``f`` takes all inputs, each one is checked in turn."""

    def r(*shape, low=-1.0, high=1.0):
        return Tensor(rng.uniform(shape, low, high))

    def away_from_zero(*shape):
        # keep relu inputs clear of the kink
        x = rng.uniform(shape, 0.1, 1.0) * np.where(rng.uniform(shape) < 0.5, -1.0, 1.0)
        return Tensor(x)

    mask = (rng.uniform((1, 6, 6)) > 0.4).astype(np.float64)
    mask[0, 0, 0] = 1.0
    gt = (rng.uniform((1, 8, 8)) > 0.5).astype(np.float64)
    ln = LayerNorm(5)
    ln.gamma.data = rng.uniform((5,), 0.5, 1.5)
    ln.beta.data = rng.uniform((5,), -0.5, 0.5)
    cases = [
        ("add", lambda a, b: a + b, [r(3, 4), r(4)]),
        ("sub", lambda a, b: a - b, [r(3, 4), r(3, 1)]),
        ("mul", lambda a, b: a * b, [r(3, 4), r(1, 4)]),
        ("div", lambda a, b: a / b, [r(3, 4), r(3, 4, low=0.5, high=2.0)]),
        ("relu", T.relu, [away_from_zero(4, 5)]),
        ("sigmoid", T.sigmoid, [r(4, 5, low=-4, high=4)]),
        ("reshape", lambda a: a.reshape(6, 2), [r(3, 4)]),
        ("transpose", lambda a: a.transpose(2, 0, 1), [r(2, 3, 4)]),
        ("getitem", lambda a: a[1:, ::2], [r(3, 4)]),
        ("concat", lambda a, b: T.concat([a, b], axis=1), [r(2, 3), r(2, 2)]),
        ("sum", lambda a: T.sum(a, axis=1, keepdims=True), [r(3, 4)]),
        ("mean", lambda a: T.mean(a, axis=0), [r(3, 4)]),
        ("matmul", lambda a, b: a @ b, [r(2, 3, 4), r(2, 4, 5)]),
        ("softmax", lambda a: T.softmax(a, axis=-1), [r(3, 5, low=-3, high=3)]),
        ("layer_norm", lambda a, g, b: T.layer_norm(a, g, b), [r(3, 5), ln.gamma, ln.beta]),
        ("conv2d", lambda x, w, b: T.conv2d(x, w, b), [r(2, 6, 6), r(3, 2, 3, 3), r(3)]),
        ("conv2d_dilated", lambda x, w, b: T.conv2d(x, w, b, dilation=2), [r(2, 6, 6), r(3, 2, 3, 3), r(3)]),
        ("conv2d_1x1_batched", lambda x, w, b: T.conv2d(x, w, b), [r(2, 3, 4, 4), r(2, 3, 1, 1), r(2)]),
        ("avg_pool2d", lambda x: T.avg_pool2d(x, 2), [r(2, 6, 6)]),
        ("bilinear_resize", lambda x: T.bilinear_resize(x, 7, 9), [r(2, 3, 4)]),
        ("adaptive_avg_pool2d", lambda x: T.adaptive_avg_pool2d(x, 2, 3), [r(2, 5, 7)]),
        ("masked_average_pool", lambda x: masked_average_pool(x, mask).p, [r(3, 6, 6)]),
        ("dice_loss", lambda x: _dice(x, gt), [r(1, 4, 4, low=-2, high=2)]),
    ]
    return cases


def _dice(logits: Tensor, gt: np.ndarray) -> Tensor:
    return dice_loss(PredictedMask(logits, T.sigmoid(logits)), gt)


def check_ops(seed: int = 0) -> list[CheckResult]:
    rng = SplitMix64(seed)
    results = []
    with precision(np.float64):
        for name, f, inputs in _op_cases(rng):
            with T.no_grad():
                out_shape = f(*inputs).shape
            w = rng.uniform(out_shape, -1.0, 1.0) if out_shape else np.ones(())
            for idx, x in enumerate(inputs):
                report = grad_check_report(lambda _x: _weighted(f(*inputs), w), x)
                label = name if len(inputs) == 1 else f"{name}[arg{idx}]"
                results.append(CheckResult(label, report))
    return results


def toy_episode(rng: SplitMix64, size: int = 8, shots: int = 1) -> Episode:
    def image():
        return rng.uniform((3, size, size)).astype(np.float32)

    def mask():
        # mostly foreground so the prior mask is non-trivial at 1/8 scale
        m = (rng.uniform((1, size, size)) > 0.25).astype(np.float32)
        m[0, 0, 0] = 0.0
        return m

    return Episode([(image(), mask()) for _ in range(shots)], image(), mask(), class_id=0)


def check_pipeline(seed: int = 0, size: int = 8, coords_per_param: int = 4, config: Config | None = None) -> list[CheckResult]:
    """Dice loss of one ``size x size`` episode against every trainable tensor.

    The prior mask is a detached, training-free input, so it is computed once
    at the unperturbed weights and held fixed while differencing.
    """
    rng = SplitMix64(seed)
    config = config or Config(image_size=size, seed=seed)
    episode = toy_episode(rng, size)
    net = build_model(config).astype(np.float64)
    with precision(np.float64):
        prior = net.forward([episode])[0].prior

        def loss(_):
            return dice_loss(net.forward([episode], prior_override=prior)[0].pred, episode.query_mask)

        results = []
        for name, p in net.named_parameters(trainable_only=True):
            report = grad_check_report(loss, p, max_coords=coords_per_param, rng=rng)
            results.append(CheckResult(f"pipeline:{name}", report))
    return results


def run_suite(seed: int = 0) -> tuple[list[CheckResult], float]:
    """All op and pipeline checks with the elapsed seconds."""
    start = time.perf_counter()
    results = check_ops(seed) + check_pipeline(seed)
    return results, time.perf_counter() - start
