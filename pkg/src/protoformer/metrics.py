"""IoU metrics and the held-out fold evaluation protocol.

Per-class IoU pools intersections and unions over all episodes of the class
before dividing; mIoU is the unweighted mean over classes. FB-IoU pools
foreground and background IoU over every episode regardless of class. An
empty prediction on an empty ground truth scores 1.0.
"""

from __future__ import annotations

import csv
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import DatasetSplit, Manifest, sample_episode, write_tensor
from .exceptions import ContractError, DimensionError
from .model import ProtoFormerNet, hard_mask
from .rng import SplitMix64
from .tensor import no_grad


def _binary_pair(pred, gt) -> tuple[np.ndarray, np.ndarray]:
    p, g = np.asarray(pred), np.asarray(gt)
    if p.shape != g.shape:
        raise DimensionError(f"mask shapes differ: {p.shape} vs {g.shape}")
    if not (np.isin(p, (0, 1)).all() and np.isin(g, (0, 1)).all()):
        raise ContractError("iou expects binary masks")
    return p.astype(bool), g.astype(bool)


def iou(pred, gt) -> float:
    p, g = _binary_pair(pred, gt)
    union = np.count_nonzero(p | g)
    return 1.0 if union == 0 else np.count_nonzero(p & g) / union


@dataclass(frozen=True)
class EpisodeResult:
    """Pixel counts of one binary prediction against its ground truth."""

    class_id: int
    tp: int
    fp: int
    fn: int
    tn: int

    @classmethod
    def from_masks(cls, class_id: int, pred, gt) -> "EpisodeResult":
        p, g = _binary_pair(pred, gt)
        tp = int(np.count_nonzero(p & g))
        fp = int(np.count_nonzero(p & ~g))
        fn = int(np.count_nonzero(~p & g))
        return cls(class_id, tp, fp, fn, p.size - tp - fp - fn)


def _ratio(num: int, den: int) -> float:
    return 1.0 if den == 0 else num / den


def per_class_iou(results) -> dict[int, float]:
    inter = defaultdict(int)
    union = defaultdict(int)
    for r in results:
        inter[r.class_id] += r.tp
        union[r.class_id] += r.tp + r.fp + r.fn
    return {c: _ratio(inter[c], union[c]) for c in sorted(inter)}


def miou(results) -> float:
    results = list(results)
    if not results:
        raise ContractError("miou needs at least one episode result")
    per_class = per_class_iou(results)
    return float(np.mean(list(per_class.values())))


def fb_iou(results) -> float:
    results = list(results)
    if not results:
        raise ContractError("fb_iou needs at least one episode result")
    tp = sum(r.tp for r in results)
    fp = sum(r.fp for r in results)
    fn = sum(r.fn for r in results)
    tn = sum(r.tn for r in results)
    return 0.5 * (_ratio(tp, tp + fp + fn) + _ratio(tn, tn + fp + fn))


@dataclass
class MetricReport:
    per_class_iou: dict[int, float]
    miou: float
    fb_iou: float
    fold_index: int
    episode_count: int
    shots: int
    results: list[EpisodeResult] = field(default_factory=list, repr=False)

    @classmethod
    def from_results(cls, results, fold_index: int, shots: int) -> "MetricReport":
        results = list(results)
        return cls(per_class_iou(results), miou(results), fb_iou(results), fold_index, len(results), shots, results)


def _weights_digest(net: ProtoFormerNet) -> list[bytes]:
    return [p.data.tobytes() for p in net.parameters()]


def evaluate_fold(
    net: ProtoFormerNet,
    split: DatasetSplit,
    manifest: Manifest,
    k: int,
    episodes: int = 1000,
    rng: SplitMix64 | None = None,
    dump_dir=None,
    predictor=None,
) -> MetricReport:
    """Score ``episodes`` test-class episodes without touching the weights.

    ``predictor(episode) -> binary mask`` replaces the network when given
    (used for oracle checks). With ``dump_dir`` every predicted mask is
    written as a tensor file.
    """
    rng = rng or SplitMix64(0)
    before = _weights_digest(net) if net is not None else None
    if dump_dir is not None:
        Path(dump_dir).mkdir(parents=True, exist_ok=True)
    results = []
    with no_grad():
        for i in range(episodes):
            ep = sample_episode(split, manifest, k, rng, train=False)
            gt = ep.query_mask[0]
            if predictor is not None:
                pred = np.asarray(predictor(ep)).reshape(gt.shape)
            else:
                out = net.forward([ep])[0]
                pred = hard_mask(out.pred, *gt.shape)[0]
            results.append(EpisodeResult.from_masks(ep.class_id, pred, gt))
            if dump_dir is not None:
                write_tensor(Path(dump_dir) / f"episode_{i:05d}_class{ep.class_id}.ptns", pred[None].astype(np.float32))
    if net is not None and _weights_digest(net) != before:
        raise AssertionError("weights changed during evaluation")
    return MetricReport.from_results(results, split.fold_index, k)


def write_report_csv(path, reports: list[MetricReport]):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["fold", "shots", "class", "iou", "miou", "fb_iou", "episodes"])
        for r in reports:
            for c, value in r.per_class_iou.items():
                w.writerow([r.fold_index, r.shots, c, f"{value:.6f}", "", "", ""])
            w.writerow([r.fold_index, r.shots, "all", "", f"{r.miou:.6f}", f"{r.fb_iou:.6f}", r.episode_count])
        if len(reports) > 1:
            w.writerow(
                ["mean", "", "", "", f"{np.mean([r.miou for r in reports]):.6f}", f"{np.mean([r.fb_iou for r in reports]):.6f}", ""]
            )


def format_report(reports: list[MetricReport]) -> str:
    lines = []
    for r in reports:
        lines.append(f"fold {r.fold_index}  {r.shots}-shot  episodes {r.episode_count}")
        for c, value in r.per_class_iou.items():
            lines.append(f"  class {c:3d}  IoU {value:.4f}")
        lines.append(f"  mIoU {r.miou:.4f}  FB-IoU {r.fb_iou:.4f}")
    if len(reports) > 1:
        lines.append(f"mean  mIoU {np.mean([r.miou for r in reports]):.4f}  FB-IoU {np.mean([r.fb_iou for r in reports]):.4f}")
    return "\n".join(lines)
