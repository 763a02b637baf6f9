"""Few-shot semantic segmentation with a class prototype as the Transformer Query.

Everything runs on a small numpy reverse-mode autodiff engine
(:mod:`protoformer.tensor`).
"""

from .checkpoint import load_checkpoint, save_checkpoint
from .config import Config, parse_config
from .cost import attention_cost, cost_model, count_params
from .data import (
    DatasetSplit,
    Episode,
    Manifest,
    SyntheticSpec,
    gen_synthetic_dataset,
    read_manifest,
    sample_episode,
    split_folds,
)
from .estimator import ProtoFormerSegmenter
from .exceptions import (
    ConfigError,
    ContractError,
    DatasetError,
    DimensionError,
    EmptySupportWarning,
    NotFittedError,
    ProtoFormerError,
    TensorFormatError,
)
from .metrics import EpisodeResult, MetricReport, evaluate_fold, fb_iou, iou, miou
from .model import ProtoFormerNet, build_model, forward_episode, hard_mask
from .rng import SplitMix64
from .tensor import Tensor, backward, grad_check, no_grad, precision
from .training import adam_step, dice_loss, train_run

__version__ = "0.1.0"

__all__ = [
    "Config",
    "ConfigError",
    "ContractError",
    "DatasetError",
    "DatasetSplit",
    "DimensionError",
    "EmptySupportWarning",
    "Episode",
    "EpisodeResult",
    "Manifest",
    "MetricReport",
    "NotFittedError",
    "ProtoFormerError",
    "ProtoFormerNet",
    "ProtoFormerSegmenter",
    "SplitMix64",
    "SyntheticSpec",
    "Tensor",
    "TensorFormatError",
    "adam_step",
    "attention_cost",
    "backward",
    "build_model",
    "cost_model",
    "count_params",
    "dice_loss",
    "evaluate_fold",
    "fb_iou",
    "forward_episode",
    "gen_synthetic_dataset",
    "grad_check",
    "hard_mask",
    "iou",
    "load_checkpoint",
    "miou",
    "no_grad",
    "parse_config",
    "precision",
    "read_manifest",
    "sample_episode",
    "save_checkpoint",
    "split_folds",
    "train_run",
]
