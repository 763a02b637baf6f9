"""Scikit-learn style wrapper around episodic training and inference."""

from __future__ import annotations

from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator

from .checkpoint import load_checkpoint, save_checkpoint
from .config import Config
from .data import Episode, Manifest, read_manifest, split_folds
from .metrics import evaluate_fold
from .model import hard_mask, upsample_logits
from .rng import SplitMix64
from .tensor import no_grad
from .training import train_run
from .validation import check_image, check_is_fitted, check_support


def _as_episodes(X) -> tuple[list[Episode], bool]:
    if isinstance(X, Episode):
        return [X], True
    episodes = list(X)
    if not all(isinstance(e, Episode) for e in episodes):
        raise TypeError("expected an Episode or a sequence of Episodes")
    return episodes, False


class ProtoFormerSegmenter(BaseEstimator):
    """Few-shot binary segmenter.

    ``fit`` trains episodically on the training classes of ``fold``;
    ``predict`` segments the query image of each episode; ``score`` reports
    mIoU over held-out-class episodes.

    Example::

        seg = ProtoFormerSegmenter(steps=500).fit("data/manifest.txt")
        masks = seg.predict(episodes)
    """

    def __init__(
        self,
        dim=64,
        n_heads=1,
        d_ff=0,
        decoder_layers=1,
        use_transformer=True,
        use_prior=True,
        pixel_decoder="fem",
        freeze_backbone=False,
        shots=1,
        fold=0,
        num_folds=4,
        lr=3e-4,
        batch=8,
        steps=2000,
        seed=0,
        image_size=64,
        colour_jitter=True,
    ):
        self.dim = dim
        self.n_heads = n_heads
        self.d_ff = d_ff
        self.decoder_layers = decoder_layers
        self.use_transformer = use_transformer
        self.use_prior = use_prior
        self.pixel_decoder = pixel_decoder
        self.freeze_backbone = freeze_backbone
        self.shots = shots
        self.fold = fold
        self.num_folds = num_folds
        self.lr = lr
        self.batch = batch
        self.steps = steps
        self.seed = seed
        self.image_size = image_size
        self.colour_jitter = colour_jitter

    def _config(self) -> Config:
        return Config(**self.get_params())

    def fit(self, X, y=None, out_dir=None):
        """Train on a :class:`Manifest` or manifest path. ``y`` is ignored."""
        manifest = X if isinstance(X, Manifest) else read_manifest(X)
        config = self._config()
        result = train_run(config, manifest, out_dir=out_dir)
        self.config_ = config
        self.net_ = result.net
        self.loss_curve_ = list(result.losses)
        self.split_ = split_folds(manifest.num_classes, config.num_folds, config.fold)
        self.n_classes_ = manifest.num_classes
        return self

    def predict_proba(self, X):
        """Foreground probabilities ``[H, W]`` for each episode's query image."""
        check_is_fitted(self)
        episodes, single = _as_episodes(X)
        out = []
        with no_grad():
            for ep in episodes:
                h, w = ep.query_image.shape[-2:]
                pred = self.net_.forward([ep])[0].pred
                out.append(upsample_logits(pred, h, w).data[0].astype(np.float64))
        return out[0] if single else out

    def predict(self, X):
        """Binary ``uint8`` masks ``[H, W]`` for each episode's query image."""
        check_is_fitted(self)
        episodes, single = _as_episodes(X)
        out = []
        with no_grad():
            for ep in episodes:
                h, w = ep.query_image.shape[-2:]
                out.append(hard_mask(self.net_.forward([ep])[0].pred, h, w)[0])
        return out[0] if single else out

    def segment(self, query_image, support_images, support_masks) -> np.ndarray:
        """Binary mask of ``query_image`` from raw support arrays."""
        query = check_image(query_image, "query image")
        supports = check_support(support_images, support_masks)
        if supports[0][0].shape != query.shape:
            raise ValueError(f"support size {supports[0][0].shape} differs from query size {query.shape}")
        ep = Episode(supports, query, np.zeros((1, *query.shape[1:]), np.float32), class_id=-1)
        return self.predict(ep)

    def score(self, X, y=None, episodes=200, shots=None, seed=123):
        """Held-out fold mIoU over ``episodes`` sampled test episodes."""
        check_is_fitted(self)
        manifest = X if isinstance(X, Manifest) else read_manifest(X)
        split = split_folds(manifest.num_classes, self.config_.num_folds, self.config_.fold)
        report = evaluate_fold(self.net_, split, manifest, shots or self.shots, episodes, SplitMix64(seed))
        return report.miou

    def save(self, directory) -> Path:
        check_is_fitted(self)
        return save_checkpoint(self.net_, directory)

    @classmethod
    def load(cls, directory) -> "ProtoFormerSegmenter":
        net = load_checkpoint(directory)
        c = net.config
        est = cls(**{k: getattr(c, k) for k in cls._get_param_names()})
        est.config_ = c
        est.net_ = net
        est.loss_curve_ = []
        return est
