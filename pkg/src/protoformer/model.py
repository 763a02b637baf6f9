"""The assembled network and its end-to-end episode forward pass."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .backbone import Backbone, MidLevelMerge
from .config import Config
from .decoder import MaskEmbedding, PredictedMask, ProtoQueryDecoder, predict_mask
from .data import Episode
from .nn import Conv2d, Module
from .pixel_decoder import MultiScaleDecoder, QueryFusion
from .prototype import (
    PriorMask,
    Prototype,
    average_prior_masks,
    average_prototypes,
    masked_average_pool,
    prior_mask,
)
from .rng import SplitMix64
from .tensor import Tensor

FEM_FACTORS = (1, 2, 4)


@dataclass
class EpisodeOutput:
    pred: PredictedMask
    embedding: MaskEmbedding | None
    prototype: Prototype
    prior: PriorMask
    intermediates: dict = field(default_factory=dict)


class ProtoFormerNet(Module):
    """Backbone, prototype/prior, pixel decoder and prototype-as-Query decoder.

    With ``use_transformer=False`` the decoder branch is dropped and a 1x1
    convolution on the pixel embeddings predicts the mask (ablation baseline).
    """

    def __init__(self, config: Config, rng: SplitMix64):
        super().__init__()
        self.config = config
        c = config.dim
        self.backbone = Backbone(rng.spawn(1), config.backbone_widths, config.c4_channels, config.c5_channels)
        self.merge = MidLevelMerge(config.backbone_widths[2], config.c4_channels, c, rng.spawn(2))
        self.fusion = QueryFusion(c, rng.spawn(3))
        factors = FEM_FACTORS if config.pixel_decoder == "fem" else (1,)
        self.pixel_decoder = MultiScaleDecoder(c, rng.spawn(4), factors)
        if config.use_transformer:
            self.decoder = ProtoQueryDecoder(c, rng.spawn(5), config.n_heads, config.ffn_width, config.decoder_layers)
        else:
            self.head = Conv2d(c, 1, 1, rng.spawn(6))
        if config.freeze_backbone:
            self.backbone.freeze()

    def trainable_parameters(self) -> dict[str, Tensor]:
        return dict(self.named_parameters(trainable_only=True))

    def __call__(self, episodes, prior_override=None) -> list[EpisodeOutput]:
        return self.forward(episodes, prior_override)

    def forward(self, episodes: list[Episode], prior_override=None) -> list[EpisodeOutput]:
        """Run a batch of episodes; every image goes through the backbone in one pass.

        ``prior_override`` (a :class:`PriorMask`, an array, or a list of
        either, one per episode) replaces the computed prior mask.
        """
        images = []
        for ep in episodes:
            images.extend(img for img, _ in ep.supports)
            images.append(ep.query_image)
        feats = self.backbone(Tensor(np.stack(images)))
        xm = self.merge(feats.c3, feats.c4)
        c5 = feats.c5.data
        outputs = []
        offset = 0
        for i, ep in enumerate(episodes):
            k = ep.shots
            support_ids = range(offset, offset + k)
            q = offset + k
            offset += k + 1
            proto = average_prototypes([masked_average_pool(xm[j], ep.supports[n][1]) for n, j in enumerate(support_ids)])
            override = prior_override[i] if isinstance(prior_override, (list, tuple)) else prior_override
            prior = self._prior(c5, q, support_ids, ep, override)
            outputs.append(self.head_forward(xm[q], proto, prior))
        return outputs

    def _prior(self, c5: np.ndarray, q: int, support_ids, ep: Episode, override) -> PriorMask:
        h, w = c5.shape[-2:]
        if override is not None:
            m = override.m.data if isinstance(override, PriorMask) else np.asarray(override)
            return PriorMask(Tensor(np.asarray(m).reshape(1, h, w)))
        if not self.config.use_prior:
            return PriorMask(Tensor(np.zeros((1, h, w))))
        return average_prior_masks([prior_mask(c5[q], c5[j], ep.supports[n][1]) for n, j in enumerate(support_ids)])

    def head_forward(self, xqm: Tensor, proto: Prototype, prior: PriorMask) -> EpisodeOutput:
        """Everything downstream of the features: fusion, pixel decoder, mask head."""
        fused = self.fusion(xqm, prior, proto)
        enriched = self.pixel_decoder(fused)
        if self.config.use_transformer:
            emb = self.decoder(proto, xqm)
            pred = predict_mask(emb.q, enriched)
        else:
            emb = None
            logits = self.head(enriched)
            pred = PredictedMask(logits, T.sigmoid(logits))
        return EpisodeOutput(pred, emb, proto, prior, {"xqm": xqm, "fused": fused, "enriched": enriched})


def build_model(config: Config, seed: int | None = None) -> ProtoFormerNet:
    """Fresh network for ``config``; backbone weights come from
    ``config.backbone_weights`` (a checkpoint directory) when set."""
    net = ProtoFormerNet(config, SplitMix64(config.seed if seed is None else seed).spawn(0))
    if config.backbone_weights:
        load_backbone_weights(net, config.backbone_weights)
    return net


def load_backbone_weights(net: ProtoFormerNet, directory):
    """Copy every ``backbone.*`` tensor of a checkpoint into ``net``."""
    from .checkpoint import read_state

    state = {k[len("backbone."):]: v for k, v in read_state(directory).items() if k.startswith("backbone.")}
    net.backbone.load_state_dict(state)


def forward_episode(ep: Episode, net: ProtoFormerNet, prior_override=None) -> EpisodeOutput:
    return net.forward([ep], prior_override)[0]


def upsample_logits(pred: PredictedMask, out_h: int, out_w: int) -> Tensor:
    """Mask probabilities at ``out_h x out_w``.

    Interpolation is bilinear on the logits, followed by the sigmoid.
    """
    return T.sigmoid(T.bilinear_resize(pred.logits, out_h, out_w))


def hard_mask(pred: PredictedMask, out_h: int, out_w: int) -> np.ndarray:
    """Binary mask at full resolution, threshold 0.5 on the probabilities."""
    logits = T.resize_array(pred.logits.data.astype(np.float64), out_h, out_w)
    return (logits > 0).astype(np.uint8)
