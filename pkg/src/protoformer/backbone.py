"""Shared feature extractor and mid-level feature merging.

The extractor is a small CNN standing in for a dilated ResNet: three stages
of ``conv3x3 -> ReLU -> conv3x3 -> ReLU -> 2x2 average pool`` bring the image
to 1/8 resolution (``c3``); two further stages of dilated 3x3 convolutions
keep that resolution (``c4`` with dilation 2, ``c5`` with dilation 4).
"""

from __future__ import annotations

from dataclasses import dataclass

from . import tensor as T
from .data import read_tensor
from .exceptions import ConfigError, DimensionError
from .nn import Conv2d, Module
from .rng import SplitMix64
from .tensor import Tensor


@dataclass
class FeaturePack:
    """Mid-level (``c3``, ``c4``) and high-level (``c5``) maps at 1/8 resolution.

    Tensors are ``[C, h, w]`` for a single image or ``[N, C, h, w]`` for a batch.
    """

    c3: Tensor
    c4: Tensor
    c5: Tensor

    def __post_init__(self):
        sizes = {t.shape[-2:] for t in (self.c3, self.c4, self.c5)}
        if len(sizes) != 1:
            raise DimensionError(f"feature maps disagree on spatial size: {sorted(sizes)}")

    def __getitem__(self, i) -> "FeaturePack":
        return FeaturePack(self.c3[i], self.c4[i], self.c5[i])


class Backbone(Module):
    """Convolution stacks shared between support and query images."""

    def __init__(
        self,
        rng: SplitMix64,
        widths: tuple[int, int, int] = (16, 32, 64),
        c4: int = 128,
        c5: int = 128,
        in_channels: int = 3,
    ):
        super().__init__()
        self.widths = tuple(widths)
        self.out_channels = (widths[2], c4, c5)
        cin = in_channels
        for s, width in enumerate(widths, start=1):
            setattr(self, f"stage{s}a", Conv2d(cin, width, 3, rng))
            setattr(self, f"stage{s}b", Conv2d(width, width, 3, rng))
            cin = width
        self.stage4a = Conv2d(widths[2], c4, 3, rng, dilation=2)
        self.stage4b = Conv2d(c4, c4, 3, rng, dilation=2)
        self.stage5a = Conv2d(c4, c5, 3, rng, dilation=4)
        self.stage5b = Conv2d(c5, c5, 3, rng, dilation=4)
        # c5 only feeds the detached prior mask, so no gradient ever reaches it
        for p in self.stage5a.parameters() + self.stage5b.parameters():
            p.requires_grad = False
        self.frozen = False

    def freeze(self, frozen: bool = True):
        self.frozen = frozen
        for name, p in self.named_parameters():
            if not name.startswith("stage5"):
                p.requires_grad = not frozen

    def __call__(self, images: Tensor) -> FeaturePack:
        h, w = images.shape[-2:]
        if h % 8 or w % 8:
            raise ConfigError(f"image size {h}x{w} must be divisible by 8")
        x = images
        for s in (1, 2, 3):
            x = T.relu(getattr(self, f"stage{s}a")(x))
            x = T.relu(getattr(self, f"stage{s}b")(x))
            x = T.avg_pool2d(x, 2)
        c3 = x
        c4 = T.relu(self.stage4b(T.relu(self.stage4a(c3))))
        with T.no_grad():
            c5 = T.relu(self.stage5b(T.relu(self.stage5a(c4))))
        return FeaturePack(c3, c4, c5)


class MidLevelMerge(Module):
    """Channel concatenation of ``c3`` and ``c4`` followed by a 1x1 convolution."""

    def __init__(self, c3: int, c4: int, dim: int, rng: SplitMix64):
        super().__init__()
        self.proj = Conv2d(c3 + c4, dim, 1, rng)

    def __call__(self, c3: Tensor, c4: Tensor) -> Tensor:
        if c3.shape[-2:] != c4.shape[-2:]:
            raise DimensionError(f"cannot merge c3 {c3.shape} with c4 {c4.shape}: spatial mismatch")
        return self.proj(T.concat([c3, c4], axis=-3))


def extract_features(image: Tensor, backbone: Backbone) -> FeaturePack:
    """Features of one ``[3, H, W]`` image."""
    return backbone(image)


def merge_midlevel(c3: Tensor, c4: Tensor, merge: MidLevelMerge) -> Tensor:
    return merge(c3, c4)


def read_feature_pack(c3_path, c4_path, c5_path) -> FeaturePack:
    """Load precomputed ``c3``/``c4``/``c5`` maps from tensor files, skipping the extractor."""
    return FeaturePack(read_tensor(c3_path), read_tensor(c4_path), read_tensor(c5_path))
