"""Flat ``key = value`` run configuration."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path

from .exceptions import ConfigError

PIXEL_DECODERS = ("fem", "conv")


@dataclass
class Config:
    # model
    dim: int = 64
    n_heads: int = 1
    d_ff: int = 0  # 0 means 4 * dim
    decoder_layers: int = 1
    use_transformer: bool = True
    use_prior: bool = True
    pixel_decoder: str = "fem"
    backbone_widths: tuple = (16, 32, 64)
    c4_channels: int = 128
    c5_channels: int = 128
    freeze_backbone: bool = False
    # data / protocol
    image_size: int = 64
    shots: int = 1
    fold: int = 0
    num_folds: int = 4
    manifest: str = ""
    eval_episodes: int = 1000
    # optimisation
    lr: float = 3e-4
    batch: int = 8
    steps: int = 2000
    seed: int = 0
    out_dir: str = "runs/train"
    log_every: int = 100
    colour_jitter: bool = True
    backbone_weights: str = ""

    def __post_init__(self):
        self.validate()

    @property
    def ffn_width(self) -> int:
        return self.d_ff or 4 * self.dim

    def validate(self):
        if self.dim < 1:
            raise ConfigError(f"dim must be positive, got {self.dim}")
        if self.n_heads < 1 or self.dim % self.n_heads:
            raise ConfigError(f"dim {self.dim} must be divisible by n_heads {self.n_heads}")
        if self.d_ff < 0:
            raise ConfigError(f"d_ff must be >= 0, got {self.d_ff}")
        if self.decoder_layers < 1:
            raise ConfigError(f"decoder_layers must be >= 1, got {self.decoder_layers}")
        if self.image_size < 8 or self.image_size % 8:
            raise ConfigError(f"image_size must be a positive multiple of 8, got {self.image_size}")
        if self.shots < 1:
            raise ConfigError(f"shots must be >= 1, got {self.shots}")
        if self.num_folds < 1 or not 0 <= self.fold < self.num_folds:
            raise ConfigError(f"fold {self.fold} out of range for {self.num_folds} folds")
        if self.pixel_decoder not in PIXEL_DECODERS:
            raise ConfigError(f"pixel_decoder must be one of {PIXEL_DECODERS}, got {self.pixel_decoder!r}")
        if len(self.backbone_widths) != 3 or min(self.backbone_widths) < 1:
            raise ConfigError(f"backbone_widths needs three positive ints, got {self.backbone_widths}")
        if self.lr < 0:
            raise ConfigError(f"lr must be >= 0, got {self.lr}")
        if self.batch < 1 or self.steps < 0 or self.eval_episodes < 1:
            raise ConfigError("batch and eval_episodes must be >= 1 and steps >= 0")

    def replace(self, **changes) -> "Config":
        return dataclasses.replace(self, **changes)

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            value = getattr(self, f.name)
            if isinstance(value, bool):
                value = "true" if value else "false"
            elif isinstance(value, tuple):
                value = ",".join(str(v) for v in value)
            elif isinstance(value, float):
                value = repr(value)
            lines.append(f"{f.name} = {value}")
        return "\n".join(lines) + "\n"

    def save(self, path):
        Path(path).write_text(self.to_text(), encoding="utf-8")


# `dim` is the name used in ablation tables; accept a few aliases
ALIASES = {"C": "dim", "channels": "dim", "layers": "decoder_layers", "k": "shots"}

_BOOL = {"true": True, "yes": True, "on": True, "1": True, "false": False, "no": False, "off": False, "0": False}


def _convert(name: str, raw: str, default):
    try:
        if isinstance(default, bool):
            return _BOOL[raw.lower()]
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            return tuple(int(v) for v in raw.split(",") if v.strip())
    except (KeyError, ValueError):
        raise ConfigError(f"cannot parse value {raw!r} for key {name!r}") from None
    return raw


def parse_pairs(text: str, source: str = "<config>") -> dict[str, str]:
    pairs = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        pairs[key] = value
    return pairs


def parse_config(path=None, overrides: dict | None = None, text: str | None = None) -> Config:
    """Read a config file (or ``text``) and apply ``overrides`` on top.

    Unknown keys raise :class:`ConfigError`. Override values may be typed
    or strings.
    """
    if text is None and path is not None:
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
    pairs = parse_pairs(text or "", str(path or "<config>"))
    pairs.update({k: v for k, v in (overrides or {}).items() if v is not None})
    known = {f.name: f for f in fields(Config)}
    kwargs = {}
    for key, raw in pairs.items():
        name = ALIASES.get(key, key)
        if name not in known:
            raise ConfigError(f"unknown config key {key!r}")
        default = known[name].default
        kwargs[name] = _convert(key, raw, default) if isinstance(raw, str) else raw
    return Config(**kwargs)
