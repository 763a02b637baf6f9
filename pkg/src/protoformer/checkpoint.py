"""Checkpoints: one tensor file per parameter plus a ``name<TAB>file`` index."""

from __future__ import annotations

from pathlib import Path

from .config import parse_config
from .data import read_array, write_tensor
from .model import ProtoFormerNet, build_model

INDEX = "tensors.txt"
CONFIG = "config.txt"


def save_checkpoint(net: ProtoFormerNet, directory) -> Path:
    out = Path(directory)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create checkpoint directory {out}: {exc}") from exc
    lines = []
    for name, p in net.named_parameters():
        fname = name + ".ptns"
        write_tensor(out / fname, p.data)
        lines.append(f"{name}\t{fname}")
    (out / INDEX).write_text("\n".join(lines) + "\n", encoding="utf-8")
    net.config.save(out / CONFIG)
    return out


def read_state(directory) -> dict:
    directory = Path(directory)
    index = directory / INDEX
    try:
        lines = index.read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise OSError(f"cannot read checkpoint index {index}: {exc}") from exc
    state = {}
    for line in lines:
        if line.strip():
            name, fname = line.split("\t")
            state[name] = read_array(directory / fname)
    return state


def load_checkpoint(directory, config=None) -> ProtoFormerNet:
    """Rebuild the network from ``config`` (default: the checkpoint's own) and load weights."""
    directory = Path(directory)
    config = config or parse_config(directory / CONFIG)
    net = build_model(config)
    net.load_state_dict(read_state(directory))
    return net
