"""Episodes, fold splits, the synthetic shape dataset and on-disk formats.

Tensor file layout (little-endian)::

    "PTNS" | version u8 = 1 | dtype u8 = 1 (float32) | rank u32 | rank x u32 extents | payload

Manifest: UTF-8 text, one ``image_path<TAB>mask_path<TAB>class,ids`` record
per line, ``#`` starts a comment line. Paths are relative to the manifest's
directory. Mask files are label maps ``[1, H, W]``: 0 is background and a
pixel of class ``c`` holds ``c + 1``.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import parse_pairs
from .exceptions import ConfigError, ContractError, DatasetError, TensorFormatError
from .rng import SplitMix64
from .tensor import Tensor

MAGIC = b"PTNS"
VERSION = 1
DTYPE_F32 = 1


# ---------------------------------------------------------------------------
# tensor files


def encode_tensor(array) -> bytes:
    a = np.asarray(array.data if isinstance(array, Tensor) else array, dtype="<f4")
    header = MAGIC + struct.pack("<BBI", VERSION, DTYPE_F32, a.ndim) + struct.pack(f"<{a.ndim}I", *a.shape)
    return header + np.ascontiguousarray(a).tobytes()


def decode_tensor(buf: bytes) -> np.ndarray:
    if len(buf) < 4 or buf[:4] != MAGIC:
        raise TensorFormatError("bad magic, expected b'PTNS'", 0)
    if len(buf) < 10:
        raise TensorFormatError("truncated header", len(buf))
    version, dtype, rank = struct.unpack_from("<BBI", buf, 4)
    if version != VERSION:
        raise TensorFormatError(f"unsupported version {version}", 4)
    if dtype != DTYPE_F32:
        raise TensorFormatError(f"unsupported dtype code {dtype}", 5)
    end = 10 + 4 * rank
    if len(buf) < end:
        raise TensorFormatError(f"truncated shape for rank {rank}", len(buf))
    shape = struct.unpack_from(f"<{rank}I", buf, 10)
    nbytes = 4 * int(np.prod(shape, dtype=np.int64))
    if len(buf) < end + nbytes:
        raise TensorFormatError(f"truncated payload, expected {nbytes} bytes", len(buf))
    if len(buf) > end + nbytes:
        raise TensorFormatError("trailing bytes after payload", end + nbytes)
    return np.frombuffer(buf, dtype="<f4", count=nbytes // 4, offset=end).reshape(shape).astype(np.float32)


def write_tensor(path, array):
    path = Path(path)
    try:
        path.write_bytes(encode_tensor(array))
    except OSError as exc:
        raise OSError(f"cannot write tensor file {path}: {exc}") from exc


def read_array(path) -> np.ndarray:
    path = Path(path)
    try:
        buf = path.read_bytes()
    except OSError as exc:
        raise OSError(f"cannot read tensor file {path}: {exc}") from exc
    try:
        return decode_tensor(buf)
    except TensorFormatError as exc:
        raise TensorFormatError(f"{path}: {exc.args[0].rsplit(' (at', 1)[0]}", exc.offset) from None


def read_tensor(path, requires_grad: bool = False) -> Tensor:
    return Tensor(read_array(path), requires_grad=requires_grad)


# ---------------------------------------------------------------------------
# manifest


@dataclass(frozen=True)
class Record:
    image_path: str
    mask_path: str
    class_ids: tuple[int, ...]


@dataclass
class Manifest:
    records: list[Record]
    root: Path = Path(".")
    _cache: dict = field(default_factory=dict, repr=False)

    def __len__(self):
        return len(self.records)

    @property
    def num_classes(self) -> int:
        return 1 + max((c for r in self.records for c in r.class_ids), default=-1)

    def load(self, i: int) -> tuple[np.ndarray, np.ndarray]:
        """Image ``[3, H, W]`` and label map ``[1, H, W]`` of record ``i`` (cached)."""
        if i not in self._cache:
            rec = self.records[i]
            self._cache[i] = (read_array(self.root / rec.image_path), read_array(self.root / rec.mask_path))
        return self._cache[i]

    def with_class(self, c: int) -> list[int]:
        return [i for i, r in enumerate(self.records) if c in r.class_ids]


def read_manifest(path, check_files: bool = True) -> Manifest:
    path = Path(path)
    try:
        lines = path.read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise OSError(f"cannot read manifest {path}: {exc}") from exc
    records = []
    for lineno, line in enumerate(lines, 1):
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise DatasetError(f"{path}:{lineno}: expected 3 tab-separated fields, got {len(parts)}")
        try:
            ids = tuple(int(c) for c in parts[2].split(",") if c.strip())
        except ValueError:
            raise DatasetError(f"{path}:{lineno}: bad class id list {parts[2]!r}") from None
        if any(c < 0 for c in ids):
            raise DatasetError(f"{path}:{lineno}: class ids must be nonnegative")
        rec = Record(parts[0], parts[1], ids)
        if check_files:
            for p in (rec.image_path, rec.mask_path):
                if not (path.parent / p).is_file():
                    raise DatasetError(f"{path}:{lineno}: missing file {path.parent / p}")
        records.append(rec)
    return Manifest(records, path.parent)


def write_manifest(path, records: list[Record]):
    lines = ["# image_path\tmask_path\tclass_ids"]
    lines += [f"{r.image_path}\t{r.mask_path}\t{','.join(map(str, r.class_ids))}" for r in records]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# folds and episodes


@dataclass(frozen=True)
class DatasetSplit:
    train_classes: frozenset
    test_classes: frozenset
    fold_index: int

    def __post_init__(self):
        if self.train_classes & self.test_classes:
            raise ContractError("train and test classes overlap")


def split_folds(num_classes: int, num_folds: int, fold_index: int) -> DatasetSplit:
    """Contiguous, near-equal class blocks; ``fold_index`` is held out for testing."""
    if not 0 < num_folds <= num_classes:
        raise ContractError(f"need 0 < num_folds <= num_classes, got {num_folds} folds for {num_classes} classes")
    if not 0 <= fold_index < num_folds:
        raise ContractError(f"fold_index {fold_index} out of range [0, {num_folds})")
    bounds = [(f * num_classes) // num_folds for f in range(num_folds + 1)]
    test = frozenset(range(bounds[fold_index], bounds[fold_index + 1]))
    train = frozenset(range(num_classes)) - test
    return DatasetSplit(train, test, fold_index)


@dataclass
class Episode:
    supports: list[tuple[np.ndarray, np.ndarray]]  # (image [3,H,W], mask [1,H,W])
    query_image: np.ndarray
    query_mask: np.ndarray
    class_id: int
    indices: tuple[int, ...] = ()  # manifest records used, supports first

    @property
    def shots(self) -> int:
        return len(self.supports)


def sample_episode(split: DatasetSplit, manifest: Manifest, k: int, rng: SplitMix64, train: bool = True) -> Episode:
    """Draw a class uniformly from the train (or test) pool, then ``k + 1``
    distinct images containing it.

    Training episodes never use an image that contains a test class.
    """
    if k < 1:
        raise ContractError(f"shots must be >= 1, got {k}")
    pool = sorted(split.train_classes if train else split.test_classes)
    excluded = split.test_classes if train else frozenset()
    remaining = list(pool)
    while remaining:
        c = remaining[rng.below(len(remaining))]
        candidates = [i for i in manifest.with_class(c) if not excluded.intersection(manifest.records[i].class_ids)]
        if len(candidates) < k + 1:
            remaining.remove(c)
            continue
        picked = [candidates[j] for j in rng.choice(len(candidates), k + 1)]
        pairs = []
        for i in picked:
            image, labels = manifest.load(i)
            pairs.append((image, (labels == c + 1).astype(np.float32)))
        return Episode(pairs[:k], pairs[k][0], pairs[k][1], c, tuple(picked))
    raise DatasetError(f"no class in {pool} has {k + 1} usable images")


def jitter_colours(episode: Episode, rng: SplitMix64, gain: tuple[float, float] = (0.6, 1.4)) -> Episode:
    """Apply one random channel permutation and per-channel gain to every image of an episode.

    Support and query change together, so colour stays a valid matching cue
    while no fixed colour can stand in for a class.
    """
    perm = rng.choice(3, 3)
    scale = rng.uniform(3, *gain).reshape(3, 1, 1)

    def recolour(image):
        return np.clip(image[perm] * scale, 0.0, 1.0).astype(np.float32)

    supports = [(recolour(img), mask) for img, mask in episode.supports]
    return Episode(supports, recolour(episode.query_image), episode.query_mask, episode.class_id, episode.indices)


# ---------------------------------------------------------------------------
# synthetic shapes

SHAPES = ("disk", "square", "triangle", "ring", "cross", "stripe")

# one colour per class so that support and query instances share appearance
PALETTE = (
    (0.95, 0.25, 0.20),
    (0.25, 0.85, 0.30),
    (0.25, 0.35, 0.95),
    (0.95, 0.85, 0.20),
    (0.85, 0.30, 0.90),
    (0.20, 0.85, 0.90),
)


@dataclass
class SyntheticSpec:
    classes: tuple[str, ...] = ("disk", "square", "triangle", "ring")
    images_per_class: int = 50
    image_size: int = 64
    noise: float = 0.05
    distractors: int = 1
    area_min: float = 0.04
    area_max: float = 0.30
    seed: int = 0

    def __post_init__(self):
        unknown = [c for c in self.classes if c not in SHAPES]
        if unknown or not self.classes:
            raise ConfigError(f"unknown shape classes {unknown}; choose from {SHAPES}")
        if self.image_size < 8 or self.image_size % 8:
            raise ConfigError(f"image_size must be a positive multiple of 8, got {self.image_size}")
        if not 0 < self.area_min <= self.area_max < 1:
            raise ConfigError(f"need 0 < area_min <= area_max < 1, got {self.area_min}, {self.area_max}")
        if self.images_per_class < 1 or self.noise < 0 or self.distractors < 0:
            raise ConfigError("images_per_class must be >= 1; noise and distractors >= 0")

    @classmethod
    def from_text(cls, text: str) -> "SyntheticSpec":
        kwargs = {}
        for key, raw in parse_pairs(text, "<data spec>").items():
            try:
                if key == "classes":
                    kwargs[key] = tuple(s.strip() for s in raw.split(",") if s.strip())
                elif key in ("images_per_class", "image_size", "distractors", "seed"):
                    kwargs[key] = int(raw)
                elif key in ("noise", "area_min", "area_max"):
                    kwargs[key] = float(raw)
                else:
                    raise ConfigError(f"unknown data spec key {key!r}")
            except ValueError:
                raise ConfigError(f"cannot parse value {raw!r} for key {key!r}") from None
        return cls(**kwargs)

    @classmethod
    def from_file(cls, path) -> "SyntheticSpec":
        return cls.from_text(Path(path).read_text(encoding="utf-8"))


def shape_mask(shape: str, size: int, cy: float, cx: float, r: float) -> np.ndarray:
    """Boolean ``[size, size]`` support of a shape centred at (cy, cx) with radius r."""
    y, x = np.mgrid[0:size, 0:size] + 0.5
    dy, dx = y - cy, x - cx
    if shape == "disk":
        return dy * dy + dx * dx <= r * r
    if shape == "square":
        return (np.abs(dy) <= 0.8 * r) & (np.abs(dx) <= 0.8 * r)
    if shape == "triangle":
        depth = dy + r  # distance below the apex
        return (depth >= 0) & (dy <= 0.5 * r) & (np.abs(dx) <= depth / (1.5 * r) * (0.866 * r))
    if shape == "ring":
        d2 = dy * dy + dx * dx
        return (d2 <= r * r) & (d2 >= (0.55 * r) ** 2)
    if shape == "cross":
        return ((np.abs(dy) <= 0.3 * r) & (np.abs(dx) <= r)) | ((np.abs(dx) <= 0.3 * r) & (np.abs(dy) <= r))
    if shape == "stripe":
        u, v = (dy + dx) / np.sqrt(2), (dy - dx) / np.sqrt(2)
        return (np.abs(u) <= 0.3 * r) & (np.abs(v) <= 1.2 * r)
    raise ConfigError(f"unknown shape {shape!r}")


def _place(spec: SyntheticSpec, shape: str, rng: SplitMix64, bounds: tuple[float, float]):
    n = spec.image_size
    for _ in range(200):
        r = rng.uniform(None, 0.08 * n, 0.5 * n)
        cy, cx = rng.uniform(None, 0.2 * n, 0.8 * n), rng.uniform(None, 0.2 * n, 0.8 * n)
        m = shape_mask(shape, n, cy, cx, r)
        if bounds[0] <= m.mean() <= bounds[1]:
            return m
    raise DatasetError(f"cannot place a {shape} with area fraction in {bounds}")


def render_sample(spec: SyntheticSpec, target: int, rng: SplitMix64):
    """One image with a target instance of class ``target`` on top of distractors.

    Returns ``(image [3,H,W], labels [1,H,W], class_ids)``.
    """
    n = spec.image_size
    image = np.empty((3, n, n))
    image[:] = rng.uniform(None, 0.1, 0.4)
    labels = np.zeros((n, n), dtype=np.float32)
    others = [c for c in range(len(spec.classes)) if c != target]
    count = rng.below(spec.distractors + 1) if others else 0
    objects = [others[rng.below(len(others))] for _ in range(count)] + [target]
    for i, c in enumerate(objects):
        bounds = (spec.area_min, spec.area_max) if i == len(objects) - 1 else (0.5 * spec.area_min, spec.area_max)
        m = _place(spec, spec.classes[c], rng, bounds)
        intensity = rng.uniform(None, 0.7, 1.0)
        color = np.asarray(PALETTE[SHAPES.index(spec.classes[c])]) * intensity
        image[:, m] = color[:, None]
        labels[m] = c + 1
    if spec.noise > 0:
        image += rng.normal((3, n, n), std=spec.noise)
    present = tuple(sorted({int(v) - 1 for v in np.unique(labels) if v > 0}))
    return np.clip(image, 0.0, 1.0).astype(np.float32), labels[None], present


def gen_synthetic_dataset(spec: SyntheticSpec, out_dir, rng: SplitMix64 | None = None) -> Manifest:
    """Render ``images_per_class`` images per class under ``out_dir`` and write its manifest."""
    rng = rng or SplitMix64(spec.seed)
    out = Path(out_dir)
    try:
        (out / "images").mkdir(parents=True, exist_ok=True)
        (out / "masks").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create dataset directory {out}: {exc}") from exc
    records = []
    for c in range(len(spec.classes)):
        for j in range(spec.images_per_class):
            image, labels, present = render_sample(spec, c, rng)
            stem = f"{c:02d}_{j:05d}.ptns"
            write_tensor(out / "images" / stem, image)
            write_tensor(out / "masks" / stem, labels)
            records.append(Record(f"images/{stem}", f"masks/{stem}", present))
    write_manifest(out / "manifest.txt", records)
    (out / "classes.txt").write_text("\n".join(spec.classes) + "\n", encoding="utf-8")
    return Manifest(records, out)

