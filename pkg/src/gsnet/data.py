"""Synthetic metallograph-like grain images and the on-disk dataset layout.

Each image is a Voronoi tessellation: every cell gets a random gray level,
pixels close to a cell edge are painted black, and Gaussian noise is added.
Higher levels use more seeds, so grains get smaller as the level rises.

On disk a dataset is a directory holding ``manifest.csv`` (``id,path,label,split``)
and ``images/<id>.pgm`` files stored as 16-bit binary PGM.
"""

from __future__ import annotations

import csv
import hashlib
import io
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .checkpoint import atomic_write
from .errors import ConfigError, InputError
from .pgm import read_pgm, write_pgm

MAXVAL = 65535
MANIFEST = "manifest.csv"


@dataclass
class GrainGenConfig:
    image_size: int = 32
    num_levels: int = 4
    seeds_per_level: tuple[int, ...] = (8, 16, 32, 64)
    boundary_width: float = 1.0
    noise_std: float = 0.03
    rng_seed: int = 0
    gen_size: int = 0  # side of the generated image before corner cropping; 0 means image_size
    gray_low: float = 0.3
    gray_high: float = 1.0

    def __post_init__(self):
        self.seeds_per_level = tuple(int(v) for v in self.seeds_per_level)

    @property
    def source_size(self) -> int:
        return self.gen_size or self.image_size

    def validate(self) -> None:
        if len(self.seeds_per_level) != self.num_levels:
            raise ConfigError(
                f"seeds_per_level has {len(self.seeds_per_level)} entries for {self.num_levels} levels"
            )
        if any(b <= a for a, b in zip(self.seeds_per_level, self.seeds_per_level[1:])):
            raise ConfigError(f"seeds_per_level must be strictly increasing: {self.seeds_per_level}")
        if self.seeds_per_level and self.seeds_per_level[0] < 1:
            raise ConfigError("every level needs at least one seed")
        if self.source_size < self.image_size:
            raise ConfigError(f"gen_size {self.gen_size} smaller than image_size {self.image_size}")
        if self.boundary_width < 0 or self.noise_std < 0:
            raise ConfigError("boundary_width and noise_std must be non-negative")


@dataclass
class LabeledImage:
    pixels: np.ndarray
    label: int
    id: int = -1


@dataclass
class Dataset:
    items: list[LabeledImage] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.items)

    def __iter__(self):
        return iter(self.items)

    def images(self) -> np.ndarray:
        return np.stack([it.pixels for it in self.items]) if self.items else np.zeros((0, 0, 0))

    def labels(self) -> np.ndarray:
        return np.array([it.label for it in self.items], dtype=np.int64)

    def ids(self) -> list[int]:
        return [it.id for it in self.items]

    def level_counts(self, num_levels: int) -> list[int]:
        return np.bincount(self.labels(), minlength=num_levels).tolist()


# ---------------------------------------------------------------- generation


def _rng(*key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(k) for k in key]))


def voronoi_fields(seeds: np.ndarray, size: int) -> tuple[np.ndarray, np.ndarray]:
    """Nearest-seed index and distance to the nearest cell edge at every pixel centre."""
    ii, jj = np.meshgrid(np.arange(size) + 0.5, np.arange(size) + 0.5, indexing="ij")
    pts = np.stack([ii.ravel(), jj.ravel()], axis=1)
    d2 = ((pts[:, None, :] - seeds[None, :, :]) ** 2).sum(axis=-1)
    owner = d2.argmin(axis=1)
    if len(seeds) == 1:
        return owner.reshape(size, size), np.full((size, size), np.inf)
    rows = np.arange(len(pts))
    sep = np.linalg.norm(seeds[owner][:, None, :] - seeds[None, :, :], axis=-1)
    with np.errstate(divide="ignore", invalid="ignore"):
        # distance from the point to the bisector between its seed and seed j
        edge = (d2 - d2[rows, owner][:, None]) / (2.0 * sep)
    edge[rows, owner] = np.inf
    edge[sep == 0] = np.inf
    return owner.reshape(size, size), edge.min(axis=1).reshape(size, size)


def generate_image(cfg: GrainGenConfig, level: int, instance_seed: int) -> LabeledImage:
    if not 0 <= level < cfg.num_levels:
        raise InputError(f"level {level} outside [0, {cfg.num_levels})")
    rng = _rng(cfg.rng_seed, level, instance_seed)
    size = cfg.source_size
    n = cfg.seeds_per_level[level]
    seeds = rng.uniform(0.0, size, size=(n, 2))
    grays = rng.uniform(cfg.gray_low, cfg.gray_high, size=n)
    owner, edge = voronoi_fields(seeds, size)
    img = grays[owner]
    img[edge < cfg.boundary_width / 2.0] = 0.0
    if cfg.noise_std > 0:
        img = img + rng.normal(0.0, cfg.noise_std, size=img.shape)
    return LabeledImage(np.clip(img, 0.0, 1.0), level, instance_seed)


def quantize(pixels: np.ndarray) -> np.ndarray:
    """Snap to the 16-bit grid used on disk so stored and in-memory images agree."""
    return np.round(np.clip(pixels, 0.0, 1.0) * MAXVAL) / MAXVAL


# ---------------------------------------------------------------- augmentation


def corner_crop(img: LabeledImage, crop: int) -> list[LabeledImage]:
    """Top-left, top-right, bottom-left, bottom-right crops of side ``crop``."""
    H, W = img.pixels.shape
    if crop < 1 or crop > min(H, W):
        raise InputError(f"crop {crop} does not fit image {H}x{W}")
    p = img.pixels
    tiles = (p[:crop, :crop], p[:crop, W - crop:], p[H - crop:, :crop], p[H - crop:, W - crop:])
    return [LabeledImage(t.copy(), img.label, img.id) for t in tiles]


def parity_flip(img: LabeledImage) -> LabeledImage:
    """Horizontal flip for odd ids, vertical flip for even ids."""
    if img.id < 0:
        raise InputError("parity_flip needs an assigned image id")
    flipped = img.pixels[:, ::-1] if img.id % 2 else img.pixels[::-1, :]
    return LabeledImage(flipped.copy(), img.label, img.id)


def content_hash(pixels: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(pixels, dtype="<f8").tobytes()).hexdigest()


def dedup(items: list[LabeledImage]) -> list[LabeledImage]:
    """Drop exact pixel-buffer duplicates, keeping the first occurrence."""
    seen: set[str] = set()
    out = []
    for it in items:
        h = content_hash(it.pixels)
        if h not in seen:
            seen.add(h)
            out.append(it)
    return out


# ---------------------------------------------------------------- dataset build


def split_counts(n_per_level: int, split: float) -> tuple[int, int]:
    n_train = int(round(split * n_per_level))
    return n_train, n_per_level - n_train


def build_dataset(cfg: GrainGenConfig, n_per_level: int, split: float,
                  out_dir: str | Path | None = None) -> tuple[Dataset, Dataset]:
    """Generate, crop, flip (training split only), de-duplicate and optionally save.

    Ids are assigned in processing order: training crops, then their flipped
    copies, then validation crops. Flipping is keyed on the crop id.
    """
    cfg.validate()
    if not 0 < split < 1:
        raise InputError(f"split must lie strictly between 0 and 1, got {split}")
    n_train, _ = split_counts(n_per_level, split)
    train_src, val_src = [], []
    for level in range(cfg.num_levels):
        order = _rng(cfg.rng_seed, level, 2**31 - 1).permutation(n_per_level)
        for rank, inst in enumerate(order):
            img = generate_image(cfg, level, int(inst))
            img.pixels = quantize(img.pixels)
            (train_src if rank < n_train else val_src).append(img)

    next_id = 0
    train_crops = []
    for img in train_src:
        for c in corner_crop(img, cfg.image_size):
            c.id = next_id
            next_id += 1
            train_crops.append(c)
    flips = []
    for c in train_crops:
        f = parity_flip(c)
        f.id = next_id
        next_id += 1
        flips.append(f)
    val_crops = []
    for img in val_src:
        for c in corner_crop(img, cfg.image_size):
            c.id = next_id
            next_id += 1
            val_crops.append(c)

    kept = dedup(train_crops + flips + val_crops)
    train_ids = {c.id for c in train_crops} | {f.id for f in flips}
    train = Dataset([it for it in kept if it.id in train_ids])
    val = Dataset([it for it in kept if it.id not in train_ids])
    if out_dir is not None:
        save_dataset(out_dir, train, val)
    return train, val


def save_dataset(out_dir, train: Dataset, val: Dataset) -> Path:
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    rows = []
    for split, ds in (("train", train), ("val", val)):
        for it in ds:
            rel = f"images/{it.id:06d}.pgm"
            try:
                write_pgm(out / rel, np.round(it.pixels * MAXVAL).astype(np.int64), MAXVAL)
            except OSError as exc:
                raise OSError(f"cannot write {out / rel}: {exc}") from exc
            rows.append((it.id, rel, it.label, split))
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["id", "path", "label", "split"])
    w.writerows(rows)
    path = out / MANIFEST
    atomic_write(path, buf.getvalue().encode("utf-8"))
    return path


def load_dataset(root) -> dict[str, Dataset]:
    root = Path(root)
    manifest = root / MANIFEST if root.is_dir() else root
    base = manifest.parent
    splits: dict[str, Dataset] = {}
    try:
        text = manifest.read_text(encoding="utf-8")
    except OSError as exc:
        raise OSError(f"cannot read manifest {manifest}: {exc}") from exc
    for row in csv.DictReader(io.StringIO(text)):
        samples, maxval = read_pgm(base / row["path"])
        item = LabeledImage(samples / maxval, int(row["label"]), int(row["id"]))
        splits.setdefault(row["split"], Dataset()).items.append(item)
    return splits
