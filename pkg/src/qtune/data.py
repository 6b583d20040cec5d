"""Dataset ingestion: CIFAR binary records, image folders, synthetic corpora."""

from __future__ import annotations

import logging
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

logger = logging.getLogger(__name__)

CIFAR_PIXELS = 3072
IMAGE_SUFFIXES = {".png", ".ppm", ".pnm", ".jpg", ".jpeg", ".bmp"}
DATASET_KINDS = ("cifar_binary", "image_folder", "synthetic")


class DatasetError(ValueError):
    pass


@dataclass
class Dataset:
    images: np.ndarray  # (N, H, W, 3) uint8
    labels: np.ndarray  # (N,) int64
    num_classes: int
    ids: list[str] = field(default_factory=list)
    name: str = ""

    def __post_init__(self) -> None:
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if not self.ids:
            self.ids = [f"{self.name or 'img'}_{i:05d}" for i in range(len(self.labels))]
        if len(self.images) != len(self.labels):
            raise DatasetError(f"{len(self.images)} images but {len(self.labels)} labels")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise DatasetError(f"labels outside [0, {self.num_classes})")

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, index) -> "Dataset":
        index = np.asarray(index)
        return Dataset(self.images[index], self.labels[index], self.num_classes,
                       [self.ids[i] for i in index], self.name)

    def concat(self, other: "Dataset") -> "Dataset":
        return Dataset(np.concatenate([self.images, other.images]),
                       np.concatenate([self.labels, other.labels]),
                       max(self.num_classes, other.num_classes), self.ids + other.ids, self.name)


@dataclass
class DatasetSpec:
    kind: str = "synthetic"
    path: str | None = None
    num_classes: int | None = None
    split: str = "train"
    subset: int | None = None
    class_subset: int | None = None  # keep a seeded random choice of this many classes
    seed: int = 0
    # synthetic only
    n: int = 1000
    image_size: int = 32

    def __post_init__(self) -> None:
        if self.kind not in DATASET_KINDS:
            raise DatasetError(f"dataset kind must be one of {DATASET_KINDS}, got {self.kind!r}")


# ---------------------------------------------------------------------------
# CIFAR
# ---------------------------------------------------------------------------


def read_cifar_binary(path: str | Path, label_bytes: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Parse a CIFAR binary file: label byte(s) then 1024 R, 1024 G, 1024 B bytes.

    CIFAR-10 records carry one label byte and CIFAR-100 records two (coarse,
    fine; the fine label is returned).  ``label_bytes=None`` infers it from
    the file size.
    """
    raw = Path(path).read_bytes()
    if label_bytes is None:
        fits = [lb for lb in (1, 2) if len(raw) % (CIFAR_PIXELS + lb) == 0]
        if len(fits) != 1:
            label_bytes = 2 if "100" in Path(path).parent.name + Path(path).name else 1
        else:
            label_bytes = fits[0]
    rec = CIFAR_PIXELS + label_bytes
    if len(raw) % rec:
        offset = (len(raw) // rec) * rec
        raise DatasetError(f"{path}: truncated record at byte offset {offset} (record size {rec})")
    arr = np.frombuffer(raw, dtype=np.uint8).reshape(-1, rec)
    labels = arr[:, label_bytes - 1].astype(np.int64)
    images = arr[:, label_bytes:].reshape(-1, 3, 32, 32).transpose(0, 2, 3, 1)
    return np.ascontiguousarray(images), labels


def write_cifar_binary(path: str | Path, images: np.ndarray, labels: np.ndarray, label_bytes: int = 1) -> None:
    images = np.asarray(images, dtype=np.uint8)
    n = len(images)
    rec = np.zeros((n, label_bytes + CIFAR_PIXELS), dtype=np.uint8)
    rec[:, label_bytes - 1] = labels
    if label_bytes == 2:
        rec[:, 0] = np.asarray(labels) // 5  # coarse label: placeholder grouping
    rec[:, label_bytes:] = images.transpose(0, 3, 1, 2).reshape(n, -1)
    Path(path).write_bytes(rec.tobytes())


def _cifar_files(root: Path, split: str) -> tuple[list[Path], int]:
    if root.is_file():
        return [root], 0
    c100 = {"train": ["train.bin"], "test": ["test.bin"]}
    c10 = {"train": [f"data_batch_{i}.bin" for i in range(1, 6)], "test": ["test_batch.bin"]}
    for names, classes in ((c100, 100), (c10, 10)):
        files = [root / n for n in names[split]]
        if all(f.exists() for f in files):
            return files, classes
    raise DatasetError(f"no CIFAR binary files for split {split!r} under {root}")


def load_cifar(spec: DatasetSpec) -> Dataset:
    files, classes = _cifar_files(Path(spec.path), spec.split)
    parts = [read_cifar_binary(f, 2 if classes == 100 else (1 if classes == 10 else None)) for f in files]
    images = np.concatenate([p[0] for p in parts])
    labels = np.concatenate([p[1] for p in parts])
    num = spec.num_classes or classes or int(labels.max()) + 1
    return Dataset(images, labels, num, name=f"cifar_{spec.split}")


# ---------------------------------------------------------------------------
# image folders
# ---------------------------------------------------------------------------


def read_image(path: str | Path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.uint8)


def write_image(path: str | Path, rgb: np.ndarray) -> None:
    Image.fromarray(np.clip(np.floor(np.asarray(rgb) + 0.5), 0, 255).astype(np.uint8)).save(path)


def load_image_folder(spec: DatasetSpec) -> Dataset:
    """root/<class>/<image> (or root/<split>/<class>/<image> when present)."""
    root = Path(spec.path)
    if (root / spec.split).is_dir():
        root = root / spec.split
    classes = sorted(d.name for d in root.iterdir() if d.is_dir())
    if not classes:
        raise DatasetError(f"{root}: no class directories")
    images, labels, ids = [], [], []
    for label, cls in enumerate(classes):
        for f in sorted((root / cls).iterdir()):
            if f.suffix.lower() not in IMAGE_SUFFIXES:
                continue
            try:
                images.append(read_image(f))
            except OSError as exc:
                raise DatasetError(f"{f}: cannot decode image ({exc})") from exc
            labels.append(label)
            ids.append(f"{cls}/{f.stem}")
    if not images:
        raise DatasetError(f"{root}: no images found")
    shapes = {im.shape for im in images}
    if len(shapes) != 1:
        raise DatasetError(f"{root}: images have differing sizes {sorted(shapes)[:3]}")
    return Dataset(np.stack(images), np.array(labels), spec.num_classes or len(classes), ids, root.name)


# ---------------------------------------------------------------------------
# synthetic
# ---------------------------------------------------------------------------


def _pink_noise(rng: np.random.Generator, n: int, size: int, channels: int) -> np.ndarray:
    f = np.fft.fftfreq(size)
    radius = np.sqrt(f[:, None] ** 2 + f[None, :] ** 2)
    amp = 1.0 / np.maximum(radius, 1.0 / size)
    spec = (rng.normal(size=(n, channels, size, size)) + 1j * rng.normal(size=(n, channels, size, size))) * amp
    field = np.fft.ifft2(spec).real
    field /= field.std(axis=(2, 3), keepdims=True) + 1e-12
    return field


def make_synthetic(
    num_classes: int = 10,
    n: int = 1000,
    seed: int = 0,
    size: int = 32,
    class_seed: int = 1234,
    amplitude: tuple[float, float] = (18.0, 40.0),
    noise: float = 6.0,
) -> Dataset:
    """Class-structured textures over natural-looking backgrounds.

    Each class is a windowed sinusoidal grating with a class-specific
    orientation and spatial frequency (luma only); backgrounds are 1/f colour
    noise with random tint, and every image gets white sensor noise.  Class
    prototypes depend only on ``class_seed``, so train and test splits drawn
    with different ``seed`` values share classes.
    """
    crng = np.random.default_rng(class_seed)
    n_freq = max(1, int(np.ceil(num_classes / 5)))
    freqs = np.linspace(0.07, 0.3, n_freq)
    orient = np.linspace(0, np.pi, 5, endpoint=False)
    protos = [(freqs[c // 5 % n_freq], orient[c % 5] + crng.uniform(-0.1, 0.1)) for c in range(num_classes)]

    rng = np.random.default_rng(seed)
    labels = rng.integers(0, num_classes, n)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)

    bg = _pink_noise(rng, n, size, 3)
    base = rng.uniform(70, 185, size=(n, 3, 1, 1))
    images = base + rng.uniform(12, 30, size=(n, 1, 1, 1)) * bg

    freq = np.array([protos[l][0] for l in labels]) * rng.uniform(0.9, 1.1, n)
    theta = np.array([protos[l][1] for l in labels]) + rng.normal(0, 0.08, n)
    phase = rng.uniform(0, 2 * np.pi, n)
    cy, cx = rng.uniform(0.3 * size, 0.7 * size, (2, n))
    radius = rng.uniform(0.25 * size, 0.45 * size, n)
    amp = rng.uniform(amplitude[0], amplitude[1], n)
    proj = (np.cos(theta)[:, None, None] * xx + np.sin(theta)[:, None, None] * yy)
    grating = np.sin(2 * np.pi * freq[:, None, None] * proj + phase[:, None, None])
    window = np.exp(-(((yy - cy[:, None, None]) ** 2 + (xx - cx[:, None, None]) ** 2) / (2 * radius[:, None, None] ** 2)))
    images += (amp[:, None, None] * grating * window)[:, None]  # same offset on R, G, B -> luma only

    images += rng.normal(0, noise, size=images.shape)
    images = np.clip(np.floor(images + 0.5), 0, 255).astype(np.uint8).transpose(0, 2, 3, 1)
    return Dataset(np.ascontiguousarray(images), labels, num_classes, name=f"synthetic{seed}")


# ---------------------------------------------------------------------------


def ingest_dataset(spec: DatasetSpec) -> Dataset:
    if spec.kind == "synthetic":
        classes = spec.num_classes or 10
        # split-specific sample seed; class prototypes are shared
        split_offset = {"train": 0, "test": 1, "val": 1}.get(spec.split, 2)
        ds = make_synthetic(classes, spec.n, seed=spec.seed * 10 + split_offset, size=spec.image_size)
    elif spec.path is None or not os.path.exists(spec.path):
        raise DatasetError(f"dataset path {spec.path!r} does not exist")
    elif spec.kind == "cifar_binary":
        ds = load_cifar(spec)
    else:
        ds = load_image_folder(spec)

    if spec.class_subset is not None and spec.class_subset < ds.num_classes:
        keep = np.sort(np.random.default_rng(spec.seed).choice(ds.num_classes, spec.class_subset, replace=False))
        remap = -np.ones(ds.num_classes, dtype=np.int64)
        remap[keep] = np.arange(len(keep))
        idx = np.nonzero(remap[ds.labels] >= 0)[0]
        ds = ds.subset(idx)
        ds = Dataset(ds.images, remap[ds.labels], len(keep), ds.ids, ds.name)
    if spec.subset is not None and spec.subset < len(ds):
        idx = np.sort(np.random.default_rng(spec.seed + 1).choice(len(ds), spec.subset, replace=False))
        ds = ds.subset(idx)
    return ds
