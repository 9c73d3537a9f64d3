"""Datasets, augmentation and deterministic batch planning.

Images are held in memory as float32 arrays of shape ``(N, C, H, W)`` in
``[0, 1]``. Augmentation happens on these raw pixels; per-channel
normalisation (statistics from the train split) is applied when a batch is
materialised, so padded borders are black as in the usual CIFAR recipe.

Randomness is keyed by ``(seed, epoch[, batch])`` through
``numpy.random.SeedSequence``, so batch order and contents never depend on
how many workers produce them.
"""

from __future__ import annotations

import os
import pickle
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, NamedTuple

import numpy as np
import torch

__all__ = [
    "DATA_ROOT_ENV",
    "DatasetMissingError",
    "LabeledImageDataset",
    "DatasetPair",
    "AugmentationPolicy",
    "BatchPlan",
    "load_dataset",
    "available_datasets",
    "make_synthetic_gaussian",
    "stratified_indices",
    "write_index_file",
    "read_index_file",
    "augment",
    "build_batches",
    "iterate_batches",
]

DATA_ROOT_ENV = "SELFDISTILL_DATA"


class DatasetMissingError(FileNotFoundError):
    """Raised when dataset files are absent; the message names the expected layout."""


@dataclass
class LabeledImageDataset:
    images: np.ndarray  # (N, C, H, W) float32 in [0, 1]
    labels: np.ndarray  # (N,) int64
    num_classes: int
    split: str
    name: str
    mean: np.ndarray = field(default_factory=lambda: np.zeros(3, np.float32))
    std: np.ndarray = field(default_factory=lambda: np.ones(3, np.float32))

    def __post_init__(self):
        self.images = np.ascontiguousarray(self.images, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise ValueError("images must have shape (N, C, H, W)")
        if len(self.images) != len(self.labels):
            raise ValueError("images and labels differ in length")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def normalize(self, images: np.ndarray) -> np.ndarray:
        return (images - self.mean[:, None, None]) / self.std[:, None, None]

    def subset(self, indices) -> "LabeledImageDataset":
        indices = np.asarray(indices, dtype=np.int64)
        return LabeledImageDataset(
            self.images[indices], self.labels[indices], self.num_classes, self.split, self.name, self.mean, self.std
        )

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.num_classes)


class DatasetPair(NamedTuple):
    train: LabeledImageDataset
    test: LabeledImageDataset

    @property
    def num_classes(self) -> int:
        return self.train.num_classes

    def stats(self) -> dict:
        return {
            "name": self.train.name,
            "num_classes": self.num_classes,
            "train_size": len(self.train),
            "test_size": len(self.test),
            "image_shape": list(self.train.image_shape),
            "channel_mean": [float(v) for v in self.train.mean],
            "channel_std": [float(v) for v in self.train.std],
        }


def _with_stats(train_x, train_y, test_x, test_y, k: int, name: str) -> DatasetPair:
    mean = train_x.mean(axis=(0, 2, 3), dtype=np.float64).astype(np.float32)
    std = train_x.std(axis=(0, 2, 3), dtype=np.float64).astype(np.float32)
    std = np.where(std > 0, std, 1.0).astype(np.float32)
    return DatasetPair(
        LabeledImageDataset(train_x, train_y, k, "train", name, mean, std),
        LabeledImageDataset(test_x, test_y, k, "test", name, mean, std),
    )


# ---------------------------------------------------------------------------
# synthetic data


def make_synthetic_gaussian(
    num_classes: int = 10,
    n_train: int = 5000,
    n_test: int = 1000,
    image_size: int = 32,
    noise: float = 0.2,
    seed: int = 0,
) -> DatasetPair:
    """Gaussian-blob images: each class owns a fixed arrangement of coloured blobs.

    A sample is its class prototype with random per-blob intensity jitter
    plus i.i.d. pixel noise. Labels are balanced in both splits.
    """
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5D]))
    yy, xx = np.mgrid[0:image_size, 0:image_size].astype(np.float32)
    n_blobs = 3
    centers = rng.uniform(0.2, 0.8, size=(num_classes, n_blobs, 2)) * image_size
    widths = rng.uniform(0.08, 0.18, size=(num_classes, n_blobs)) * image_size
    colors = rng.uniform(0.2, 1.0, size=(num_classes, n_blobs, 3))
    # (K, blobs, H, W)
    blobs = np.exp(
        -((xx[None, None] - centers[..., 0, None, None]) ** 2 + (yy[None, None] - centers[..., 1, None, None]) ** 2)
        / (2 * widths[..., None, None] ** 2)
    ).astype(np.float32)

    def draw(n: int, stream: int):
        r = np.random.default_rng(np.random.SeedSequence([seed, stream]))
        labels = np.arange(n) % num_classes
        r.shuffle(labels)
        gain = r.uniform(0.6, 1.4, size=(n, n_blobs)).astype(np.float32)
        # (n, 3, H, W) = sum over blobs of gain * color * blob
        img = np.einsum("nb,nbc,nbhw->nchw", gain, colors[labels].astype(np.float32), blobs[labels])
        img += r.normal(0.0, noise, size=img.shape).astype(np.float32)
        return np.clip(img, 0.0, 1.0).astype(np.float32), labels.astype(np.int64)

    train_x, train_y = draw(n_train, 1)
    test_x, test_y = draw(n_test, 2)
    return _with_stats(train_x, train_y, test_x, test_y, num_classes, f"synthetic-gaussian-{num_classes}")


# ---------------------------------------------------------------------------
# subsets and index files


def stratified_indices(labels: np.ndarray, per_class: int, seed: int = 0) -> np.ndarray:
    """Pick ``per_class`` indices of every class, sorted ascending."""
    labels = np.asarray(labels)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x57]))
    chosen = []
    for c in np.unique(labels):
        pool = np.flatnonzero(labels == c)
        if len(pool) < per_class:
            raise ValueError(f"class {c} has only {len(pool)} samples, need {per_class}")
        chosen.append(rng.choice(pool, size=per_class, replace=False))
    return np.sort(np.concatenate(chosen))


def write_index_file(path: str | os.PathLike, indices) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text("".join(f"{int(i)}\n" for i in indices))
    os.replace(tmp, path)


def read_index_file(path: str | os.PathLike) -> np.ndarray:
    lines = Path(path).read_text().split()
    return np.array([int(s) for s in lines], dtype=np.int64)


def _subset_with_index_file(labels, per_class: int, index_path: Path, seed: int = 0) -> np.ndarray:
    if index_path.exists():
        return read_index_file(index_path)
    indices = stratified_indices(labels, per_class, seed)
    try:
        write_index_file(index_path, indices)
    except OSError:
        pass  # read-only dataset root; the subset is still reproducible from the seed
    return indices


# ---------------------------------------------------------------------------
# on-disk datasets

_CIFAR10_LAYOUT = (
    "expected the python version of CIFAR-10 at {root}/cifar-10-batches-py/ "
    "(data_batch_1 .. data_batch_5, test_batch), e.g. extracted from cifar-10-python.tar.gz"
)
_CIFAR100_LAYOUT = "expected {root}/cifar-100-python/ with files 'train' and 'test' (from cifar-100-python.tar.gz)"
_TINY_LAYOUT = (
    "expected {root}/tiny-imagenet-200/ with wnids.txt, train/<wnid>/images/*.JPEG "
    "and val/images/*.JPEG + val/val_annotations.txt"
)


def _unpickle(path: Path) -> dict:
    with open(path, "rb") as fh:
        return pickle.load(fh, encoding="bytes")


def _cifar_images(raw) -> np.ndarray:
    return (np.asarray(raw, dtype=np.uint8).reshape(-1, 3, 32, 32).astype(np.float32) / 255.0)


def _load_cifar10(root: Path):
    base = root / "cifar-10-batches-py"
    files = [base / f"data_batch_{i}" for i in range(1, 6)] + [base / "test_batch"]
    missing = [f.name for f in files if not f.exists()]
    if missing:
        raise DatasetMissingError(f"CIFAR-10 files missing ({', '.join(missing)}); " + _CIFAR10_LAYOUT.format(root=root))
    xs, ys = [], []
    for f in files[:5]:
        d = _unpickle(f)
        xs.append(_cifar_images(d[b"data"]))
        ys.append(np.asarray(d[b"labels"], dtype=np.int64))
    t = _unpickle(files[5])
    return (
        np.concatenate(xs),
        np.concatenate(ys),
        _cifar_images(t[b"data"]),
        np.asarray(t[b"labels"], dtype=np.int64),
    )


def _load_cifar100(root: Path):
    base = root / "cifar-100-python"
    if not (base / "train").exists() or not (base / "test").exists():
        raise DatasetMissingError("CIFAR-100 files missing; " + _CIFAR100_LAYOUT.format(root=root))
    tr, te = _unpickle(base / "train"), _unpickle(base / "test")
    return (
        _cifar_images(tr[b"data"]),
        np.asarray(tr[b"fine_labels"], dtype=np.int64),
        _cifar_images(te[b"data"]),
        np.asarray(te[b"fine_labels"], dtype=np.int64),
    )


def _load_tinyimagenet(root: Path, image_size: int):
    from PIL import Image

    base = root / "tiny-imagenet-200"
    if not (base / "wnids.txt").exists():
        raise DatasetMissingError("TinyImageNet files missing; " + _TINY_LAYOUT.format(root=root))
    wnids = (base / "wnids.txt").read_text().split()
    index = {w: i for i, w in enumerate(wnids)}

    def read(path: Path) -> np.ndarray:
        img = Image.open(path).convert("RGB")
        if img.size != (image_size, image_size):
            img = img.resize((image_size, image_size), Image.BILINEAR)
        return np.asarray(img, dtype=np.float32).transpose(2, 0, 1) / 255.0

    train_x, train_y = [], []
    for w in wnids:
        for p in sorted((base / "train" / w / "images").glob("*.JPEG")):
            train_x.append(read(p))
            train_y.append(index[w])
    test_x, test_y = [], []
    for line in (base / "val" / "val_annotations.txt").read_text().splitlines():
        parts = line.split("\t")
        if len(parts) >= 2:
            test_x.append(read(base / "val" / "images" / parts[0]))
            test_y.append(index[parts[1]])
    return np.stack(train_x), np.array(train_y), np.stack(test_x), np.array(test_y)


def _default_root(root) -> Path:
    if root is None:
        root = os.environ.get(DATA_ROOT_ENV, "./data")
    return Path(root)


def available_datasets() -> list[str]:
    return ["synthetic-gaussian-10", "cifar10-subset-5k", "cifar10", "cifar100", "tinyimagenet"]


def load_dataset(name: str, root: str | os.PathLike | None = None, **options) -> DatasetPair:
    """Load a dataset by name and return its train/test splits.

    ``root`` defaults to ``$SELFDISTILL_DATA`` (or ``./data``). The synthetic
    dataset needs nothing on disk and accepts ``n_train``, ``n_test``,
    ``image_size``, ``noise`` and ``seed`` overrides. ``cifar10-subset-5k``
    is 500 train / 100 test images per class; its indices are kept as text
    files under ``<root>/subsets/``.
    """
    root = _default_root(root)
    if name.startswith("synthetic-gaussian-"):
        k = int(name.rsplit("-", 1)[1])
        return make_synthetic_gaussian(num_classes=k, **options)
    if options:
        raise ValueError(f"dataset {name!r} takes no options, got {sorted(options)}")
    if name == "cifar10":
        return _with_stats(*_load_cifar10(root), 10, name)
    if name == "cifar10-subset-5k":
        tx, ty, vx, vy = _load_cifar10(root)
        tr_idx = _subset_with_index_file(ty, 500, root / "subsets" / "cifar10-subset-5k-train.txt")
        te_idx = _subset_with_index_file(vy, 100, root / "subsets" / "cifar10-subset-5k-test.txt")
        return _with_stats(tx[tr_idx], ty[tr_idx], vx[te_idx], vy[te_idx], 10, name)
    if name == "cifar100":
        return _with_stats(*_load_cifar100(root), 100, name)
    if name == "tinyimagenet":
        return _with_stats(*_load_tinyimagenet(root, 64), 200, name)
    raise KeyError(f"unknown dataset {name!r}; available: {', '.join(available_datasets())}")


# ---------------------------------------------------------------------------
# augmentation and batching


@dataclass(frozen=True)
class AugmentationPolicy:
    crop_size: int = 32
    padding: int = 4
    flip_probability: float = 0.5

    def __post_init__(self):
        if self.crop_size <= 0 or self.padding < 0:
            raise ValueError("crop_size must be positive and padding non-negative")
        if not 0.0 <= self.flip_probability <= 1.0:
            raise ValueError("flip_probability must lie in [0, 1]")


def augment(image: np.ndarray, policy: AugmentationPolicy, rng: np.random.Generator) -> np.ndarray:
    """Zero-pad, random-crop to ``policy.crop_size`` and maybe flip horizontally.

    Always draws the same number of random values, so the generator advances
    identically whatever the outcome.
    """
    c, h, w = image.shape
    p = policy.padding
    size = policy.crop_size
    if p:
        padded = np.zeros((c, h + 2 * p, w + 2 * p), dtype=image.dtype)
        padded[:, p : p + h, p : p + w] = image
    else:
        padded = image
    max_top = padded.shape[1] - size
    max_left = padded.shape[2] - size
    if max_top < 0 or max_left < 0:
        raise ValueError(f"crop {size} larger than padded image {padded.shape[1:]}")
    top = int(rng.integers(0, max_top + 1))
    left = int(rng.integers(0, max_left + 1))
    flip = rng.random() < policy.flip_probability
    out = padded[:, top : top + size, left : left + size]
    if flip:
        out = out[:, :, ::-1]
    return np.ascontiguousarray(out)


@dataclass(frozen=True)
class BatchPlan:
    batch_size: int = 128
    shuffle_seed: int = 0
    drop_last: bool = False

    def __post_init__(self):
        if self.batch_size <= 0:
            raise ValueError("batch_size must be positive")


def build_batches(dataset_or_size, plan: BatchPlan, epoch: int) -> list[np.ndarray]:
    """Shuffle indices with a generator seeded by ``(shuffle_seed, epoch)`` and chunk them."""
    n = dataset_or_size if isinstance(dataset_or_size, int) else len(dataset_or_size)
    if plan.batch_size > n:
        raise ValueError(f"batch_size {plan.batch_size} exceeds dataset size {n}")
    order = np.random.default_rng(np.random.SeedSequence([plan.shuffle_seed, epoch])).permutation(n)
    batches = [order[i : i + plan.batch_size] for i in range(0, n, plan.batch_size)]
    if plan.drop_last and len(batches[-1]) < plan.batch_size:
        batches.pop()
    return batches


def iterate_batches(
    dataset: LabeledImageDataset,
    plan: BatchPlan,
    epoch: int,
    policy: AugmentationPolicy | None = None,
    dtype: torch.dtype = torch.float32,
) -> Iterator[tuple[torch.Tensor, torch.Tensor]]:
    """Yield normalised ``(x, y)`` tensors for one epoch.

    With ``policy`` set, each batch gets its own augmentation generator keyed
    by ``(shuffle_seed, epoch, batch index)``.
    """
    for b, idx in enumerate(build_batches(dataset, plan, epoch)):
        images = dataset.images[idx]
        if policy is not None:
            rng = np.random.default_rng(np.random.SeedSequence([plan.shuffle_seed, epoch, b, 0xA6]))
            images = np.stack([augment(img, policy, rng) for img in images])
        x = torch.from_numpy(dataset.normalize(images).astype(np.float32)).to(dtype)
        yield x, torch.from_numpy(dataset.labels[idx])


def iterate_eval(dataset: LabeledImageDataset, batch_size: int = 256, dtype: torch.dtype = torch.float32):
    """Yield normalised, un-augmented batches in dataset order."""
    for i in range(0, len(dataset), batch_size):
        images = dataset.images[i : i + batch_size]
        x = torch.from_numpy(dataset.normalize(images).astype(np.float32)).to(dtype)
        yield x, torch.from_numpy(dataset.labels[i : i + batch_size])
