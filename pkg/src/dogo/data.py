"""Dataset ingestion, class-balanced label budgets and uniform label noise.

Supported dataset names and their on-disk layout under ``root``:

``cifar10``        ``cifar-10-batches-py/{data_batch_1..5,test_batch}`` (python pickle release)
``cifar100``       ``cifar-100-python/{train,test}`` (fine labels)
``stl10``          ``stl10_binary/{train,test}_{X,y}.bin`` (binary release)
``tiny-imagenet``  ``tiny-imagenet-200/`` (official zip layout; the labelled
                   ``val`` split serves as the 10,000-image test set)
``manifest``       ``manifest.tsv`` + ``checksum.sha256`` + image files
                   (see :func:`write_manifest_dataset`)
``synthetic-*``    procedurally generated stand-ins, no files needed
                   (see :mod:`dogo.synthetic`)

Images are held as ``uint8`` arrays shaped ``(N, C, H, W)``.
"""

from __future__ import annotations

import hashlib
import os
import pickle
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Dict, Optional, Tuple

import numpy as np

from .errors import CorruptArchive, DatasetNotFound, EmptyClass

DATA_ROOT_ENV = "DOGO_DATA_ROOT"
STANDARD_FRACTIONS = (0.01, 0.05, 0.10, 0.20, 0.50, 1.00)


@dataclass(frozen=True)
class LabeledDataset:
    images: np.ndarray
    labels: np.ndarray
    class_count: int
    split_tag: str = "train"
    name: str = ""

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise ValueError(f"{len(self.images)} images but {len(self.labels)} labels")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.class_count):
            raise ValueError(f"labels must lie in [0, {self.class_count})")

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, indices) -> "LabeledDataset":
        idx = np.asarray(indices, dtype=np.int64)
        return replace(self, images=self.images[idx], labels=self.labels[idx])

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.class_count)

    @property
    def image_size(self) -> int:
        return int(self.images.shape[-1])


@dataclass(frozen=True)
class DatasetSplits:
    train: LabeledDataset
    test: LabeledDataset
    val: Optional[LabeledDataset] = None

    def __getitem__(self, split: str) -> LabeledDataset:
        ds = getattr(self, split)
        if ds is None:
            raise KeyError(split)
        return ds


@dataclass(frozen=True)
class NoiseSpec:
    noise_rate: float
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.noise_rate <= 1.0:
            raise ValueError(f"noise_rate must lie in [0, 1], got {self.noise_rate}")


def resolve_root(root) -> Optional[Path]:
    if root is None or root == "":
        root = os.environ.get(DATA_ROOT_ENV)
    return Path(root).expanduser() if root else None


def _unpickle(path: Path) -> dict:
    try:
        with open(path, "rb") as f:
            return pickle.load(f, encoding="bytes")
    except FileNotFoundError:
        raise DatasetNotFound(f"missing {path}") from None
    except (pickle.UnpicklingError, EOFError, ValueError) as e:
        raise CorruptArchive(f"{path}: {e}") from e


def _load_cifar10(root: Path, name: str) -> DatasetSplits:
    base = root / "cifar-10-batches-py"
    if not base.is_dir():
        raise DatasetNotFound(f"{name}: expected directory {base}")
    xs, ys = [], []
    for i in range(1, 6):
        d = _unpickle(base / f"data_batch_{i}")
        xs.append(np.asarray(d[b"data"], dtype=np.uint8))
        ys.extend(d[b"labels"])
    t = _unpickle(base / "test_batch")
    train = LabeledDataset(np.concatenate(xs).reshape(-1, 3, 32, 32), np.asarray(ys, np.int64), 10, "train", name)
    test = LabeledDataset(np.asarray(t[b"data"], np.uint8).reshape(-1, 3, 32, 32),
                          np.asarray(t[b"labels"], np.int64), 10, "test", name)
    _expect(train, 50000, name), _expect(test, 10000, name)
    return DatasetSplits(train, test)


def _load_cifar100(root: Path, name: str) -> DatasetSplits:
    base = root / "cifar-100-python"
    if not base.is_dir():
        raise DatasetNotFound(f"{name}: expected directory {base}")
    out = {}
    for split in ("train", "test"):
        d = _unpickle(base / split)
        out[split] = LabeledDataset(np.asarray(d[b"data"], np.uint8).reshape(-1, 3, 32, 32),
                                    np.asarray(d[b"fine_labels"], np.int64), 100, split, name)
    _expect(out["train"], 50000, name), _expect(out["test"], 10000, name)
    return DatasetSplits(out["train"], out["test"])


def _load_stl10(root: Path, name: str) -> DatasetSplits:
    base = root / "stl10_binary"
    if not base.is_dir():
        raise DatasetNotFound(f"{name}: expected directory {base}")
    out = {}
    for split in ("train", "test"):
        try:
            x = np.fromfile(base / f"{split}_X.bin", dtype=np.uint8)
            y = np.fromfile(base / f"{split}_y.bin", dtype=np.uint8).astype(np.int64) - 1
        except FileNotFoundError as e:
            raise DatasetNotFound(str(e)) from None
        if x.size % (3 * 96 * 96) or x.size // (3 * 96 * 96) != y.size:
            raise CorruptArchive(f"{name}: {split} image/label sizes disagree")
        # the binary release stores each channel column-major
        x = x.reshape(-1, 3, 96, 96).transpose(0, 1, 3, 2)
        out[split] = LabeledDataset(np.ascontiguousarray(x), y, 10, split, name)
    return DatasetSplits(out["train"], out["test"])


def _read_image(path: Path) -> np.ndarray:
    from PIL import Image

    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.uint8)
    except FileNotFoundError:
        raise DatasetNotFound(f"missing image {path}") from None
    except OSError as e:
        raise CorruptArchive(f"{path}: {e}") from e
    return arr.transpose(2, 0, 1)


def _load_tiny_imagenet(root: Path, name: str) -> DatasetSplits:
    base = root / "tiny-imagenet-200"
    if not (base / "wnids.txt").is_file():
        raise DatasetNotFound(f"{name}: expected {base / 'wnids.txt'}")
    wnids = [w.strip() for w in (base / "wnids.txt").read_text().split() if w.strip()]
    cls = {w: i for i, w in enumerate(wnids)}
    xs, ys = [], []
    for w in wnids:
        for p in sorted((base / "train" / w / "images").glob("*.JPEG")):
            xs.append(_read_image(p))
            ys.append(cls[w])
    train = LabeledDataset(np.stack(xs), np.asarray(ys, np.int64), len(wnids), "train", name)
    xs, ys = [], []
    for line in (base / "val" / "val_annotations.txt").read_text().splitlines():
        parts = line.split("\t")
        if len(parts) >= 2:
            xs.append(_read_image(base / "val" / "images" / parts[0]))
            ys.append(cls[parts[1]])
    test = LabeledDataset(np.stack(xs), np.asarray(ys, np.int64), len(wnids), "test", name)
    return DatasetSplits(train, test)


MANIFEST = "manifest.tsv"
CHECKSUM = "checksum.sha256"


def _manifest_digest(root: Path, records) -> str:
    h = hashlib.sha256((root / MANIFEST).read_bytes())
    for rel, _, _ in records:
        try:
            h.update((root / rel).read_bytes())
        except FileNotFoundError:
            raise DatasetNotFound(f"manifest references missing file {rel}") from None
    return h.hexdigest()


def _load_manifest(root: Path, name: str) -> DatasetSplits:
    mpath = root / MANIFEST
    if not mpath.is_file():
        raise DatasetNotFound(f"{name}: expected {mpath}")
    records = []
    for n, line in enumerate(mpath.read_text().splitlines(), 1):
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise CorruptArchive(f"{mpath}:{n}: expected 'path<TAB>label<TAB>split'")
        records.append((parts[0], int(parts[1]), parts[2].strip()))
    cpath = root / CHECKSUM
    if cpath.is_file():
        expected = cpath.read_text().split()[0]
        if _manifest_digest(root, records) != expected:
            raise CorruptArchive(f"{name}: content checksum mismatch")
    class_count = max(r[1] for r in records) + 1
    splits = {}
    for split in ("train", "val", "test"):
        rows = [r for r in records if r[2] == split]
        if rows:
            imgs = np.stack([_read_image(root / r[0]) for r in rows])
            splits[split] = LabeledDataset(imgs, np.asarray([r[1] for r in rows], np.int64),
                                           class_count, split, name)
    if "train" not in splits or "test" not in splits:
        raise CorruptArchive(f"{name}: manifest needs both train and test records")
    return DatasetSplits(splits["train"], splits["test"], splits.get("val"))


def write_manifest_dataset(splits: DatasetSplits, root) -> Path:
    """Export splits as PNG files + manifest + checksum (the ``manifest`` layout)."""
    from PIL import Image

    root = Path(root)
    records = []
    for split in ("train", "val", "test"):
        ds = getattr(splits, split)
        if ds is None:
            continue
        d = root / split
        d.mkdir(parents=True, exist_ok=True)
        for i, (img, y) in enumerate(zip(ds.images, ds.labels)):
            rel = f"{split}/{i:06d}.png"
            Image.fromarray(np.ascontiguousarray(img.transpose(1, 2, 0))).save(root / rel)
            records.append((rel, int(y), split))
    (root / MANIFEST).write_text("".join(f"{r}\t{y}\t{s}\n" for r, y, s in records))
    (root / CHECKSUM).write_text(_manifest_digest(root, records) + "\n")
    return root


def _expect(ds: LabeledDataset, n: int, name: str) -> None:
    if len(ds) != n:
        raise CorruptArchive(f"{name} {ds.split_tag}: expected {n} images, found {len(ds)}")


_LOADERS = {
    "cifar10": _load_cifar10,
    "cifar100": _load_cifar100,
    "stl10": _load_stl10,
    "tiny-imagenet": _load_tiny_imagenet,
    "manifest": _load_manifest,
}


def needs_root(name: str) -> bool:
    return not name.startswith("synthetic-")


def available_datasets():
    from .synthetic import SYNTHETIC_SPECS

    return sorted(_LOADERS) + sorted(SYNTHETIC_SPECS)


def load_dataset(name: str, root=None) -> DatasetSplits:
    """Load a dataset by name.

    ``root`` defaults to ``$DOGO_DATA_ROOT``; synthetic datasets ignore it.

    Raises:
        DatasetNotFound: unknown name or files absent.
        CorruptArchive: files present but unreadable or inconsistent.
    """
    key = name.lower()
    if key.startswith("synthetic-"):
        from .synthetic import load_synthetic

        return load_synthetic(key)
    if key not in _LOADERS:
        raise DatasetNotFound(f"unknown dataset {name!r}; known: {available_datasets()}")
    path = resolve_root(root)
    if path is None or not path.is_dir():
        raise DatasetNotFound(f"{name}: dataset root {path} does not exist (set ${DATA_ROOT_ENV})")
    return _LOADERS[key](path, key)


def label_budget(class_sizes: np.ndarray, fraction: float, seed: int) -> np.ndarray:
    """Per-class sample counts for a class-balanced budget of ``round(fraction * n)``.

    Counts differ by at most one; the classes receiving the remainder are
    chosen by ``seed``. A class with fewer samples than its quota is capped.
    """
    c = len(class_sizes)
    total = int(round(fraction * int(class_sizes.sum())))
    base, rem = divmod(total, c)
    counts = np.full(c, base, dtype=np.int64)
    if rem:
        extra = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(1,))).choice(c, rem, replace=False)
        counts[extra] += 1
    return np.minimum(counts, class_sizes)


def class_balanced_subsample(ds: LabeledDataset, fraction: float, seed: int = 0) -> LabeledDataset:
    """Keep a seeded, class-balanced subset; surviving samples keep their original order."""
    if not 0.0 < fraction <= 1.0:
        raise ValueError(f"fraction must lie in (0, 1], got {fraction}")
    sizes = ds.class_counts()
    if (sizes == 0).any():
        raise EmptyClass(f"classes {np.flatnonzero(sizes == 0).tolist()} have no samples")
    if fraction == 1.0:
        return ds
    counts = label_budget(sizes, fraction, seed)
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(2,)))
    keep = []
    for c in range(ds.class_count):
        members = np.flatnonzero(ds.labels == c)
        keep.append(rng.choice(members, counts[c], replace=False))
    return ds.subset(np.sort(np.concatenate(keep)))


def stratified_split(ds: LabeledDataset, val_fraction: float = 0.15,
                     seed: int = 0) -> Tuple[LabeledDataset, LabeledDataset]:
    """Split off ``val_fraction`` of every class as a validation set."""
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(3,)))
    val_idx = []
    for c in range(ds.class_count):
        members = np.flatnonzero(ds.labels == c)
        k = int(round(val_fraction * len(members)))
        val_idx.append(rng.choice(members, k, replace=False))
    val_idx = np.sort(np.concatenate(val_idx))
    mask = np.ones(len(ds), dtype=bool)
    mask[val_idx] = False
    train = ds.subset(np.flatnonzero(mask))
    val = replace(ds.subset(val_idx), split_tag="val")
    return train, val


def corrupt_labels(ds: LabeledDataset, spec: NoiseSpec) -> LabeledDataset:
    """With probability ``noise_rate`` replace each label by a uniform draw over all classes.

    The draw may return the true label, so the expected fraction of changed
    labels is ``noise_rate * (C - 1) / C``. Images are untouched.
    """
    rng = np.random.default_rng(np.random.SeedSequence(spec.seed, spawn_key=(4,)))
    n = len(ds)
    hit = rng.random(n) < spec.noise_rate
    draws = rng.integers(0, ds.class_count, size=n)
    labels = np.where(hit, draws, ds.labels).astype(np.int64)
    return replace(ds, labels=labels)


def changed_fraction(original: LabeledDataset, corrupted: LabeledDataset) -> float:
    return float(np.mean(original.labels != corrupted.labels)) if len(original) else 0.0


def dataset_summary(splits: DatasetSplits) -> Dict[str, int]:
    return {k: len(getattr(splits, k)) for k in ("train", "val", "test") if getattr(splits, k) is not None}
