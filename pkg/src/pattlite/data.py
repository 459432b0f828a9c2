"""Dataset ingestion, preprocessing, augmentation and batching.

Layout on disk is ``root/<split>/<class_name>/<files>``; PNG, JPEG and PLT
raw tensors are accepted.  Pixel tensors are ``(H, W, C)`` in ``[0, 255]``
until :func:`preprocess_scale` maps them to ``[-1, 1]``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Optional, Sequence, Union

import numpy as np

from .tensor import Rng, Tensor, TensorFormatError, read_tensor

log = logging.getLogger(__name__)

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".plt")
SPLITS = ("train", "val", "test")
SUBJECT_MAP_NAME = "subjects.tsv"


class DataError(Exception):
    """Dataset tree, sample file or subject metadata is unusable."""


@dataclass
class Sample:
    source: Union[Path, np.ndarray]
    label: int
    subject_id: Optional[str] = None
    key: str = ""


@dataclass
class Dataset:
    samples: list[Sample]
    class_names: list[str]
    split: str = "train"
    _images: dict = field(default_factory=dict, repr=False, compare=False)

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def labels(self) -> np.ndarray:
        return np.array([s.label for s in self.samples], dtype=np.int64)

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    def select(self, indices: Sequence[int], split: Optional[str] = None) -> "Dataset":
        ds = Dataset([self.samples[i] for i in indices], list(self.class_names), split or self.split)
        ds._images = self._images
        return ds

    @classmethod
    def from_arrays(cls, images: Sequence[np.ndarray], labels: Sequence[int], class_names: Sequence[str],
                    split: str = "train", subjects: Optional[Sequence[str]] = None) -> "Dataset":
        samples = []
        for i, (img, lab) in enumerate(zip(images, labels)):
            subj = subjects[i] if subjects is not None else None
            samples.append(Sample(np.asarray(img), int(lab), subj, key=f"sample_{i:05d}"))
        ds = cls(samples, list(class_names), split)
        ds.validate()
        return ds

    def validate(self) -> None:
        for s in self.samples:
            if not 0 <= s.label < len(self.class_names):
                raise DataError(f"label {s.label} of {s.key or s.source} outside {len(self.class_names)} classes")

    def image(self, i: int, size: int) -> Tensor:
        """Decoded, resized pixels for sample ``i`` (memoised per size)."""
        s = self.samples[i]
        cache_key = (id(s.source) if isinstance(s.source, np.ndarray) else str(s.source), size)
        img = self._images.get(cache_key)
        if img is None:
            img = resize_bilinear(decode_image(s.source), size, size)
            self._images[cache_key] = img
        return img


# -- loading ----------------------------------------------------------------

def subject_from_filename(name: str) -> Optional[str]:
    stem = Path(name).stem
    return stem.split("_", 1)[0] if "_" in stem else None


def read_subject_map(path: Union[str, Path]) -> dict[str, str]:
    mapping = {}
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 2:
            raise DataError(f"{path}: subject map lines must be 'filename<TAB>subject_id', got {line!r}")
        mapping[parts[0].strip()] = parts[1].strip()
    return mapping


def load_directory_dataset(root: Union[str, Path], split: str,
                           subject_map: Optional[Union[str, Path]] = None) -> Dataset:
    """Enumerate ``root/split/<class>/*`` in lexicographic class and file order."""
    root = Path(root)
    base = root / split
    if not base.is_dir():
        raise DataError(f"missing split directory {base}")
    if subject_map is None and (root / SUBJECT_MAP_NAME).is_file():
        subject_map = root / SUBJECT_MAP_NAME
    mapping = read_subject_map(subject_map) if subject_map is not None else {}
    class_dirs = sorted((d for d in base.iterdir() if d.is_dir()), key=lambda d: d.name)
    if not class_dirs:
        raise DataError(f"{base} contains no class directories")
    samples = []
    for label, cdir in enumerate(class_dirs):
        files = sorted((f for f in cdir.iterdir() if f.is_file() and f.suffix.lower() in IMAGE_SUFFIXES),
                       key=lambda f: f.name)
        if not files:
            raise DataError(f"class directory {cdir} is empty")
        for f in files:
            subj = mapping.get(f.name, mapping.get(f"{cdir.name}/{f.name}")) or subject_from_filename(f.name)
            samples.append(Sample(f, label, subj, key=f"{cdir.name}/{f.name}"))
    return Dataset(samples, [d.name for d in class_dirs], split)


def load_splits(root: Union[str, Path], splits: Sequence[str] = SPLITS,
                subject_map: Optional[Union[str, Path]] = None) -> dict[str, Dataset]:
    """Load every split that exists; class names must agree across them."""
    out = {}
    for split in splits:
        if (Path(root) / split).is_dir():
            out[split] = load_directory_dataset(root, split, subject_map)
    if not out:
        raise DataError(f"no split directories under {root}")
    names = {tuple(ds.class_names) for ds in out.values()}
    if len(names) > 1:
        raise DataError(f"class names differ between splits of {root}: {sorted(names)}")
    return out


def merge(datasets: Sequence[Dataset], split: str = "all") -> Dataset:
    if not datasets:
        raise DataError("nothing to merge")
    samples = [s for ds in datasets for s in ds.samples]
    return Dataset(samples, list(datasets[0].class_names), split)


def decode_image(source: Union[Path, np.ndarray]) -> Tensor:
    """Float32 ``(H, W, 3)`` pixels in ``[0, 255]``; grayscale is replicated."""
    if isinstance(source, np.ndarray):
        arr = source.astype(np.float32)
    else:
        path = Path(source)
        try:
            if path.suffix.lower() == ".plt":
                arr = read_tensor(path).astype(np.float32)
            else:
                from PIL import Image

                with Image.open(path) as im:
                    arr = np.asarray(im.convert("RGB"), dtype=np.float32)
        except (OSError, TensorFormatError, ValueError) as exc:
            raise DataError(f"cannot decode {path}: {exc}") from exc
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.ndim != 3 or arr.shape[2] not in (1, 3):
        raise DataError(f"image {source if not isinstance(source, np.ndarray) else '<array>'} has shape {arr.shape}")
    if arr.shape[2] == 1:
        arr = np.repeat(arr, 3, axis=2)
    if arr.size and (arr.min() < 0 or arr.max() > 255):
        raise DataError(f"pixel values outside [0, 255] in {source if not isinstance(source, np.ndarray) else '<array>'}")
    return arr


# -- preprocessing ----------------------------------------------------------

def _axis_weights(n_in: int, n_out: int):
    src = (np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    lo = np.floor(src).astype(np.int64)
    hi = np.minimum(lo + 1, n_in - 1)
    return lo, hi, src - lo


def resize_bilinear(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Bilinear resize of an ``(H, W, C)`` image with half-pixel centres.

    Source coordinate of output index ``i`` is ``(i + 0.5) * in / out - 0.5``,
    clamped to the valid range.
    """
    h, w = x.shape[:2]
    if (h, w) == (out_h, out_w):
        return x.copy()
    y0, y1, wy = _axis_weights(h, out_h)
    x0, x1, wx = _axis_weights(w, out_w)
    xd = x.astype(np.float64)
    rows = xd[y0] * (1 - wy)[:, None, None] + xd[y1] * wy[:, None, None]
    out = rows[:, x0] * (1 - wx)[None, :, None] + rows[:, x1] * wx[None, :, None]
    return out.astype(x.dtype)


def preprocess_scale(x: Tensor) -> Tensor:
    if x.size and (x.min() < 0 or x.max() > 255):
        raise ValueError("pixel values must lie in [0, 255]")
    return (x / 127.5 - 1.0).astype(np.float32)


def random_flip(x: Tensor, rng: Rng, p: float = 0.5) -> Tensor:
    """Mirror the width axis with probability ``p``."""
    return x[:, ::-1].copy() if rng.random() < p else x


def random_contrast(x: Tensor, rng: Rng, delta: float = 0.2) -> Tensor:
    f = float(rng.uniform(lo=1.0 - delta, hi=1.0 + delta))
    mu = x.mean(axis=(0, 1), dtype=np.float64)
    out = (x - mu) * f + mu
    return np.clip(out, 0.0, 255.0).astype(x.dtype)


def augment(x: Tensor, rng: Rng, flip_p: float = 0.5, contrast_delta: float = 0.2) -> Tensor:
    return random_contrast(random_flip(x, rng, flip_p), rng, contrast_delta)


# -- batching ---------------------------------------------------------------

def batches(ds: Dataset, batch_size: int = 8, rng: Optional[Rng] = None, augment_train: Optional[bool] = None,
            size: int = 224, shuffle: Optional[bool] = None) -> Iterator[tuple[Tensor, np.ndarray]]:
    """Yield ``(x, labels)`` with ``x`` of shape ``[<=batch_size, size, size, 3]`` in ``[-1, 1]``.

    Training splits are shuffled and augmented by default; the last partial
    batch is kept.
    """
    if len(ds) == 0:
        raise DataError("cannot batch an empty dataset")
    is_train = ds.split == "train"
    do_aug = is_train if augment_train is None else augment_train
    do_shuffle = is_train if shuffle is None else shuffle
    if (do_aug or do_shuffle) and rng is None:
        raise ValueError("a seeded Rng is required for shuffling or augmentation")
    order = rng.permutation(len(ds)) if do_shuffle else np.arange(len(ds))
    for start in range(0, len(ds), batch_size):
        idx = order[start:start + batch_size]
        imgs = []
        for i in idx:
            img = ds.image(int(i), size)
            if do_aug:
                img = augment(img, rng)
            imgs.append(preprocess_scale(img))
        yield np.stack(imgs), ds.labels[idx]


# -- CK+ folds and challenging subsets ----------------------------------------

def ckplus_subject_folds(ds: Dataset, k: int = 10) -> list[tuple[Dataset, Dataset]]:
    """Subject-independent folds: sorted subjects dealt round-robin into ``k`` folds."""
    if k < 2:
        raise ValueError("need at least two folds")
    missing = [s.key or str(s.source) for s in ds.samples if not s.subject_id]
    if missing:
        raise DataError(f"{len(missing)} samples lack a subject id (first: {missing[0]})")
    subjects = sorted({s.subject_id for s in ds.samples})
    if len(subjects) < k:
        raise DataError(f"{len(subjects)} subjects cannot fill {k} folds")
    fold_of = {subj: i % k for i, subj in enumerate(subjects)}
    folds = []
    for f in range(k):
        test_idx = [i for i, s in enumerate(ds.samples) if fold_of[s.subject_id] == f]
        train_idx = [i for i, s in enumerate(ds.samples) if fold_of[s.subject_id] != f]
        folds.append((ds.select(train_idx, "train"), ds.select(test_idx, "test")))
    return folds


@dataclass
class SubsetList:
    name: str
    members: list[int]
    unresolved: list[str] = field(default_factory=list)


def _identifiers(sample: Sample, split: str) -> list[str]:
    ids = [sample.key]
    if sample.key:
        ids.append(sample.key.split("/", 1)[-1])
        ids.append(f"{split}/{sample.key}")
    if isinstance(sample.source, Path):
        ids.append(sample.source.name)
        ids.append(str(sample.source))
    return ids


def load_subset_list(path: Union[str, Path], test_ds: Dataset, name: Optional[str] = None) -> SubsetList:
    """Resolve a one-identifier-per-line list against ``test_ds``.

    Identifiers may be a bare filename, ``class/file`` or ``split/class/file``.
    Unknown lines are reported, not fatal; duplicates collapse.
    """
    path = Path(path)
    lookup: dict[str, int] = {}
    for i, s in enumerate(test_ds.samples):
        for ident in _identifiers(s, test_ds.split):
            lookup.setdefault(ident, i)
    members: list[int] = []
    seen: set[int] = set()
    unresolved = []
    for line in path.read_text(encoding="utf-8").splitlines():
        ident = line.strip()
        if not ident:
            continue
        idx = lookup.get(ident)
        if idx is None:
            unresolved.append(ident)
        elif idx not in seen:
            seen.add(idx)
            members.append(idx)
    if unresolved:
        log.warning("%d subset entries not found in the %s split (first: %s)", len(unresolved), test_ds.split, unresolved[0])
    return SubsetList(name or path.stem, sorted(members), unresolved)
