"""Datasets, IDX files and the partition protocols used to build merge pairs.

Every splitter has an ``*_indices`` form returning index arrays into the
input, which is what the partition tests check, and a dataset form built on it.
"""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .numerics import make_rng


class FormatError(ValueError):
    """Malformed IDX file."""


@dataclass
class LabeledDataset:
    features: np.ndarray
    labels: np.ndarray
    num_classes: int
    provenance: str = ""

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2 or len(self.features) != len(self.labels):
            raise ValueError("features must be N x d with one label per row")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError(f"labels must lie in [0, {self.num_classes})")
        if not np.all(np.isfinite(self.features)):
            raise ValueError("features contain NaN or Inf")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def subset(self, idx, note: str = "") -> "LabeledDataset":
        idx = np.asarray(idx, dtype=np.int64)
        prov = f"{self.provenance}|{note}" if note else self.provenance
        return LabeledDataset(self.features[idx], self.labels[idx], self.num_classes, prov)

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.num_classes)


def concat(datasets: list[LabeledDataset], provenance: str = "") -> LabeledDataset:
    return LabeledDataset(np.concatenate([d.features for d in datasets]),
                          np.concatenate([d.labels for d in datasets]),
                          max(d.num_classes for d in datasets), provenance)


# ------------------------------------------------------------------------ IDX

_IDX_TYPES = {
    0x08: np.dtype(">u1"),
    0x09: np.dtype(">i1"),
    0x0B: np.dtype(">i2"),
    0x0C: np.dtype(">i4"),
    0x0D: np.dtype(">f4"),
    0x0E: np.dtype(">f8"),
}
_IDX_CODES = {v: k for k, v in _IDX_TYPES.items()}


def read_idx(path) -> np.ndarray:
    """Read any IDX array (big-endian header, row-major payload)."""
    raw = Path(path).read_bytes()
    if len(raw) < 4:
        raise FormatError(f"{path}: truncated header at byte offset {len(raw)}")
    zero, code, ndim = struct.unpack(">HBB", raw[:4])
    if zero != 0 or code not in _IDX_TYPES:
        raise FormatError(f"{path}: bad magic 0x{raw[:4].hex()} at byte offset 0")
    head = 4 + 4 * ndim
    if len(raw) < head:
        raise FormatError(f"{path}: truncated dimension header at byte offset {len(raw)}")
    dims = struct.unpack(f">{ndim}I", raw[4:head])
    dtype = _IDX_TYPES[code]
    need = head + int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
    if len(raw) < need:
        raise FormatError(f"{path}: payload truncated at byte offset {len(raw)}, expected {need} bytes")
    if len(raw) > need:
        raise FormatError(f"{path}: {len(raw) - need} trailing bytes after offset {need}")
    return np.frombuffer(raw, dtype=dtype, offset=head).reshape(dims)


def write_idx(path, array) -> None:
    a = np.asarray(array)
    if a.dtype.kind == "f":
        a = a.astype(">f8")
    elif a.dtype.kind in "iu" and a.size and (a.min() < 0 or a.max() > 255):
        a = a.astype(">i4")
    elif a.dtype.kind in "iub":
        a = a.astype(">u1")
    code = _IDX_CODES[a.dtype]
    header = struct.pack(">HBB", 0, code, a.ndim) + struct.pack(f">{a.ndim}I", *a.shape)
    Path(path).write_bytes(header + np.ascontiguousarray(a).tobytes())


def load_idx(images_path, labels_path, normalize: bool = True,
             num_classes: int | None = None) -> LabeledDataset:
    """Load an image/label IDX pair (e.g. the MNIST files) as a flat dataset.

    With ``normalize`` byte images are scaled to [0, 1] and then standardized
    by the global mean and std of that file.
    """
    images = read_idx(images_path)
    labels = read_idx(labels_path)
    if labels.ndim != 1:
        raise FormatError(f"{labels_path}: labels must be 1-d, got {labels.ndim} dims at byte offset 3")
    if len(images) != len(labels):
        raise FormatError(f"{labels_path}: {len(labels)} labels for {len(images)} images "
                          f"(count field at byte offset 4)")
    x = images.reshape(len(images), -1).astype(np.float64)
    if normalize:
        if images.dtype == np.dtype(">u1"):
            x = x / 255.0
        std = x.std()
        x = (x - x.mean()) / (std if std > 0 else 1.0)
    y = labels.astype(np.int64)
    c = int(num_classes if num_classes is not None else y.max() + 1)
    return LabeledDataset(x, y, c, f"idx:{Path(images_path).name}")


def save_idx_dataset(prefix, ds: LabeledDataset, as_bytes: bool = False) -> tuple[Path, Path]:
    """Write ``<prefix>.images.idx`` and ``<prefix>.labels.idx``."""
    prefix = Path(prefix)
    img, lab = Path(f"{prefix}.images.idx"), Path(f"{prefix}.labels.idx")
    feats = np.clip(np.rint(ds.features), 0, 255).astype(np.uint8) if as_bytes else ds.features
    write_idx(img, feats)
    write_idx(lab, ds.labels.astype(np.uint8 if ds.num_classes <= 256 else np.int32))
    return img, lab


def load_idx_dataset(prefix, num_classes: int | None = None, normalize: bool = False) -> LabeledDataset:
    return load_idx(f"{prefix}.images.idx", f"{prefix}.labels.idx", normalize, num_classes)


# ------------------------------------------------------------------ synthetic


def synth_blobs(num_classes: int, per_class: int, dim: int, spread: float, seed: int,
                clusters_per_class: int = 1, separation: float = 1.0) -> LabeledDataset:
    """Gaussian blobs around seeded random centers.

    Each class owns ``clusters_per_class`` centers drawn from
    ``N(0, separation**2)`` per coordinate; points pick one of their class's
    centers uniformly and add isotropic noise of std ``spread``. More than one
    cluster per class makes the task non-linear.
    """
    if num_classes < 2 or per_class < 1 or dim < 1 or clusters_per_class < 1:
        raise ValueError("need >= 2 classes and positive sizes")
    rng = make_rng(seed)
    centers = rng.standard_normal((num_classes, clusters_per_class, dim)) * separation
    labels = np.repeat(np.arange(num_classes), per_class)
    which = rng.integers(0, clusters_per_class, size=len(labels))
    x = centers[labels, which] + spread * rng.standard_normal((len(labels), dim))
    return LabeledDataset(x, labels, num_classes,
                          f"blobs(C={num_classes},n={per_class},d={dim},s={spread},k={clusters_per_class},seed={seed})")


# ----------------------------------------------------------------- splitters


def _class_indices(labels: np.ndarray, num_classes: int) -> list[np.ndarray]:
    return [np.flatnonzero(labels == c) for c in range(num_classes)]


def eighty_twenty_indices(labels, num_classes: int, seed: int,
                          majority_fraction: float = 0.8) -> tuple[np.ndarray, np.ndarray]:
    """Part A takes ``floor(f*n_c)`` of each of the first ceil(C/2) classes and
    ``floor((1-f)*n_c)`` of the rest; part B takes the complement."""
    if not 0 < majority_fraction < 1:
        raise ValueError("majority_fraction must lie in (0, 1)")
    labels = np.asarray(labels)
    rng = make_rng(seed)
    first = math.ceil(num_classes / 2)
    part_a, part_b = [], []
    for c, idx in enumerate(_class_indices(labels, num_classes)):
        if len(idx) < 5:
            raise ValueError(f"class {c} has {len(idx)} examples; the 80/20 split needs at least 5")
        idx = rng.permutation(idx)
        frac = majority_fraction if c < first else 1.0 - majority_fraction
        # the epsilon guards against 0.8*10 evaluating to 7.999...
        k = int(math.floor(frac * len(idx) + 1e-9))
        part_a.append(idx[:k])
        part_b.append(idx[k:])
    return np.sort(np.concatenate(part_a)), np.sort(np.concatenate(part_b))


def split_eighty_twenty(ds: LabeledDataset, seed: int,
                        majority_fraction: float = 0.8) -> tuple[LabeledDataset, LabeledDataset]:
    a, b = eighty_twenty_indices(ds.labels, ds.num_classes, seed, majority_fraction)
    return ds.subset(a, f"8020[A,seed={seed}]"), ds.subset(b, f"8020[B,seed={seed}]")


def sample_dirichlet(alphas, rng: np.random.Generator) -> np.ndarray:
    """One Dirichlet draw as normalized Gamma variates."""
    alphas = np.asarray(alphas, dtype=np.float64)
    g = rng.standard_gamma(alphas)
    total = g.sum()
    if total == 0.0:
        # every gamma underflowed; happens only for tiny alphas
        out = np.zeros_like(alphas)
        out[rng.integers(len(alphas))] = 1.0
        return out
    return g / total


def dirichlet_indices(labels, num_classes: int, alphas, seed: int) -> list[np.ndarray]:
    alphas = np.asarray(alphas, dtype=np.float64)
    if alphas.ndim != 1 or len(alphas) < 2 or np.any(alphas <= 0):
        raise ValueError("need at least two positive Dirichlet concentrations")
    labels = np.asarray(labels)
    rng = make_rng(seed)
    parts: list[list[np.ndarray]] = [[] for _ in alphas]
    for idx in _class_indices(labels, num_classes):
        idx = rng.permutation(idx)
        p = sample_dirichlet(alphas, rng)
        counts = np.floor(p[:-1] * len(idx)).astype(np.int64)
        bounds = np.concatenate([[0], np.cumsum(counts), [len(idx)]])
        for j in range(len(alphas)):
            parts[j].append(idx[bounds[j]:bounds[j + 1]])
    return [np.sort(np.concatenate(p)) for p in parts]


def split_dirichlet(ds: LabeledDataset, alphas, seed: int) -> list[LabeledDataset]:
    return [ds.subset(idx, f"dirichlet[{j},alphas={list(np.asarray(alphas, float))},seed={seed}]")
            for j, idx in enumerate(dirichlet_indices(ds.labels, ds.num_classes, alphas, seed))]


def subsample_indices(labels, num_classes: int, k: int, seed: int) -> np.ndarray:
    if k < 1:
        raise ValueError("k must be positive")
    labels = np.asarray(labels)
    rng = make_rng(seed)
    picked = []
    for c, idx in enumerate(_class_indices(labels, num_classes)):
        if len(idx) < k:
            raise ValueError(f"class {c} has {len(idx)} examples, fewer than k={k}")
        picked.append(rng.choice(idx, size=k, replace=False))
    return np.concatenate(picked)


def subsample_per_class(ds: LabeledDataset, k: int, seed: int) -> LabeledDataset:
    return ds.subset(subsample_indices(ds.labels, ds.num_classes, k, seed), f"k={k},seed={seed}")


def split_dataset(ds: LabeledDataset, kind: str, seed: int, **params) -> list[LabeledDataset]:
    """Dispatch on a split kind name: ``eighty_twenty``, ``dirichlet`` or ``per_class_subsample``."""
    if kind == "eighty_twenty":
        return list(split_eighty_twenty(ds, seed, params.get("majority_fraction", 0.8)))
    if kind == "dirichlet":
        return split_dirichlet(ds, params.get("alphas", (0.5, 0.5)), seed)
    if kind == "per_class_subsample":
        return [subsample_per_class(ds, params["k"], seed)]
    raise ValueError(f"unknown split kind {kind!r}")
