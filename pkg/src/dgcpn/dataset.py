"""Paired image/text feature sets: CMF file format, synthetic generator, splits.

CMF layout (little-endian)::

    b"CMF1"  u32 m  u32 d_img  u32 d_txt  u32 n_classes
    f32[m * d_img]      image features, row-major
    f32[m * d_txt]      text features, row-major
    u8[m * n_classes]   labels (0/1), present only when n_classes > 0
"""

from __future__ import annotations

import os
import struct
import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Union

import numpy as np

CMF_MAGIC = b"CMF1"
_HEADER = struct.Struct("<4sIIII")


class DatasetError(ValueError):
    """Base class for invalid datasets and malformed CMF files."""


class BadMagicError(DatasetError):
    pass


class TruncatedFileError(DatasetError):
    pass


class DimensionMismatchError(DatasetError):
    pass


class NegativeFeatureError(DatasetError):
    pass


class EmptyDatasetError(DatasetError):
    pass


class UnlabeledItemError(DatasetError):
    pass


@dataclass(frozen=True, eq=False)
class PairedDataset:
    """``m`` coexistent image/text pairs; row ``i`` of both matrices is pair ``i``.

    Features are kept as float32 (the on-disk precision) so that save/load is
    bit-exact. Labels are optional and only used for evaluation.
    """

    img_feats: np.ndarray
    txt_feats: np.ndarray
    labels: Optional[np.ndarray] = None

    def __post_init__(self):
        img = np.ascontiguousarray(self.img_feats, dtype=np.float32)
        txt = np.ascontiguousarray(self.txt_feats, dtype=np.float32)
        if img.ndim != 2 or txt.ndim != 2:
            raise DimensionMismatchError("feature matrices must be 2-D")
        if img.shape[0] != txt.shape[0]:
            raise DimensionMismatchError(
                f"image rows ({img.shape[0]}) != text rows ({txt.shape[0]})"
            )
        if img.shape[0] == 0:
            raise EmptyDatasetError("empty dataset (m = 0)")
        if img.shape[1] == 0 or txt.shape[1] == 0:
            raise DimensionMismatchError("feature dimensions must be >= 1")
        for name, x in (("image", img), ("text", txt)):
            if not np.all(np.isfinite(x)):
                raise DatasetError(f"non-finite {name} feature entry")
            if np.any(x < 0):
                raise NegativeFeatureError(f"negative {name} feature entry")
        labels = self.labels
        if labels is not None:
            labels = np.ascontiguousarray(labels, dtype=np.uint8)
            if labels.ndim != 2 or labels.shape[0] != img.shape[0]:
                raise DimensionMismatchError("label matrix must be m x n_classes")
            if labels.shape[1] == 0:
                labels = None
            else:
                if np.any(labels > 1):
                    raise DatasetError("label entries must be 0 or 1")
                empty = np.flatnonzero(labels.sum(axis=1) == 0)
                if empty.size:
                    raise UnlabeledItemError(f"unlabeled item at row {empty[0]}")
        for arr in (img, txt, labels):
            if arr is not None:
                arr.flags.writeable = False
        object.__setattr__(self, "img_feats", img)
        object.__setattr__(self, "txt_feats", txt)
        object.__setattr__(self, "labels", labels)

    @property
    def m(self) -> int:
        return self.img_feats.shape[0]

    @property
    def d_img(self) -> int:
        return self.img_feats.shape[1]

    @property
    def d_txt(self) -> int:
        return self.txt_feats.shape[1]

    @property
    def n_classes(self) -> int:
        return 0 if self.labels is None else self.labels.shape[1]

    def subset(self, idx) -> "PairedDataset":
        idx = np.asarray(idx, dtype=np.intp)
        labels = None if self.labels is None else self.labels[idx]
        return PairedDataset(self.img_feats[idx], self.txt_feats[idx], labels)

    def __eq__(self, other):
        if not isinstance(other, PairedDataset):
            return NotImplemented
        if (self.labels is None) != (other.labels is None):
            return False
        same = (
            np.array_equal(self.img_feats, other.img_feats)
            and np.array_equal(self.txt_feats, other.txt_feats)
        )
        if self.labels is not None:
            same = same and np.array_equal(self.labels, other.labels)
        return same

    __hash__ = None


def save_dataset(ds: PairedDataset, path: Union[str, os.PathLike]) -> None:
    """Write ``ds`` as a CMF file.

    The file is written to a temporary sibling and renamed into place, so a
    failed write never leaves a partial file at ``path``.
    """
    path = Path(path)
    header = _HEADER.pack(CMF_MAGIC, ds.m, ds.d_img, ds.d_txt, ds.n_classes)
    fd, tmp = tempfile.mkstemp(prefix=".cmf-", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(header)
            fh.write(ds.img_feats.astype("<f4").tobytes())
            fh.write(ds.txt_feats.astype("<f4").tobytes())
            if ds.labels is not None:
                fh.write(ds.labels.astype(np.uint8).tobytes())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_dataset(path: Union[str, os.PathLike]) -> PairedDataset:
    raw = Path(path).read_bytes()
    if len(raw) < 4 or raw[:4] != CMF_MAGIC:
        raise BadMagicError(f"{path}: not a CMF file (bad magic)")
    if len(raw) < _HEADER.size:
        raise TruncatedFileError(f"{path}: truncated header")
    _, m, d_img, d_txt, n_classes = _HEADER.unpack_from(raw)
    if m == 0:
        raise EmptyDatasetError(f"{path}: empty dataset (m = 0)")
    n_img, n_txt = m * d_img, m * d_txt
    expected = _HEADER.size + 4 * (n_img + n_txt) + m * n_classes
    if len(raw) < expected:
        raise TruncatedFileError(f"{path}: expected {expected} bytes, found {len(raw)}")
    if len(raw) > expected:
        raise DimensionMismatchError(
            f"{path}: {len(raw) - expected} trailing bytes; header dimensions disagree with payload"
        )
    off = _HEADER.size
    img = np.frombuffer(raw, dtype="<f4", count=n_img, offset=off).reshape(m, d_img)
    off += 4 * n_img
    txt = np.frombuffer(raw, dtype="<f4", count=n_txt, offset=off).reshape(m, d_txt)
    off += 4 * n_txt
    labels = None
    if n_classes:
        labels = np.frombuffer(raw, dtype=np.uint8, count=m * n_classes, offset=off)
        labels = labels.reshape(m, n_classes)
    return PairedDataset(img.astype(np.float32), txt.astype(np.float32),
                         None if labels is None else labels.copy())


def gen_synthetic(
    n_clusters: int,
    per_cluster: int,
    d_img: int,
    d_txt: int,
    noise: float = 0.1,
    label_noise: float = 0.0,
    seed: int = 0,
) -> PairedDataset:
    """Clustered paired features with one-hot cluster labels.

    Each cluster has an image prototype and an independent text prototype,
    both uniform on ``[0, 1]^d``. Every pair is its cluster's prototypes plus
    Gaussian noise of std ``noise``, clamped at zero. With probability
    ``label_noise`` an item's label is moved to a uniformly chosen other
    cluster. Items are laid out cluster by cluster.
    """
    if n_clusters < 2 or per_cluster < 2:
        raise ValueError("need n_clusters >= 2 and per_cluster >= 2")
    if d_img < 1 or d_txt < 1:
        raise ValueError("feature dimensions must be >= 1")
    if not noise >= 0:
        raise ValueError("noise must be >= 0")
    if not 0.0 <= label_noise <= 1.0:
        raise ValueError("label_noise must lie in [0, 1]")
    rng = np.random.default_rng(seed)
    proto_img = rng.uniform(0.0, 1.0, size=(n_clusters, d_img))
    proto_txt = rng.uniform(0.0, 1.0, size=(n_clusters, d_txt))
    cluster = np.repeat(np.arange(n_clusters), per_cluster)
    m = cluster.size
    img = proto_img[cluster] + noise * rng.standard_normal((m, d_img))
    txt = proto_txt[cluster] + noise * rng.standard_normal((m, d_txt))
    np.maximum(img, 0.0, out=img)
    np.maximum(txt, 0.0, out=txt)

    flip = rng.random(m) < label_noise
    # offset in [1, n_clusters) lands uniformly on one of the other clusters
    offset = rng.integers(1, n_clusters, size=m)
    label_id = np.where(flip, (cluster + offset) % n_clusters, cluster)
    labels = np.zeros((m, n_clusters), dtype=np.uint8)
    labels[np.arange(m), label_id] = 1
    return PairedDataset(img.astype(np.float32), txt.astype(np.float32), labels)


@dataclass(frozen=True)
class SplitSpec:
    """Index sets of a retrieval experiment.

    ``train_idx`` is a subset of ``retrieval_idx``; both query sets are
    disjoint from the retrieval set and from each other.
    """

    retrieval_idx: np.ndarray
    train_idx: np.ndarray
    validation_query_idx: np.ndarray
    test_query_idx: np.ndarray

    def __post_init__(self):
        for name in ("retrieval_idx", "train_idx", "validation_query_idx", "test_query_idx"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=np.int64))
        r = set(self.retrieval_idx.tolist())
        v = set(self.validation_query_idx.tolist())
        t = set(self.test_query_idx.tolist())
        if not r:
            raise ValueError("retrieval set is empty")
        if not set(self.train_idx.tolist()) <= r:
            raise ValueError("train_idx must be a subset of retrieval_idx")
        if r & v or r & t or v & t:
            raise ValueError("query sets must be disjoint from retrieval and from each other")

    def to_dict(self) -> dict:
        return {
            "retrieval_idx": self.retrieval_idx.tolist(),
            "train_idx": self.train_idx.tolist(),
            "validation_query_idx": self.validation_query_idx.tolist(),
            "test_query_idx": self.test_query_idx.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SplitSpec":
        return cls(d["retrieval_idx"], d["train_idx"], d["validation_query_idx"], d["test_query_idx"])


def _count(part: Union[int, float], total: int, name: str) -> int:
    # floats are fractions of `total`, ints are absolute counts
    if isinstance(part, (bool, np.bool_)):
        raise TypeError(f"{name}: expected a count or a fraction")
    if isinstance(part, (int, np.integer)):
        n = int(part)
    else:
        if not 0.0 <= part <= 1.0:
            raise ValueError(f"{name}: fraction must lie in [0, 1]")
        n = int(round(part * total))
    if n < 0 or n > total:
        raise ValueError(f"{name}: count {n} out of range for {total} items")
    return n


def make_split(
    ds: Union[PairedDataset, int],
    test: Union[int, float] = 0.0,
    validation: Union[int, float] = 0.0,
    train: Union[int, float] = 1.0,
    seed: int = 0,
) -> SplitSpec:
    """Seeded retrieval/train/validation/test split.

    ``test`` and ``validation`` size the query sets (fractions of ``m`` or
    absolute counts); whatever remains is the retrieval set, and ``train``
    (fraction of the retrieval set or a count) picks the training subset.
    """
    m = ds if isinstance(ds, (int, np.integer)) else ds.m
    n_test = _count(test, m, "test")
    n_val = _count(validation, m, "validation")
    if n_test + n_val >= m:
        raise ValueError("query fractions leave the retrieval set empty")
    perm = np.random.default_rng(seed).permutation(m)
    test_idx = np.sort(perm[:n_test])
    val_idx = np.sort(perm[n_test:n_test + n_val])
    rest = perm[n_test + n_val:]
    n_train = _count(train, rest.size, "train")
    return SplitSpec(
        retrieval_idx=np.sort(rest),
        train_idx=np.sort(rest[:n_train]),
        validation_query_idx=val_idx,
        test_query_idx=test_idx,
    )

