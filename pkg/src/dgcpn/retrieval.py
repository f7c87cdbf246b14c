"""Bit-packed binary codes, Hamming ranking and MAP evaluation.

Bit ``b`` of item ``i`` lives in word ``b // 64`` at bit position ``b % 64``;
a set bit encodes code value +1 and a clear bit -1. Padding bits beyond
``d_bits`` are always zero.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Union

import numpy as np

CMB_MAGIC = b"CMB1"
_CMB_HEADER = struct.Struct("<4sII")
QUERY_CHUNK = 256


@dataclass(frozen=True, eq=False)
class PackedCodes:
    n: int
    d_bits: int
    words: np.ndarray  # n x ceil(d_bits / 64), uint64

    @property
    def n_words(self) -> int:
        return self.words.shape[1]

    def __getitem__(self, idx) -> "PackedCodes":
        words = np.atleast_2d(self.words[idx])
        return PackedCodes(words.shape[0], self.d_bits, words)

    def __eq__(self, other):
        if not isinstance(other, PackedCodes):
            return NotImplemented
        return self.d_bits == other.d_bits and np.array_equal(self.words, other.words)

    __hash__ = None


def n_words_for(d_bits: int) -> int:
    return (d_bits + 63) // 64


def pack(signs) -> PackedCodes:
    """Pack an ``n x d`` matrix of +-1 entries into 64-bit words."""
    b = np.atleast_2d(np.asarray(signs))
    if b.ndim != 2:
        raise ValueError("codes must be an n x d matrix")
    if not np.all((b == 1) | (b == -1)):
        raise ValueError("codes must contain only -1 and +1")
    n, d = b.shape
    w = n_words_for(d)
    bits = np.zeros((n, w * 64), dtype=np.uint8)
    bits[:, :d] = b > 0
    words = np.packbits(bits, axis=1, bitorder="little").view("<u8")
    return PackedCodes(n, d, words.astype(np.uint64).reshape(n, w))


def unpack(codes: PackedCodes) -> np.ndarray:
    as_bytes = np.ascontiguousarray(codes.words.astype("<u8")).view(np.uint8)
    bits = np.unpackbits(as_bytes.reshape(codes.n, -1), axis=1, bitorder="little")
    return np.where(bits[:, :codes.d_bits] == 1, 1, -1).astype(np.int8)


def hamming(a: PackedCodes, b: PackedCodes) -> int:
    """Hamming distance between two single-row code sets."""
    if a.d_bits != b.d_bits:
        raise ValueError(f"code length mismatch: {a.d_bits} vs {b.d_bits}")
    if a.n != 1 or b.n != 1:
        raise ValueError("hamming() compares single rows; use hamming_matrix for sets")
    return int(np.bitwise_count(a.words[0] ^ b.words[0]).sum())


def hamming_matrix(queries: PackedCodes, items: PackedCodes) -> np.ndarray:
    if queries.d_bits != items.d_bits:
        raise ValueError(f"code length mismatch: {queries.d_bits} vs {items.d_bits}")
    out = np.empty((queries.n, items.n), dtype=np.int32)
    for start in range(0, queries.n, QUERY_CHUNK):
        q = queries.words[start:start + QUERY_CHUNK]
        x = q[:, None, :] ^ items.words[None, :, :]
        out[start:start + QUERY_CHUNK] = np.bitwise_count(x).sum(axis=2, dtype=np.int32)
    return out


def rank(distances) -> np.ndarray:
    """Ascending distance, ties by ascending item index."""
    return np.argsort(np.asarray(distances), kind="stable")


def ap_from_ranked(rel_ranked, cutoff: Optional[int] = None) -> Optional[float]:
    """Average precision of a relevance vector already in rank order.

    Returns ``None`` when no retrieval item is relevant at all. With a cutoff,
    only the top ``cutoff`` positions count, and a query with no relevant item
    among them scores 0.
    """
    rel = np.asarray(rel_ranked, dtype=np.float64)
    if rel.sum() == 0:
        return None
    if cutoff is not None:
        rel = rel[:cutoff]
    hits = rel.sum()
    if hits == 0:
        return 0.0
    precision = np.cumsum(rel) / np.arange(1, rel.size + 1)
    return float((precision * rel).sum() / hits)


def rank_and_ap(query_code: PackedCodes, retrieval_codes: PackedCodes, relevance,
                cutoff: Optional[int] = None) -> Optional[float]:
    relevance = np.asarray(relevance)
    if relevance.shape != (retrieval_codes.n,):
        raise ValueError("relevance length must equal the retrieval set size")
    dist = hamming_matrix(query_code[0:1], retrieval_codes)[0]
    return ap_from_ranked(relevance[rank(dist)], cutoff)


def relevance_matrix(query_labels, item_labels) -> np.ndarray:
    """``rel[i, j]`` is True when the label rows share at least one class."""
    q = np.asarray(query_labels, dtype=np.int64)
    r = np.asarray(item_labels, dtype=np.int64)
    return (q @ r.T) > 0


@dataclass
class EvalReport:
    """Per-query AP (NaN for skipped queries), MAP and MAP@N of one task."""

    task: str
    ap: np.ndarray
    map: float
    map_at: Dict[int, float] = field(default_factory=dict)
    n_skipped: int = 0

    @property
    def n_queries(self) -> int:
        return int(self.ap.size)

    def to_dict(self) -> dict:
        return {
            "task": self.task,
            "n_queries": self.n_queries,
            "n_evaluated": self.n_queries - self.n_skipped,
            "n_skipped": self.n_skipped,
            "map": self.map,
            "map_at": {str(k): v for k, v in sorted(self.map_at.items())},
            "ap": [None if np.isnan(x) else float(x) for x in self.ap],
        }

    def to_tsv(self) -> str:
        lines = [f"{self.task}\tmap\t{self.map!r}"]
        lines += [f"{self.task}\tmap@{k}\t{v!r}" for k, v in sorted(self.map_at.items())]
        lines.append(f"{self.task}\tn_queries\t{self.n_queries}")
        lines.append(f"{self.task}\tn_skipped\t{self.n_skipped}")
        return "\n".join(lines) + "\n"


def evaluate_ranking(order: np.ndarray, relevant: np.ndarray, cutoffs: Sequence[int] = (),
                     task: str = "") -> EvalReport:
    """MAP of precomputed rankings; ``order[i]`` ranks items for query ``i``."""
    nq = order.shape[0]
    if nq == 0:
        raise ValueError("empty query set")
    cutoffs = sorted(set(int(c) for c in cutoffs))
    aps = np.full(nq, np.nan)
    at = {c: np.full(nq, np.nan) for c in cutoffs}
    for i in range(nq):
        rel = relevant[i, order[i]]
        ap = ap_from_ranked(rel)
        if ap is None:
            continue
        aps[i] = ap
        for c in cutoffs:
            at[c][i] = ap_from_ranked(rel, c)
    skipped = int(np.isnan(aps).sum())
    if skipped == nq:
        mean = float("nan")
    else:
        mean = float(np.nanmean(aps))
    map_at = {c: (float(np.nanmean(v)) if skipped < nq else float("nan")) for c, v in at.items()}
    return EvalReport(task=task, ap=aps, map=mean, map_at=map_at, n_skipped=skipped)


def evaluate(query_codes: PackedCodes, query_labels, retrieval_codes: PackedCodes,
             retrieval_labels, cutoffs: Sequence[int] = (), task: str = "I2T") -> EvalReport:
    """Hamming-rank the retrieval set for every query and score it by MAP.

    Queries without any relevant retrieval item are excluded from the means
    and counted in ``n_skipped``.
    """
    if query_codes.n == 0:
        raise ValueError("empty query set")
    if query_labels is None or retrieval_labels is None:
        raise ValueError("evaluation needs labels on both sides")
    relevant = relevance_matrix(query_labels, retrieval_labels)
    if relevant.shape != (query_codes.n, retrieval_codes.n):
        raise ValueError("label counts do not match code counts")
    dist = hamming_matrix(query_codes, retrieval_codes)
    order = np.argsort(dist, axis=1, kind="stable")
    return evaluate_ranking(order, relevant, cutoffs, task)


def save_codes(codes: PackedCodes, path: Union[str, os.PathLike]) -> None:
    """``CMB1`` magic, u32 n, u32 d_bits, then the packed words (u64 LE)."""
    atomic_write(Path(path), _CMB_HEADER.pack(CMB_MAGIC, codes.n, codes.d_bits)
                  + codes.words.astype("<u8").tobytes())


def load_codes(path: Union[str, os.PathLike]) -> PackedCodes:
    raw = Path(path).read_bytes()
    if raw[:4] != CMB_MAGIC or len(raw) < _CMB_HEADER.size:
        raise ValueError(f"{path}: not a CMB code file")
    _, n, d_bits = _CMB_HEADER.unpack_from(raw)
    w = n_words_for(d_bits)
    if len(raw) != _CMB_HEADER.size + 8 * n * w:
        raise ValueError(f"{path}: payload size disagrees with header")
    words = np.frombuffer(raw, "<u8", n * w, _CMB_HEADER.size).reshape(n, w).astype(np.uint64)
    if d_bits % 64 and np.any(words[:, -1] >> np.uint64(d_bits % 64)):
        raise ValueError(f"{path}: nonzero padding bits")
    return PackedCodes(n, d_bits, words)


def write_reports(reports: List[EvalReport], tsv_path, json_path) -> None:
    atomic_write(Path(tsv_path), "".join(r.to_tsv() for r in reports).encode())
    doc = {"schema": "dgcpn.eval/1", "reports": [r.to_dict() for r in reports]}
    atomic_write(Path(json_path), (json.dumps(doc, indent=2, sort_keys=True) + "\n").encode())


def atomic_write(path: Path, payload: bytes) -> None:
    fd, tmp = tempfile.mkstemp(prefix=".tmp-", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
