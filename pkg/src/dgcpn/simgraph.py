"""Graph-neighbor coherence over a k-NN graph of coexistent pairs.

Pipeline, all over the training set:

* ``pairwise_distance``: fused similarity ``(1 - alpha) * cos_img + alpha * cos_txt``
  (called a distance, but larger means closer).
* ``conditional_prob``: each node spreads unit mass over its ``k`` most similar
  nodes, proportional to similarity. The node itself is one of them.
* ``gc_probability``: ``P = Pc @ Pc.T``, the chance that two nodes share a
  virtual label through a common intermediate node.
* ``gc_final``: ``2 * ((1 - gamma) * dist + gamma * beta * P) - 1``, the training
  target in cosine range.
"""

from __future__ import annotations

import hashlib
import logging
import os
import struct
import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Union

import numpy as np
import scipy.sparse as sp

from dgcpn.dataset import PairedDataset

log = logging.getLogger(__name__)

NORM_EPS = 1e-12
# Below this k/m ratio the inverted-index product beats a dense BLAS product.
SPARSE_DENSITY_CUTOFF = 0.125
ROW_BLOCK = 1024


class IsolatedNodeError(ValueError):
    """A node whose neighbor similarities sum to zero has no conditional distribution."""


@dataclass(frozen=True)
class GcParams:
    """Coherence hyperparameters.

    ``alpha`` trades image against text similarity, ``gamma`` trades the fused
    pairwise similarity against coherence, ``beta`` rescales coherence and
    ``k`` is the neighborhood size. With ``auto_beta`` the scale is set to
    ``1 / mean(diag(P))`` instead of ``beta``.
    """

    alpha: float = 0.01
    gamma: float = 0.3
    beta: float = 4000.0
    k: int = 2000
    include_self: bool = True
    auto_beta: bool = False

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError("gamma must lie in [0, 1]")
        if not self.beta > 0:
            raise ValueError("beta must be > 0")
        if int(self.k) != self.k or self.k < 1:
            raise ValueError("k must be a positive integer")


@dataclass(frozen=True, eq=False)
class GcModel:
    dist: np.ndarray
    pcond: sp.csr_matrix
    prob: np.ndarray
    s_final: np.ndarray
    params: GcParams
    beta: float  # the scale actually applied (differs from params.beta under auto_beta)

    @property
    def m(self) -> int:
        return self.dist.shape[0]


def cosine(x, y) -> float:
    """Cosine similarity of two vectors; 0 if either norm is below 1e-12."""
    x = np.asarray(x, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    if x.shape != y.shape:
        raise ValueError(f"dimension mismatch: {x.size} vs {y.size}")
    nx, ny = np.linalg.norm(x), np.linalg.norm(y)
    if nx < NORM_EPS or ny < NORM_EPS:
        return 0.0
    return float(np.clip(x @ y / (nx * ny), -1.0, 1.0))


def _normalize_rows(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    out = np.zeros_like(x)
    ok = norms[:, 0] >= NORM_EPS
    out[ok] = x[ok] / norms[ok]
    return out


def cosine_matrix(X, Y=None) -> np.ndarray:
    """All-pairs cosine similarity between rows of ``X`` and rows of ``Y``.

    Zero rows produce zero similarities. Results are clipped to [-1, 1] to
    absorb rounding.
    """
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    Y = X if Y is None else np.atleast_2d(np.asarray(Y, dtype=np.float64))
    if X.shape[1] != Y.shape[1]:
        raise ValueError(f"dimension mismatch: {X.shape[1]} vs {Y.shape[1]}")
    nx = _normalize_rows(X)
    ny = nx if Y is X else _normalize_rows(Y)
    return np.clip(nx @ ny.T, -1.0, 1.0)


def pairwise_distance(ds: PairedDataset, alpha: float) -> np.ndarray:
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha must lie in [0, 1]")
    c_img = cosine_matrix(ds.img_feats)
    c_txt = cosine_matrix(ds.txt_feats)
    return (1.0 - alpha) * c_img + alpha * c_txt


def conditional_prob(dist: np.ndarray, k: int, include_self: bool = True) -> sp.csr_matrix:
    """Row-normalized k-NN weights of a similarity matrix.

    Row ``i`` keeps the ``k`` columns with the largest ``dist[i]`` (ties go to
    the lower column index) and scales them to sum to one. With
    ``include_self=False`` column ``i`` is never selected for row ``i``.
    """
    dist = np.asarray(dist, dtype=np.float64)
    m = dist.shape[0]
    if dist.ndim != 2 or dist.shape[1] != m:
        raise ValueError("dist must be square")
    limit = m if include_self else m - 1
    if int(k) != k or not 1 <= k <= limit:
        raise ValueError(f"k must lie in [1, {limit}]")
    k = int(k)
    if np.any(dist < 0):
        raise ValueError("dist entries must be >= 0")

    cols = np.empty((m, k), dtype=np.int64)
    vals = np.empty((m, k), dtype=np.float64)
    for start in range(0, m, ROW_BLOCK):
        block = dist[start:start + ROW_BLOCK]
        if not include_self:
            block = block.copy()
            rows = np.arange(block.shape[0])
            block[rows, start + rows] = -np.inf
        # stable sort on the negated row: descending similarity, ascending index on ties
        order = np.argsort(-block, axis=1, kind="stable")[:, :k]
        cols[start:start + ROW_BLOCK] = order
        vals[start:start + ROW_BLOCK] = np.take_along_axis(block, order, axis=1)

    sums = vals.sum(axis=1)
    isolated = np.flatnonzero(~(sums > 0))
    if isolated.size:
        raise IsolatedNodeError(f"isolated node {isolated[0]}: neighbor similarities sum to 0")
    vals /= sums[:, None]

    sort_cols = np.argsort(cols, axis=1)
    cols = np.take_along_axis(cols, sort_cols, axis=1)
    vals = np.take_along_axis(vals, sort_cols, axis=1)
    indptr = np.arange(0, m * k + 1, k, dtype=np.int64)
    return sp.csr_matrix((vals.ravel(), cols.ravel(), indptr), shape=(m, m))


def _gc_probability_inverted(pcond: sp.csr_matrix) -> np.ndarray:
    # For every intermediate node q, the rows that list q as a neighbor all
    # share q: add the outer product of their weights. Cost is sum_q |rows(q)|^2.
    m = pcond.shape[0]
    csc = pcond.tocsc()
    csc.sort_indices()
    prob = np.zeros((m, m), dtype=np.float64)
    for q in range(m):
        lo, hi = csc.indptr[q], csc.indptr[q + 1]
        if lo == hi:
            continue
        rows = csc.indices[lo:hi]
        w = csc.data[lo:hi]
        prob[np.ix_(rows, rows)] += np.outer(w, w)
    return prob


def _gc_probability_blocked(pcond: sp.csr_matrix) -> np.ndarray:
    m = pcond.shape[0]
    right = pcond.T.tocsc()
    prob = np.empty((m, m), dtype=np.float64)
    for start in range(0, m, ROW_BLOCK):
        prob[start:start + ROW_BLOCK] = (pcond[start:start + ROW_BLOCK] @ right).toarray()
    # the sparse product need not be bit-symmetric
    return 0.5 * (prob + prob.T)


def gc_probability(pcond, method: str = "auto") -> np.ndarray:
    """``pcond @ pcond.T`` for a row-sparse, row-stochastic ``pcond``.

    ``method="sparse"`` uses the inverted-index accumulation (exactly
    symmetric); ``"blocked"`` streams row blocks through a sparse product and
    suits dense neighborhoods; ``"auto"`` picks by fill ratio.
    """
    pcond = sp.csr_matrix(pcond)
    m = pcond.shape[0]
    if method == "auto":
        density = pcond.nnz / float(m * m)
        method = "sparse" if density <= SPARSE_DENSITY_CUTOFF else "blocked"
    if method == "sparse":
        return _gc_probability_inverted(pcond)
    if method == "blocked":
        return _gc_probability_blocked(pcond)
    raise ValueError(f"unknown method {method!r}")


def gc_final(dist: np.ndarray, prob: np.ndarray, gamma: float, beta: float) -> np.ndarray:
    if dist.shape != prob.shape:
        raise ValueError("dist and prob shapes differ")
    if not 0.0 <= gamma <= 1.0:
        raise ValueError("gamma must lie in [0, 1]")
    if not beta > 0:
        raise ValueError("beta must be > 0")
    s = (1.0 - gamma) * dist + gamma * beta * prob
    return 2.0 * s - 1.0


def auto_beta(prob: np.ndarray) -> float:
    return 1.0 / float(np.mean(np.diag(prob)))


def compute_gc(ds: PairedDataset, params: GcParams, method: str = "auto") -> GcModel:
    if params.k > ds.m:
        raise ValueError(f"k={params.k} exceeds the number of nodes m={ds.m}")
    dist = pairwise_distance(ds, params.alpha)
    pcond = conditional_prob(dist, params.k, include_self=params.include_self)
    prob = gc_probability(pcond, method=method)
    beta = auto_beta(prob) if params.auto_beta else float(params.beta)
    s_final = gc_final(dist, prob, params.gamma, beta)
    return GcModel(dist=dist, pcond=pcond, prob=prob, s_final=s_final, params=params, beta=beta)


# -- cache -------------------------------------------------------------------

GCM_MAGIC = b"GCM1"
_GCM_HEADER = struct.Struct("<4sIIdddd??Q")


def cache_key(ds: PairedDataset, params: GcParams) -> str:
    h = hashlib.sha256()
    h.update(np.asarray(ds.img_feats.shape, dtype="<u8").tobytes())
    h.update(ds.img_feats.astype("<f4").tobytes())
    h.update(np.asarray(ds.txt_feats.shape, dtype="<u8").tobytes())
    h.update(ds.txt_feats.astype("<f4").tobytes())
    h.update(repr((params.alpha, params.gamma, params.beta, params.k,
                   params.include_self, params.auto_beta)).encode())
    return h.hexdigest()


def save_gc(model: GcModel, path: Union[str, os.PathLike]) -> None:
    """Binary dump of a GcModel (little-endian, float64 payloads)."""
    p = model.params
    pc = model.pcond
    header = _GCM_HEADER.pack(GCM_MAGIC, model.m, p.k, p.alpha, p.gamma, p.beta, model.beta,
                              p.include_self, p.auto_beta, pc.nnz)
    path = Path(path)
    fd, tmp = tempfile.mkstemp(prefix=".gcm-", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(header)
            fh.write(model.dist.astype("<f8").tobytes())
            fh.write(pc.indptr.astype("<u8").tobytes())
            fh.write(pc.indices.astype("<u4").tobytes())
            fh.write(pc.data.astype("<f8").tobytes())
            fh.write(model.prob.astype("<f8").tobytes())
            fh.write(model.s_final.astype("<f8").tobytes())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_gc(path: Union[str, os.PathLike]) -> GcModel:
    raw = Path(path).read_bytes()
    if raw[:4] != GCM_MAGIC:
        raise ValueError(f"{path}: not a GC cache file")
    magic, m, k, alpha, gamma, beta, eff_beta, incl, auto, nnz = _GCM_HEADER.unpack_from(raw)
    expected = _GCM_HEADER.size + 8 * m * m * 3 + 8 * (m + 1) + 4 * nnz + 8 * nnz
    if len(raw) != expected:
        raise ValueError(f"{path}: corrupt GC cache ({len(raw)} bytes, expected {expected})")
    off = _GCM_HEADER.size

    def take(dtype, count):
        nonlocal off
        arr = np.frombuffer(raw, dtype=dtype, count=count, offset=off)
        off += arr.nbytes
        return arr

    dist = take("<f8", m * m).reshape(m, m).astype(np.float64)
    indptr = take("<u8", m + 1).astype(np.int64)
    indices = take("<u4", nnz).astype(np.int32)
    data = take("<f8", nnz).astype(np.float64)
    prob = take("<f8", m * m).reshape(m, m).astype(np.float64)
    s_final = take("<f8", m * m).reshape(m, m).astype(np.float64)
    params = GcParams(alpha=alpha, gamma=gamma, beta=beta, k=k, include_self=incl, auto_beta=auto)
    pcond = sp.csr_matrix((data, indices, indptr), shape=(m, m))
    return GcModel(dist=dist, pcond=pcond, prob=prob, s_final=s_final, params=params, beta=eff_beta)


def compute_gc_cached(ds: PairedDataset, params: GcParams,
                      cache_dir: Optional[Union[str, os.PathLike]] = None) -> GcModel:
    """``compute_gc`` backed by an on-disk cache keyed by content hash."""
    if cache_dir is None:
        return compute_gc(ds, params)
    cache_dir = Path(cache_dir)
    cache_dir.mkdir(parents=True, exist_ok=True)
    path = cache_dir / f"gc-{cache_key(ds, params)}.gcm"
    if path.exists():
        try:
            log.info("GC cache hit: %s", path)
            return load_gc(path)
        except ValueError:
            log.warning("discarding unreadable GC cache file %s", path)
    model = compute_gc(ds, params)
    save_gc(model, path)
    return model
