"""Matching-set pools and exact kNN regression over feature frames."""

from __future__ import annotations

import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from threadpoolctl import threadpool_limits

from .feature_store import FeatureSequence

log = logging.getLogger(__name__)

METRICS = ("cosine", "euclidean")
DEFAULT_K = 4
DEFAULT_BLOCK = 128

_EPS = np.finfo(np.float64).eps


@dataclass(frozen=True)
class KnnConfig:
    k: int = DEFAULT_K
    metric: str = "cosine"

    def __post_init__(self):
        if int(self.k) != self.k or self.k < 1:
            raise ValueError(f"k must be a positive integer, got {self.k}")
        if self.metric not in METRICS:
            raise ValueError(f"metric must be one of {METRICS}, got {self.metric!r}")


def _row_norms(x: np.ndarray) -> np.ndarray:
    return np.sqrt(np.einsum("ij,ij->i", x, x))


@dataclass(frozen=True, eq=False)
class FeaturePool:
    """Collated reference frames for one target speaker.

    ``matrix`` holds the frames in float64, ``unit`` the same rows scaled to
    unit length, and ``provenance`` maps each row back to
    ``(utterance_id, frame_index)``.
    """

    matrix: np.ndarray
    norms: np.ndarray
    unit: np.ndarray
    provenance: tuple[tuple[str, int], ...]
    speaker_id: str
    frame_period_ms: float
    dropped: int = 0

    @property
    def size(self) -> int:
        return self.matrix.shape[0]

    @property
    def dim(self) -> int:
        return self.matrix.shape[1]


def _readonly(a):
    a.flags.writeable = False
    return a


def pool_from_matrix(matrix, speaker_id: str = "", provenance=None,
                     frame_period_ms: float = 20.0) -> FeaturePool:
    m = np.array(matrix, dtype=np.float64, order="C", copy=True)
    if m.ndim != 2:
        raise ValueError(f"pool matrix must be 2-D, got shape {m.shape}")
    if provenance is None:
        provenance = tuple(("", i) for i in range(m.shape[0]))
    provenance = tuple(provenance)
    norms = _row_norms(m)
    keep = norms > 0
    dropped = int((~keep).sum())
    if dropped:
        log.info("pool %r: dropped %d zero-norm frame(s)", speaker_id, dropped)
        m = m[keep]
        norms = norms[keep]
        provenance = tuple(p for p, k in zip(provenance, keep) if k)
    if m.shape[0] == 0:
        raise ValueError(f"pool {speaker_id!r} is empty after dropping zero-norm frames")
    unit = m / norms[:, None]
    return FeaturePool(_readonly(m), _readonly(norms), _readonly(unit), provenance,
                       speaker_id, float(frame_period_ms), dropped)


def build_pool(refs: Sequence[FeatureSequence], speaker_id: str = "") -> FeaturePool:
    """Collate reference sequences into one matching set, in input order."""
    if not refs:
        raise ValueError("no reference sequences given")
    dim = refs[0].dim
    for r in refs:
        if r.dim != dim:
            raise ValueError(f"dimension mismatch in pool {speaker_id!r}: {r.source_id!r} has D={r.dim}, expected {dim}")
    provenance = tuple((r.source_id, i) for r in refs for i in range(r.num_frames))
    matrix = np.concatenate([r.frames for r in refs], axis=0)
    return pool_from_matrix(matrix, speaker_id, provenance, refs[0].frame_period_ms)


def _check_k(cfg: KnnConfig, pool: FeaturePool):
    if cfg.k > pool.size:
        raise ValueError(f"k={cfg.k} exceeds pool size N={pool.size}")


def _query_norms(q: np.ndarray) -> np.ndarray:
    qn = _row_norms(q)
    if (qn == 0).any():
        raise ValueError("zero-norm query frame under cosine metric")
    return qn


def _rescored_select(approx: np.ndarray, k: int, slack: np.ndarray, rescore):
    """Pick the k nearest per row from screened distances.

    ``approx`` comes from one blocked matrix product and may carry rounding
    error up to ``slack`` per row. Every entry that could still belong to the
    top k is re-scored by ``rescore(i, cand)`` in the definitional form, and
    the final order uses those exact values with ties going to the lower row
    index. Re-scoring keeps genuine ties (duplicate rows, integer data)
    intact instead of letting rounding noise decide them.
    """
    rows, n = approx.shape
    idx = np.empty((rows, k), dtype=np.intp)
    dist = np.empty((rows, k))
    kth = np.partition(approx, k - 1, axis=1)[:, k - 1] if k < n else None
    for i in range(rows):
        if kth is None:
            cand = np.arange(n)
        else:
            cand = np.flatnonzero(approx[i] <= kth[i] + 2 * slack[i])
        exact = rescore(i, cand)
        order = np.lexsort((cand, exact))[:k]
        idx[i] = cand[order]
        dist[i] = exact[order]
    return idx, dist


def _cosine_select(q: np.ndarray, pool: FeaturePool, k: int):
    qn = _query_norms(q)
    approx = 1.0 - (q / qn[:, None]) @ pool.unit.T
    slack = np.full(q.shape[0], 8.0 * (pool.dim + 2) * _EPS)
    p = pool.matrix

    def rescore(i, cand):
        return 1.0 - (p[cand] @ q[i]) / (pool.norms[cand] * qn[i])

    return _rescored_select(approx, k, slack, rescore)


def _euclidean_select(q: np.ndarray, pool: FeaturePool, k: int):
    p = pool.matrix
    qsq = np.einsum("ij,ij->i", q, q)
    psq = pool.norms ** 2
    approx = qsq[:, None] + psq[None, :] - 2.0 * (q @ p.T)
    slack = 8.0 * (pool.dim + 2) * _EPS * (qsq + psq.max())

    def rescore(i, cand):
        diff = p[cand] - q[i]
        return np.einsum("ij,ij->i", diff, diff)

    idx, dist = _rescored_select(approx, k, slack, rescore)
    return idx, np.sqrt(dist)


def _block_neighbours(q: np.ndarray, pool: FeaturePool, cfg: KnnConfig):
    if cfg.metric == "cosine":
        return _cosine_select(q, pool, cfg.k)
    return _euclidean_select(q, pool, cfg.k)


def topk(query, pool: FeaturePool, cfg: KnnConfig) -> list[tuple[int, float]]:
    """The k nearest pool rows to ``query`` as ``(row_index, distance)``, nearest first."""
    q = np.asarray(query, dtype=np.float64).reshape(1, -1)
    if q.shape[1] != pool.dim:
        raise ValueError(f"query dim {q.shape[1]} != pool dim {pool.dim}")
    if not np.isfinite(q).all():
        raise ValueError("query contains non-finite values")
    _check_k(cfg, pool)
    idx, dist = _block_neighbours(q, pool, cfg)
    return [(int(i), float(d)) for i, d in zip(idx[0], dist[0])]


def _mean_rows(pool: FeaturePool, idx: np.ndarray) -> np.ndarray:
    # Neighbours are summed nearest-first, starting from the first row itself
    # (not from zero) so k=1 reproduces the row bit for bit, signed zeros included.
    acc = pool.matrix[idx[:, 0]].copy()
    for j in range(1, idx.shape[1]):
        acc += pool.matrix[idx[:, j]]
    acc /= idx.shape[1]
    return acc


def _regress_block(q: np.ndarray, pool: FeaturePool, cfg: KnnConfig) -> np.ndarray:
    idx, _ = _block_neighbours(q, pool, cfg)
    return _mean_rows(pool, idx)


def default_jobs() -> int:
    return os.cpu_count() or 1


def regress_frames(frames, pool: FeaturePool, cfg: KnnConfig, jobs: int = 1,
                   block: int = DEFAULT_BLOCK) -> np.ndarray:
    """kNN regression of a T x D frame matrix, returned in float64.

    Source frames are processed in fixed blocks of ``block`` rows; with
    ``jobs > 1`` the blocks are spread over a thread pool. Each block is
    computed identically in both modes, so results do not depend on ``jobs``.
    """
    q = np.ascontiguousarray(frames, dtype=np.float64)
    if q.ndim != 2 or q.shape[1] != pool.dim:
        raise ValueError(f"source dim {q.shape[-1]} != pool dim {pool.dim}")
    _check_k(cfg, pool)
    if block < 1:
        raise ValueError("block must be >= 1")
    starts = range(0, q.shape[0], block)
    out = np.empty_like(q)
    if jobs <= 1 or len(starts) == 1:
        for s in starts:
            out[s:s + block] = _regress_block(q[s:s + block], pool, cfg)
        return out

    def work(s):
        out[s:s + block] = _regress_block(q[s:s + block], pool, cfg)

    # one BLAS thread per worker, otherwise the pools oversubscribe the cores
    with threadpool_limits(limits=1, user_api="blas"):
        with ThreadPoolExecutor(max_workers=jobs) as ex:
            list(ex.map(work, starts))
    return out


def knn_regress(source: FeatureSequence, pool: FeaturePool, cfg: KnnConfig,
                jobs: int = 1, block: int = DEFAULT_BLOCK) -> FeatureSequence:
    """Replace every source frame with the mean of its k nearest pool frames."""
    if source.dim != pool.dim:
        raise ValueError(f"source dim {source.dim} != pool dim {pool.dim}")
    out = regress_frames(source.frames, pool, cfg, jobs=jobs, block=block)
    return source.with_frames(out.astype(np.float32))
