"""k-nearest-neighbour retrieval over a :class:`~reco.memory.MemoryStore`.

Search compares the query against one side of the memory (the query's own
modality for uni-modal search, the other one for cross-modal search) and
fetches the paired rows of the requested side. Similarity is the dot product
of unit vectors. Results are ordered by decreasing similarity, ties broken by
ascending memory row.
"""
from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from reco.exceptions import FormatError, ShapeError
from reco.memory import MemoryStore

MODALITIES = ("image", "text")
SELF_MATCH_COSINE = 1.0 - 1e-6
# Candidates within this margin of the k-th BLAS score are re-scored exactly,
# which makes results independent of how queries are batched.
_RESCORE_MARGIN = 1e-9
_QUERY_CHUNK = 256


def other(modality: str) -> str:
    if modality not in MODALITIES:
        raise ValueError(f"modality must be 'image' or 'text', got {modality!r}")
    return "text" if modality == "image" else "image"


@dataclass(frozen=True)
class RetrievalConfig:
    """How neighbours are searched and which side is fetched.

    ``search_mode`` is ``"uni"`` (same-modality search) or ``"cross"``;
    ``fetch_modality`` is ``"opposite"`` (cross-modal fusion) or ``"same"``
    relative to the query.
    """

    k: int = 10
    k_prime: int | None = None
    search_mode: str = "uni"
    fetch_modality: str = "opposite"
    exclude_self: bool = False

    def __post_init__(self):
        if self.k < 1:
            raise ValueError(f"k must be >= 1, got {self.k}")
        if self.k_prime is not None and self.k_prime < 0:
            raise ValueError(f"k_prime must be >= 0, got {self.k_prime}")
        if self.search_mode not in ("uni", "cross"):
            raise ValueError(f"search_mode must be 'uni' or 'cross', got {self.search_mode!r}")
        if self.fetch_modality not in ("same", "opposite"):
            raise ValueError(f"fetch_modality must be 'same' or 'opposite', got {self.fetch_modality!r}")

    @property
    def inference_k(self) -> int:
        return self.k if self.k_prime is None else self.k_prime

    def search_side(self, query_modality: str) -> str:
        return query_modality if self.search_mode == "uni" else other(query_modality)

    def fetch_side(self, query_modality: str) -> str:
        return query_modality if self.fetch_modality == "same" else other(query_modality)


@dataclass(frozen=True, eq=False)
class NeighborSet:
    query_id: int | None
    indices: np.ndarray
    similarities: np.ndarray
    fetched: np.ndarray

    def __len__(self) -> int:
        return self.indices.shape[0]

    def same_as(self, other: "NeighborSet") -> bool:
        return (
            np.array_equal(self.indices, other.indices)
            and np.array_equal(self.similarities, other.similarities)
            and np.array_equal(self.fetched, other.fetched)
        )


def _check_queries(queries: np.ndarray, dim: int) -> np.ndarray:
    q = np.atleast_2d(np.asarray(queries, dtype=np.float64))
    if q.ndim != 2 or q.shape[1] != dim:
        raise ShapeError(f"queries of shape {q.shape} do not match memory dimension {dim}")
    norms = np.linalg.norm(q, axis=1)
    if np.abs(norms - 1.0).max(initial=0.0) > 1e-6:
        raise ValueError("queries must be unit-norm")
    return q


def _rank(query: np.ndarray, mat: np.ndarray, cand: np.ndarray, k: int, exclude_self: bool):
    """Exact top-``k`` of ``cand`` rows of ``mat`` with the tie rule applied."""
    exact = (mat[cand] * query).sum(axis=1)
    if exclude_self:
        keep = exact < SELF_MATCH_COSINE
        cand, exact = cand[keep], exact[keep]
    if cand.size < k:
        raise ValueError(f"only {cand.size} candidates available for k={k}")
    order = np.lexsort((cand, -exact))[:k]
    return cand[order], exact[order]


def search_matrix(queries: np.ndarray, mat: np.ndarray, k: int, exclude_self: bool = False):
    """Exact top-``k`` rows of ``mat`` for each query; returns (indices, sims)."""
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    n, m = queries.shape[0], mat.shape[0]
    if k > m:
        raise ValueError(f"k={k} exceeds the {m} available entries")
    # Slack for rows removed by the self filter.
    pool = min(m, k + 4) if exclude_self else k
    out_idx = np.empty((n, k), dtype=np.int64)
    out_sim = np.empty((n, k))
    for lo in range(0, n, _QUERY_CHUNK):
        block = queries[lo:lo + _QUERY_CHUNK]
        scores = block @ mat.T
        if pool < m:
            part = np.argpartition(-scores, pool - 1, axis=1)[:, :pool]
            kth = np.take_along_axis(scores, part, axis=1).min(axis=1)
        else:
            kth = scores.min(axis=1)
        for j in range(block.shape[0]):
            cand = np.flatnonzero(scores[j] >= kth[j] - _RESCORE_MARGIN)
            try:
                idx, sim = _rank(block[j], mat, cand, k, exclude_self)
            except ValueError:
                idx, sim = _rank(block[j], mat, np.arange(m), k, exclude_self)
            out_idx[lo + j], out_sim[lo + j] = idx, sim
    return out_idx, out_sim


def _neighbor_set(store: MemoryStore, fetch: str, idx, sim, query_id) -> NeighborSet:
    fetched = store.matrix(fetch)[idx]
    return NeighborSet(query_id, idx, sim, fetched)


def knn_exact(query, store: MemoryStore, cfg: RetrievalConfig, query_modality: str,
              k: int | None = None, query_id: int | None = None) -> NeighborSet:
    """Exhaustive search; ``k`` defaults to ``cfg.k``."""
    q = _check_queries(query, store.dim)
    if q.shape[0] != 1:
        raise ShapeError("knn_exact takes a single query; use retrieve_batch")
    k = cfg.k if k is None else k
    mat = store.matrix(cfg.search_side(query_modality))
    idx, sim = search_matrix(q, mat, k, cfg.exclude_self)
    return _neighbor_set(store, cfg.fetch_side(query_modality), idx[0], sim[0], query_id)


# ---------------------------------------------------------------- IVF index


def spherical_kmeans(x: np.ndarray, n_clusters: int, n_iter: int = 20, seed: int = 0):
    """Lloyd iterations on the unit sphere; returns (centroids, labels).

    Runs exactly ``n_iter`` assignment/update rounds. Empty clusters keep
    their previous centroid.
    """
    rng = np.random.default_rng(seed)
    init = np.sort(rng.choice(x.shape[0], size=n_clusters, replace=False))
    centroids = x[init].copy()
    labels = np.argmax(x @ centroids.T, axis=1)
    for _ in range(n_iter):
        sums = np.zeros_like(centroids)
        np.add.at(sums, labels, x)
        norms = np.linalg.norm(sums, axis=1, keepdims=True)
        filled = norms[:, 0] > 0
        centroids[filled] = sums[filled] / norms[filled]
        labels = np.argmax(x @ centroids.T, axis=1)
    return centroids, labels


class IVFIndex:
    """Inverted-file index over one side of a memory store.

    >>> index = IVFIndex(n_partitions=64, seed=0).fit(store, "image")  # doctest: +SKIP
    >>> index.search(query, k=10, n_probe=8)                            # doctest: +SKIP
    """

    def __init__(self, n_partitions: int = 64, n_iter: int = 20, seed: int = 0):
        self.n_partitions = n_partitions
        self.n_iter = n_iter
        self.seed = seed

    def fit(self, store: MemoryStore, modality: str = "image") -> "IVFIndex":
        if self.n_partitions < 1:
            raise ValueError("n_partitions must be >= 1")
        if self.n_partitions > len(store):
            raise ValueError(f"n_partitions={self.n_partitions} exceeds memory size {len(store)}")
        other(modality)
        mat = store.matrix(modality)
        centroids, labels = spherical_kmeans(mat, self.n_partitions, self.n_iter, self.seed)
        # Keep centroids at float32 precision so a saved index probes identically.
        self.centroids_ = centroids.astype(np.float32).astype(np.float64)
        self.postings_ = [np.flatnonzero(labels == p).astype(np.int64) for p in range(self.n_partitions)]
        self.modality_ = modality
        self.store_ = store
        return self

    def probe_order(self, query: np.ndarray) -> np.ndarray:
        sims = (self.centroids_ * query).sum(axis=1)
        return np.lexsort((np.arange(sims.size), -sims))

    def candidates(self, query: np.ndarray, n_probe: int, minimum: int) -> np.ndarray:
        """Rows of the ``n_probe`` nearest partitions, widened until ``minimum`` rows."""
        order = self.probe_order(query)
        chosen, total = [], 0
        for rank, p in enumerate(order):
            if rank >= n_probe and total >= minimum:
                break
            chosen.append(self.postings_[p])
            total += self.postings_[p].size
        return np.sort(np.concatenate(chosen))

    def search(self, queries, k: int, n_probe: int, exclude_self: bool = False):
        """Approximate top-``k``; returns (indices, sims) like :func:`search_matrix`."""
        if n_probe < 1:
            raise ValueError("n_probe must be >= 1")
        q = _check_queries(queries, self.store_.dim)
        mat = self.store_.matrix(self.modality_)
        out_idx = np.empty((q.shape[0], k), dtype=np.int64)
        out_sim = np.empty((q.shape[0], k))
        slack = 4 if exclude_self else 0
        for j, row in enumerate(q):
            cand = self.candidates(row, n_probe, k + slack)
            out_idx[j], out_sim[j] = _rank(row, mat, cand, k, exclude_self)
        return out_idx, out_sim


def build_index(store: MemoryStore, modality: str, n_partitions: int, seed: int = 0) -> IVFIndex:
    return IVFIndex(n_partitions=n_partitions, seed=seed).fit(store, modality)


def knn_approx(query, index: IVFIndex, cfg: RetrievalConfig, query_modality: str, n_probe: int,
               k: int | None = None, query_id: int | None = None) -> NeighborSet:
    if cfg.search_side(query_modality) != index.modality_:
        raise ValueError(
            f"index covers {index.modality_} rows but this search needs "
            f"{cfg.search_side(query_modality)} rows"
        )
    k = cfg.k if k is None else k
    idx, sim = index.search(query, k, n_probe, cfg.exclude_self)
    return _neighbor_set(index.store_, cfg.fetch_side(query_modality), idx[0], sim[0], query_id)


def search_batch(queries, source, cfg: RetrievalConfig, query_modality: str,
                 k: int | None = None, n_probe: int | None = None):
    """Array form of :func:`retrieve_batch`: (indices, sims, fetched side).

    ``source`` may also map each searched modality to its own index.
    """
    k = cfg.k if k is None else k
    if isinstance(source, dict):
        source = source[cfg.search_side(query_modality)]
    if isinstance(source, IVFIndex):
        if cfg.search_side(query_modality) != source.modality_:
            raise ValueError("index was built over the other modality")
        idx, sim = source.search(queries, k, n_probe or source.n_partitions, cfg.exclude_self)
    else:
        q = _check_queries(queries, source.dim)
        idx, sim = search_matrix(q, source.matrix(cfg.search_side(query_modality)), k, cfg.exclude_self)
    return idx, sim, cfg.fetch_side(query_modality)


def retrieve_batch(queries, source, cfg: RetrievalConfig, query_modality: str,
                   k: int | None = None, n_probe: int | None = None, query_ids=None) -> list[NeighborSet]:
    """One :class:`NeighborSet` per query row, order preserved.

    ``source`` is a :class:`MemoryStore` (exact search) or an
    :class:`IVFIndex` (approximate search with ``n_probe`` partitions).
    """
    idx, sim, fetch = search_batch(queries, source, cfg, query_modality, k, n_probe)
    store = store_of(source)
    ids = [None] * idx.shape[0] if query_ids is None else list(query_ids)
    return [_neighbor_set(store, fetch, idx[i], sim[i], ids[i]) for i in range(idx.shape[0])]


def store_of(source) -> MemoryStore:
    if isinstance(source, dict):
        source = next(iter(source.values()))
    return source.store_ if isinstance(source, IVFIndex) else source


# ---------------------------------------------------------------- persistence

IVF_MAGIC = b"RECOIVF1"
IVF_VERSION = 1
_IVF_HEADER = struct.Struct("<8sIIIIQ")


def save_index(index: IVFIndex, path) -> Path:
    """Write ``RECOIVF1``: header, f32 centroids, u64 list lengths, u64 rows, CRC32."""
    lengths = np.array([p.size for p in index.postings_], dtype="<u8")
    payload = b"".join([
        _IVF_HEADER.pack(IVF_MAGIC, IVF_VERSION, index.centroids_.shape[1], index.n_partitions,
                         MODALITIES.index(index.modality_), len(index.store_)),
        index.centroids_.astype("<f4").tobytes(),
        lengths.tobytes(),
        np.concatenate(index.postings_).astype("<u8").tobytes(),
    ])
    path = Path(path)
    path.write_bytes(payload + struct.pack("<I", zlib.crc32(payload)))
    return path


def load_index(path, store: MemoryStore) -> IVFIndex:
    blob = Path(path).read_bytes()
    if len(blob) < _IVF_HEADER.size + 4:
        raise FormatError("index file is truncated")
    magic, version, dim, n_part, modality, count = _IVF_HEADER.unpack_from(blob, 0)
    if magic != IVF_MAGIC:
        raise FormatError(f"bad magic {magic!r}; not a RECO IVF index")
    if version != IVF_VERSION:
        raise FormatError(f"unsupported index version {version}")
    expected = _IVF_HEADER.size + n_part * dim * 4 + n_part * 8 + count * 8 + 4
    if len(blob) != expected:
        raise FormatError(f"index file has {len(blob)} bytes, header implies {expected}")
    (crc,) = struct.unpack_from("<I", blob, len(blob) - 4)
    if zlib.crc32(blob[:-4]) != crc:
        raise FormatError("index checksum mismatch")
    if dim != store.dim or count != len(store):
        raise FormatError("index does not belong to this memory (dimension or size differ)")
    off = _IVF_HEADER.size
    centroids = np.frombuffer(blob, "<f4", n_part * dim, off).reshape(n_part, dim).astype(np.float64)
    off += n_part * dim * 4
    lengths = np.frombuffer(blob, "<u8", n_part, off).astype(np.int64)
    off += n_part * 8
    rows = np.frombuffer(blob, "<u8", count, off).astype(np.int64)
    index = IVFIndex(n_partitions=n_part)
    index.centroids_ = centroids
    index.postings_ = np.split(rows, np.cumsum(lengths)[:-1])
    index.modality_ = MODALITIES[modality]
    index.store_ = store
    return index
