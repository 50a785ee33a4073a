"""External memory of paired image/text embeddings.

Rows ``i`` of the image and text matrices always describe the same original
pair; every function here that returns a store keeps that pairing intact.
Vectors are stored unit-normalized as float32 and promoted to float64 for
computation.
"""
from __future__ import annotations

import json
import os
import struct
import time
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from reco.exceptions import EmptyStoreError, FormatError, ShapeError

BANK_MAGIC = b"RECOBANK"
BANK_VERSION = 1
_HEADER = struct.Struct("<8sIIQI")
_FLAG_IDS = 1
DEFAULT_DEDUPE_THRESHOLD = 0.995


def normalize_rows(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    norms = np.linalg.norm(x, axis=-1, keepdims=True)
    if (norms == 0).any():
        raise ValueError("cannot normalize a zero vector")
    return x / norms


@dataclass(frozen=True, eq=False)
class MemoryStore:
    """Immutable bank of ``M`` (image, text, id) triples."""

    image: np.ndarray
    text: np.ndarray
    ids: np.ndarray | None = None
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        if self.image.shape != self.text.shape or self.image.ndim != 2:
            raise ShapeError("image and text matrices must share shape (M, d)")
        if self.ids is not None and self.ids.shape != (self.image.shape[0],):
            raise ShapeError("ids must have one entry per row")
        for arr in (self.image, self.text, self.ids):
            if arr is not None:
                arr.setflags(write=False)

    def __len__(self) -> int:
        return self.image.shape[0]

    @property
    def dim(self) -> int:
        return self.image.shape[1]

    @property
    def image_matrix(self) -> np.ndarray:
        """``V^M`` promoted to float64."""
        return self._promoted("image")

    @property
    def text_matrix(self) -> np.ndarray:
        """``T^M`` promoted to float64."""
        return self._promoted("text")

    def matrix(self, modality: str) -> np.ndarray:
        if modality not in ("image", "text"):
            raise ValueError(f"modality must be 'image' or 'text', got {modality!r}")
        return self._promoted(modality)

    def _promoted(self, name: str) -> np.ndarray:
        if name not in self._cache:
            arr = getattr(self, name).astype(np.float64)
            arr.setflags(write=False)
            self._cache[name] = arr
        return self._cache[name]

    def entry(self, i: int) -> tuple[np.ndarray, np.ndarray, int | None]:
        ident = None if self.ids is None else int(self.ids[i])
        return self.image_matrix[i], self.text_matrix[i], ident

    def subset(self, rows) -> "MemoryStore":
        """New store restricted to ``rows`` (pairing preserved)."""
        rows = np.asarray(rows, dtype=np.int64)
        if rows.size == 0:
            raise EmptyStoreError("subset would leave the memory empty")
        ids = None if self.ids is None else self.ids[rows].copy()
        return MemoryStore(self.image[rows].copy(), self.text[rows].copy(), ids)

    def checksum(self) -> int:
        crc = zlib.crc32(self.image.tobytes())
        crc = zlib.crc32(self.text.tobytes(), crc)
        if self.ids is not None:
            crc = zlib.crc32(self.ids.tobytes(), crc)
        return crc

    def equals(self, other: "MemoryStore") -> bool:
        same_ids = (self.ids is None and other.ids is None) or (
            self.ids is not None and other.ids is not None and np.array_equal(self.ids, other.ids)
        )
        return (
            same_ids
            and np.array_equal(self.image, other.image)
            and np.array_equal(self.text, other.text)
        )


def build_store(image, text, ids=None) -> MemoryStore:
    """Normalize and pack paired embeddings into a store.

    ``image`` and ``text`` are (M, d) arrays (or sequences of d-vectors);
    ``ids`` are optional non-negative integers, one per pair.
    """
    image = np.asarray(image, dtype=np.float64)
    text = np.asarray(text, dtype=np.float64)
    if image.ndim != 2 or text.ndim != 2:
        raise ShapeError("expected 2-D arrays of embeddings")
    if image.shape != text.shape:
        raise ShapeError(f"image rows {image.shape} and text rows {text.shape} differ")
    if image.shape[0] < 1:
        raise EmptyStoreError("a memory needs at least one pair")
    if ids is not None:
        ids = np.asarray(ids)
        if ids.shape != (image.shape[0],):
            raise ShapeError("need exactly one id per pair")
        if (ids < 0).any():
            raise ValueError("ids must be non-negative")
        ids = ids.astype(np.uint64)
    v = normalize_rows(image).astype(np.float32)
    t = normalize_rows(text).astype(np.float32)
    return MemoryStore(v, t, ids)


def store_from_pairs(pairs) -> MemoryStore:
    """Build from an iterable of ``(v, t, id)`` triples."""
    pairs = list(pairs)
    if not pairs:
        raise EmptyStoreError("a memory needs at least one pair")
    dims = {len(v) for v, t, _ in pairs} | {len(t) for v, t, _ in pairs}
    if len(dims) != 1:
        raise ShapeError(f"inconsistent embedding dimensions {sorted(dims)}")
    return build_store([p[0] for p in pairs], [p[1] for p in pairs], [p[2] for p in pairs])


# ---------------------------------------------------------------- persistence


def _created_stamp() -> str:
    epoch = os.environ.get("SOURCE_DATE_EPOCH")
    ts = int(epoch) if epoch is not None else int(time.time())
    return time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime(ts))


def bank_bytes(store: MemoryStore) -> bytes:
    flags = _FLAG_IDS if store.ids is not None else 0
    parts = [
        _HEADER.pack(BANK_MAGIC, BANK_VERSION, store.dim, len(store), flags),
        store.image.astype("<f4").tobytes(),
        store.text.astype("<f4").tobytes(),
    ]
    if store.ids is not None:
        parts.append(store.ids.astype("<u8").tobytes())
    payload = b"".join(parts)
    return payload + struct.pack("<I", zlib.crc32(payload))


def save_bank(store: MemoryStore, path, source: str = "", dedupe_threshold: float | None = None) -> Path:
    """Write the binary bank plus a ``<path>.json`` manifest."""
    path = Path(path)
    path.write_bytes(bank_bytes(store))
    manifest = {
        "dim": store.dim,
        "count": len(store),
        "created": _created_stamp(),
        "source": source,
        "dedupe_threshold": dedupe_threshold,
    }
    manifest_path(path).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def manifest_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".json")


def parse_bank(blob: bytes) -> MemoryStore:
    if len(blob) < _HEADER.size + 4:
        raise FormatError("bank file is truncated")
    magic, version, dim, count, flags = _HEADER.unpack_from(blob, 0)
    if magic != BANK_MAGIC:
        raise FormatError(f"bad magic {magic!r}; not a RECO bank")
    if version != BANK_VERSION:
        raise FormatError(f"unsupported bank version {version}")
    has_ids = bool(flags & _FLAG_IDS)
    expected = _HEADER.size + 2 * count * dim * 4 + (count * 8 if has_ids else 0) + 4
    if len(blob) != expected:
        raise FormatError(f"bank file has {len(blob)} bytes, header implies {expected}")
    (stored_crc,) = struct.unpack_from("<I", blob, len(blob) - 4)
    if zlib.crc32(blob[:-4]) != stored_crc:
        raise FormatError("bank checksum mismatch")
    off = _HEADER.size
    block = count * dim * 4
    image = np.frombuffer(blob, "<f4", count * dim, off).reshape(count, dim).astype(np.float32)
    text = np.frombuffer(blob, "<f4", count * dim, off + block).reshape(count, dim).astype(np.float32)
    ids = None
    if has_ids:
        ids = np.frombuffer(blob, "<u8", count, off + 2 * block).astype(np.uint64)
    if count == 0:
        raise FormatError("bank holds no entries")
    return MemoryStore(image, text, ids)


def load_bank(path) -> MemoryStore:
    return parse_bank(Path(path).read_bytes())


# ---------------------------------------------------------------- filtering


def dedupe_against(
    store: MemoryStore,
    probes,
    modality: str = "image",
    threshold: float = DEFAULT_DEDUPE_THRESHOLD,
    chunk: int = 4096,
) -> MemoryStore:
    """Drop entries whose embedding has cosine >= ``threshold`` with any probe.

    ``modality`` selects the compared side: ``"image"``, ``"text"`` or
    ``"both"`` (an entry is dropped if either side matches). The input store
    is left untouched.
    """
    if not 0.0 < threshold <= 1.0:
        raise ValueError(f"threshold must lie in (0, 1], got {threshold}")
    probes = normalize_rows(np.atleast_2d(np.asarray(probes, dtype=np.float64)))
    if probes.shape[1] != store.dim:
        raise ShapeError(f"probe dimension {probes.shape[1]} != memory dimension {store.dim}")
    sides = {"image": ["image"], "text": ["text"], "both": ["image", "text"]}.get(modality)
    if sides is None:
        raise ValueError(f"modality must be image, text or both, got {modality!r}")
    drop = np.zeros(len(store), dtype=bool)
    for side in sides:
        mat = store.matrix(side)
        for lo in range(0, len(store), chunk):
            sims = mat[lo:lo + chunk] @ probes.T
            drop[lo:lo + chunk] |= (sims >= threshold).any(axis=1)
    keep = np.flatnonzero(~drop)
    if keep.size == 0:
        raise EmptyStoreError("near-duplicate removal emptied the memory")
    return store.subset(keep)
