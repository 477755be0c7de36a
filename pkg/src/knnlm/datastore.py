"""Key-value datastore over context vectors with exact top-k L2 search.

Search is exact: a fast f32 screening pass (norm/GEMM identity) selects a
candidate shortlist with a certified rounding-error margin, and the final
distances, ordering, and tie-breaks come only from the canonical
fixed-order float64 kernel (kernels.exact_sqdist). The margin provably
covers every candidate that could reach the k-th exact distance,
including exact ties, so results are bit-identical no matter how BLAS
computes the screen or how the shortlist is batched.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .corpus import TokenStream
from .kernels import exact_sqdist
from .ngram_filter import PositionMask

DSTR_MAGIC = b"KNNDSTR1"
_HEADER_BYTES = 4096  # keys are 4096-byte aligned via header padding

_EPS32 = float(np.finfo(np.float32).eps)  # 2**-23
_MARGIN_SAFETY = 16.0


@dataclass
class Datastore:
    keys: np.ndarray  # (count, dim) f32, possibly memory-mapped
    values: np.ndarray  # (count,) u32 next-token ids
    positions: np.ndarray  # (count,) u64 source-corpus positions
    encoder_tag: int
    _norms_sq: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self) -> None:
        if not (len(self.keys) == len(self.values) == len(self.positions)):
            raise ValueError("keys, values, and positions must be parallel")

    def __len__(self) -> int:
        return len(self.values)

    @property
    def dim(self) -> int:
        return self.keys.shape[1]

    def norms_sq(self) -> np.ndarray:
        """Screening-precision (f32) squared key norms, computed once."""
        if self._norms_sq is None:
            self._norms_sq = np.einsum("ij,ij->i", self.keys, self.keys)
        return self._norms_sq

    def content_hash(self) -> int:
        h = hashlib.blake2b(digest_size=8)
        h.update(struct.pack("<IQQ", self.dim, len(self), self.encoder_tag))
        block = max(1, (1 << 22) // max(1, self.dim * 4))
        for lo in range(0, len(self), block):
            h.update(np.ascontiguousarray(self.keys[lo : lo + block]).tobytes())
        h.update(np.ascontiguousarray(self.values, dtype="<u4").tobytes())
        h.update(np.ascontiguousarray(self.positions, dtype="<u8").tobytes())
        return struct.unpack("<Q", h.digest())[0]

    def save(self, path: str | Path) -> None:
        if not 1 <= self.dim <= 0xFFFFFFFF:
            raise ValueError("dim does not fit the header field")
        with open(path, "wb") as f:
            f.write(DSTR_MAGIC)
            f.write(struct.pack("<IQQ", self.dim, len(self), self.encoder_tag))
            f.write(b"\x00" * (_HEADER_BYTES - f.tell()))
            f.write(np.ascontiguousarray(self.keys, dtype="<f4").tobytes())
            f.write(np.ascontiguousarray(self.values, dtype="<u4").tobytes())
            f.write(np.ascontiguousarray(self.positions, dtype="<u8").tobytes())

    @classmethod
    def load(cls, path: str | Path, mmap_keys: bool = True) -> "Datastore":
        path = Path(path)
        with open(path, "rb") as f:
            head = f.read(_HEADER_BYTES)
        if head[:8] != DSTR_MAGIC:
            raise ValueError(f"{path}: bad magic, not a datastore file")
        dim, count, tag = struct.unpack_from("<IQQ", head, 8)
        keys_off = _HEADER_BYTES
        vals_off = keys_off + 4 * dim * count
        pos_off = vals_off + 4 * count
        if path.stat().st_size < pos_off + 8 * count:
            raise ValueError(f"{path}: truncated datastore file")
        if mmap_keys:
            keys = np.memmap(path, dtype="<f4", mode="r", offset=keys_off, shape=(count, dim))
        else:
            with open(path, "rb") as f:
                f.seek(keys_off)
                keys = np.fromfile(f, dtype="<f4", count=count * dim).reshape(count, dim)
        with open(path, "rb") as f:
            f.seek(vals_off)
            values = np.fromfile(f, dtype="<u4", count=count)
            positions = np.fromfile(f, dtype="<u8", count=count)
        return cls(keys, values, positions, tag)


@dataclass
class NeighborSet:
    """Exact neighbors of one query: ascending distances with payloads."""

    distances: np.ndarray  # f64, ascending
    values: np.ndarray  # u32
    positions: np.ndarray  # u64
    k_requested: int

    def __len__(self) -> int:
        return len(self.distances)


# ---------------------------------------------------------------------------
# Construction
# ---------------------------------------------------------------------------


def entry_positions(stream: TokenStream) -> np.ndarray:
    """Pre-mask datastore entry positions: every in-document position t >= 1.

    A document of n tokens contributes positions start+1 .. start+n-1,
    i.e. exactly n-1 entries.
    """
    spans = [
        np.arange(start + 1, end, dtype=np.int64)
        for start, end in (stream.doc_bounds(d) for d in range(stream.num_docs))
    ]
    if not spans:
        return np.empty(0, dtype=np.int64)
    return np.concatenate(spans)


def build_datastore(
    stream: TokenStream,
    encoder=None,
    mask: PositionMask | None = None,
    imported_vectors: np.ndarray | None = None,
    imported_tag: int | None = None,
) -> Datastore:
    """Build the store: key = encoded context, value = next token.

    Exactly one of ``encoder`` / ``imported_vectors`` must be given.
    Imported vector files hold one vector per pre-mask entry position, so
    masked entries are skipped on the vector side as well.
    """
    if (encoder is None) == (imported_vectors is None):
        raise ValueError("provide exactly one of encoder or imported_vectors")
    pos = entry_positions(stream)
    if mask is not None:
        if mask.corpus_len != len(stream):
            raise ValueError("mask corpus_len does not match the stream")
        keep = ~mask.excluded[pos]
    else:
        keep = np.ones(len(pos), dtype=bool)
    kept = pos[keep]
    if kept.size == 0:
        raise ValueError("datastore has no entries (masked to empty?)")
    if encoder is not None:
        keys = encoder.encode_positions(stream, kept)
        tag = encoder.tag
    else:
        if len(imported_vectors) != len(pos):
            raise ValueError(
                f"imported vectors: {len(imported_vectors)} rows, "
                f"expected one per entry position ({len(pos)})"
            )
        keys = np.ascontiguousarray(imported_vectors[keep], dtype=np.float32)
        if imported_tag is None:
            raise ValueError("imported_tag required with imported_vectors")
        tag = imported_tag
    values = stream.tokens[kept].astype(np.uint32)
    return Datastore(keys, values, kept.astype(np.uint64), tag)


# ---------------------------------------------------------------------------
# Exact search
# ---------------------------------------------------------------------------


def _screen_margin(dim: int, max_key_norm: float, query_norm: float) -> float:
    """Certified bound on |screened - exact| squared distance.

    The f32 screen d~2 = |k|^2 + |q|^2 - 2 k.q errs by at most
    gamma_dim * (|k| + |q|)^2 with gamma_dim ~ dim * eps32 for any
    summation order; _MARGIN_SAFETY absorbs the combination roundings.
    """
    return _MARGIN_SAFETY * dim * _EPS32 * (max_key_norm + query_norm) ** 2


def search_batch(
    store: Datastore, queries: np.ndarray, k: int, block: int = 256
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Exact top-k for many queries: (distances, values, positions) arrays.

    Ties in exact distance break by ascending store index. Output arrays
    have shape (n_queries, min(k, len(store))).
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    if len(store) == 0:
        raise ValueError("cannot search an empty datastore")
    queries = np.ascontiguousarray(queries, dtype=np.float32)
    if queries.ndim != 2 or queries.shape[1] != store.dim:
        raise ValueError(f"query dim {queries.shape} does not match store dim {store.dim}")
    if not np.isfinite(queries).all():
        raise ValueError("query vectors must be finite")

    n = len(store)
    keff = min(k, n)
    nq = len(queries)
    dist = np.empty((nq, keff), dtype=np.float64)
    vals = np.empty((nq, keff), dtype=np.uint32)
    poss = np.empty((nq, keff), dtype=np.uint64)

    key_norms = store.norms_sq()
    max_key_norm = float(np.sqrt(max(0.0, float(key_norms.max()))))
    keys = store.keys
    d2_exact = np.empty(0, dtype=np.float64)
    block = max(1, min(block, (1 << 28) // max(1, 4 * n)))  # cap screen matrix

    for lo in range(0, nq, block):
        qblk = queries[lo : lo + block]
        q_norms = np.einsum("ij,ij->i", qblk, qblk)
        screen = qblk @ keys.T  # (b, n) f32
        screen *= np.float32(-2.0)
        screen += q_norms[:, None]
        screen += key_norms[None, :]
        for j in range(len(qblk)):
            row = screen[j]
            kth = np.partition(row, keff - 1)[keff - 1]
            margin = _screen_margin(store.dim, max_key_norm, float(np.sqrt(max(0.0, float(q_norms[j])))))
            cand = np.flatnonzero(row <= float(kth) + 2.0 * margin)
            rows = np.ascontiguousarray(keys[cand])
            if len(cand) > len(d2_exact):
                d2_exact = np.empty(len(cand), dtype=np.float64)
            out = d2_exact[: len(cand)]
            exact_sqdist(rows, qblk[j].astype(np.float64), out)
            order = np.lexsort((cand, out))[:keff]
            qi = lo + j
            dist[qi] = np.sqrt(out[order])
            sel = cand[order]
            vals[qi] = store.values[sel]
            poss[qi] = store.positions[sel]
    return dist, vals, poss


def search(store: Datastore, query: np.ndarray, k: int) -> NeighborSet:
    """Exact top-k neighbors of one query vector."""
    query = np.asarray(query, dtype=np.float32)
    if query.ndim != 1:
        raise ValueError("query must be a 1-D vector")
    dist, vals, poss = search_batch(store, query[None, :], k)
    return NeighborSet(dist[0], vals[0], poss[0], k)
