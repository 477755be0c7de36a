"""Context encoders: hashed-projection dense vectors and TFIDF bags.

The dense encoder is a deterministic stand-in for a neural context
encoder: each token id maps to a pseudorandom sign vector (derived from
a seeded hash, components +-1/sqrt(dim)), and a context is the
decay-weighted sum of its trailing window of token vectors, L2-normalized.
Similar recent contexts therefore map to nearby vectors.
"""

from __future__ import annotations

import hashlib
import math
import struct
from collections import Counter
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .corpus import TokenStream
from .kernels import encode_windows

VECS_MAGIC = b"KLMVECS1"


def _tag_from(text: str) -> int:
    digest = hashlib.blake2b(text.encode("utf-8"), digest_size=8).digest()
    return struct.unpack("<Q", digest)[0]


def import_encoder_tag(dim: int) -> int:
    """Tag for externally produced vectors (no encoder identity in the file)."""
    return _tag_from(f"import:dim={dim}")


@dataclass(frozen=True)
class DenseEncoderConfig:
    dim: int = 256
    seed: int = 0
    decay: float = 0.9
    window: int = 32

    def __post_init__(self) -> None:
        if self.dim < 1:
            raise ValueError("dim must be >= 1")
        if self.seed < 0:
            raise ValueError("seed must be non-negative")
        if self.window < 1:
            raise ValueError("window must be >= 1")

    def tag(self) -> int:
        return _tag_from(
            f"dense:dim={self.dim}:seed={self.seed}"
            f":decay={self.decay!r}:window={self.window}"
        )


def _sign_table(vocab_size: int, dim: int, seed: int) -> np.ndarray:
    """Per-token unit sign vectors from blake2b bits, components +-1/sqrt(dim)."""
    nbytes = (dim + 7) // 8
    scale = np.float32(1.0 / math.sqrt(dim))
    table = np.empty((vocab_size, dim), dtype=np.float32)
    for t in range(vocab_size):
        raw = bytearray()
        counter = 0
        while len(raw) < nbytes:
            raw += hashlib.blake2b(
                struct.pack("<QQQ", seed, t, counter), digest_size=64
            ).digest()
            counter += 1
        bits = np.unpackbits(
            np.frombuffer(bytes(raw[:nbytes]), dtype=np.uint8), bitorder="little"
        )[:dim]
        table[t] = np.where(bits, scale, -scale)
    return table


class DenseEncoder:
    """Deterministic hashed-projection encoder over trailing token windows."""

    def __init__(self, config: DenseEncoderConfig, vocab_size: int):
        self.config = config
        self.vocab_size = vocab_size
        self.table = _sign_table(vocab_size, config.dim, config.seed)
        # weights[j] = decay^j built by repeated multiplication; this exact
        # sequence is part of the encoder definition.
        w = np.empty(config.window, dtype=np.float64)
        w[0] = 1.0
        for j in range(1, config.window):
            w[j] = w[j - 1] * config.decay
        self.weights = w

    @property
    def tag(self) -> int:
        return self.config.tag()

    def encode(self, context: np.ndarray | list[int]) -> np.ndarray:
        """Encode one context (most recent token last) to a unit f32 vector."""
        ctx = np.ascontiguousarray(context, dtype=np.uint32)
        if ctx.size == 0:
            raise ValueError("cannot encode an empty context")
        out = self.encode_ranges(ctx, np.array([0]), np.array([ctx.size]))
        return out[0]

    def encode_ranges(
        self, tokens: np.ndarray, starts: np.ndarray, ends: np.ndarray
    ) -> np.ndarray:
        """Encode token ranges [starts[i], ends[i]) of a shared token array.

        Ranges longer than the window are truncated to their trailing
        ``window`` tokens inside the kernel, so callers may pass document
        starts directly.
        """
        tokens = np.ascontiguousarray(tokens, dtype=np.uint32)
        starts = np.ascontiguousarray(starts, dtype=np.int64)
        ends = np.ascontiguousarray(ends, dtype=np.int64)
        if np.any(ends <= starts):
            raise ValueError("cannot encode an empty context")
        if tokens.size and int(tokens.max()) >= self.vocab_size:
            raise ValueError("token id out of encoder vocab range")
        out = np.empty((len(starts), self.config.dim), dtype=np.float32)
        norms = np.empty(len(starts), dtype=np.float64)
        encode_windows(tokens, starts, ends, self.table, self.weights, out, norms)
        if np.any(norms == 0.0):
            bad = int(np.flatnonzero(norms == 0.0)[0])
            raise ValueError(f"degenerate (zero-norm) context at range {bad}")
        return out

    def encode_positions(self, stream: TokenStream, positions: np.ndarray) -> np.ndarray:
        """Encode the trailing context before each global token position.

        The context for position p is stream.tokens[doc_start:p], i.e. the
        tokens before p within p's document, truncated to the window.
        """
        positions = np.asarray(positions, dtype=np.int64)
        starts = stream.doc_starts_for(positions)
        if np.any(positions <= starts):
            raise ValueError("position has no preceding context in its document")
        return self.encode_ranges(stream.tokens, starts, positions)


# ---------------------------------------------------------------------------
# TFIDF over trailing windows
# ---------------------------------------------------------------------------


@dataclass
class IdfTable:
    """Smoothed idf per token id: ln((1+N)/(1+df)) + 1.

    A "document" is the trailing window of up to ``window`` tokens ending
    at each corpus position (never crossing document boundaries), so N is
    the corpus token count.
    """

    idf: np.ndarray
    window: int
    n_windows: int


def build_idf(stream: TokenStream, window: int = 32) -> IdfTable:
    df = np.zeros(stream.vocab_size, dtype=np.int64)
    tokens = stream.tokens
    for d in range(stream.num_docs):
        start, end = stream.doc_bounds(d)
        # Occurrence at p is contained in windows ending at p..p+window-1
        # (clipped to the document); union consecutive coverage per token.
        cover_end: dict[int, int] = {}
        for p in range(start, end):
            t = int(tokens[p])
            hi = min(p + window, end)
            lo = max(p, cover_end.get(t, p))
            if hi > lo:
                df[t] += hi - lo
            cover_end[t] = hi
    n = len(stream)
    idf = np.log((1.0 + n) / (1.0 + df.astype(np.float64))) + 1.0
    return IdfTable(idf, window, n)


def encode_tfidf(window_tokens: np.ndarray | list[int], idf_table: IdfTable) -> dict[int, float]:
    """L2-normalized tf*idf weights over one trailing window (sparse)."""
    toks = [int(t) for t in window_tokens][-idf_table.window :]
    if not toks:
        return {}
    counts = Counter(toks)
    weights = {t: c * float(idf_table.idf[t]) for t, c in counts.items()}
    norm = math.sqrt(math.fsum(weights[t] ** 2 for t in sorted(weights)))
    return {t: w / norm for t, w in weights.items()}


def tfidf_cosine(a: dict[int, float], b: dict[int, float]) -> float:
    """Cosine similarity of two normalized sparse vectors; 0.0 if either is empty."""
    if not a or not b:
        return 0.0
    shared = sorted(set(a) & set(b))
    return math.fsum(a[t] * b[t] for t in shared)


def tfidf_window_at(
    stream: TokenStream, position: int, idf_table: IdfTable
) -> dict[int, float]:
    """TFIDF vector of the trailing context window before ``position``.

    Positions within ``window`` tokens of their document start are padded
    to the tokens available (never an error).
    """
    start = int(stream.doc_starts_for(np.array([position]))[0])
    lo = max(start, position - idf_table.window)
    return encode_tfidf(stream.tokens[lo:position], idf_table)


# ---------------------------------------------------------------------------
# Dense vector file IO
# ---------------------------------------------------------------------------


def write_vectors(path: str | Path, vectors: np.ndarray) -> None:
    arr = np.ascontiguousarray(vectors, dtype=np.float32)
    if arr.ndim != 2:
        raise ValueError("vectors must be a 2-D array")
    with open(path, "wb") as f:
        f.write(VECS_MAGIC)
        f.write(struct.pack("<IQ", arr.shape[1], arr.shape[0]))
        f.write(arr.tobytes())


def read_vectors(path: str | Path, expected_dim: int | None = None) -> np.ndarray:
    """Load a vector file, validating header, length, and finiteness."""
    data = Path(path).read_bytes()
    if data[:8] != VECS_MAGIC:
        raise ValueError(f"{path}: bad magic, not a vector file")
    dim, count = struct.unpack_from("<IQ", data, 8)
    if expected_dim is not None and dim != expected_dim:
        raise ValueError(f"{path}: dim mismatch, file has {dim}, expected {expected_dim}")
    off = 8 + struct.calcsize("<IQ")
    if len(data) < off + 4 * dim * count:
        raise ValueError(f"{path}: truncated vector file")
    arr = np.frombuffer(data, dtype="<f4", count=dim * count, offset=off)
    arr = arr.reshape(count, dim)
    finite = np.isfinite(arr).all(axis=1)
    if not finite.all():
        bad = int(np.flatnonzero(~finite)[0])
        raise ValueError(f"{path}: non-finite value at record {bad}")
    return arr.copy()
