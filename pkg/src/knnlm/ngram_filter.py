"""Shared n-gram detection between corpora and exclusion-window masks.

Finds n-grams that a datastore corpus shares with evaluation data and
turns them into a position mask that removes a fixed-size token window
centered on each match from datastore construction.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .corpus import TokenStream

MASK_MAGIC = b"KLMMASK1"


@dataclass
class PositionMask:
    """Set of excluded token positions over a corpus, stored as a bitset."""

    corpus_len: int
    excluded: np.ndarray  # bool array of length corpus_len

    def __post_init__(self) -> None:
        self.excluded = np.ascontiguousarray(self.excluded, dtype=bool)
        if len(self.excluded) != self.corpus_len:
            raise ValueError("mask length must equal corpus_len")

    @classmethod
    def empty(cls, corpus_len: int) -> "PositionMask":
        return cls(corpus_len, np.zeros(corpus_len, dtype=bool))

    @property
    def excluded_count(self) -> int:
        return int(self.excluded.sum())

    def union(self, other: "PositionMask") -> "PositionMask":
        if self.corpus_len != other.corpus_len:
            raise ValueError("cannot union masks over different corpus lengths")
        return PositionMask(self.corpus_len, self.excluded | other.excluded)

    def save(self, path: str | Path) -> None:
        # Bitset packed as little-endian u64 words; bit p of word w is
        # position 64*w + p.
        padded_len = (self.corpus_len + 63) // 64 * 64
        bits = np.zeros(padded_len, dtype=bool)
        bits[: self.corpus_len] = self.excluded
        packed = np.packbits(bits, bitorder="little")
        with open(path, "wb") as f:
            f.write(MASK_MAGIC)
            f.write(struct.pack("<Q", self.corpus_len))
            f.write(packed.tobytes())

    @classmethod
    def load(cls, path: str | Path) -> "PositionMask":
        data = Path(path).read_bytes()
        if data[:8] != MASK_MAGIC:
            raise ValueError(f"{path}: bad magic, not a mask file")
        (corpus_len,) = struct.unpack_from("<Q", data, 8)
        n_words = (corpus_len + 63) // 64
        need = 16 + 8 * n_words
        if len(data) < need:
            raise ValueError(f"{path}: truncated mask file")
        packed = np.frombuffer(data, dtype=np.uint8, count=8 * n_words, offset=16)
        bits = np.unpackbits(packed, bitorder="little")[:corpus_len]
        return cls(corpus_len, bits.astype(bool))


def find_shared_ngrams(
    train: TokenStream, eval_stream: TokenStream, n: int
) -> list[tuple[int, int]]:
    """Every train position p where train[p:p+n) occurs as an n-gram in eval.

    Matching is on exact token ids and never crosses document boundaries
    in either stream. Returns (position, n) pairs in ascending position
    order. Expected linear time: eval n-grams are hashed, train is scanned.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    if train.vocab_size != eval_stream.vocab_size:
        raise ValueError("train and eval streams must share a vocab")

    eval_grams: set[bytes] = set()
    etok = eval_stream.tokens
    for d in range(eval_stream.num_docs):
        start, end = eval_stream.doc_bounds(d)
        for p in range(start, end - n + 1):
            eval_grams.add(etok[p : p + n].tobytes())

    matches: list[tuple[int, int]] = []
    ttok = train.tokens
    for d in range(train.num_docs):
        start, end = train.doc_bounds(d)
        for p in range(start, end - n + 1):
            if ttok[p : p + n].tobytes() in eval_grams:
                matches.append((p, n))
    return matches


def build_mask(
    matches: list[tuple[int, int]], corpus_len: int, window: int = 200
) -> PositionMask:
    """Union of clipped windows centered on each match.

    For a match at p with length n the center is c = p + n//2 and the
    excluded range is [max(0, c - window//2), min(corpus_len, c + window//2)).
    """
    excluded = np.zeros(corpus_len, dtype=bool)
    half = window // 2
    for p, n in matches:
        if window < n:
            raise ValueError("window must be >= match length")
        c = p + n // 2
        lo = max(0, c - half)
        hi = min(corpus_len, c + half)
        excluded[lo:hi] = True
    return PositionMask(corpus_len, excluded)


def find_mask_violations(mask: PositionMask, positions: np.ndarray) -> np.ndarray:
    """Positions (e.g. retained datastore entries) that fall inside the mask.

    The completeness scan for a filtered datastore: must return an empty
    array when the store was built with this mask.
    """
    pos = np.asarray(positions, dtype=np.int64)
    if pos.size and (pos.min() < 0 or pos.max() >= mask.corpus_len):
        raise ValueError("position outside the masked corpus")
    return pos[mask.excluded[pos]]
