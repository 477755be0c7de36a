"""Vocabulary construction, whitespace tokenization, and token-stream IO.

Text is tokenized on whitespace; blank-line-separated blocks become
documents. Id 0 is reserved for ``<unk>``.
"""

from __future__ import annotations

import re
import struct
from collections import Counter
from dataclasses import dataclass
from pathlib import Path

import numpy as np

UNK_ID = 0
UNK_SURFACE = "<unk>"

TOKENS_MAGIC = b"KLMTOKS1"

_DOC_SPLIT = re.compile(r"\n\s*\n")


class Vocab:
    """Surface-form table indexed by contiguous ids; id 0 is ``<unk>``."""

    def __init__(self, surfaces: list[str]):
        if not surfaces or surfaces[0] != UNK_SURFACE:
            raise ValueError("vocab must start with the reserved <unk> surface")
        if len(set(surfaces)) != len(surfaces):
            raise ValueError("vocab surfaces must be unique")
        self._surfaces = list(surfaces)
        self._index = {s: i for i, s in enumerate(surfaces)}

    def __len__(self) -> int:
        return len(self._surfaces)

    def __eq__(self, other: object) -> bool:
        return isinstance(other, Vocab) and self._surfaces == other._surfaces

    def id_of(self, surface: str) -> int:
        """Id for a surface form; out-of-vocab surfaces map to <unk> (0)."""
        return self._index.get(surface, UNK_ID)

    def surface_of(self, token_id: int) -> str:
        return self._surfaces[token_id]

    @property
    def surfaces(self) -> list[str]:
        return list(self._surfaces)

    def save(self, path: str | Path) -> None:
        """One surface per line, UTF-8; the id is the 0-based line number."""
        Path(path).write_text("\n".join(self._surfaces) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "Vocab":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        return cls(lines)


def build_vocab(text: str, min_count: int = 1) -> Vocab:
    """Build a vocab from whitespace tokens, rarest-below-threshold to <unk>.

    Ordering is deterministic: descending count, ties broken by first
    occurrence in the corpus.
    """
    words = text.split()
    if not words:
        raise ValueError("cannot build a vocab from an empty corpus")
    counts = Counter(words)
    # Counter preserves first-occurrence order, which fixes the tie-break.
    first_seen = {w: i for i, w in enumerate(counts)}
    kept = [w for w, c in counts.items() if c >= min_count and w != UNK_SURFACE]
    kept.sort(key=lambda w: (-counts[w], first_seen[w]))
    return Vocab([UNK_SURFACE] + kept)


@dataclass
class TokenStream:
    """A corpus as vocab ids plus document start offsets.

    ``doc_offsets`` is strictly increasing and starts at 0 whenever the
    stream is non-empty; every id is < ``vocab_size``.
    """

    tokens: np.ndarray
    doc_offsets: np.ndarray
    vocab_size: int

    def __post_init__(self) -> None:
        self.tokens = np.ascontiguousarray(self.tokens, dtype=np.uint32)
        self.doc_offsets = np.ascontiguousarray(self.doc_offsets, dtype=np.uint64)
        n = len(self.tokens)
        offs = self.doc_offsets.astype(np.int64)
        if n == 0:
            if len(offs) != 0:
                raise ValueError("empty stream cannot have documents")
            return
        if len(offs) == 0 or offs[0] != 0:
            raise ValueError("doc_offsets must start at 0")
        if np.any(np.diff(offs) <= 0) or offs[-1] >= n:
            raise ValueError("doc_offsets must be strictly increasing and < len")
        if self.tokens.size and int(self.tokens.max()) >= self.vocab_size:
            raise ValueError("token id out of vocab range")

    def __len__(self) -> int:
        return len(self.tokens)

    def __eq__(self, other: object) -> bool:
        return (
            isinstance(other, TokenStream)
            and self.vocab_size == other.vocab_size
            and np.array_equal(self.tokens, other.tokens)
            and np.array_equal(self.doc_offsets, other.doc_offsets)
        )

    @property
    def num_docs(self) -> int:
        return len(self.doc_offsets)

    def doc_bounds(self, i: int) -> tuple[int, int]:
        """Half-open [start, end) token range of document i."""
        start = int(self.doc_offsets[i])
        end = int(self.doc_offsets[i + 1]) if i + 1 < self.num_docs else len(self.tokens)
        return start, end

    def doc_starts_for(self, positions: np.ndarray) -> np.ndarray:
        """Document start offset for each global token position."""
        idx = np.searchsorted(self.doc_offsets, positions, side="right") - 1
        return self.doc_offsets[idx].astype(np.int64)

    def save(self, path: str | Path) -> None:
        with open(path, "wb") as f:
            f.write(TOKENS_MAGIC)
            f.write(struct.pack("<IQQ", self.vocab_size, len(self.tokens), self.num_docs))
            f.write(self.tokens.tobytes())
            f.write(self.doc_offsets.tobytes())

    @classmethod
    def load(cls, path: str | Path) -> "TokenStream":
        data = Path(path).read_bytes()
        if data[:8] != TOKENS_MAGIC:
            raise ValueError(f"{path}: bad magic, not a token-stream file")
        vocab_size, n_tok, n_doc = struct.unpack_from("<IQQ", data, 8)
        off = 8 + struct.calcsize("<IQQ")
        need = off + 4 * n_tok + 8 * n_doc
        if len(data) < need:
            raise ValueError(f"{path}: truncated token-stream file")
        tokens = np.frombuffer(data, dtype="<u4", count=n_tok, offset=off)
        doc_offsets = np.frombuffer(data, dtype="<u8", count=n_doc, offset=off + 4 * n_tok)
        return cls(tokens.copy(), doc_offsets.copy(), vocab_size)


def tokenize(text: str, vocab: Vocab) -> TokenStream:
    """Map text to a TokenStream; unseen surfaces become <unk>.

    Blank-line-separated blocks become documents; blocks without tokens
    are dropped.
    """
    tokens: list[int] = []
    offsets: list[int] = []
    for block in _DOC_SPLIT.split(text):
        words = block.split()
        if not words:
            continue
        offsets.append(len(tokens))
        tokens.extend(vocab.id_of(w) for w in words)
    return TokenStream(
        np.asarray(tokens, dtype=np.uint32),
        np.asarray(offsets, dtype=np.uint64),
        len(vocab),
    )
