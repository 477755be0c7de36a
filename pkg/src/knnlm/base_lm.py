"""Jelinek-Mercer interpolated n-gram language model.

The recursive definition, with mu the per-order interpolation weight and
V the vocab size:

    P_1(w)       = mu * ML_1(w) + (1 - mu) / V
    P_o(w | ctx) = mu * ML_o(w | ctx) + (1 - mu) * P_{o-1}(w | ctx')

A context unseen at order o contributes nothing at that order and its
entire mass falls through to the lower order (P_o = P_{o-1}), which keeps
every distribution exactly normalized. Counts never cross document
boundaries, mirroring datastore construction.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .corpus import TokenStream

BASE_MAGIC = b"KLMBASE1"
MODEL_MAGIC = b"KLMNGRM1"


class NgramModel:
    def __init__(self, order: int, mu: float, vocab_size: int):
        if order < 1:
            raise ValueError("order must be >= 1")
        if not 0.0 <= mu < 1.0:
            raise ValueError("mu must be in [0, 1)")
        self.order = order
        self.mu = mu
        self.vocab_size = vocab_size
        self.unigram = np.zeros(vocab_size, dtype=np.int64)
        self.unigram_total = 0
        # For order o >= 2: ngram counts keyed by the o-tuple, and context
        # totals keyed by the (o-1)-tuple. Context totals are sums over
        # continuations (not raw (o-1)-gram counts) so each ML sums to 1.
        self.ngrams: dict[int, dict[tuple[int, ...], int]] = {
            o: {} for o in range(2, order + 1)
        }
        self.context_totals: dict[int, dict[tuple[int, ...], int]] = {
            o: {} for o in range(2, order + 1)
        }

    # -- training -----------------------------------------------------------

    @classmethod
    def train(cls, stream: TokenStream, order: int = 3, mu: float = 0.5) -> "NgramModel":
        if len(stream) == 0:
            raise ValueError("cannot train on an empty stream")
        model = cls(order, mu, stream.vocab_size)
        tokens = stream.tokens
        for d in range(stream.num_docs):
            start, end = stream.doc_bounds(d)
            doc = [int(t) for t in tokens[start:end]]
            for t in doc:
                model.unigram[t] += 1
            model.unigram_total += len(doc)
            for o in range(2, order + 1):
                grams = model.ngrams[o]
                totals = model.context_totals[o]
                for i in range(len(doc) - o + 1):
                    gram = tuple(doc[i : i + o])
                    grams[gram] = grams.get(gram, 0) + 1
                    ctx = gram[:-1]
                    totals[ctx] = totals.get(ctx, 0) + 1
        return model

    # -- scoring ------------------------------------------------------------

    def prob(self, context: list[int] | np.ndarray, w: int) -> float:
        """P(w | context), evaluated bottom-up through the orders."""
        if not 0 <= w < self.vocab_size:
            raise ValueError("token id out of vocab range")
        ctx = [int(t) for t in context]
        p = self.mu * (self.unigram[w] / self.unigram_total) + (1.0 - self.mu) / self.vocab_size
        for o in range(2, self.order + 1):
            if len(ctx) < o - 1:
                break
            c = tuple(ctx[len(ctx) - (o - 1) :])
            total = self.context_totals[o].get(c)
            if total:
                ml = self.ngrams[o].get(c + (w,), 0) / total
                p = self.mu * ml + (1.0 - self.mu) * p
        return p

    def logprob(self, context: list[int] | np.ndarray, w: int) -> float:
        return float(np.log(self.prob(context, w)))

    # -- serialization ------------------------------------------------------

    def to_bytes(self) -> bytes:
        parts = [MODEL_MAGIC]
        parts.append(struct.pack("<IdIQ", self.order, self.mu, self.vocab_size, self.unigram_total))
        parts.append(self.unigram.astype("<i8").tobytes())
        for o in range(2, self.order + 1):
            grams = self.ngrams[o]
            parts.append(struct.pack("<Q", len(grams)))
            for gram in sorted(grams):
                parts.append(struct.pack(f"<{o}IQ", *gram, grams[gram]))
        return b"".join(parts)

    def save(self, path: str | Path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path: str | Path) -> "NgramModel":
        data = Path(path).read_bytes()
        if data[:8] != MODEL_MAGIC:
            raise ValueError(f"{path}: bad magic, not an n-gram model file")
        order, mu, vocab_size, unigram_total = struct.unpack_from("<IdIQ", data, 8)
        model = cls(order, mu, vocab_size)
        off = 8 + struct.calcsize("<IdIQ")
        model.unigram = np.frombuffer(data, dtype="<i8", count=vocab_size, offset=off).copy()
        model.unigram_total = unigram_total
        off += 8 * vocab_size
        for o in range(2, order + 1):
            (n,) = struct.unpack_from("<Q", data, off)
            off += 8
            rec = struct.Struct(f"<{o}IQ")
            grams = {}
            totals = {}
            for _ in range(n):
                fields = rec.unpack_from(data, off)
                off += rec.size
                gram, count = tuple(fields[:-1]), fields[-1]
                grams[gram] = count
                ctx = gram[:-1]
                totals[ctx] = totals.get(ctx, 0) + count
            model.ngrams[o] = grams
            model.context_totals[o] = totals
        return model


# ---------------------------------------------------------------------------
# Externally computed base log-probabilities
# ---------------------------------------------------------------------------


def write_base_logprobs(path: str | Path, logprobs: np.ndarray) -> None:
    arr = np.ascontiguousarray(logprobs, dtype=np.float64)
    with open(path, "wb") as f:
        f.write(BASE_MAGIC)
        f.write(struct.pack("<Q", len(arr)))
        f.write(arr.tobytes())


def import_base_logprobs(path: str | Path, eval_len: int) -> np.ndarray:
    """Load per-token natural-log base probabilities and validate them.

    ``eval_len`` is the number of scored tokens, i.e. sum(doc_len - 1)
    over the evaluation documents.
    """
    data = Path(path).read_bytes()
    if data[:8] != BASE_MAGIC:
        raise ValueError(f"{path}: bad magic, not a base log-prob file")
    (count,) = struct.unpack_from("<Q", data, 8)
    if count != eval_len:
        raise ValueError(f"{path}: has {count} records, expected {eval_len}")
    if len(data) < 16 + 8 * count:
        raise ValueError(f"{path}: truncated base log-prob file")
    arr = np.frombuffer(data, dtype="<f8", count=count, offset=16)
    bad = np.flatnonzero(~(arr <= 0.0))
    if bad.size:
        raise ValueError(f"{path}: positive log-prob at index {int(bad[0])}")
    return arr.copy()
