"""Per-evaluation-token retrieval cache and cache-only rescoring.

One record per predicted token: gold id, base log-prob, and the top-k
neighbor distances/values/positions. All tuning and scoring reads the
cache; the datastore is never touched again. Scoring semantics consume
f32-quantized distances (the record's storage precision), whether or not
the cache ever hits disk, so the file round-trip is bit-exact.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .base_lm import NgramModel
from .corpus import TokenStream
from .datastore import Datastore, entry_positions, search_batch
from .scorer import knn_gold_prob, nll_stream, perplexity_from_nll

CACHE_MAGIC = b"KLMCACH1"
_HEADER = struct.Struct("<IHQQQ")  # vocab_size, k, count, encoder_tag, datastore_hash


def _record_dtype(k: int) -> np.dtype:
    return np.dtype(
        [
            ("token_index", "<u8"),
            ("gold_id", "<u4"),
            ("base_logprob", "<f8"),
            ("k", "<u2"),
            ("distances", "<f4", (k,)),
            ("values", "<u4", (k,)),
            ("positions", "<u8", (k,)),
        ]
    )


@dataclass
class EvalCache:
    vocab_size: int
    k: int
    encoder_tag: int
    datastore_hash: int
    gold: np.ndarray  # (m,) u32
    base_logprob: np.ndarray  # (m,) f64
    distances: np.ndarray  # (m, k) f32, ascending per row
    values: np.ndarray  # (m, k) u32
    positions: np.ndarray  # (m, k) u64

    @property
    def count(self) -> int:
        return len(self.gold)

    def validate(self) -> None:
        m = self.count
        if not (
            len(self.base_logprob) == m
            and self.distances.shape == (m, self.k)
            and self.values.shape == (m, self.k)
            and self.positions.shape == (m, self.k)
        ):
            raise ValueError("cache arrays are not parallel")
        if m and not np.all(self.base_logprob <= 0.0):
            raise ValueError("base log-probs must be <= 0")
        if m and int(self.gold.max()) >= self.vocab_size:
            raise ValueError("gold id out of vocab range")
        block = max(1, (1 << 23) // max(1, self.k))  # bound diff temporaries
        for lo in range(0, m, block):
            if np.any(np.diff(self.distances[lo : lo + block], axis=1) < 0):
                raise ValueError("record distances must be ascending")

    def slice(self, index: np.ndarray | slice) -> "EvalCache":
        """View of a subset of records (used for Dev0/Dev1 and bucket slices)."""
        return EvalCache(
            self.vocab_size,
            self.k,
            self.encoder_tag,
            self.datastore_hash,
            self.gold[index],
            self.base_logprob[index],
            self.distances[index],
            self.values[index],
            self.positions[index],
        )

    def save(self, path: str | Path) -> None:
        rec = np.empty(self.count, dtype=_record_dtype(self.k))
        rec["token_index"] = np.arange(self.count, dtype=np.uint64)
        rec["gold_id"] = self.gold
        rec["base_logprob"] = self.base_logprob
        rec["k"] = self.k
        rec["distances"] = self.distances
        rec["values"] = self.values
        rec["positions"] = self.positions
        with open(path, "wb") as f:
            f.write(CACHE_MAGIC)
            f.write(
                _HEADER.pack(
                    self.vocab_size, self.k, self.count, self.encoder_tag, self.datastore_hash
                )
            )
            f.write(rec.tobytes())

    @classmethod
    def load(cls, path: str | Path) -> "EvalCache":
        data = Path(path).read_bytes()
        if data[:8] != CACHE_MAGIC:
            raise ValueError(f"{path}: bad magic, not an eval-cache file")
        vocab_size, k, count, tag, dhash = _HEADER.unpack_from(data, 8)
        dtype = _record_dtype(k)
        off = 8 + _HEADER.size
        if len(data) < off + dtype.itemsize * count:
            raise ValueError(f"{path}: truncated cache file")
        rec = np.frombuffer(data, dtype=dtype, count=count, offset=off)
        if count and not np.array_equal(rec["token_index"], np.arange(count, dtype=np.uint64)):
            raise ValueError(f"{path}: record token_index not contiguous from 0")
        cache = cls(
            vocab_size,
            k,
            tag,
            dhash,
            rec["gold_id"].copy(),
            rec["base_logprob"].copy(),
            rec["distances"].copy(),
            rec["values"].copy(),
            rec["positions"].copy(),
        )
        cache.validate()
        return cache


def build_cache(
    eval_stream: TokenStream,
    store: Datastore,
    encoder=None,
    query_vectors: np.ndarray | None = None,
    query_tag: int | None = None,
    base_model: NgramModel | None = None,
    base_logprobs: np.ndarray | None = None,
    k: int = 1024,
) -> EvalCache:
    """Query the store once per predicted eval token and record the results.

    One record per in-document position t >= 1 (the first token of each
    document has no context). The effective k is min(k, len(store)) so
    records stay fixed-width.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    if (encoder is None) == (query_vectors is None):
        raise ValueError("provide exactly one of encoder or query_vectors")
    if (base_model is None) == (base_logprobs is None):
        raise ValueError("provide exactly one of base_model or base_logprobs")

    pos = entry_positions(eval_stream)
    if pos.size == 0:
        raise ValueError("evaluation stream yields no records")

    if encoder is not None:
        if encoder.tag != store.encoder_tag:
            raise ValueError(
                f"encoder tag {encoder.tag:#x} does not match datastore tag "
                f"{store.encoder_tag:#x}"
            )
        queries = encoder.encode_positions(eval_stream, pos)
    else:
        if query_tag is None or query_tag != store.encoder_tag:
            raise ValueError("imported query vectors must carry the datastore's encoder tag")
        if len(query_vectors) != len(pos):
            raise ValueError(
                f"query vectors: {len(query_vectors)} rows, expected {len(pos)}"
            )
        queries = np.ascontiguousarray(query_vectors, dtype=np.float32)

    dist, vals, poss = search_batch(store, queries, k)

    gold = eval_stream.tokens[pos].astype(np.uint32)
    if base_model is not None:
        if base_model.vocab_size != eval_stream.vocab_size:
            raise ValueError("base model vocab does not match the eval stream")
        starts = eval_stream.doc_starts_for(pos)
        lp = np.empty(len(pos), dtype=np.float64)
        toks = eval_stream.tokens
        for i, (p, s) in enumerate(zip(pos, starts)):
            lp[i] = base_model.logprob(toks[s:p], int(gold[i]))
    else:
        if len(base_logprobs) != len(pos):
            raise ValueError(
                f"base log-probs: {len(base_logprobs)} records, expected {len(pos)}"
            )
        lp = np.asarray(base_logprobs, dtype=np.float64)
        if np.any(lp > 0.0):
            bad = int(np.flatnonzero(lp > 0.0)[0])
            raise ValueError(f"positive base log-prob at record {bad}")

    cache = EvalCache(
        vocab_size=eval_stream.vocab_size,
        k=dist.shape[1],
        encoder_tag=store.encoder_tag,
        datastore_hash=store.content_hash(),
        gold=gold,
        base_logprob=lp,
        distances=dist.astype(np.float32),
        values=vals,
        positions=poss,
    )
    cache.validate()
    return cache


# ---------------------------------------------------------------------------
# Cache-only scoring
# ---------------------------------------------------------------------------


def record_nll(cache: EvalCache, lam, k: int | None = None) -> np.ndarray:
    """Per-record negative log-likelihood at a static or per-record lambda."""
    lam_arr = np.asarray(lam, dtype=np.float64)
    if lam_arr.ndim not in (0, 1):
        raise ValueError("lambda must be a scalar or a per-record array")
    if lam_arr.ndim == 1 and len(lam_arr) != cache.count:
        raise ValueError("per-record lambda length mismatch")
    if np.any(lam_arr < 0.0) or np.any(lam_arr > 1.0):
        raise ValueError("lambda must be in [0, 1]")
    pk = knn_gold_prob(cache.distances, cache.values, cache.gold, k)
    pb = np.exp(cache.base_logprob)
    p = lam_arr * pk + (1.0 - lam_arr) * pb
    return nll_stream(p)


def rescore(cache: EvalCache, lam_or_table, k: int | None = None, similarities=None) -> float:
    """Perplexity from the cache alone at a static lambda or a LambdaTable.

    For a table with tfidf similarity, precomputed ``similarities`` are
    required (they need the token streams); dense similarities are derived
    from the cache.
    """
    from .adaptive import LambdaTable, lambdas_for  # local import avoids a cycle

    if isinstance(lam_or_table, LambdaTable):
        lam = lambdas_for(lam_or_table, cache, similarities=similarities)
    else:
        lam = lam_or_table
    return perplexity_from_nll(record_nll(cache, lam, k))
