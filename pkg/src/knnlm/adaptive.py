"""Retrieval-quality bucketing and the adaptive interpolation coefficient.

Queries are sorted by the similarity of their top retrieved item and cut
into b equal-population rank buckets; each bucket gets its own
interpolation coefficient from a grid search. The bucket count b is
chosen by fitting boundaries and coefficients on the first half of the
validation records (Dev0) and scoring candidates on the second half
(Dev1); the returned table is refit on the full validation set.

Boundary ranks are floor(j*n/b) (1-based) into the descending sort, so
the boundary set for b is a subset of the boundary set for 2b. Dev0
totals for power-of-two b are evaluated by pairwise-folding the sums of
the finest power-of-two partition; IEEE addition is monotone, which makes
Dev0 perplexity along b in {1, 2, 4, ...} exactly non-increasing (no
tolerance needed), not just approximately so.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path

import numpy as np

from .corpus import TokenStream
from .datastore import entry_positions
from .encoder import IdfTable, build_idf, tfidf_cosine, tfidf_window_at
from .eval_cache import EvalCache, record_nll, rescore
from .scorer import knn_gold_prob

SIMILARITY_KINDS = ("dense", "tfidf")

DEFAULT_B_GRID = (1, 2, 4, 8, 16, 32, 64, 128)
DEFAULT_LAMBDA_GRID = tuple(float(Fraction(i, 20)) for i in range(1, 20))


@dataclass
class BucketPartition:
    """b-1 similarity thresholds, weakly descending; bucket 0 is highest."""

    boundaries: np.ndarray
    kind: str

    def __post_init__(self) -> None:
        if self.kind not in SIMILARITY_KINDS:
            raise ValueError(f"unknown similarity kind {self.kind!r}")
        self.boundaries = np.asarray(self.boundaries, dtype=np.float64)
        if self.boundaries.size and np.any(np.diff(self.boundaries) > 0):
            raise ValueError("boundaries must be weakly descending")

    @property
    def b(self) -> int:
        return len(self.boundaries) + 1


@dataclass
class LambdaTable:
    """One interpolation coefficient per similarity bucket."""

    partition: BucketPartition
    lambdas: np.ndarray

    def __post_init__(self) -> None:
        self.lambdas = np.asarray(self.lambdas, dtype=np.float64)
        if len(self.lambdas) != self.partition.b:
            raise ValueError("need exactly one lambda per bucket")
        if np.any(self.lambdas < 0.0) or np.any(self.lambdas > 1.0):
            raise ValueError("lambdas must be in [0, 1]")

    @property
    def b(self) -> int:
        return self.partition.b

    def save(self, path: str | Path) -> None:
        lines = [f"b={self.b} kind={self.partition.kind}"]
        lines += [f"{v:.17g}" for v in self.partition.boundaries]
        lines += [f"{v:.17g}" for v in self.lambdas]
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "LambdaTable":
        lines = Path(path).read_text(encoding="utf-8").split()
        header = lines[:2]
        if len(header) != 2 or not header[0].startswith("b=") or not header[1].startswith("kind="):
            raise ValueError(f"{path}: bad lambda-table header")
        b = int(header[0][2:])
        kind = header[1][5:]
        nums = [float(x) for x in lines[2:]]
        if len(nums) != (b - 1) + b:
            raise ValueError(f"{path}: expected {b - 1} boundaries and {b} lambdas")
        part = BucketPartition(np.array(nums[: b - 1]), kind)
        return cls(part, np.array(nums[b - 1 :]))


# ---------------------------------------------------------------------------
# Similarities
# ---------------------------------------------------------------------------


def dense_similarities(cache: EvalCache) -> np.ndarray:
    """Negative exact distance of the rank-1 neighbor, per record."""
    return -cache.distances[:, 0].astype(np.float64)


def tfidf_similarities(
    cache: EvalCache,
    eval_stream: TokenStream,
    train_stream: TokenStream,
    idf: IdfTable | None = None,
) -> np.ndarray:
    """Cosine similarity of query and rank-1 neighbor TFIDF context windows.

    The neighbor's window is reconstructed from its datastore position in
    the training stream; windows near a document start are padded to the
    available tokens.
    """
    if idf is None:
        idf = build_idf(train_stream)
    pos = entry_positions(eval_stream)
    if len(pos) != cache.count:
        raise ValueError("eval stream does not match the cache record count")
    sims = np.empty(cache.count, dtype=np.float64)
    for i in range(cache.count):
        q = tfidf_window_at(eval_stream, int(pos[i]), idf)
        nbr = tfidf_window_at(train_stream, int(cache.positions[i, 0]), idf)
        sims[i] = tfidf_cosine(q, nbr)
    return sims


def similarity(
    cache: EvalCache,
    index: int,
    kind: str = "dense",
    eval_stream: TokenStream | None = None,
    train_stream: TokenStream | None = None,
    idf: IdfTable | None = None,
) -> float:
    """Similarity of one record's query with its top retrieved item."""
    if kind == "dense":
        return float(dense_similarities(cache)[index])
    if kind == "tfidf":
        if eval_stream is None or train_stream is None:
            raise ValueError("tfidf similarity needs the eval and train streams")
        if idf is None:
            idf = build_idf(train_stream)
        pos = entry_positions(eval_stream)
        q = tfidf_window_at(eval_stream, int(pos[index]), idf)
        nbr = tfidf_window_at(train_stream, int(cache.positions[index, 0]), idf)
        return tfidf_cosine(q, nbr)
    raise ValueError(f"unknown similarity kind {kind!r}")


# ---------------------------------------------------------------------------
# Partitions
# ---------------------------------------------------------------------------


def make_partition(similarities: np.ndarray, b: int, kind: str = "dense") -> BucketPartition:
    """Equal-population rank partition of the given similarities.

    boundary_j is the similarity at 1-based rank floor(j*n/b) of the
    descending sort, i.e. the last member of bucket j-1; a value equal to
    a boundary joins the higher-similarity bucket.
    """
    sims = np.asarray(similarities, dtype=np.float64)
    n = len(sims)
    if n == 0:
        raise ValueError("cannot partition an empty similarity list")
    if b < 1:
        raise ValueError("b must be >= 1")
    if b > n:
        raise ValueError(f"b={b} exceeds the number of records ({n})")
    sorted_desc = np.sort(sims)[::-1]
    ranks = [j * n // b - 1 for j in range(1, b)]
    return BucketPartition(sorted_desc[ranks], kind)


def assign_bucket(partition: BucketPartition, sim: float) -> int:
    """Bucket index via binary search: the count of boundaries > sim."""
    asc = partition.boundaries[::-1]
    return len(asc) - int(np.searchsorted(asc, sim, side="right"))


def assign_buckets(partition: BucketPartition, sims: np.ndarray) -> np.ndarray:
    asc = partition.boundaries[::-1]
    return len(asc) - np.searchsorted(asc, np.asarray(sims, dtype=np.float64), side="right")


def lambdas_for(table: LambdaTable, cache: EvalCache, similarities=None) -> np.ndarray:
    """Per-record coefficient lookup for a cache."""
    if similarities is None:
        if table.partition.kind != "dense":
            raise ValueError("non-dense tables need precomputed similarities")
        similarities = dense_similarities(cache)
    sims = np.asarray(similarities, dtype=np.float64)
    if len(sims) != cache.count:
        raise ValueError("similarity array length mismatch")
    return table.lambdas[assign_buckets(table.partition, sims)]


def score_adaptive(cache: EvalCache, table: LambdaTable, similarities=None, k: int | None = None) -> float:
    """Perplexity under per-bucket coefficients (same path as rescore)."""
    return rescore(cache, table, k=k, similarities=similarities)


# ---------------------------------------------------------------------------
# Coefficient search
# ---------------------------------------------------------------------------


def grid_search_lambda(cache: EvalCache, grid, k: int | None = None) -> float:
    """Grid value minimizing perplexity over the cache slice; ties take the
    smaller lambda (prefer the base LM when indifferent)."""
    grid = _check_grid(grid)
    pk = knn_gold_prob(cache.distances, cache.values, cache.gold, k)
    pb = np.exp(cache.base_logprob)
    best_lam, best_nll = None, math.inf
    for lam in grid:
        nll = _nll_sum(pk, pb, lam)
        if nll < best_nll:
            best_lam, best_nll = lam, nll
    return float(best_lam)


def _check_grid(grid) -> list[float]:
    grid = sorted(float(g) for g in grid)
    if not grid:
        raise ValueError("lambda grid is empty")
    if grid[0] < 0.0 or grid[-1] > 1.0:
        raise ValueError("lambda grid values must be in [0, 1]")
    return grid


def _nll_sum(pk: np.ndarray, pb: np.ndarray, lam: float) -> float:
    p = lam * pk + (1.0 - lam) * pb
    with np.errstate(divide="ignore"):
        nll = -np.log(p)
    return float(np.sum(nll))


def _nll_matrix(pk: np.ndarray, pb: np.ndarray, grid: list[float]) -> np.ndarray:
    """(n_lambdas, n_records) negative log-likelihoods; p == 0 maps to +inf."""
    lams = np.asarray(grid, dtype=np.float64)[:, None]
    p = lams * pk[None, :] + (1.0 - lams) * pb[None, :]
    with np.errstate(divide="ignore"):
        return -np.log(p)


def _tree_total(vals: np.ndarray) -> float:
    """Pairwise-halving sum; exact halving at power-of-two lengths."""
    arr = np.asarray(vals, dtype=np.float64)
    while arr.size > 1:
        if arr.size % 2:
            arr = np.concatenate([arr[:-1:2] + arr[1::2], arr[-1:]])
        else:
            arr = arr[0::2] + arr[1::2]
    return float(arr[0])


@dataclass
class TuneRow:
    b: int
    dev0_ppl: float
    dev1_ppl: float


@dataclass
class TuneResult:
    b: int
    table: LambdaTable
    dev_ppl: float  # full-dev perplexity of the refit table, via rescore
    rows: list[TuneRow]
    skipped: list[int]


def tune(
    cache: EvalCache,
    b_grid=DEFAULT_B_GRID,
    lambda_grid=DEFAULT_LAMBDA_GRID,
    kind: str = "dense",
    similarities=None,
    k: int | None = None,
) -> TuneResult:
    """Select b on Dev0/Dev1, then refit the table on the full dev cache.

    Dev0 is the first half of the records in token order. For each b:
    boundaries and per-bucket coefficients are fit on Dev0, scored on
    Dev1; the best Dev1 perplexity wins (ties to the smaller b). Values of
    b exceeding the Dev0 size are skipped with a warning.
    """
    grid = _check_grid(lambda_grid)
    b_list = sorted(set(int(b) for b in b_grid))
    if not b_list:
        raise ValueError("b grid is empty")
    if b_list[0] < 1:
        raise ValueError("b must be >= 1")
    m = cache.count
    n0 = m // 2
    if n0 < 1 or m - n0 < 1:
        raise ValueError("cache too small to split into Dev0/Dev1")

    if similarities is None:
        if kind != "dense":
            raise ValueError("non-dense tuning needs precomputed similarities")
        similarities = dense_similarities(cache)
    sims = np.asarray(similarities, dtype=np.float64)
    if len(sims) != m:
        raise ValueError("similarity array length mismatch")

    skipped = [b for b in b_list if b > n0]
    for b in skipped:
        warnings.warn(f"skipping b={b}: exceeds Dev0 size {n0}", stacklevel=2)
    b_list = [b for b in b_list if b <= n0]
    if not b_list:
        raise ValueError("every candidate b exceeds the Dev0 size")

    pk = knn_gold_prob(cache.distances, cache.values, cache.gold, k)
    pb = np.exp(cache.base_logprob)
    nll = _nll_matrix(pk, pb, grid)  # (L, m)
    nll0, nll1 = nll[:, :n0], nll[:, n0:]
    sims0, sims1 = sims[:n0], sims[n0:]
    n_lam = len(grid)

    def bucket_sums(idx: np.ndarray, b: int, cols: np.ndarray) -> np.ndarray:
        return np.stack(
            [np.bincount(idx, weights=cols[l], minlength=b) for l in range(n_lam)]
        )

    # Fold fine-level Dev0 sums pairwise so every power-of-two b in the grid
    # shares exactly comparable totals (see module docstring).
    chain = [b for b in b_list if b & (b - 1) == 0]
    folded: dict[int, np.ndarray] = {}
    if chain:
        b_max = max(chain)
        fine_idx = assign_buckets(make_partition(sims0, b_max, kind), sims0)
        s = bucket_sums(fine_idx, b_max, nll0)
        folded[b_max] = s
        b = b_max
        while b > 1:
            s = s[:, 0::2] + s[:, 1::2]
            b //= 2
            folded[b] = s

    rows: list[TuneRow] = []
    best: tuple[float, int] | None = None
    for b in b_list:
        part = make_partition(sims0, b, kind)
        if b in folded:
            sums = folded[b]
        else:
            sums = bucket_sums(assign_buckets(part, sims0), b, nll0)
        lam_idx = np.argmin(sums, axis=0)  # ties take the smaller lambda
        mins = sums[lam_idx, np.arange(b)]
        dev0_ppl = math.exp(_tree_total(mins) / n0)
        rec_lam_idx = lam_idx[assign_buckets(part, sims1)]
        dev1_nll = nll1[rec_lam_idx, np.arange(m - n0)]
        dev1_ppl = math.exp(math.fsum(dev1_nll) / (m - n0))
        rows.append(TuneRow(b, dev0_ppl, dev1_ppl))
        if best is None or dev1_ppl < best[0]:
            best = (dev1_ppl, b)

    b_best = best[1]
    part_full = make_partition(sims, b_best, kind)
    sums_full = bucket_sums(assign_buckets(part_full, sims), b_best, nll)
    lam_idx_full = np.argmin(sums_full, axis=0)
    table = LambdaTable(part_full, np.asarray(grid)[lam_idx_full])
    dev_ppl = rescore(cache, table, k=k, similarities=sims)
    return TuneResult(b_best, table, dev_ppl, rows, skipped)
