"""Diagnostic reports: similarity-bucket curves, token-group breakdowns,
and the similarity-kind x k ablation grid.

All reports are pure functions of (cache, parameters): repeated runs are
byte-identical. Relative improvement is always computed from bucket- or
group-level perplexities (exp of the group's mean NLL), and that formula
is stated in each report's header comment.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .adaptive import (
    LambdaTable,
    dense_similarities,
    lambdas_for,
    tfidf_similarities,
    tune,
)
from .corpus import TokenStream
from .datastore import entry_positions
from .encoder import IdfTable
from .eval_cache import EvalCache, record_nll
from .scorer import relative_improvement


def _variant_nll(cache: EvalCache, lam_or_table, similarities=None, k=None) -> np.ndarray:
    if isinstance(lam_or_table, LambdaTable):
        lam = lambdas_for(lam_or_table, cache, similarities=similarities)
    else:
        lam = lam_or_table
    return record_nll(cache, lam, k)


def _group_ppl(nll: np.ndarray) -> float:
    return math.exp(math.fsum(nll) / len(nll))


@dataclass
class BucketRow:
    bucket: int
    count: int
    base_ppl: float
    variant_ppl: float
    improvement_pct: float


def bucket_improvement_curve(
    cache: EvalCache,
    lam_or_table,
    n_buckets: int = 20,
    kind: str = "dense",
    similarities=None,
    k: int | None = None,
) -> list[BucketRow]:
    """Per-bucket relative perplexity improvement over the base model.

    Records are sorted by similarity (descending, ties by record index)
    and split into n_buckets rank buckets whose sizes differ by at most 1;
    bucket 0 holds the highest-similarity queries.
    """
    m = cache.count
    if not 1 <= n_buckets <= m:
        raise ValueError(f"n_buckets must be in 1..{m}")
    if similarities is None:
        if kind != "dense":
            raise ValueError("non-dense curves need precomputed similarities")
        similarities = dense_similarities(cache)
    sims = np.asarray(similarities, dtype=np.float64)
    order = np.lexsort((np.arange(m), -sims))
    base_nll = -cache.base_logprob
    var_nll = _variant_nll(cache, lam_or_table, similarities=sims, k=k)
    rows = []
    for j in range(n_buckets):
        sel = order[j * m // n_buckets : (j + 1) * m // n_buckets]
        base_ppl = _group_ppl(base_nll[sel])
        var_ppl = _group_ppl(var_nll[sel])
        rows.append(
            BucketRow(j, len(sel), base_ppl, var_ppl, relative_improvement(base_ppl, var_ppl))
        )
    return rows


@dataclass
class GroupRow:
    label: str
    count: int
    base_ppl: float
    variant_ppl: float
    improvement_pct: float


def default_min_count(record_count: int) -> int:
    """The reference setting is 1000 labeled tokens per 217k; scale to size."""
    return max(1, round(1000 * record_count / 217_000))


def group_report(
    cache: EvalCache,
    labels: list[str],
    eval_stream: TokenStream,
    lam_or_table,
    min_count: int | None = None,
    similarities=None,
    k: int | None = None,
) -> list[GroupRow]:
    """Per-label perplexities for externally supplied token labels.

    ``labels`` has one entry per eval token; each record takes the label
    of its predicted token. Groups with fewer than min_count records are
    omitted. Rows are ordered by descending count, then label.
    """
    if len(labels) != len(eval_stream):
        raise ValueError(
            f"labels: {len(labels)} entries, expected one per eval token ({len(eval_stream)})"
        )
    pos = entry_positions(eval_stream)
    if len(pos) != cache.count:
        raise ValueError("eval stream does not match the cache record count")
    if min_count is None:
        min_count = default_min_count(cache.count)

    base_nll = -cache.base_logprob
    var_nll = _variant_nll(cache, lam_or_table, similarities=similarities, k=k)
    by_label: dict[str, list[int]] = {}
    for i, p in enumerate(pos):
        by_label.setdefault(labels[int(p)], []).append(i)

    rows = []
    for label, idx in by_label.items():
        if len(idx) < min_count:
            continue
        sel = np.asarray(idx)
        base_ppl = _group_ppl(base_nll[sel])
        var_ppl = _group_ppl(var_nll[sel])
        rows.append(
            GroupRow(label, len(sel), base_ppl, var_ppl, relative_improvement(base_ppl, var_ppl))
        )
    rows.sort(key=lambda r: (-r.count, r.label))
    return rows


@dataclass
class AblationRow:
    kind: str
    k: int
    chosen_b: int
    dev_ppl: float


def ablation_grid(
    cache: EvalCache,
    kinds=("dense", "tfidf"),
    k_list=(1, 8, 64, 1024),
    b_grid=None,
    lambda_grid=None,
    eval_stream: TokenStream | None = None,
    train_stream: TokenStream | None = None,
    idf: IdfTable | None = None,
) -> list[AblationRow]:
    """Tune at each (similarity kind, truncated k) and report dev perplexity.

    Neighbor lists are truncated to each k (distances are ascending), so a
    single cache built at the largest k serves the whole grid.
    """
    from .adaptive import DEFAULT_B_GRID, DEFAULT_LAMBDA_GRID

    b_grid = DEFAULT_B_GRID if b_grid is None else b_grid
    lambda_grid = DEFAULT_LAMBDA_GRID if lambda_grid is None else lambda_grid
    for k in k_list:
        if k > cache.k:
            raise ValueError(f"requested k={k} exceeds cached k={cache.k}")
    rows = []
    for kind in kinds:
        if kind == "tfidf":
            if eval_stream is None or train_stream is None:
                raise ValueError("tfidf ablation needs the eval and train streams")
            sims = tfidf_similarities(cache, eval_stream, train_stream, idf)
        else:
            sims = dense_similarities(cache)
        for k in k_list:
            result = tune(cache, b_grid, lambda_grid, kind=kind, similarities=sims, k=k)
            rows.append(AblationRow(kind, k, result.b, result.dev_ppl))
    return rows


# ---------------------------------------------------------------------------
# Report rendering
# ---------------------------------------------------------------------------


def render_tsv(comments: list[str], header: list[str], rows: list[list[str]]) -> str:
    lines = [f"# {c}" for c in comments]
    lines.append("\t".join(header))
    lines.extend("\t".join(r) for r in rows)
    return "\n".join(lines) + "\n"


def bucket_rows_tsv(rows: list[BucketRow]) -> str:
    return render_tsv(
        [
            "bucket 0 holds the highest-similarity queries",
            "improvement_pct = 100*(base_ppl - variant_ppl)/base_ppl from bucket-level perplexities",
        ],
        ["bucket", "count", "base_ppl", "variant_ppl", "improvement_pct"],
        [
            [str(r.bucket), str(r.count), f"{r.base_ppl:.6f}", f"{r.variant_ppl:.6f}", f"{r.improvement_pct:.4f}"]
            for r in rows
        ],
    )


def group_rows_tsv(rows: list[GroupRow], min_count: int) -> str:
    return render_tsv(
        [
            f"groups with fewer than {min_count} records omitted",
            "improvement_pct = 100*(base_ppl - variant_ppl)/base_ppl from group-level perplexities",
        ],
        ["label", "count", "base_ppl", "variant_ppl", "improvement_pct"],
        [
            [r.label, str(r.count), f"{r.base_ppl:.6f}", f"{r.variant_ppl:.6f}", f"{r.improvement_pct:.4f}"]
            for r in rows
        ],
    )


def ablation_rows_tsv(rows: list[AblationRow]) -> str:
    return render_tsv(
        ["dev_ppl is the full-dev perplexity of the table refit after b selection"],
        ["kind", "k", "chosen_b", "dev_ppl"],
        [[r.kind, str(r.k), str(r.chosen_b), f"{r.dev_ppl:.6f}"] for r in rows],
    )
