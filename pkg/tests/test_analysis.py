"""Report tests: bucket curves, group breakdowns, ablation grid."""

import math

import numpy as np
import pytest

from knnlm.adaptive import dense_similarities, grid_search_lambda, tune
from knnlm.analysis import (
    ablation_grid,
    ablation_rows_tsv,
    bucket_improvement_curve,
    bucket_rows_tsv,
    default_min_count,
    group_report,
    group_rows_tsv,
)
from knnlm.datastore import entry_positions
from knnlm.eval_cache import rescore
from knnlm.scorer import knn_gold_prob, relative_improvement
from tests.test_adaptive import separating_cache


class TestBucketCurve:
    def test_improvement_concentrates_in_high_similarity_buckets(self):
        cache = separating_cache(400, seed=3)
        rows = bucket_improvement_curve(cache, 0.5, n_buckets=4)
        # Helpful records all have higher similarity: top half improves,
        # bottom half degrades.
        assert rows[0].improvement_pct > 0 and rows[1].improvement_pct > 0
        assert rows[2].improvement_pct < 0 and rows[3].improvement_pct < 0

    def test_single_bucket_equals_overall(self, small_pipeline):
        cache = small_pipeline.cache
        rows = bucket_improvement_curve(cache, 0.3, n_buckets=1)
        base = rescore(cache, 0.0)
        variant = rescore(cache, 0.3)
        assert rows[0].count == cache.count
        assert rows[0].improvement_pct == pytest.approx(
            relative_improvement(base, variant), abs=1e-9
        )

    def test_bucket_sizes_differ_by_at_most_one(self, small_pipeline):
        rows = bucket_improvement_curve(small_pipeline.cache, 0.25, n_buckets=20)
        counts = [r.count for r in rows]
        assert max(counts) - min(counts) <= 1
        assert sum(counts) == small_pipeline.cache.count

    def test_rendered_tsv_deterministic(self, small_pipeline):
        rows = bucket_improvement_curve(small_pipeline.cache, 0.25, n_buckets=5)
        assert bucket_rows_tsv(rows) == bucket_rows_tsv(rows)
        assert bucket_rows_tsv(rows).splitlines()[2].startswith("bucket")


class TestGroupReport:
    def _labels(self, stream, fn):
        return [fn(i) for i in range(len(stream))]

    def test_single_label_equals_overall(self, small_pipeline):
        sp = small_pipeline
        labels = self._labels(sp.dev, lambda i: "all")
        rows = group_report(sp.cache, labels, sp.dev, 0.4, min_count=1)
        assert len(rows) == 1
        assert rows[0].count == sp.cache.count
        base, variant = rescore(sp.cache, 0.0), rescore(sp.cache, 0.4)
        assert rows[0].base_ppl == pytest.approx(base, abs=1e-9)
        assert rows[0].variant_ppl == pytest.approx(variant, abs=1e-9)

    def test_two_disjoint_groups_recombine_to_total(self, small_pipeline):
        sp = small_pipeline
        labels = self._labels(sp.dev, lambda i: "even" if i % 2 == 0 else "odd")
        rows = group_report(sp.cache, labels, sp.dev, 0.4, min_count=1)
        total_records = sum(r.count for r in rows)
        assert total_records == sp.cache.count
        weighted = math.fsum(r.count * math.log(r.variant_ppl) for r in rows)
        recombined = math.exp(weighted / total_records)
        assert abs(recombined - rescore(sp.cache, 0.4)) < 1e-9

    def test_below_min_count_omitted(self, small_pipeline):
        sp = small_pipeline
        labels = self._labels(sp.dev, lambda i: "rare" if i < 3 else "common")
        rows = group_report(sp.cache, labels, sp.dev, 0.2, min_count=10)
        assert [r.label for r in rows] == ["common"]

    def test_default_min_count_scales(self):
        assert default_min_count(217_000) == 1000
        assert default_min_count(21_700) == 100
        assert default_min_count(10) == 1

    def test_length_mismatch_rejected(self, small_pipeline):
        sp = small_pipeline
        with pytest.raises(ValueError, match="labels"):
            group_report(sp.cache, ["x"] * 3, sp.dev, 0.4)

    def test_rendering(self, small_pipeline):
        sp = small_pipeline
        labels = self._labels(sp.dev, lambda i: f"g{i % 2}")
        rows = group_report(sp.cache, labels, sp.dev, 0.4, min_count=1)
        text = group_rows_tsv(rows, 1)
        assert text.count("\n") == 2 + 1 + len(rows)


class TestAblationGrid:
    def test_static_cell_matches_b_one_tuning(self, small_pipeline):
        cache = small_pipeline.cache
        rows = ablation_grid(cache, kinds=("dense",), k_list=(cache.k,), b_grid=(1,))
        static_lam = grid_search_lambda(cache, k=cache.k, grid=tuple(i / 20 for i in range(1, 20)))
        assert rows[0].chosen_b == 1
        assert rows[0].dev_ppl == rescore(cache, static_lam, k=cache.k)

    def test_reference_shaped_grid_runs(self, small_pipeline):
        sp = small_pipeline
        rows = ablation_grid(
            sp.cache,
            kinds=("dense", "tfidf"),
            k_list=(1, 8, 16),
            b_grid=(1, 2, 4),
            eval_stream=sp.dev,
            train_stream=sp.train,
        )
        assert [(r.kind, r.k) for r in rows] == [
            ("dense", 1), ("dense", 8), ("dense", 16),
            ("tfidf", 1), ("tfidf", 8), ("tfidf", 16),
        ]
        text = ablation_rows_tsv(rows)
        assert len(text.splitlines()) == 1 + 1 + 6

    def test_k_one_degenerates_to_top_neighbor(self, small_pipeline):
        cache = small_pipeline.cache
        pk = knn_gold_prob(cache.distances, cache.values, cache.gold, k=1)
        assert set(np.unique(pk)) <= {0.0, 1.0}

    def test_k_above_cache_rejected(self, small_pipeline):
        with pytest.raises(ValueError, match="exceeds cached"):
            ablation_grid(small_pipeline.cache, kinds=("dense",), k_list=(999,))


class TestDecomposition:
    def test_group_nll_sums_to_total(self, small_pipeline):
        # Sum of per-group record*NLL equals the total record*NLL.
        sp = small_pipeline
        from knnlm.eval_cache import record_nll

        nll = record_nll(sp.cache, 0.35)
        labels = [f"g{i % 7}" for i in range(len(sp.dev))]
        pos = entry_positions(sp.dev)
        groups: dict[str, list[int]] = {}
        for i, p in enumerate(pos):
            groups.setdefault(labels[int(p)], []).append(i)
        total = math.fsum(nll)
        by_group = math.fsum(math.fsum(nll[np.asarray(idx)]) for idx in groups.values())
        assert abs(total - by_group) < 1e-9
