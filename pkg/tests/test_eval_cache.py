"""Eval-cache construction, IO, and cache-only rescoring tests."""

import math

import numpy as np
import pytest

from knnlm.corpus import TokenStream, build_vocab, tokenize
from knnlm.datastore import NeighborSet, build_datastore, entry_positions, search
from knnlm.encoder import DenseEncoder, DenseEncoderConfig
from knnlm.eval_cache import EvalCache, build_cache, record_nll, rescore
from knnlm.scorer import interpolate, knn_distribution, knn_gold_prob, perplexity


class TestBuild:
    def test_doc_of_five_yields_four_records(self, small_pipeline):
        sp = small_pipeline
        ev = tokenize("a b c d e", build_vocab("a b c d e"))
        enc = DenseEncoder(DenseEncoderConfig(dim=16), ev.vocab_size)
        store = build_datastore(ev, encoder=enc)
        cache = build_cache(ev, store, encoder=enc, base_logprobs=-np.ones(4), k=2)
        assert cache.count == 4

    def test_record_count_sums_doc_lengths(self, small_pipeline):
        sp = small_pipeline
        expected = sum(
            (sp.dev.doc_bounds(d)[1] - sp.dev.doc_bounds(d)[0]) - 1
            for d in range(sp.dev.num_docs)
        )
        assert sp.cache.count == expected

    def test_rebuild_bit_identical(self, small_pipeline, tmp_path):
        sp = small_pipeline
        a = build_cache(sp.dev, sp.store, encoder=sp.encoder, base_model=sp.model, k=16)
        b = build_cache(sp.dev, sp.store, encoder=sp.encoder, base_model=sp.model, k=16)
        pa, pb = tmp_path / "a.cache", tmp_path / "b.cache"
        a.save(pa)
        b.save(pb)
        assert pa.read_bytes() == pb.read_bytes()

    def test_encoder_tag_mismatch_rejected(self, small_pipeline):
        sp = small_pipeline
        other = DenseEncoder(DenseEncoderConfig(dim=64, seed=99), sp.dev.vocab_size)
        with pytest.raises(ValueError, match="tag"):
            build_cache(sp.dev, sp.store, encoder=other, base_model=sp.model, k=4)

    def test_effective_k_capped_by_store(self):
        ev = tokenize("a b c", build_vocab("a b c"))
        enc = DenseEncoder(DenseEncoderConfig(dim=16), ev.vocab_size)
        store = build_datastore(ev, encoder=enc)  # 2 entries
        cache = build_cache(ev, store, encoder=enc, base_logprobs=-np.ones(2), k=50)
        assert cache.k == 2


class TestIO:
    def test_roundtrip(self, small_pipeline, tmp_path):
        cache = small_pipeline.cache
        path = tmp_path / "c.cache"
        cache.save(path)
        loaded = EvalCache.load(path)
        for field in ("gold", "base_logprob", "distances", "values", "positions"):
            assert np.array_equal(getattr(loaded, field), getattr(cache, field))
        assert (loaded.vocab_size, loaded.k, loaded.encoder_tag, loaded.datastore_hash) == (
            cache.vocab_size,
            cache.k,
            cache.encoder_tag,
            cache.datastore_hash,
        )

    def test_bad_magic(self, tmp_path):
        p = tmp_path / "x.cache"
        p.write_bytes(b"WRONGMAG" + b"\x00" * 40)
        with pytest.raises(ValueError, match="magic"):
            EvalCache.load(p)


class TestRescore:
    def test_lambda_zero_equals_base_bitwise(self, small_pipeline):
        cache = small_pipeline.cache
        base = perplexity(np.exp(cache.base_logprob))
        assert rescore(cache, 0.0) == base

    def test_matches_per_token_scorer_pipeline(self, small_pipeline):
        # Dual-path check: independent per-token loop over search results,
        # with NeighborSet distances quantized to the record precision (f32).
        sp = small_pipeline
        cache = sp.cache
        pos = entry_positions(sp.dev)
        for lam in (0.05, 0.25, 0.5, 0.75, 0.95):
            probs = []
            for i in range(cache.count):
                ns = search(sp.store, sp.encoder.encode_positions(sp.dev, pos[i : i + 1])[0], 16)
                quantized = NeighborSet(
                    ns.distances.astype(np.float32).astype(np.float64),
                    ns.values,
                    ns.positions,
                    ns.k_requested,
                )
                p_knn = knn_distribution(quantized).get(int(cache.gold[i]), 0.0)
                p_base = math.exp(cache.base_logprob[i])
                probs.append(interpolate(p_knn, p_base, lam))
            direct = perplexity(np.array(probs))
            cached = rescore(cache, lam)
            assert abs(direct - cached) < 1e-9

    def test_cache_file_roundtrip_scores_identically(self, small_pipeline, tmp_path):
        cache = small_pipeline.cache
        path = tmp_path / "c.cache"
        cache.save(path)
        loaded = EvalCache.load(path)
        for lam in (0.0, 0.3, 0.95):
            assert rescore(loaded, lam) == rescore(cache, lam)

    def test_k_truncation_changes_only_neighbors(self, small_pipeline):
        cache = small_pipeline.cache
        full = rescore(cache, 0.5)
        trunc = rescore(cache, 0.5, k=1)
        assert full != trunc  # k=1 degenerates to the top neighbor
        pk1 = knn_gold_prob(cache.distances, cache.values, cache.gold, k=1)
        top_hit = (cache.values[:, 0] == cache.gold).astype(np.float64)
        assert np.array_equal(pk1, top_hit)

    def test_bucket_slice_consistency(self, small_pipeline):
        # Rescoring a bucket slice equals recombining its per-record NLLs.
        cache = small_pipeline.cache
        nll = record_nll(cache, 0.4)
        idx = np.arange(cache.count) % 3 == 0
        sliced = cache.slice(np.flatnonzero(idx))
        assert rescore(sliced, 0.4) == pytest.approx(
            math.exp(math.fsum(nll[idx]) / idx.sum()), abs=1e-12
        )

    def test_perplexity_decomposes_over_partitions(self, small_pipeline):
        cache = small_pipeline.cache
        nll = record_nll(cache, 0.6)
        total = rescore(cache, 0.6)
        rng = np.random.default_rng(0)
        assignment = rng.integers(0, 5, size=cache.count)
        weighted = 0.0
        for g in range(5):
            sel = assignment == g
            if sel.sum():
                weighted += sel.sum() * (math.fsum(nll[sel]) / sel.sum())
        recombined = math.exp(weighted / cache.count)
        assert abs(recombined - total) < 1e-9

    def test_f32_distance_storage_regression(self, small_pipeline):
        # Keeping f64 distances moves perplexity by less than 1e-6.
        sp = small_pipeline
        pos = entry_positions(sp.dev)
        queries = sp.encoder.encode_positions(sp.dev, pos)
        from knnlm.datastore import search_batch

        dist64, vals, _ = search_batch(sp.store, queries, 16)
        pb = np.exp(sp.cache.base_logprob)
        for lam in (0.25, 0.75):
            pk64 = knn_gold_prob(dist64, vals, sp.cache.gold)
            ppl64 = perplexity(lam * pk64 + (1 - lam) * pb)
            ppl32 = rescore(sp.cache, lam)
            assert abs(ppl64 - ppl32) < 1e-6

    def test_invalid_lambda_rejected(self, small_pipeline):
        with pytest.raises(ValueError):
            rescore(small_pipeline.cache, 1.5)
