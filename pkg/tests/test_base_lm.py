"""Jelinek-Mercer n-gram model tests."""

import math
from collections import Counter

import numpy as np
import pytest

from knnlm.base_lm import NgramModel, import_base_logprobs, write_base_logprobs
from knnlm.corpus import TokenStream, build_vocab, tokenize
from knnlm.scorer import perplexity


def _stream(text: str):
    vocab = build_vocab(text)
    return tokenize(text, vocab)


class TestTraining:
    def test_single_token_corpus_unigram(self):
        stream = _stream("a a a a")
        model = NgramModel.train(stream, order=1)
        a = 1  # id of "a" (after <unk>)
        assert model.unigram[a] == 4 and model.unigram_total == 4

    def test_training_deterministic_serialization(self):
        stream = _stream("a b c a b a\n\nc b a")
        m1 = NgramModel.train(stream, order=3)
        m2 = NgramModel.train(stream, order=3)
        assert m1.to_bytes() == m2.to_bytes()

    def test_bigram_counts_match_brute_force(self):
        rng = np.random.default_rng(0)
        tokens = rng.integers(0, 20, size=10_000, dtype=np.uint32)
        offsets = np.array([0, 3000, 7000], dtype=np.uint64)
        stream = TokenStream(tokens, offsets, 20)
        model = NgramModel.train(stream, order=2)
        oracle = Counter()
        for start, end in [(0, 3000), (3000, 7000), (7000, 10_000)]:
            for i in range(start, end - 1):
                oracle[(int(tokens[i]), int(tokens[i + 1]))] += 1
        assert model.ngrams[2] == dict(oracle)

    def test_counts_do_not_cross_documents(self):
        stream = _stream("a b\n\nb a")
        model = NgramModel.train(stream, order=2)
        a, b = 1, 2
        # Only (a,b) from doc 1 and (b,a) from doc 2; no cross-boundary (b,b).
        assert model.ngrams[2] == {(a, b): 1, (b, a): 1}

    def test_order_below_one_rejected(self):
        with pytest.raises(ValueError):
            NgramModel.train(_stream("a b"), order=0)

    def test_model_file_roundtrip(self, tmp_path):
        stream = _stream("a b c a b c c b a")
        model = NgramModel.train(stream, order=3)
        model.save(tmp_path / "m.ngram")
        loaded = NgramModel.load(tmp_path / "m.ngram")
        assert loaded.to_bytes() == model.to_bytes()
        ctx = [1, 2]
        for w in range(model.vocab_size):
            assert loaded.prob(ctx, w) == model.prob(ctx, w)


class TestProb:
    def test_hand_evaluated_recursion(self):
        # Corpus "a b a b": V=3; ML_2(b|a)=2/2=1, ML_1(b)=2/4.
        # P(b|a) = 0.5*1 + 0.5*(0.5*0.5 + 0.5/3)
        stream = _stream("a b a b")
        model = NgramModel.train(stream, order=2, mu=0.5)
        a, b = 1, 2
        expected = 0.5 * 1.0 + 0.5 * (0.5 * 0.5 + 0.5 / 3)
        assert model.prob([a], b) == pytest.approx(expected, abs=1e-15)

    def test_unseen_context_backs_off_to_unigram_smoothing(self):
        stream = _stream("a b a b")
        model = NgramModel.train(stream, order=2, mu=0.5)
        b = 2
        # Context never seen at order 2: P = mu*ML_1(b) + (1-mu)/V.
        expected = 0.5 * (2 / 4) + 0.5 / 3
        assert model.prob([0], b) == pytest.approx(expected, abs=1e-15)

    def test_distributions_sum_to_one_by_enumeration(self):
        rng = np.random.default_rng(1)
        tokens = rng.integers(0, 30, size=2000, dtype=np.uint32)
        stream = TokenStream(tokens, np.array([0, 900], dtype=np.uint64), 30)
        model = NgramModel.train(stream, order=3, mu=0.5)
        for _ in range(20):
            ctx = rng.integers(0, 30, size=rng.integers(0, 5)).tolist()
            total = math.fsum(model.prob(ctx, w) for w in range(30))
            assert abs(total - 1.0) < 1e-9

    def test_strictly_positive(self):
        stream = _stream("a b a b")
        model = NgramModel.train(stream, order=3, mu=0.5)
        for w in range(model.vocab_size):
            assert model.prob([1, 2], w) > 0.0

    def test_monotone_in_added_occurrence(self):
        rng = np.random.default_rng(2)
        base_tokens = rng.integers(0, 10, size=500, dtype=np.uint32).tolist()
        ctx, w = [3, 4], 5
        grown = base_tokens + ctx + [w]
        m_before = NgramModel.train(
            TokenStream(np.array(grown[:-3], dtype=np.uint32), np.array([0], dtype=np.uint64), 10),
            order=3,
        )
        m_after = NgramModel.train(
            TokenStream(np.array(grown, dtype=np.uint32), np.array([0], dtype=np.uint64), 10),
            order=3,
        )
        assert m_after.prob(ctx, w) >= m_before.prob(ctx, w)


class TestBaseLogprobIO:
    def test_roundtrip_bit_identical(self, tmp_path):
        rng = np.random.default_rng(0)
        lp = -rng.random(100)
        write_base_logprobs(tmp_path / "b.base", lp)
        back = import_base_logprobs(tmp_path / "b.base", 100)
        assert back.tobytes() == lp.tobytes()

    def test_positive_logprob_names_index(self, tmp_path):
        lp = -np.ones(10)
        lp[3] = 0.1
        write_base_logprobs(tmp_path / "b.base", lp)
        with pytest.raises(ValueError, match="index 3"):
            import_base_logprobs(tmp_path / "b.base", 10)

    def test_count_mismatch(self, tmp_path):
        write_base_logprobs(tmp_path / "b.base", -np.ones(10))
        with pytest.raises(ValueError, match="expected 12"):
            import_base_logprobs(tmp_path / "b.base", 12)

    def test_uniform_export_gives_perplexity_100(self, tmp_path):
        lp = np.full(250, math.log(1 / 100))
        write_base_logprobs(tmp_path / "b.base", lp)
        back = import_base_logprobs(tmp_path / "b.base", 250)
        assert perplexity(np.exp(back)) == pytest.approx(100.0, abs=1e-6)
