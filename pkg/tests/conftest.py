"""Shared fixtures: a small synthetic pipeline used across test modules."""

from dataclasses import dataclass

import pytest

from knnlm.base_lm import NgramModel
from knnlm.corpus import TokenStream, build_vocab, tokenize
from knnlm.datastore import Datastore, build_datastore
from knnlm.encoder import DenseEncoder, DenseEncoderConfig
from knnlm.eval_cache import EvalCache, build_cache
from knnlm.synth import generate_corpus


@dataclass
class SmallPipeline:
    train: TokenStream
    dev: TokenStream
    encoder: DenseEncoder
    store: Datastore
    model: NgramModel
    cache: EvalCache


@pytest.fixture(scope="session")
def small_pipeline() -> SmallPipeline:
    """~8k train tokens, ~1k-record dev cache, dim 64, k=16."""
    corpus = generate_corpus(seed=11, train_tokens=8000, eval_tokens=2200, overlap_rate=0.5)
    vocab = build_vocab(corpus.train_text)
    train = tokenize(corpus.train_text, vocab)
    dev = tokenize(corpus.dev_text, vocab)
    encoder = DenseEncoder(DenseEncoderConfig(dim=64, seed=5), len(vocab))
    store = build_datastore(train, encoder=encoder)
    model = NgramModel.train(train, order=3, mu=0.5)
    cache = build_cache(dev, store, encoder=encoder, base_model=model, k=16)
    return SmallPipeline(train, dev, encoder, store, model, cache)
