"""Deterministic synthetic corpora for desk-scale experiments.

Sentences are Markov chains over 5-token templates with exactly two
uniform filler tokens between consecutive templates. The chain gives the
corpus dependencies longer than a trigram (the token after a template's
two fillers is predictable from which template preceded them, not from
the fillers themselves), which is what retrieval can exploit and a
low-order base model cannot. Because templates are 5 tokens and every
template boundary carries two random fillers, any 8-gram (or longer)
contains both fillers of some boundary, so shared 8-grams between
generations are confined to spans copied verbatim: with probability
``overlap_rate`` an evaluation sentence embeds a 10-24 token span from
the training text, creating the lexical-overlap regime the n-gram filter
is meant to remove.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

VOCAB_SIZE = 500
N_TEMPLATES = 300
TEMPLATE_LEN = 5
N_FILLERS = 2
N_SUCCESSORS = 3
SUCCESSOR_P = (0.5, 0.3, 0.2)
MIN_SPAN, MAX_SPAN = 10, 25  # half-open upper bound for rng.integers


@dataclass
class SynthCorpus:
    train_text: str
    dev_text: str
    test_text: str


def _surface(token_id: int) -> str:
    return f"w{token_id:03d}"


class _Generator:
    def __init__(self, seed: int):
        self.rng = np.random.default_rng(seed)
        # Zipf-ish token and template-start popularity.
        tok_w = 1.0 / (np.arange(VOCAB_SIZE) + 20.0)
        self.tok_p = tok_w / tok_w.sum()
        tpl_w = 1.0 / (np.arange(N_TEMPLATES) + 10.0)
        self.tpl_p = tpl_w / tpl_w.sum()
        self.templates = [
            self.rng.choice(VOCAB_SIZE, size=TEMPLATE_LEN, p=self.tok_p).tolist()
            for _ in range(N_TEMPLATES)
        ]
        self.successors = [
            self.rng.choice(N_TEMPLATES, size=N_SUCCESSORS, replace=False)
            for _ in range(N_TEMPLATES)
        ]
        self.succ_p = np.asarray(SUCCESSOR_P)

    def sentence(self) -> list[int]:
        n_tpl = int(self.rng.integers(3, 7))
        tpl = int(self.rng.choice(N_TEMPLATES, p=self.tpl_p))
        out = list(self.templates[tpl])
        for _ in range(n_tpl - 1):
            out.extend(int(t) for t in self.rng.integers(0, VOCAB_SIZE, size=N_FILLERS))
            tpl = int(self.successors[tpl][self.rng.choice(N_SUCCESSORS, p=self.succ_p)])
            out.extend(self.templates[tpl])
        return out

    def overlap_sentence(self, train_docs: list[list[int]]) -> list[int]:
        span_len = int(self.rng.integers(MIN_SPAN, MAX_SPAN))
        eligible = [d for d in train_docs if len(d) >= span_len]
        doc = eligible[int(self.rng.integers(0, len(eligible)))]
        start = int(self.rng.integers(0, len(doc) - span_len + 1))
        span = doc[start : start + span_len]
        prefix = self.templates[int(self.rng.choice(N_TEMPLATES, p=self.tpl_p))]
        suffix = self.templates[int(self.rng.choice(N_TEMPLATES, p=self.tpl_p))]
        return list(prefix) + list(span) + list(suffix)

    def document(self, train_docs: list[list[int]] | None, overlap_rate: float) -> list[list[int]]:
        n_sent = int(self.rng.integers(3, 8))
        sents = []
        for _ in range(n_sent):
            if train_docs is not None and self.rng.random() < overlap_rate:
                sents.append(self.overlap_sentence(train_docs))
            else:
                sents.append(self.sentence())
        return sents

    def corpus(
        self, target_tokens: int, train_docs: list[list[int]] | None, overlap_rate: float
    ) -> tuple[str, list[list[int]]]:
        docs: list[list[list[int]]] = []
        total = 0
        while total < target_tokens:
            doc = self.document(train_docs, overlap_rate)
            docs.append(doc)
            total += sum(len(s) for s in doc)
        text = "\n\n".join(
            "\n".join(" ".join(_surface(t) for t in sent) for sent in doc) for doc in docs
        )
        flat_docs = [[t for sent in doc for t in sent] for doc in docs]
        return text + "\n", flat_docs


def generate_corpus(
    seed: int, train_tokens: int, eval_tokens: int, overlap_rate: float
) -> SynthCorpus:
    """Generate train/dev/test text; dev and test each get ~eval_tokens/2."""
    if not 0.0 <= overlap_rate <= 1.0:
        raise ValueError("overlap_rate must be in [0, 1]")
    if train_tokens < 1 or eval_tokens < 2:
        raise ValueError("token targets too small")
    gen = _Generator(seed)
    train_text, train_docs = gen.corpus(train_tokens, None, 0.0)
    dev_text, _ = gen.corpus(eval_tokens // 2, train_docs, overlap_rate)
    test_text, _ = gen.corpus(eval_tokens - eval_tokens // 2, train_docs, overlap_rate)
    return SynthCorpus(train_text, dev_text, test_text)
