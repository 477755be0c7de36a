"""Nearest-neighbor next-word distribution, interpolation, and perplexity.

The retrieval distribution over a neighbor set is

    P(w) ~ sum_{i: v_i = w} exp(-d_i)

normalized over the retrieved items only; exponentials are shifted by the
minimum distance before exponentiation for numerical stability (the shift
cancels in the normalization).
"""

from __future__ import annotations

import math

import numpy as np

from .datastore import NeighborSet


def knn_distribution(nbrs: NeighborSet) -> dict[int, float]:
    """Distribution over the values of a neighbor set, per the formula above."""
    if len(nbrs) == 0:
        raise ValueError("cannot form a distribution from an empty neighbor set")
    d = np.asarray(nbrs.distances, dtype=np.float64)
    shift = float(d.min())
    weights: dict[int, float] = {}
    total = 0.0
    for di, vi in zip(d, nbrs.values):
        w = math.exp(-(float(di) - shift))
        weights[int(vi)] = weights.get(int(vi), 0.0) + w
        total += w
    return {v: w / total for v, w in weights.items()}


def knn_gold_prob(
    distances: np.ndarray, values: np.ndarray, gold: np.ndarray, k: int | None = None
) -> np.ndarray:
    """Vectorized P_knn(gold) per record from (m, k) neighbor arrays.

    ``k`` truncates each record's neighbor list (distances are ascending,
    so the first k are the nearest). Distances may be f32; math is f64.
    Rows are processed in blocks to bound temporary memory at large k.
    """
    if k is not None:
        if k < 1 or k > distances.shape[1]:
            raise ValueError(f"k={k} outside 1..{distances.shape[1]}")
        distances = distances[:, :k]
        values = values[:, :k]
    gold = np.asarray(gold)
    m = len(gold)
    out = np.empty(m, dtype=np.float64)
    block = max(1, (1 << 23) // max(1, distances.shape[1]))
    for lo in range(0, m, block):
        d = distances[lo : lo + block].astype(np.float64)
        e = np.exp(d.min(axis=1, keepdims=True) - d)
        total = e.sum(axis=1)
        hit = e * (values[lo : lo + block] == gold[lo : lo + block, None])
        out[lo : lo + block] = hit.sum(axis=1) / total
    return out


def interpolate(p_knn: float, p_base: float, lam: float) -> float:
    """lam * p_knn + (1 - lam) * p_base."""
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"lambda must be in [0, 1], got {lam}")
    return lam * p_knn + (1.0 - lam) * p_base


def nll_stream(probs: np.ndarray) -> np.ndarray:
    """Per-token negative log-likelihoods, rejecting non-positive inputs."""
    p = np.asarray(probs, dtype=np.float64)
    if p.size == 0:
        raise ValueError("probability stream is empty")
    bad = np.flatnonzero(~(p > 0.0))
    if bad.size:
        raise ValueError(f"non-positive probability at token index {int(bad[0])}")
    return -np.log(p)


def perplexity(probs: np.ndarray) -> float:
    """exp of the mean negative log-likelihood, with compensated summation.

    math.fsum is exactly rounded, so the result is independent of token
    order by construction.
    """
    nll = nll_stream(probs)
    return math.exp(math.fsum(nll) / len(nll))


def perplexity_from_nll(nll: np.ndarray) -> float:
    nll = np.asarray(nll, dtype=np.float64)
    if nll.size == 0:
        raise ValueError("empty stream")
    return math.exp(math.fsum(nll) / len(nll))


def relative_improvement(ppl_base: float, ppl_variant: float) -> float:
    """Percent perplexity improvement of a variant over a baseline."""
    if ppl_base <= 0 or ppl_variant <= 0:
        raise ValueError("perplexities must be positive")
    return 100.0 * (ppl_base - ppl_variant) / ppl_base
