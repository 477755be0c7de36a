"""Numba kernels with a fixed float64 reduction order.

Every reduction over the feature dimension uses eight independent
accumulator lanes (lane = index mod 8, indices ascending within a lane)
combined pairwise as ((a0+a1)+(a2+a3)) + ((a4+a5)+(a6+a7)). The fixed
template makes results bit-identical regardless of batching, shortlist
composition, or thread count, while still breaking the FP dependency
chain enough to vectorize. Test oracles reproduce the same order with an
independent column-sweep implementation.
"""

from __future__ import annotations

import numpy as np
from numba import njit


@njit(cache=True)
def exact_sqdist(rows, q, out):  # pragma: no cover - exercised via wrappers
    """Exact squared L2 distances between float32 rows and a float64 query.

    Each product is formed in float64 from the exact float64 values of the
    float32 inputs; accumulation follows the 8-lane template above.
    """
    n, dim = rows.shape
    head = (dim // 8) * 8
    for r in range(n):
        a0 = 0.0
        a1 = 0.0
        a2 = 0.0
        a3 = 0.0
        a4 = 0.0
        a5 = 0.0
        a6 = 0.0
        a7 = 0.0
        i = 0
        while i < head:
            d0 = np.float64(rows[r, i + 0]) - q[i + 0]
            a0 += d0 * d0
            d1 = np.float64(rows[r, i + 1]) - q[i + 1]
            a1 += d1 * d1
            d2 = np.float64(rows[r, i + 2]) - q[i + 2]
            a2 += d2 * d2
            d3 = np.float64(rows[r, i + 3]) - q[i + 3]
            a3 += d3 * d3
            d4 = np.float64(rows[r, i + 4]) - q[i + 4]
            a4 += d4 * d4
            d5 = np.float64(rows[r, i + 5]) - q[i + 5]
            a5 += d5 * d5
            d6 = np.float64(rows[r, i + 6]) - q[i + 6]
            a6 += d6 * d6
            d7 = np.float64(rows[r, i + 7]) - q[i + 7]
            a7 += d7 * d7
            i += 8
        while i < dim:
            d = np.float64(rows[r, i]) - q[i]
            lane = i - head
            if lane == 0:
                a0 += d * d
            elif lane == 1:
                a1 += d * d
            elif lane == 2:
                a2 += d * d
            elif lane == 3:
                a3 += d * d
            elif lane == 4:
                a4 += d * d
            elif lane == 5:
                a5 += d * d
            else:
                a6 += d * d
            i += 1
        out[r] = ((a0 + a1) + (a2 + a3)) + ((a4 + a5) + (a6 + a7))


@njit(cache=True)
def lane_norm_sq(v):  # pragma: no cover - exercised via wrappers
    """Squared L2 norm of a float64 vector with the 8-lane template."""
    dim = v.shape[0]
    head = (dim // 8) * 8
    a0 = 0.0
    a1 = 0.0
    a2 = 0.0
    a3 = 0.0
    a4 = 0.0
    a5 = 0.0
    a6 = 0.0
    a7 = 0.0
    i = 0
    while i < head:
        a0 += v[i + 0] * v[i + 0]
        a1 += v[i + 1] * v[i + 1]
        a2 += v[i + 2] * v[i + 2]
        a3 += v[i + 3] * v[i + 3]
        a4 += v[i + 4] * v[i + 4]
        a5 += v[i + 5] * v[i + 5]
        a6 += v[i + 6] * v[i + 6]
        a7 += v[i + 7] * v[i + 7]
        i += 8
    while i < dim:
        lane = i - head
        x = v[i] * v[i]
        if lane == 0:
            a0 += x
        elif lane == 1:
            a1 += x
        elif lane == 2:
            a2 += x
        elif lane == 3:
            a3 += x
        elif lane == 4:
            a4 += x
        elif lane == 5:
            a5 += x
        else:
            a6 += x
        i += 1
    return ((a0 + a1) + (a2 + a3)) + ((a4 + a5) + (a6 + a7))


@njit(cache=True)
def encode_windows(tokens, starts, ends, table, weights, out, norms):
    # pragma: no cover - exercised via wrappers
    """Decay-weighted token-embedding sums over trailing windows, normalized.

    For each row m with window tokens[starts[m]:ends[m]] (most recent
    last), accumulates sum_j weights[j] * table[token_{last-j}] in float64
    (j ascending), L2-normalizes with lane_norm_sq, and stores float32.
    norms[m] receives the pre-normalization norm (0.0 flags a degenerate
    window for the caller to reject).
    """
    dim = table.shape[1]
    wmax = weights.shape[0]
    acc = np.empty(dim, dtype=np.float64)
    for m in range(starts.shape[0]):
        end = ends[m]
        length = end - starts[m]
        if length > wmax:
            length = wmax
        for i in range(dim):
            acc[i] = 0.0
        for j in range(length):
            t = tokens[end - 1 - j]
            w = weights[j]
            for i in range(dim):
                acc[i] += w * np.float64(table[t, i])
        nsq = lane_norm_sq(acc)
        norm = np.sqrt(nsq)
        norms[m] = norm
        if norm > 0.0:
            for i in range(dim):
                out[m, i] = np.float32(acc[i] / norm)
        else:
            for i in range(dim):
                out[m, i] = np.float32(0.0)
