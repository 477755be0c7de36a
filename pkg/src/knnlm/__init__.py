"""Nearest-neighbor language-model scoring at desk scale.

A base n-gram model's next-word probabilities are interpolated with a
distribution over the values of the k nearest stored contexts; the
interpolation coefficient is either a single tuned constant or a
per-query coefficient chosen by the retrieval quality (similarity) of the
top retrieved item.
"""

__version__ = "0.1.0"
