"""Independent oracles shared by the test modules."""

import itertools

import numpy as np


def numeric_grad(f, x: np.ndarray, eps: float = 1e-4) -> np.ndarray:
    """Central finite differences of a scalar function ``f`` at ``x`` (x is perturbed in place)."""
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        orig = x[idx]
        x[idx] = orig + eps
        fp = f()
        x[idx] = orig - eps
        fm = f()
        x[idx] = orig
        g[idx] = (fp - fm) / (2 * eps)
    return g


def max_rel_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    """max |a - n| over the entries, relative to the largest numeric gradient entry.

    The scale never drops below ``floor``: gradients that are identically
    zero (e.g. a key bias under softmax) leave only rounding noise on both
    sides, which would otherwise be divided by itself.
    """
    scale = max(np.abs(numeric).max(), floor)
    return float(np.abs(analytic - numeric).max() / scale)


def pairwise_auc(scores, labels) -> float:
    """O(n^2) AUROC: P(anomalous > normal) + 0.5 P(tie) over all pairs."""
    pos = [s for s, l in zip(scores, labels) if l]
    neg = [s for s, l in zip(scores, labels) if not l]
    total = 0.0
    for a, b in itertools.product(pos, neg):
        total += 1.0 if a > b else 0.5 if a == b else 0.0
    return total / (len(pos) * len(neg))
