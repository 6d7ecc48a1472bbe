"""Optimal (threshold-kept) resampling and weighted selection helpers.

The reduction from M' intermediate particles to N keeps every particle whose
weight clears the threshold 1/c exactly, where c solves
N = sum_i min(c * w_i, 1), and draws the remaining slots from the low-weight
group by stratified resampling with probabilities proportional to weight;
drawn particles are reassigned weight 1/c.  This keeps the retained weight
mass per ancestor unbiased while never discarding a heavy particle.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "fearnhead_threshold",
    "optimal_resample",
    "stratified_indices",
    "systematic_select",
]


def fearnhead_threshold(weights: np.ndarray, n: int):
    """Solve sum_i min(c w_i, 1) = n.

    Returns (c, keep_count) where keep_count = #{i: c * w_i >= 1}.  Requires
    0 < n < number of positive weights.
    """
    w = np.asarray(weights, dtype=float)
    if np.any(w < 0) or not np.all(np.isfinite(w)):
        raise ValueError("weights must be finite and non-negative")
    positive = int(np.count_nonzero(w > 0))
    if not 0 < n < positive:
        raise ValueError(f"need 0 < n < {positive} positive weights, got n={n}")
    order = np.argsort(-w, kind="stable")
    ws = w[order]
    prefix = np.concatenate([[0.0], np.cumsum(ws)])
    total = prefix[-1]
    # keep_count is the smallest k with c_k * w_(k+1) < 1, where
    # c_k = (n - k) / (total - prefix_k); c_k is non-decreasing until then,
    # so the kept top-k all clear the final threshold
    ks = np.arange(n)
    c_candidates = (n - ks) / (total - prefix[:n])
    hit = c_candidates * ws[:n] < 1.0
    k = int(np.argmax(hit))
    if not hit[k]:
        # impossible while more than n weights are positive
        raise AssertionError("threshold scan failed; weights degenerate")
    return float(c_candidates[k]), k


def stratified_indices(probs: np.ndarray, n: int, uniforms: np.ndarray) -> np.ndarray:
    """Stratified draw of n indices with probabilities `probs` (sum to 1).

    uniforms: n iid U(0,1) variates, one per stratum.
    """
    probs = np.asarray(probs, dtype=float)
    cdf = np.cumsum(probs)
    cdf[-1] = 1.0
    positions = (np.arange(n) + np.asarray(uniforms)) / n
    return np.searchsorted(cdf, positions, side="right")


def optimal_resample(weights: np.ndarray, n: int, rng: np.random.Generator):
    """Reduce a weighted population to exactly n particles.

    Returns (indices, new_weights) in the caller's weight units: kept
    particles retain their input weight, resampled ones get 1/c.  Weights
    should be normalized to sum to 1 (the threshold equation assumes it).
    """
    w = np.asarray(weights, dtype=float)
    if len(w) <= n:
        raise ValueError("resampling requires more particles than n")
    c, keep_count = fearnhead_threshold(w, n)
    order = np.argsort(-w, kind="stable")
    kept = order[:keep_count]
    rest = order[keep_count:]
    rest_w = w[rest]
    rest_total = rest_w.sum()
    n_draw = n - keep_count
    drawn = rest[stratified_indices(rest_w / rest_total, n_draw, rng.random(n_draw))]
    indices = np.concatenate([kept, drawn])
    new_weights = np.concatenate([w[kept], np.full(n_draw, 1.0 / c)])
    return indices, new_weights


def systematic_select(weights: np.ndarray, m: int, uniform: float) -> np.ndarray:
    """Select m distinct indices with inclusion probability min(1, c*w_i).

    The same threshold construction as optimal_resample, but with a single
    systematic uniform so every index appears at most once: used to trim
    candidate sets (rotamers, joint side-chain states) proportionally to
    exp(-energy).  Weights may contain zeros; m must not exceed the number
    of positive weights.
    """
    w = np.asarray(weights, dtype=float)
    positive = int(np.count_nonzero(w > 0))
    if m > positive:
        raise ValueError(f"cannot select {m} from {positive} positive weights")
    if m == positive:
        return np.flatnonzero(w > 0)
    c, keep_count = fearnhead_threshold(w / w.sum(), m)
    order = np.argsort(-w, kind="stable")
    kept = order[:keep_count]
    rest = order[keep_count:]
    rest_w = w[rest]
    n_draw = m - keep_count
    cdf = np.cumsum(rest_w / rest_w.sum())
    cdf[-1] = 1.0
    positions = (np.arange(n_draw) + uniform) / n_draw
    drawn = rest[np.searchsorted(cdf, positions, side="right")]
    return np.sort(np.concatenate([kept, drawn]))
