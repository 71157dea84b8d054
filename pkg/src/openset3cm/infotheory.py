"""Pure information-theoretic primitives over probability vectors.

All quantities are in nats. Zero probabilities follow the continuity
convention 0*log(0) = 0, and every log argument is floored at EPS so
underflowed softmax outputs cannot produce infinities. Sums that cross
sample or group boundaries use math.fsum, which is exactly rounded and
therefore independent of summation order; this is what makes the
permutation and relabeling invariants exact rather than approximate.
"""

from __future__ import annotations

import math
from collections.abc import Mapping, Sequence

import numpy as np

__all__ = [
    "EPS",
    "as_prob_vector",
    "entropy",
    "cross_entropy",
    "kl_divergence",
    "class_aggregate",
    "empirical_cmi",
]

EPS = 1e-12  # floor applied inside every log argument

_SUM_TOL = 1e-9


def as_prob_vector(values) -> np.ndarray:
    """Validate and return a distribution as a float64 array.

    Raises ValueError unless the input has length >= 2, no negative
    entries, and sums to 1 within 1e-9.
    """
    p = np.asarray(values, dtype=float)
    if p.ndim != 1 or p.size < 2:
        raise ValueError(f"probability vector needs >= 2 entries, got shape {p.shape}")
    if not np.all(np.isfinite(p)):
        raise ValueError("probability vector has non-finite entries")
    if p.min() < 0.0:
        raise ValueError(f"negative probability {p.min()}")
    total = math.fsum(p.tolist())
    if abs(total - 1.0) > _SUM_TOL:
        raise ValueError(f"probabilities sum to {total}, not 1")
    return p


def entropy(p) -> float:
    """Shannon entropy in nats; lies in [0, log C]."""
    p = as_prob_vector(p)
    terms = np.where(p > 0.0, -p * np.log(np.maximum(p, EPS)), 0.0)
    return float(np.sum(terms))


def cross_entropy(p, q) -> float:
    """Cross entropy H(p, q) in nats, with q floored at EPS inside the log."""
    p = as_prob_vector(p)
    q = as_prob_vector(q)
    if p.size != q.size:
        raise ValueError(f"dimension mismatch: {p.size} vs {q.size}")
    terms = np.where(p > 0.0, -p * np.log(np.maximum(q, EPS)), 0.0)
    return float(np.sum(terms))


def kl_divergence(p, q) -> float:
    """KL(p || q) in nats; nonnegative, zero iff p equals q."""
    p = as_prob_vector(p)
    q = as_prob_vector(q)
    if p.size != q.size:
        raise ValueError(f"dimension mismatch: {p.size} vs {q.size}")
    logs = np.log(np.maximum(p, EPS)) - np.log(np.maximum(q, EPS))
    terms = np.where(p > 0.0, p * logs, 0.0)
    # the true value is nonnegative; clamp the sub-1e-15 rounding residue
    # that appears when p and q differ only in the last ulp
    return max(0.0, float(np.sum(terms)))


def class_aggregate(dists: Sequence) -> np.ndarray:
    """Elementwise mean of a nonempty set of distributions.

    Column sums go through fsum, so the result does not depend on the
    order of the inputs.
    """
    if len(dists) == 0:
        raise ValueError("class_aggregate of an empty set")
    rows = [as_prob_vector(d) for d in dists]
    dim = rows[0].size
    for r in rows[1:]:
        if r.size != dim:
            raise ValueError(f"dimension mismatch: {r.size} vs {dim}")
    stacked = np.stack(rows)
    mean = np.array([math.fsum(stacked[:, c].tolist()) for c in range(dim)])
    return mean / len(rows)


def empirical_cmi(groups: Mapping) -> float:
    """Mean KL from each member to its own group aggregate, in nats.

    `groups` maps class labels to nonempty sequences of distributions;
    the normalizer is the total sample count across all groups. Zero
    exactly when every group's members coincide.
    """
    if not groups:
        raise ValueError("empirical_cmi of an empty group map")
    kl_terms: list[float] = []
    dim: int | None = None
    for label, members in groups.items():
        if len(members) == 0:
            raise ValueError(f"group {label!r} is empty")
        agg = class_aggregate(members)
        if dim is None:
            dim = agg.size
        elif agg.size != dim:
            raise ValueError(f"group {label!r} has dimension {agg.size}, expected {dim}")
        kl_terms.extend(kl_divergence(m, agg) for m in members)
    return math.fsum(kl_terms) / len(kl_terms)
