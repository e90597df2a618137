"""Non-conformity scores for label candidates.

The score of label c under estimated probabilities p, uniform draw u, and
regularization (lam, k_reg) is

    mass_above(p, c) + p[c] * u + lam * max(rank_of(p, c) - k_reg, 0)

where mass_above sums the probabilities strictly larger than p[c] and rank_of
counts them plus one. Tied probabilities contribute nothing to the mass and
share the best rank, so tied labels always receive identical scores.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import RegParams, as_prob_array


@dataclass(frozen=True)
class ScoredLabel:
    label: int
    score: float
    rank: int


def _check_label(p: np.ndarray, c: int):
    if not (0 <= c < len(p)):
        raise ValueError(f"label {c} out of range for {len(p)} classes")


def mass_above(p, c: int) -> float:
    """Total probability strictly above p[c]."""
    p = as_prob_array(p)
    _check_label(p, c)
    return float(p[p > p[c]].sum())


def rank_of(p, c: int) -> int:
    """1-based rank of label c by descending probability; ties share best rank."""
    p = as_prob_array(p)
    _check_label(p, c)
    return int((p > p[c]).sum()) + 1


def raps_score(p, c: int, u: float, reg: RegParams) -> float:
    p = as_prob_array(p)
    _check_label(p, c)
    if not (0.0 <= u <= 1.0):
        raise ValueError(f"u must lie in [0, 1], got {u}")
    above = p > p[c]
    mass = float(p[above].sum())
    rank = int(above.sum()) + 1
    return mass + float(p[c]) * u + reg.lam * max(rank - reg.k_reg, 0)


def descending_order(p) -> np.ndarray:
    """Class indices by descending probability, ties broken by ascending label."""
    p = np.asarray(p, dtype=np.float64)
    return np.lexsort((np.arange(len(p)), -p))


def score_all_labels(p, u: float, reg: RegParams) -> list:
    """Score every label, returned in descending-probability order.

    Scores are nondecreasing along the returned order, so any threshold rule
    of the form {score < tau} admits a prefix of it.
    """
    p = as_prob_array(p)
    if not (0.0 <= u <= 1.0):
        raise ValueError(f"u must lie in [0, 1], got {u}")
    order = descending_order(p)
    out = []
    for c in order:
        above = p > p[c]
        mass = float(p[above].sum())
        rank = int(above.sum()) + 1
        score = mass + float(p[c]) * u + reg.lam * max(rank - reg.k_reg, 0)
        out.append(ScoredLabel(label=int(c), score=score, rank=rank))
    return out


def scores_at_labels(P: np.ndarray, labels: np.ndarray, u: np.ndarray,
                     reg: RegParams) -> np.ndarray:
    """Vectorized scores of row i's label under row i's probabilities and u[i].

    P is (n, K) with rows summing to 1; labels and u are length n.
    """
    P = np.asarray(P, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    u = np.asarray(u, dtype=np.float64)
    n = len(labels)
    p_true = P[np.arange(n), labels]
    above = P > p_true[:, None]
    mass = (P * above).sum(axis=1)
    rank = above.sum(axis=1) + 1
    penalty = reg.lam * np.maximum(rank - reg.k_reg, 0)
    return mass + p_true * u + penalty
