"""Shared data types: labeled series, probability vectors, score windows,
prediction sets, and a counter-addressable uniform random source."""

from __future__ import annotations

import math
import operator
from collections import deque
from dataclasses import dataclass, field

import numpy as np

_MASK64 = (1 << 64) - 1
_GAMMA = 0x9E3779B97F4A7C15
_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB


def _mix64(z: int) -> int:
    z = (z ^ (z >> 30)) * _MIX1 & _MASK64
    z = (z ^ (z >> 27)) * _MIX2 & _MASK64
    return z ^ (z >> 31)


def derive_seed(seed: int, tag) -> int:
    """Derive a child seed from (seed, tag); tag may be an int or a short string.

    Pure integer arithmetic, so the derivation is identical on every platform.
    """
    h = _mix64((int(seed) & _MASK64) ^ _GAMMA)
    if isinstance(tag, str):
        for b in tag.encode("utf-8"):
            h = _mix64((h + b) & _MASK64)
    else:
        h = _mix64((h + (int(tag) & _MASK64)) & _MASK64)
    return h


class RandomSource:
    """Deterministic uniform stream addressable by index.

    The value at index t is a pure function of (seed, t): the t-th output of a
    splitmix64 sequence, mapped to [0, 1) with 53 bits. No state advances on
    query, so any index can be read in any order, any number of times, and the
    stream is identical across platforms and processes.
    """

    def __init__(self, seed: int):
        self.seed = int(seed) & _MASK64

    def uniform_at(self, t: int) -> float:
        t = int(t)
        if t < 0:
            raise ValueError(f"index must be nonnegative, got {t}")
        z = (self.seed + (t + 1) * _GAMMA) & _MASK64
        return (_mix64(z) >> 11) * 2.0**-53

    def uniforms_at(self, indices) -> np.ndarray:
        """Vectorized uniform_at over an array of indices."""
        idx = np.asarray(indices, dtype=np.int64)
        if idx.size and idx.min() < 0:
            raise ValueError("indices must be nonnegative")
        idx = (idx + 1).astype(np.uint64)
        z = np.uint64(self.seed) + idx * np.uint64(_GAMMA)
        z = (z ^ (z >> np.uint64(30))) * np.uint64(_MIX1)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(_MIX2)
        z = z ^ (z >> np.uint64(31))
        return (z >> np.uint64(11)).astype(np.float64) * 2.0**-53

    def uniforms(self, start: int, count: int) -> np.ndarray:
        """Vectorized block [uniform_at(start), ..., uniform_at(start+count-1)]."""
        if start < 0 or count < 0:
            raise ValueError("start and count must be nonnegative")
        return self.uniforms_at(np.arange(start, start + count))

    def substream(self, tag) -> "RandomSource":
        return RandomSource(derive_seed(self.seed, tag))


@dataclass
class LabeledSeries:
    """Time-ordered features with integer labels in [0, n_classes)."""

    features: np.ndarray
    labels: np.ndarray
    n_classes: int

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2:
            raise ValueError("features must be a 2-d array")
        if self.labels.ndim != 1 or len(self.labels) != len(self.features):
            raise ValueError("labels must be 1-d and aligned with features")
        if self.n_classes < 1:
            raise ValueError("n_classes must be at least 1")
        if len(self.labels) and (
            self.labels.min() < 0 or self.labels.max() >= self.n_classes
        ):
            raise ValueError("labels must lie in [0, n_classes)")
        if not np.all(np.isfinite(self.features)):
            raise ValueError("features must be finite")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def n_features(self) -> int:
        return self.features.shape[1]

    def subset(self, idx) -> "LabeledSeries":
        return LabeledSeries(self.features[idx], self.labels[idx], self.n_classes)


class ProbVector:
    """Probability vector over classes; renormalized at construction."""

    __slots__ = ("probs",)

    def __init__(self, values):
        p = np.asarray(values, dtype=np.float64)
        if p.ndim != 1 or len(p) == 0:
            raise ValueError("probability vector must be 1-d and nonempty")
        if not np.all(np.isfinite(p)):
            raise ValueError("probability vector must be finite")
        if np.any(p < 0):
            raise ValueError("probability vector must be nonnegative")
        s = p.sum()
        if s <= 0:
            raise ValueError("probability vector must have positive mass")
        self.probs = p / s

    def __len__(self) -> int:
        return len(self.probs)

    def __getitem__(self, i):
        return self.probs[i]

    def __array__(self, dtype=None, copy=None):
        if dtype is not None:
            return self.probs.astype(dtype)
        return self.probs

    def __repr__(self) -> str:
        return f"ProbVector({self.probs!r})"


def as_prob_array(p) -> np.ndarray:
    """Accept a ProbVector or raw array-like; return a validated 1-d array."""
    if isinstance(p, ProbVector):
        return p.probs
    return ProbVector(p).probs


@dataclass(frozen=True)
class RegParams:
    """Regularization knobs for the penalized score: weight lam, rank offset k_reg."""

    lam: float = 1.0
    k_reg: int = 2

    def __post_init__(self):
        if not (math.isfinite(self.lam) and self.lam >= 0):
            raise ValueError(f"lam must be finite and nonnegative, got {self.lam}")
        if int(self.k_reg) != self.k_reg or self.k_reg < 1:
            raise ValueError(f"k_reg must be an integer >= 1, got {self.k_reg}")


@dataclass(frozen=True)
class PredictionSet:
    """Set of candidate labels for one test index.

    Labels are stored in the order they were admitted (descending estimated
    probability for quantile-thresholded sets), so ``labels`` doubles as the
    inclusion order. May be empty.
    """

    labels: tuple
    index: int = -1

    def __post_init__(self):
        if len(set(self.labels)) != len(self.labels):
            raise ValueError("prediction set labels must be unique")

    def __contains__(self, label) -> bool:
        return label in self.labels

    def __len__(self) -> int:
        return len(self.labels)

    def __iter__(self):
        return iter(self.labels)


class ScoreWindow:
    """FIFO window of calibration scores with fixed capacity.

    Appending beyond capacity evicts the oldest entries, so the window always
    holds the scores of the most recent ``capacity`` scored indices.
    """

    def __init__(self, capacity: int, values=()):
        capacity = operator.index(capacity)
        if capacity < 1:
            raise ValueError("capacity must be at least 1")
        self.capacity = capacity
        self._buf = deque(values, maxlen=capacity)

    def append(self, score: float):
        self._buf.append(float(score))

    def extend(self, scores):
        for s in scores:
            self._buf.append(float(s))

    def values(self) -> np.ndarray:
        return np.fromiter(self._buf, dtype=np.float64, count=len(self._buf))

    def oldest(self) -> float:
        return self._buf[0]

    def __len__(self) -> int:
        return len(self._buf)

    def copy(self) -> "ScoreWindow":
        return ScoreWindow(self.capacity, self._buf)
