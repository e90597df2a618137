"""Conformal set construction: split calibration and a bootstrap-ensemble
variant with a sliding calibration window for label streams.

Both pipelines share one inclusion rule: candidate c enters the set for a
test point iff its non-conformity score is strictly below the calibration
threshold, the k-th smallest calibration score with k the least integer
satisfying k/n >= 1 - alpha. That choice of k makes the rule coincide
exactly, ties included, with requiring the empirical fraction of calibration
scores <= the candidate's score to stay below 1 - alpha.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .classifiers import ClassifierSpec, FittedClassifier, fit, spec_with_seed
from .core import (LabeledSeries, PredictionSet, RandomSource, RegParams,
                   ScoreWindow, as_prob_array, derive_seed)
from .scores import descending_order, score_all_labels, scores_at_labels

_PHI_KINDS = ("mean", "median", "trimmed")


def calibration_threshold(scores, alpha: float) -> float:
    """k-th smallest score, k = min{k : k/n >= 1 - alpha}.

    k is located by integer search around ceil((1-alpha)*n) so the result is
    exact under float comparison semantics, never off by one at integer
    boundaries of (1-alpha)*n.
    """
    if not (0.0 < alpha < 1.0):
        raise ValueError(f"alpha must lie in (0, 1), got {alpha}")
    v = scores.values() if isinstance(scores, ScoreWindow) else np.asarray(
        scores, dtype=np.float64)
    n = len(v)
    if n == 0:
        raise ValueError("cannot take a threshold of an empty score set")
    k = min(max(int(math.ceil((1.0 - alpha) * n)), 1), n)
    while k > 1 and (k - 1) / n >= 1.0 - alpha:
        k -= 1
    while k < n and k / n < 1.0 - alpha:
        k += 1
    return float(np.partition(v, k - 1)[k - 1])


def build_set(p, u: float, reg: RegParams, threshold: float,
              index: int = -1) -> PredictionSet:
    """Labels whose score falls strictly below the threshold.

    Scores are nondecreasing in descending-probability order, so the set is
    always a prefix of that order; assembly stops at the first non-admitted
    label to keep the prefix structure exact.
    """
    labels = []
    for sl in score_all_labels(p, u, reg):
        if not (sl.score < threshold):
            break
        labels.append(sl.label)
    return PredictionSet(labels=tuple(labels), index=index)


def naive_set(p, alpha: float, index: int = -1) -> PredictionSet:
    """Shortest descending-probability prefix with mass >= 1 - alpha.

    Never empty. A 1e-12 slack absorbs float rounding in the cumulative sum.
    """
    if not (0.0 < alpha < 1.0):
        raise ValueError(f"alpha must lie in (0, 1), got {alpha}")
    p = as_prob_array(p)
    order = descending_order(p)
    target = (1.0 - alpha) - 1e-12
    cum = 0.0
    labels = []
    for c in order:
        labels.append(int(c))
        cum += p[c]
        if cum >= target:
            break
    return PredictionSet(labels=tuple(labels), index=index)


def class_conditional_thresholds(scores, labels, n_classes: int, alpha: float):
    """Per-class thresholds plus their max.

    Classes with no scores fall back to the marginal threshold. Returns
    (per_class array of length n_classes, tau_max).
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if len(scores) != len(labels):
        raise ValueError("scores and labels must be aligned")
    marginal = calibration_threshold(scores, alpha)
    per_class = np.full(n_classes, marginal)
    for c in range(n_classes):
        sc = scores[labels == c]
        if len(sc):
            per_class[c] = calibration_threshold(sc, alpha)
    return per_class, float(per_class.max())


def _set_from_per_class(p, u: float, reg: RegParams, per_class: np.ndarray,
                        index: int) -> PredictionSet:
    # per-label thresholds; the result need not be a probability prefix
    labels = [sl.label for sl in score_all_labels(p, u, reg)
              if sl.score < per_class[sl.label]]
    return PredictionSet(labels=tuple(labels), index=index)


# ---------------------------------------------------------------------------
# split-calibration pipeline


@dataclass
class SrapsParts:
    """Reusable split-pipeline pieces: fitted model and calibration cache."""

    model: FittedClassifier
    cal_probs: np.ndarray
    cal_labels: np.ndarray
    cal_u: np.ndarray
    n_train: int
    rand: RandomSource


def split_indices(n: int, split: str, seed: int):
    """Proper-train and calibration index arrays; calibration gets n // 2."""
    if n < 2:
        raise ValueError("need at least 2 training points to split")
    n_cal = n // 2
    if split == "sequential":
        return np.arange(n - n_cal), np.arange(n - n_cal, n)
    if split == "random":
        perm = np.random.default_rng(derive_seed(seed, "split")).permutation(n)
        return np.sort(perm[: n - n_cal]), np.sort(perm[n - n_cal:])
    raise ValueError(f"unknown split {split!r}")


def sraps_parts(train: LabeledSeries, spec: ClassifierSpec,
                split: str = "sequential", seed: int = 0) -> SrapsParts:
    fit_idx, cal_idx = split_indices(len(train), split, seed)
    model = fit(spec, train.subset(fit_idx))
    rand = RandomSource(derive_seed(seed, "uniforms"))
    return SrapsParts(
        model=model,
        cal_probs=model.predict_proba_matrix(train.features[cal_idx]),
        cal_labels=train.labels[cal_idx],
        cal_u=rand.uniforms_at(cal_idx),
        n_train=len(train),
        rand=rand,
    )


def sraps_sets_from_parts(parts: SrapsParts, test_features, alpha: float,
                          reg: RegParams,
                          class_conditional: bool = False) -> list:
    cal_scores = scores_at_labels(parts.cal_probs, parts.cal_labels,
                                  parts.cal_u, reg)
    test_features = np.asarray(test_features, dtype=np.float64)
    P = parts.model.predict_proba_matrix(test_features)
    n1 = len(test_features)
    u = parts.rand.uniforms(parts.n_train, n1)
    if class_conditional:
        per_class, _ = class_conditional_thresholds(
            cal_scores, parts.cal_labels, parts.model.n_classes, alpha)
        return [_set_from_per_class(P[j], u[j], reg, per_class,
                                    parts.n_train + j) for j in range(n1)]
    thr = calibration_threshold(cal_scores, alpha)
    return [build_set(P[j], u[j], reg, thr, parts.n_train + j)
            for j in range(n1)]


def sraps(train: LabeledSeries, test_features, alpha: float, reg: RegParams,
          spec: ClassifierSpec, split: str = "sequential", seed: int = 0,
          class_conditional: bool = False) -> list:
    """Split pipeline: fit on one part, calibrate one fixed threshold on the
    other, then build a set per test feature row. The uniform draw for any
    time index is shared by every candidate label at that index."""
    parts = sraps_parts(train, spec, split, seed)
    return sraps_sets_from_parts(parts, test_features, alpha, reg,
                                 class_conditional)


# ---------------------------------------------------------------------------
# bootstrap-ensemble pipeline


@dataclass
class EnsembleModel:
    """Bootstrap-trained base models with their index sets."""

    models: list
    index_sets: list
    phi: str
    trim_fraction: float
    in_sample: np.ndarray  # (B, T) bool: model b saw train index t

    @property
    def n_models(self) -> int:
        return len(self.models)


@dataclass
class ErapsState:
    """Everything the streaming predictor needs from the training pass."""

    ensemble: EnsembleModel
    window: ScoreWindow
    loo_train_probs: np.ndarray  # (T, K) leave-one-out aggregated
    reg: RegParams
    fallback_count: int
    seed: int
    n_train: int
    n_classes: int
    train_labels: np.ndarray
    mean_weights: np.ndarray  # (B,) exact collapse of mean-of-LOO-means

    @property
    def rand(self) -> RandomSource:
        return RandomSource(derive_seed(self.seed, "uniforms"))


def _phi_rows(rows: np.ndarray, phi: str, trim_fraction: float) -> np.ndarray:
    """Aggregate an (m, K) block of probability rows into one row."""
    if phi == "mean":
        return rows.mean(axis=0)
    if phi == "median":
        return np.median(rows, axis=0)
    m = len(rows)
    g = min(int(math.floor(trim_fraction * m)), (m - 1) // 2)
    srt = np.sort(rows, axis=0)
    return srt[g: m - g].mean(axis=0)


def _normalize_rows(P: np.ndarray) -> np.ndarray:
    return P / P.sum(axis=1, keepdims=True)


def _loo_aggregate(P_models: np.ndarray, out_mask: np.ndarray, phi: str,
                   trim_fraction: float):
    """Aggregate per-index predictions over models that left the index out.

    P_models is (B, T, K); out_mask is (B, T) with True where model b did not
    train on index t. Indices left out by no model fall back to aggregating
    all B models. Returns ((T, K) probs, fallback count).
    """
    B, T, K = P_models.shape
    counts = out_mask.sum(axis=0)
    fallback = int((counts == 0).sum())
    if phi == "mean":
        maskf = out_mask.astype(np.float64)
        agg = np.einsum("bt,btk->tk", maskf, P_models)
        agg[counts > 0] /= counts[counts > 0, None]
        if fallback:
            agg[counts == 0] = P_models[:, counts == 0, :].mean(axis=0)
    else:
        agg = np.empty((T, K))
        for t in range(T):
            rows = P_models[out_mask[:, t], t, :] if counts[t] else P_models[:, t, :]
            agg[t] = _phi_rows(rows, phi, trim_fraction)
    return _normalize_rows(agg), fallback


def _window_scores(loo_probs: np.ndarray, labels: np.ndarray, seed: int,
                   reg: RegParams) -> np.ndarray:
    u = RandomSource(derive_seed(seed, "uniforms")).uniforms(0, len(labels))
    return scores_at_labels(loo_probs, labels, u, reg)


def assemble_eraps_state(train: LabeledSeries, models: list, index_sets: list,
                         phi: str, trim_fraction: float, seed: int,
                         reg: RegParams) -> ErapsState:
    """Build the streaming state from already-trained base models."""
    if phi not in _PHI_KINDS:
        raise ValueError(f"unknown aggregator {phi!r}")
    T = len(train)
    B = len(models)
    in_sample = np.zeros((B, T), dtype=bool)
    for b, idx in enumerate(index_sets):
        in_sample[b, np.asarray(idx, dtype=np.int64)] = True
    P_models = np.stack([m.predict_proba_matrix(train.features) for m in models])
    out_mask = ~in_sample
    loo_probs, fallback = _loo_aggregate(P_models, out_mask, phi, trim_fraction)
    scores = _window_scores(loo_probs, train.labels, seed, reg)

    counts = out_mask.sum(axis=0)
    inv = np.zeros(T)
    inv[counts > 0] = 1.0 / counts[counts > 0]
    weights = (out_mask * inv).sum(axis=1) / T
    weights += (counts == 0).sum() / (B * T)

    ensemble = EnsembleModel(models=models, index_sets=list(index_sets),
                             phi=phi, trim_fraction=trim_fraction,
                             in_sample=in_sample)
    return ErapsState(
        ensemble=ensemble,
        window=ScoreWindow(T, scores),
        loo_train_probs=loo_probs,
        reg=reg,
        fallback_count=fallback,
        seed=seed,
        n_train=T,
        n_classes=train.n_classes,
        train_labels=train.labels.copy(),
        mean_weights=weights,
    )


def eraps_fit(train: LabeledSeries, spec: ClassifierSpec, b: int = 30,
              phi: str = "mean", seed: int = 0,
              reg: RegParams = RegParams(),
              trim_fraction: float = 0.1) -> ErapsState:
    """Train b bootstrap models and build the leave-one-out score window.

    Each bootstrap index set has len(train) draws with replacement. Model b
    gets its own init seed derived from (seed, b). ERAPS_THREADS > 1 fans the
    fits out over a thread pool; results are assembled in model order, so the
    output is identical at any worker count.
    """
    if b < 1:
        raise ValueError("need at least one bootstrap model")
    if phi not in _PHI_KINDS:
        raise ValueError(f"unknown aggregator {phi!r}")
    T = len(train)
    if T < 2:
        raise ValueError("need at least 2 training points")
    rng = np.random.default_rng(derive_seed(seed, "bootstrap"))
    index_sets = [rng.integers(0, T, size=T) for _ in range(b)]
    model_seed = derive_seed(seed, "models")
    jobs = [(spec_with_seed(spec, derive_seed(model_seed, i)), train.subset(idx))
            for i, idx in enumerate(index_sets)]
    workers = int(os.environ.get("ERAPS_THREADS", "1") or "1")
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            models = list(pool.map(lambda j: fit(*j), jobs))
    else:
        models = [fit(*j) for j in jobs]
    return assemble_eraps_state(train, models, index_sets, phi, trim_fraction,
                                seed, reg)


def eraps_rescore(state: ErapsState, reg: RegParams) -> ErapsState:
    """Same ensemble, window rebuilt for a different regularization."""
    if reg == state.reg:
        return state
    scores = _window_scores(state.loo_train_probs, state.train_labels,
                            state.seed, reg)
    return replace(state, window=ScoreWindow(state.n_train, scores), reg=reg)


def eraps_test_aggregates(state: ErapsState, test_features) -> np.ndarray:
    """Aggregate the per-train-index leave-one-out predictors at each test row.

    For the mean aggregator the mean of the T leave-one-out means collapses to
    a fixed weighting of the base models, so this costs one matrix product.
    Other aggregators evaluate the T-by-B masked aggregation directly.
    """
    X = np.asarray(test_features, dtype=np.float64)
    P_models = np.stack([m.predict_proba_matrix(X)
                         for m in state.ensemble.models])  # (B, n1, K)
    phi = state.ensemble.phi
    if phi == "mean":
        agg = np.einsum("b,bik->ik", state.mean_weights, P_models)
        return _normalize_rows(agg)
    out_mask = ~state.ensemble.in_sample  # (B, T)
    counts = out_mask.sum(axis=0)
    n1 = X.shape[0]
    out = np.empty((n1, P_models.shape[2]))
    tf = state.ensemble.trim_fraction
    for i in range(n1):
        block = P_models[:, i, :]  # (B, K)
        expanded = np.where(out_mask.T[:, :, None], block[None, :, :], np.nan)
        if phi == "median":
            inner = np.nanmedian(expanded, axis=1)
        else:
            inner = np.empty((state.n_train, block.shape[1]))
            for t in range(state.n_train):
                rows = block[out_mask[:, t]] if counts[t] else block
                inner[t] = _phi_rows(rows, phi, tf)
        if (counts == 0).any():
            inner[counts == 0] = _phi_rows(block, phi, tf)
        out[i] = _phi_rows(inner, phi, tf)
    return _normalize_rows(out)


def eraps_predict_stream(state: ErapsState, test: LabeledSeries, alpha: float,
                         reg: RegParams = None, s: int = 1,
                         class_conditional: bool = False,
                         _test_probs: np.ndarray = None) -> list:
    """Predict a set per test index, sliding the calibration window.

    The threshold is recomputed from the current window at every index. After
    every s predictions the s just-revealed labels are scored with their
    cached distribution and uniform draw, the s oldest window entries are
    evicted, and the new scores appended in time order. A trailing partial
    batch triggers no slide. Revealed labels outside [0, n_classes) cannot be
    scored; the evicted oldest score is re-appended so the window length and
    its distribution are preserved.

    The state itself is never mutated, so repeated calls are independent.
    """
    if s < 1:
        raise ValueError("batch size s must be at least 1")
    reg = state.reg if reg is None else reg
    if reg != state.reg:
        state = eraps_rescore(state, reg)
    T = state.n_train
    n1 = len(test)
    u = state.rand.uniforms(T, n1)
    P = eraps_test_aggregates(state, test.features) if _test_probs is None \
        else _test_probs
    window = state.window.copy()

    class_windows = None
    if class_conditional:
        base = window.values()
        # capacity 1 for classes unseen in training: they hold only the
        # latest revealed score and use the marginal threshold until then
        class_windows = [
            ScoreWindow(max(int((state.train_labels == c).sum()), 1),
                        base[state.train_labels == c])
            for c in range(state.n_classes)]

    sets = []
    for j in range(n1):
        if class_conditional:
            marginal = calibration_threshold(window, alpha)
            per_class = np.array([
                calibration_threshold(cw, alpha) if len(cw) else marginal
                for cw in class_windows])
            sets.append(_set_from_per_class(P[j], u[j], reg, per_class, T + j))
        else:
            thr = calibration_threshold(window, alpha)
            sets.append(build_set(P[j], u[j], reg, thr, T + j))
        if (j + 1) % s == 0:
            lo = j + 1 - s
            for i in range(lo, j + 1):
                y = int(test.labels[i])
                if 0 <= y < state.n_classes:
                    score = float(scores_at_labels(
                        P[i: i + 1], np.array([y]), u[i: i + 1], reg)[0])
                else:
                    score = window.oldest()
                window.append(score)
                if class_conditional and 0 <= y < state.n_classes:
                    class_windows[y].append(score)
    return sets
