"""Synthetic data and experiments that probe the coverage theory empirically.

Features follow a stationary Gaussian AR(1) process per coordinate; labels
are drawn from softmax(W x). Because the label law is a softmax in x, the
multinomial-logistic classifier family is well specified for this process.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .classifiers import ClassifierSpec, fit
from .conformal import (build_set, calibration_threshold, eraps_fit,
                        eraps_predict_stream, naive_set, sraps_parts,
                        sraps_sets_from_parts)
from .core import LabeledSeries, RandomSource, RegParams, derive_seed
from .scores import scores_at_labels

_MASS_ONLY = RegParams(lam=0.0, k_reg=1)


@dataclass(frozen=True)
class SyntheticDGP:
    """AR(1) features, softmax labels. W has shape (n_classes, n_features)."""

    W: np.ndarray
    rho: float
    noise_scale: float = 1.0
    seed: int = 0

    def __post_init__(self):
        W = np.asarray(self.W, dtype=np.float64)
        object.__setattr__(self, "W", W)
        if W.ndim != 2 or not np.all(np.isfinite(W)):
            raise ValueError("W must be a finite 2-d matrix")
        if not (0.0 <= self.rho < 1.0):
            raise ValueError(f"rho must lie in [0, 1), got {self.rho}")
        if self.noise_scale <= 0:
            raise ValueError("noise_scale must be positive")

    @property
    def n_classes(self) -> int:
        return self.W.shape[0]

    @property
    def n_features(self) -> int:
        return self.W.shape[1]


def make_dgp(n_classes: int, n_features: int, rho: float, seed: int = 0,
             weight_scale: float = 1.0,
             noise_scale: float = 1.0) -> SyntheticDGP:
    """Draw W once from a seeded standard normal (times weight_scale)."""
    rng = np.random.default_rng(derive_seed(seed, "weights"))
    W = weight_scale * rng.normal(size=(n_classes, n_features))
    return SyntheticDGP(W=W, rho=rho, noise_scale=noise_scale, seed=seed)


def _softmax_rows(Z: np.ndarray) -> np.ndarray:
    Z = Z - Z.max(axis=1, keepdims=True)
    E = np.exp(Z)
    return E / E.sum(axis=1, keepdims=True)


def labels_from_uniforms(pis: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Inverse-CDF draw of one label per probability row."""
    cum = np.cumsum(pis, axis=1)
    y = (cum < u[:, None]).sum(axis=1)
    return np.minimum(y, pis.shape[1] - 1)


def generate(dgp: SyntheticDGP, n: int):
    """Return (LabeledSeries of length n, true per-index probability rows).

    The innovation scale is noise_scale * sqrt(1 - rho^2) and x_0 is drawn at
    the stationary scale, so every x_t has stationary per-coordinate variance
    noise_scale^2 regardless of rho.
    """
    if n < 1:
        raise ValueError("n must be at least 1")
    rng = np.random.default_rng(derive_seed(dgp.seed, "series"))
    d = dgp.n_features
    x = np.empty((n, d))
    x[0] = rng.normal(0.0, dgp.noise_scale, size=d)
    eps_sd = dgp.noise_scale * math.sqrt(1.0 - dgp.rho**2)
    for t in range(1, n):
        x[t] = dgp.rho * x[t - 1] + rng.normal(0.0, eps_sd, size=d)
    pis = _softmax_rows(x @ dgp.W.T)
    y = labels_from_uniforms(pis, rng.random(n))
    return LabeledSeries(x, y, dgp.n_classes), pis


def oracle_set(pi, alpha: float, index: int = -1):
    """Shortest prefix of the true probabilities with mass >= 1 - alpha."""
    return naive_set(pi, alpha, index)


def uniform_ks_distance(x: np.ndarray) -> float:
    """Exact sup distance between the empirical CDF of x and the U(0,1) CDF.

    The supremum over a step function against a continuous CDF is attained at
    a jump, from one side or the other, so both one-sided gaps are checked at
    every sorted sample point.
    """
    x = np.sort(np.asarray(x, dtype=np.float64))
    n = len(x)
    if n == 0:
        raise ValueError("need a nonempty sample")
    hi = np.arange(1, n + 1) / n - x
    lo = x - np.arange(0, n) / n
    return float(max(hi.max(), lo.max()))


def dkw_bound(n: int) -> float:
    return math.sqrt(math.log(16.0 * n) / n)


@dataclass
class TheoryReport:
    """Rows of one experiment plus its configuration echo."""

    experiment: str
    rows: list
    meta: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(
            {"experiment": self.experiment, "meta": self.meta,
             "rows": self.rows},
            sort_keys=True, indent=2)

    def to_csv(self) -> str:
        if not self.rows:
            return ""
        cols = list(self.rows[0])
        lines = [",".join(cols)]
        for r in self.rows:
            if list(r) != cols:
                raise ValueError("rows do not share one column layout")
            lines.append(",".join(_csv_cell(r[c]) for c in cols))
        return "\n".join(lines) + "\n"


def _csv_cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return format(v, ".17g")
    return str(v)


def _rep_series(dgp: SyntheticDGP, seed: int, rep: int, n: int):
    return generate(replace(dgp, seed=derive_seed(seed, rep)), n)


def _oracle_split_sets(pis_train, y_train, pis_test, alpha, reg, rep_seed):
    """Calibrate on true-probability scores and predict with true rows."""
    T = len(y_train)
    rs = RandomSource(derive_seed(rep_seed, "uniforms"))
    u = rs.uniforms(0, T)
    thr = calibration_threshold(
        scores_at_labels(pis_train, y_train, u, reg), alpha)
    u_test = rs.uniforms(T, len(pis_test))
    return [build_set(pis_test[j], u_test[j], reg, thr, T + j)
            for j in range(len(pis_test))]


def coverage_gap_experiment(dgp: SyntheticDGP, method: str, alphas,
                            T_list, reps: int, spec: ClassifierSpec = None,
                            b: int = 30, phi: str = "mean", s: int = 1,
                            reg: RegParams = RegParams(), test_size=None,
                            seed: int = 0) -> TheoryReport:
    """Mean absolute gap between empirical coverage and 1 - alpha, per T.

    method is one of "eraps", "sraps", or "oracle" (true probabilities fed
    straight to a fixed-threshold calibration, no estimation step). Each rep
    draws a fresh series from a rep-derived seed; the test segment holds
    test_size points (T // 2 when unset).
    """
    if reps < 1:
        raise ValueError("reps must be at least 1")
    if method not in ("eraps", "sraps", "oracle"):
        raise ValueError(f"unknown method {method!r}")
    spec = spec or ClassifierSpec()
    alphas = list(alphas)
    rows = []
    gaps = {}
    for T in T_list:
        n_test = test_size or T // 2
        covs = {a: [] for a in alphas}
        for rep in range(reps):
            rep_seed = derive_seed(seed, rep)
            series, pis = _rep_series(dgp, seed, rep, T + n_test)
            train, test = series.subset(slice(0, T)), series.subset(slice(T, None))
            if method == "eraps":
                state = eraps_fit(train, spec, b=b, phi=phi, seed=rep_seed,
                                  reg=reg)
                for a in alphas:
                    sets = eraps_predict_stream(state, test, a, reg, s)
                    covs[a].append(_coverage(sets, test.labels))
            elif method == "sraps":
                parts = sraps_parts(train, spec, "sequential", rep_seed)
                for a in alphas:
                    sets = sraps_sets_from_parts(parts, test.features, a, reg)
                    covs[a].append(_coverage(sets, test.labels))
            else:
                for a in alphas:
                    sets = _oracle_split_sets(pis[:T], train.labels,
                                              pis[T:], a, reg, rep_seed)
                    covs[a].append(_coverage(sets, test.labels))
        for a in alphas:
            g = np.abs(np.array(covs[a]) - (1.0 - a))
            se = float(g.std(ddof=1) / math.sqrt(reps)) if reps > 1 else 0.0
            rows.append({"T": T, "alpha": a, "n_reps": reps,
                         "coverage_mean": float(np.mean(covs[a])),
                         "gap_mean": float(g.mean()), "gap_se": se})
            gaps.setdefault(a, []).append((float(g.mean()), se))
    monotone = {}
    for a, seq in gaps.items():
        monotone[str(a)] = all(seq[i + 1][0] <= seq[i][0] + seq[i][1]
                               for i in range(len(seq) - 1))
    meta = {"method": method, "b": b, "phi": phi, "s": s, "lam": reg.lam,
            "k_reg": reg.k_reg, "seed": seed,
            "n_classes": dgp.n_classes, "n_features": dgp.n_features,
            "rho": dgp.rho, "nonincreasing_within_one_se": monotone}
    return TheoryReport(experiment="coverage_gap", rows=rows, meta=meta)


def _coverage(sets, labels) -> float:
    return float(np.mean([y in s for s, y in zip(sets, labels)]))


def set_convergence_experiment(dgp: SyntheticDGP, alpha: float, T_list,
                               reps: int, spec: ClassifierSpec = None,
                               test_size: int = 500,
                               oracle_probs: bool = False,
                               seed: int = 0) -> TheoryReport:
    """How often the thresholded set differs from the oracle set by <= 1 label.

    Sets use the pure probability-mass score (no uniform jitter, no rank
    penalty) with a fixed threshold calibrated on the training segment, so
    agreement is driven only by estimation and quantile error. With
    oracle_probs the true probabilities stand in for the fitted model.
    """
    if reps < 1:
        raise ValueError("reps must be at least 1")
    if not (0.0 < alpha < 1.0):
        raise ValueError(f"alpha must lie in (0, 1), got {alpha}")
    spec = spec or ClassifierSpec()
    rows = []
    for T in T_list:
        match, diffs = [], []
        for rep in range(reps):
            series, pis = _rep_series(dgp, seed, rep, T + test_size)
            train = series.subset(slice(0, T))
            if oracle_probs:
                P_train, P_test = pis[:T], pis[T:]
            else:
                model = fit(spec, train)
                P_train = model.predict_proba_matrix(train.features)
                P_test = model.predict_proba_matrix(series.features[T:])
            zeros = np.zeros(T)
            thr = calibration_threshold(
                scores_at_labels(P_train, train.labels, zeros, _MASS_ONLY),
                alpha)
            hits = 0
            dtot = 0
            for j in range(test_size):
                c_hat = build_set(P_test[j], 0.0, _MASS_ONLY, thr)
                c_star = oracle_set(pis[T + j], alpha)
                d = len(set(c_hat.labels) ^ set(c_star.labels))
                dtot += d
                hits += d <= 1
            match.append(hits / test_size)
            diffs.append(dtot / test_size)
        m = np.array(match)
        se = float(m.std(ddof=1) / math.sqrt(reps)) if reps > 1 else 0.0
        rows.append({"T": T, "alpha": alpha, "n_reps": reps,
                     "match_rate": float(m.mean()), "match_rate_se": se,
                     "mean_set_diff": float(np.mean(diffs))})
    meta = {"alpha": alpha, "test_size": test_size, "seed": seed,
            "oracle_probs": oracle_probs, "n_classes": dgp.n_classes,
            "n_features": dgp.n_features, "rho": dgp.rho}
    return TheoryReport(experiment="set_convergence", rows=rows, meta=meta)


def dkw_experiment(T_list, reps: int, seed: int = 0) -> TheoryReport:
    """Frequency with which the uniform-ECDF sup distance exceeds
    sqrt(log(16 T) / T), per T."""
    if reps < 1:
        raise ValueError("reps must be at least 1")
    rs = RandomSource(derive_seed(seed, "dkw"))
    rows = []
    for T in T_list:
        if T < 1:
            raise ValueError("T must be at least 1")
        bound = dkw_bound(T)
        dists = np.array([
            uniform_ks_distance(rs.substream(rep).uniforms(0, T))
            for rep in range(reps)])
        rows.append({"T": T, "n_reps": reps, "bound": bound,
                     "exceedance": float((dists > bound).mean()),
                     "mean_sup_distance": float(dists.mean())})
    return TheoryReport(experiment="dkw", rows=rows, meta={"seed": seed})
