"""Coverage and set-size metrics, report serialization, regularizer sweeps.

A class or stratum with no test points reports null metrics, never zero:
zero would be indistinguishable from observed total miscoverage.
"""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .classifiers import ClassifierSpec
from .conformal import (eraps_fit, eraps_predict_stream, eraps_rescore,
                        eraps_test_aggregates, sraps_parts,
                        sraps_sets_from_parts)
from .core import LabeledSeries, RegParams


def marginal_metrics(sets, labels):
    """(coverage, mean set size) over all test indices."""
    labels = np.asarray(labels)
    if len(sets) != len(labels) or len(sets) == 0:
        raise ValueError("sets and labels must be aligned and nonempty")
    cov = float(np.mean([y in s for s, y in zip(sets, labels)]))
    size = float(np.mean([len(s) for s in sets]))
    return cov, size


def class_conditional_metrics(sets, labels, n_classes: int) -> list:
    """Per-class rows {label, count, coverage, mean_size}; empty class -> None."""
    labels = np.asarray(labels)
    if len(sets) != len(labels) or len(sets) == 0:
        raise ValueError("sets and labels must be aligned and nonempty")
    rows = []
    for c in range(n_classes):
        idx = np.flatnonzero(labels == c)
        if len(idx) == 0:
            rows.append({"label": c, "count": 0, "coverage": None,
                         "mean_size": None})
            continue
        rows.append({
            "label": c,
            "count": int(len(idx)),
            "coverage": float(np.mean([labels[i] in sets[i] for i in idx])),
            "mean_size": float(np.mean([len(sets[i]) for i in idx])),
        })
    return rows


def default_strata_edges(n_classes: int) -> list:
    """Five integer size bins spanning [0, n_classes], deduplicated."""
    edges = [math.floor(i * n_classes / 5) for i in range(6)]
    out = [edges[0]]
    for e in edges[1:]:
        if e > out[-1]:
            out.append(e)
    return out


def set_stratified_metrics(sets, labels, edges, n_classes: int) -> list:
    """Coverage by set-size stratum.

    Bin i is [edges[i], edges[i+1]), except the last, which is closed on the
    right so a full set of n_classes labels lands in it. Edges must strictly
    increase and cover [0, n_classes]. Empty strata report null metrics.
    """
    labels = np.asarray(labels)
    if len(sets) != len(labels) or len(sets) == 0:
        raise ValueError("sets and labels must be aligned and nonempty")
    edges = [float(e) for e in edges]
    if len(edges) < 2 or any(a >= b for a, b in zip(edges, edges[1:])):
        raise ValueError("strata edges must be strictly increasing")
    if edges[0] > 0 or edges[-1] < n_classes:
        raise ValueError(
            f"strata edges must cover [0, {n_classes}], got {edges}")
    nbins = len(edges) - 1
    hits = [[] for _ in range(nbins)]
    sizes = [[] for _ in range(nbins)]
    for s, y in zip(sets, labels):
        k = len(s)
        i = nbins - 1 if k >= edges[-2] else int(np.searchsorted(
            edges, k, side="right")) - 1
        hits[i].append(y in s)
        sizes[i].append(k)
    rows = []
    for i in range(nbins):
        if hits[i]:
            rows.append({"lo": edges[i], "hi": edges[i + 1],
                         "count": len(hits[i]),
                         "coverage": float(np.mean(hits[i])),
                         "mean_size": float(np.mean(sizes[i]))})
        else:
            rows.append({"lo": edges[i], "hi": edges[i + 1], "count": 0,
                         "coverage": None, "mean_size": None})
    return rows


@dataclass
class EvalReport:
    """Metrics of one (method, alpha, regularization) run on one test segment."""

    method: str
    alpha: float
    lam: float
    k_reg: int
    seed: int
    n_test: int
    coverage: float
    mean_size: float
    per_class: list
    strata: list
    extra: dict = field(default_factory=dict)

    def to_json_dict(self) -> dict:
        return {
            "method": self.method, "alpha": self.alpha, "lam": self.lam,
            "k_reg": self.k_reg, "seed": self.seed, "n_test": self.n_test,
            "coverage": self.coverage, "mean_size": self.mean_size,
            "per_class": self.per_class, "strata": self.strata,
            "extra": self.extra,
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> "EvalReport":
        return cls(**d)


def build_report(method: str, alpha: float, reg: RegParams, seed: int, sets,
                 labels, n_classes: int, edges=None,
                 extra: dict = None) -> EvalReport:
    cov, size = marginal_metrics(sets, labels)
    edges = default_strata_edges(n_classes) if edges is None else edges
    return EvalReport(
        method=method, alpha=float(alpha), lam=float(reg.lam),
        k_reg=int(reg.k_reg), seed=int(seed), n_test=len(labels),
        coverage=cov, mean_size=size,
        per_class=class_conditional_metrics(sets, labels, n_classes),
        strata=set_stratified_metrics(sets, labels, edges, n_classes),
        extra=dict(extra or {}),
    )


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return format(v, ".17g")
    return str(v)


def reports_to_csv(reports) -> str:
    """One row per report; every report must share class count and strata."""
    reports = list(reports)
    if not reports:
        raise ValueError("no reports to serialize")
    K = len(reports[0].per_class)
    spans = [(b["lo"], b["hi"]) for b in reports[0].strata]
    for r in reports:
        if len(r.per_class) != K or [(b["lo"], b["hi"]) for b in r.strata] != spans:
            raise ValueError("reports have mismatched class or strata layout")
    cols = ["method", "alpha", "lam", "k_reg", "seed", "n_test", "coverage",
            "mean_size"]
    for c in range(K):
        cols += [f"cov_class_{c}", f"size_class_{c}", f"count_class_{c}"]
    for lo, hi in spans:
        tag = f"{_fmt(lo)}_{_fmt(hi)}"
        cols += [f"cov_bin_{tag}", f"size_bin_{tag}", f"count_bin_{tag}"]
    lines = [",".join(cols)]
    for r in reports:
        cells = [r.method, _fmt(r.alpha), _fmt(r.lam), _fmt(float(r.k_reg)),
                 str(r.seed), str(r.n_test), _fmt(r.coverage),
                 _fmt(r.mean_size)]
        for pc in r.per_class:
            cells += [_fmt(pc["coverage"]), _fmt(pc["mean_size"]),
                      str(pc["count"])]
        for b in r.strata:
            cells += [_fmt(b["coverage"]), _fmt(b["mean_size"]),
                      str(b["count"])]
        lines.append(",".join(cells))
    return "\n".join(lines) + "\n"


def reports_to_json(reports) -> str:
    return json.dumps([r.to_json_dict() for r in reports], sort_keys=True,
                      indent=2)


def reports_from_json(text: str) -> list:
    return [EvalReport.from_json_dict(d) for d in json.loads(text)]


def default_reg_grid(n_classes: int):
    """10 lambdas uniform on [0.01, 10] crossed with 10 integer-rounded
    rank offsets uniform on [1, n_classes - 1]; always 100 pairs."""
    if n_classes < 2:
        raise ValueError("need at least 2 classes for a rank-offset grid")
    lams = np.linspace(0.01, 10.0, 10)
    kregs = np.round(np.linspace(1, n_classes - 1, 10)).astype(int)
    return [float(l) for l in lams], [int(k) for k in kregs]


def regularizer_sweep(method: str, train: LabeledSeries, test: LabeledSeries,
                      alpha: float, grid=None, spec: ClassifierSpec = None,
                      seed: int = 0, b: int = 30, phi: str = "mean",
                      s: int = 1, split: str = "sequential",
                      edges=None) -> list:
    """One EvalReport per (lam, k_reg) pair, sorted ascending by the pair.

    Models are fitted once per sweep; only scores, thresholds, and sets are
    recomputed per pair, which matches a full refit because fitting is
    deterministic in (spec, data).
    """
    if method not in ("eraps", "sraps"):
        raise ValueError(f"sweep supports eraps or sraps, got {method!r}")
    spec = spec or ClassifierSpec()
    lams, kregs = default_reg_grid(train.n_classes) if grid is None else grid
    pairs = sorted(itertools.product(
        [float(l) for l in lams], [int(k) for k in kregs]))
    for lam, k in pairs:
        if not (1 <= k <= train.n_classes):
            raise ValueError(f"k_reg {k} outside [1, {train.n_classes}]")
    reports = []
    if method == "eraps":
        state = eraps_fit(train, spec, b=b, phi=phi, seed=seed,
                          reg=RegParams(*pairs[0]))
        test_probs = eraps_test_aggregates(state, test.features)
        for lam, k in pairs:
            reg = RegParams(lam, k)
            sets = eraps_predict_stream(eraps_rescore(state, reg), test,
                                        alpha, reg, s,
                                        _test_probs=test_probs)
            reports.append(build_report(method, alpha, reg, seed, sets,
                                        test.labels, train.n_classes, edges))
    else:
        parts = sraps_parts(train, spec, split, seed)
        for lam, k in pairs:
            reg = RegParams(lam, k)
            sets = sraps_sets_from_parts(parts, test.features, alpha, reg)
            reports.append(build_report(method, alpha, reg, seed, sets,
                                        test.labels, train.n_classes, edges))
    return reports
