"""Command-line front end.

Subcommands: run (fit one method, write reports), sweep (regularization
grid), verify (synthetic checks of the coverage theory), ingest-check
(validate a CSV without running anything). Configuration comes from an
optional TOML or JSON file; any command-line flag overrides the file.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
import time
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python 3.10
    import tomli as tomllib

from .classifiers import ClassifierSpec, fit
from .conformal import (eraps_fit, eraps_predict_stream, eraps_rescore,
                        eraps_test_aggregates, naive_set, sraps_parts,
                        sraps_sets_from_parts)
from .core import LabeledSeries, RegParams, derive_seed
from .evaluation import (build_report, regularizer_sweep, reports_to_csv,
                         reports_to_json)
from .synth import (coverage_gap_experiment, dkw_experiment, generate,
                    make_dgp, set_convergence_experiment)

_METHODS = ("eraps", "sraps", "saps", "naive")
_DEFAULT_ALPHAS = (0.05, 0.075, 0.1, 0.15, 0.2)
_SYNTH_KEYS = {"n_classes": 5, "n_features": 8, "rho": 0.5,
               "n_train": 2000, "n_test": 1000, "weight_scale": 1.0,
               "noise_scale": 1.0}


class ConfigError(Exception):
    def __init__(self, field_name: str, message: str):
        super().__init__(f"{field_name}: {message}")
        self.field_name = field_name


class IngestError(Exception):
    pass


@dataclass
class RunConfig:
    method: str = "eraps"
    alphas: list = field(default_factory=lambda: list(_DEFAULT_ALPHAS))
    lam: float = 1.0
    k_reg: int = 2
    b: int = 30
    batch_size: int = 1
    phi: str = "mean"
    trim_fraction: float = 0.1
    seed: int = 0
    split: str = "sequential"
    class_conditional: bool = False
    strata: list = None
    output: str = "reports"
    data: str = None
    label_column: str = "label"
    train_count: int = None
    train_fraction: float = None
    classes: list = None
    synth: dict = None
    classifier: dict = field(default_factory=dict)


_FILE_KEY_ALIASES = {"lambda": "lam", "alpha": "alphas", "B": "b"}


def load_config_file(path) -> dict:
    p = Path(path)
    if not p.is_file():
        raise ConfigError("config", f"no such file: {path}")
    if p.suffix == ".toml":
        raw = tomllib.loads(p.read_text())
    elif p.suffix == ".json":
        raw = json.loads(p.read_text())
    else:
        raise ConfigError("config", f"expected .toml or .json, got {p.suffix!r}")
    if not isinstance(raw, dict):
        raise ConfigError("config", "top level must be a table/object")
    known = {f.name for f in fields(RunConfig)}
    out = {}
    for k, v in raw.items():
        key = _FILE_KEY_ALIASES.get(k, k)
        if key not in known:
            raise ConfigError(k, "unknown configuration key")
        out[key] = v
    return out


def _parse_float_list(text: str, name: str) -> list:
    try:
        return [float(x) for x in str(text).split(",") if x != ""]
    except ValueError:
        raise ConfigError(name, f"could not parse float list {text!r}")


def _parse_synth(text: str) -> dict:
    out = {}
    for part in text.split(","):
        if not part:
            continue
        if "=" not in part:
            raise ConfigError("synth", f"expected key=value, got {part!r}")
        k, v = part.split("=", 1)
        k = k.strip()
        if k not in _SYNTH_KEYS:
            raise ConfigError("synth", f"unknown key {k!r}")
        out[k] = float(v) if k in ("rho", "weight_scale", "noise_scale") else int(v)
    return out


def _parse_phi(text: str):
    if text.startswith("trimmed:"):
        return "trimmed", float(text.split(":", 1)[1])
    return text, None


def make_config(args) -> RunConfig:
    cfg = RunConfig()
    if getattr(args, "config", None):
        for k, v in load_config_file(args.config).items():
            setattr(cfg, k, v)
    flag_map = [
        ("method", "method"), ("lam", "lam"), ("kreg", "k_reg"), ("B", "b"),
        ("batch_size", "batch_size"), ("seed", "seed"), ("split", "split"),
        ("output", "output"), ("data", "data"),
        ("label_column", "label_column"), ("train_count", "train_count"),
        ("train_fraction", "train_fraction"),
    ]
    for flag, key in flag_map:
        v = getattr(args, flag, None)
        if v is not None:
            setattr(cfg, key, v)
    if getattr(args, "alpha", None) is not None:
        cfg.alphas = _parse_float_list(args.alpha, "alpha")
    if getattr(args, "phi", None) is not None:
        kind, tf = _parse_phi(args.phi)
        cfg.phi = kind
        if tf is not None:
            cfg.trim_fraction = tf
    if getattr(args, "class_conditional", None):
        cfg.class_conditional = True
    if getattr(args, "strata", None) is not None:
        cfg.strata = _parse_float_list(args.strata, "strata")
    if getattr(args, "classes", None) is not None:
        cfg.classes = [c for c in args.classes.split(",") if c != ""]
    if getattr(args, "synth", None) is not None:
        cfg.synth = _parse_synth(args.synth)
    for flag, key in [("classifier_kind", "kind"), ("hidden_width", "hidden_width"),
                      ("l2", "l2"), ("learning_rate", "learning_rate"),
                      ("epochs", "epochs")]:
        v = getattr(args, flag, None)
        if v is not None:
            cfg.classifier[key] = v
    validate_config(cfg)
    return cfg


def validate_config(cfg: RunConfig):
    if cfg.method not in _METHODS:
        raise ConfigError("method", f"must be one of {_METHODS}, got {cfg.method!r}")
    if not cfg.alphas:
        raise ConfigError("alpha", "need at least one level")
    for a in cfg.alphas:
        if not (0.0 < float(a) < 1.0):
            raise ConfigError("alpha", f"levels must lie in (0, 1), got {a}")
    if cfg.lam < 0:
        raise ConfigError("lambda", f"must be nonnegative, got {cfg.lam}")
    if int(cfg.k_reg) != cfg.k_reg or cfg.k_reg < 1:
        raise ConfigError("k_reg", f"must be an integer >= 1, got {cfg.k_reg}")
    if cfg.b < 1:
        raise ConfigError("B", f"must be at least 1, got {cfg.b}")
    if cfg.batch_size < 1:
        raise ConfigError("batch_size", f"must be at least 1, got {cfg.batch_size}")
    if cfg.phi not in ("mean", "median", "trimmed"):
        raise ConfigError("phi", f"must be mean, median, or trimmed, got {cfg.phi!r}")
    if not (0.0 <= cfg.trim_fraction < 0.5):
        raise ConfigError("trim_fraction", "must lie in [0, 0.5)")
    if cfg.split not in ("sequential", "random"):
        raise ConfigError("split", f"must be sequential or random, got {cfg.split!r}")
    if (cfg.data is None) == (cfg.synth is None):
        raise ConfigError("data", "exactly one of data (CSV path) or synth must be set")
    if cfg.synth is not None:
        for k in cfg.synth:
            if k not in _SYNTH_KEYS:
                raise ConfigError("synth", f"unknown key {k!r}")
    if cfg.train_count is not None and cfg.train_count < 1:
        raise ConfigError("train_count", "must be at least 1")
    if cfg.train_fraction is not None and not (0.0 < cfg.train_fraction < 1.0):
        raise ConfigError("train_fraction", "must lie in (0, 1)")
    try:
        _classifier_spec(cfg)
    except (TypeError, ValueError) as e:
        raise ConfigError("classifier", str(e))
    if cfg.method == "saps" and cfg.lam != 0.0:
        print(f"warning: saps forces lambda to 0 (config had {cfg.lam})",
              file=sys.stderr)
        cfg.lam = 0.0


def _classifier_spec(cfg: RunConfig) -> ClassifierSpec:
    kw = dict(cfg.classifier)
    kw.setdefault("init_seed", derive_seed(cfg.seed, "classifier"))
    return ClassifierSpec(**kw)


# ---------------------------------------------------------------------------
# CSV ingestion


def ingest_csv(path, label_column: str = "label", train_count: int = None,
               train_fraction: float = None, classes=None):
    """Read a header CSV, split by time order, map labels to dense indices.

    The label dictionary is built by first appearance over training rows and
    then extends over test rows, unless `classes` pre-declares every label.
    A test-only label (without pre-declaration) gets an index beyond the
    training class count, so it can never be covered by a predicted set.
    Returns (train, test, label_dict).
    """
    p = Path(path)
    if not p.is_file():
        raise IngestError(f"no such file: {path}")
    with open(p, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise IngestError("empty file")
    header, data_rows = rows[0], rows[1:]
    if label_column not in header:
        raise IngestError(
            f"label column {label_column!r} not in header {header}")
    li = header.index(label_column)
    feat_idx = [i for i in range(len(header)) if i != li]
    if not feat_idx:
        raise IngestError("no feature columns besides the label")
    n = len(data_rows)
    if n < 2:
        raise IngestError(f"need at least 2 data rows, found {n}")
    if train_count is not None:
        n_train = int(train_count)
    else:
        n_train = int(round((0.5 if train_fraction is None else train_fraction) * n))
    if not (1 <= n_train < n):
        raise IngestError(
            f"train_count {n_train} must leave both splits nonempty (rows: {n})")

    X = np.empty((n, len(feat_idx)))
    raw_labels = []
    for r, row in enumerate(data_rows):
        line = r + 2  # 1-based, after the header line
        if len(row) != len(header):
            raise IngestError(
                f"row {line}: expected {len(header)} cells, found {len(row)}")
        for j, ci in enumerate(feat_idx):
            try:
                X[r, j] = float(row[ci])
            except ValueError:
                raise IngestError(
                    f"row {line}: column {header[ci]!r}: "
                    f"could not parse {row[ci]!r} as a number")
        raw_labels.append(row[li])

    if classes is not None:
        label_dict = {c: i for i, c in enumerate(classes)}
        if len(label_dict) != len(classes):
            raise IngestError("duplicate entries in declared classes")
        for r, raw in enumerate(raw_labels):
            if raw not in label_dict:
                raise IngestError(
                    f"row {r + 2}: label {raw!r} not among declared classes")
        n_train_classes = len(classes)
    else:
        label_dict = {}
        for raw in raw_labels[:n_train]:
            if raw not in label_dict:
                label_dict[raw] = len(label_dict)
        n_train_classes = len(label_dict)
        for raw in raw_labels[n_train:]:
            if raw not in label_dict:
                label_dict[raw] = len(label_dict)

    y = np.array([label_dict[raw] for raw in raw_labels], dtype=np.int64)
    n_all_classes = max(len(label_dict), n_train_classes)
    train = LabeledSeries(X[:n_train], y[:n_train], n_train_classes)
    test = LabeledSeries(X[n_train:], y[n_train:], n_all_classes)
    return train, test, label_dict


# ---------------------------------------------------------------------------
# data loading and the run/sweep pipelines


def _load_data(cfg: RunConfig):
    if cfg.data is not None:
        train, test, label_dict = ingest_csv(
            cfg.data, cfg.label_column, cfg.train_count, cfg.train_fraction,
            cfg.classes)
        source = {"data": str(cfg.data), "label_column": cfg.label_column,
                  "n_train": len(train), "n_test": len(test),
                  "n_classes": train.n_classes}
        return train, test, source
    syn = dict(_SYNTH_KEYS)
    syn.update(cfg.synth)
    dgp = make_dgp(int(syn["n_classes"]), int(syn["n_features"]),
                   float(syn["rho"]), seed=derive_seed(cfg.seed, "dgp"),
                   weight_scale=float(syn["weight_scale"]),
                   noise_scale=float(syn["noise_scale"]))
    n_train, n_test = int(syn["n_train"]), int(syn["n_test"])
    series, _ = generate(dgp, n_train + n_test)
    train = series.subset(slice(0, n_train))
    test = series.subset(slice(n_train, None))
    source = dict(syn)
    return train, test, source


def _method_sets(cfg: RunConfig, train: LabeledSeries, test: LabeledSeries):
    """Predicted sets per alpha, reusing fits across the alpha list."""
    spec = _classifier_spec(cfg)
    reg = RegParams(cfg.lam, cfg.k_reg)
    if cfg.k_reg > train.n_classes:
        raise ConfigError(
            "k_reg", f"must be <= {train.n_classes} classes, got {cfg.k_reg}")
    out = {}
    if cfg.method == "eraps":
        state = eraps_fit(train, spec, b=cfg.b, phi=cfg.phi, seed=cfg.seed,
                          reg=reg, trim_fraction=cfg.trim_fraction)
        test_probs = eraps_test_aggregates(state, test.features)
        for a in cfg.alphas:
            out[a] = eraps_predict_stream(
                state, test, a, reg, cfg.batch_size,
                class_conditional=cfg.class_conditional,
                _test_probs=test_probs)
    elif cfg.method in ("sraps", "saps"):
        parts = sraps_parts(train, spec, cfg.split, cfg.seed)
        for a in cfg.alphas:
            out[a] = sraps_sets_from_parts(
                parts, test.features, a, reg,
                class_conditional=cfg.class_conditional)
    else:
        if cfg.class_conditional:
            print("warning: class-conditional thresholds do not apply to "
                  "naive sets", file=sys.stderr)
        model = fit(spec, train)
        P = model.predict_proba_matrix(test.features)
        for a in cfg.alphas:
            out[a] = [naive_set(P[j], a, len(train) + j)
                      for j in range(len(test))]
    return out, reg


def _write_json(path: Path, payload: dict):
    path.write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n")


def _timestamp() -> str:
    return time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime())


def cmd_run(args) -> int:
    cfg = make_config(args)
    train, test, source = _load_data(cfg)
    sets_by_alpha, reg = _method_sets(cfg, train, test)
    extra = {"b": cfg.b, "phi": cfg.phi, "batch_size": cfg.batch_size,
             "split": cfg.split, "class_conditional": cfg.class_conditional,
             "source": source}
    reports = [
        build_report(cfg.method, a, reg, cfg.seed, sets_by_alpha[a],
                     test.labels, test.n_classes, cfg.strata, extra)
        for a in cfg.alphas
    ]
    outdir = Path(cfg.output)
    outdir.mkdir(parents=True, exist_ok=True)
    for r in reports:
        _write_json(outdir / f"{cfg.method}_alpha{r.alpha:g}.json",
                    {"timestamp": _timestamp(), "report": r.to_json_dict()})
    (outdir / f"{cfg.method}.csv").write_text(reports_to_csv(reports))
    print(f"{'method':<8}{'alpha':>8}{'coverage':>12}{'mean_size':>12}")
    for r in reports:
        print(f"{r.method:<8}{r.alpha:>8g}{r.coverage:>12.4f}"
              f"{r.mean_size:>12.4f}")
    print(f"wrote {len(reports)} JSON reports and {cfg.method}.csv to {outdir}")
    return 0


def cmd_sweep(args) -> int:
    cfg = make_config(args)
    if cfg.method not in ("eraps", "sraps"):
        raise ConfigError("method", "sweep supports eraps or sraps")
    train, test, source = _load_data(cfg)
    grid = None
    if args.lambdas is not None or args.kregs is not None:
        if args.lambdas is None or args.kregs is None:
            raise ConfigError("grid", "provide both --lambdas and --kregs")
        grid = (_parse_float_list(args.lambdas, "lambdas"),
                [int(k) for k in _parse_float_list(args.kregs, "kregs")])
    spec = _classifier_spec(cfg)
    outdir = Path(cfg.output)
    outdir.mkdir(parents=True, exist_ok=True)
    for a in cfg.alphas:
        reports = regularizer_sweep(
            cfg.method, train, test, a, grid=grid, spec=spec, seed=cfg.seed,
            b=cfg.b, phi=cfg.phi, s=cfg.batch_size, split=cfg.split,
            edges=cfg.strata)
        # not Path.with_suffix: the alpha's decimal point would count as one
        base = f"sweep_{cfg.method}_alpha{a:g}"
        (outdir / f"{base}.csv").write_text(reports_to_csv(reports))
        (outdir / f"{base}.json").write_text(reports_to_json(reports) + "\n")
        covs = [r.coverage for r in reports]
        sizes = [r.mean_size for r in reports]
        print(f"alpha={a:g}: {len(reports)} pairs, coverage "
              f"[{min(covs):.4f}, {max(covs):.4f}], mean size "
              f"[{min(sizes):.4f}, {max(sizes):.4f}]")
    print(f"wrote sweep files to {outdir}")
    return 0


def cmd_verify(args) -> int:
    for name in ("gap_reps", "conv_reps", "dkw_reps"):
        if getattr(args, name) < 1:
            raise ConfigError(name.replace("_", "-"),
                              f"must be at least 1, got {getattr(args, name)}")
    seed = args.seed
    outdir = Path(args.output)
    outdir.mkdir(parents=True, exist_ok=True)
    dgp = make_dgp(5, 8, 0.5, seed=derive_seed(seed, "dgp"))
    checks = []

    gap_sizes = [int(x) for x in _parse_float_list(args.gap_sizes, "gap-sizes")]
    gap = coverage_gap_experiment(dgp, "eraps", [0.1], gap_sizes,
                                  args.gap_reps, b=args.B, seed=seed)
    _write_report(outdir, "gap", gap)
    largest = max(gap_sizes)
    g_last = next(r for r in gap.rows if r["T"] == largest)
    checks.append((f"[GAP] T={largest} gap={g_last['gap_mean']:.4f}",
                   g_last["gap_mean"] <= 0.03, "<= 0.03"))
    mono = gap.meta["nonincreasing_within_one_se"]["0.1"]
    checks.append(("[GAP] gap nonincreasing in T within one SE", mono, ""))

    # flatter conditionals for the set-convergence checks: they keep every
    # cumulative-mass boundary well below 1 - alpha, so a two-label set
    # difference stays a genuine estimation failure rather than a property
    # of the label distribution itself
    conv_dgp = make_dgp(5, 8, 0.5, seed=derive_seed(seed, "dgp"),
                        weight_scale=0.5)
    conv = set_convergence_experiment(conv_dgp, 0.1, [args.conv_size],
                                      args.conv_reps, seed=seed)
    _write_report(outdir, "convergence", conv)
    rate = conv.rows[0]["match_rate"]
    checks.append((f"[CONV] T={args.conv_size} match_rate={rate:.4f}",
                   rate >= 0.95, ">= 0.95"))
    conv_o = set_convergence_experiment(conv_dgp, 0.1, [args.conv_size],
                                        args.conv_reps, oracle_probs=True,
                                        seed=seed)
    _write_report(outdir, "convergence_oracle", conv_o)
    rate_o = conv_o.rows[0]["match_rate"]
    checks.append((f"[CONV] oracle match_rate={rate_o:.4f}",
                   rate_o >= 0.99, ">= 0.99"))

    dkw_sizes = [int(x) for x in _parse_float_list(args.dkw_sizes, "dkw-sizes")]
    dkw = dkw_experiment(dkw_sizes, args.dkw_reps, seed=seed)
    _write_report(outdir, "dkw", dkw)
    for row in dkw.rows:
        checks.append((
            f"[DKW] T={row['T']} exceedance={row['exceedance']:.4f}",
            row["exceedance"] <= row["bound"],
            f"<= bound {row['bound']:.4f}"))

    failed = 0
    for label, ok, detail in checks:
        print(f"{label} {detail} {'PASS' if ok else 'FAIL'}".rstrip())
        failed += not ok
    print(f"wrote experiment reports to {outdir}")
    return 1 if failed else 0


def _write_report(outdir: Path, name: str, report):
    (outdir / f"{name}.json").write_text(report.to_json() + "\n")
    (outdir / f"{name}.csv").write_text(report.to_csv())


def cmd_ingest_check(args) -> int:
    classes = [c for c in args.classes.split(",")] if args.classes else None
    train, test, label_dict = ingest_csv(
        args.data, args.label_column or "label", args.train_count,
        args.train_fraction, classes)
    print(f"rows: {len(train) + len(test)} "
          f"(train {len(train)}, test {len(test)})")
    print(f"features: {train.n_features}")
    print(f"classes: {train.n_classes} in train, {test.n_classes} total")
    print("label dictionary:")
    for raw, idx in label_dict.items():
        print(f"  {raw!r} -> {idx}")
    return 0


def _add_shared_flags(p: argparse.ArgumentParser):
    p.add_argument("--config", help="TOML or JSON configuration file")
    p.add_argument("--method", choices=_METHODS)
    p.add_argument("--alpha", help="comma-separated miscoverage levels")
    p.add_argument("--lambda", dest="lam", type=float,
                   help="rank-penalty weight")
    p.add_argument("--kreg", type=int, help="penalty-free rank count")
    p.add_argument("--B", type=int, help="bootstrap ensemble size")
    p.add_argument("--batch-size", dest="batch_size", type=int,
                   help="labels revealed per sliding step")
    p.add_argument("--phi", help="ensemble aggregator: mean, median, "
                                 "or trimmed[:fraction]")
    p.add_argument("--seed", type=int)
    p.add_argument("--split", choices=("sequential", "random"))
    p.add_argument("--output")
    p.add_argument("--data", help="CSV dataset path")
    p.add_argument("--synth", help="synthetic data spec, e.g. "
                                   "n_classes=5,n_features=8,rho=0.5")
    p.add_argument("--label-column", dest="label_column")
    p.add_argument("--train-count", dest="train_count", type=int)
    p.add_argument("--train-fraction", dest="train_fraction", type=float)
    p.add_argument("--classes", help="comma-separated raw labels, declared "
                                     "in index order")
    p.add_argument("--class-conditional", dest="class_conditional",
                   action="store_const", const=True)
    p.add_argument("--strata", help="comma-separated set-size bin edges")
    p.add_argument("--classifier-kind", dest="classifier_kind",
                   choices=("logistic", "net"))
    p.add_argument("--hidden-width", dest="hidden_width", type=int)
    p.add_argument("--l2", type=float)
    p.add_argument("--learning-rate", dest="learning_rate", type=float)
    p.add_argument("--epochs", type=int)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="eraps",
        description="Conformal prediction sets for label streams")
    sub = ap.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="fit one method and write reports")
    _add_shared_flags(p_run)
    p_run.set_defaults(func=cmd_run)

    p_sweep = sub.add_parser("sweep", help="evaluate a regularization grid")
    _add_shared_flags(p_sweep)
    p_sweep.add_argument("--lambdas", help="comma-separated grid values")
    p_sweep.add_argument("--kregs", help="comma-separated grid values")
    p_sweep.set_defaults(func=cmd_sweep)

    p_ver = sub.add_parser("verify",
                           help="synthetic checks of the coverage theory")
    p_ver.add_argument("--output", default="verify_reports")
    p_ver.add_argument("--seed", type=int, default=0)
    p_ver.add_argument("--B", type=int, default=30)
    p_ver.add_argument("--gap-reps", dest="gap_reps", type=int, default=20)
    p_ver.add_argument("--gap-sizes", dest="gap_sizes", default="200,800,3200")
    p_ver.add_argument("--conv-reps", dest="conv_reps", type=int, default=10)
    p_ver.add_argument("--conv-size", dest="conv_size", type=int, default=5000)
    p_ver.add_argument("--dkw-reps", dest="dkw_reps", type=int, default=500)
    p_ver.add_argument("--dkw-sizes", dest="dkw_sizes", default="1000")
    p_ver.set_defaults(func=cmd_verify)

    p_ing = sub.add_parser("ingest-check", help="validate a CSV dataset")
    p_ing.add_argument("--data", required=True)
    p_ing.add_argument("--label-column", dest="label_column", default="label")
    p_ing.add_argument("--train-count", dest="train_count", type=int)
    p_ing.add_argument("--train-fraction", dest="train_fraction", type=float)
    p_ing.add_argument("--classes")
    p_ing.set_defaults(func=cmd_ingest_check)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, IngestError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    raise SystemExit(main())
