"""Multinomial probabilistic classifiers trained with full-batch gradient descent.

Two model kinds are supported: multinomial logistic regression ("logistic")
and a one-hidden-layer tanh network ("net"). Both minimize mean cross-entropy
plus an L2 penalty on weight matrices (biases unpenalized), standardize
features using statistics of the training split only, and emit strictly
positive class probabilities through a softmax head.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .core import LabeledSeries, ProbVector, derive_seed

_FORMAT_VERSION = 1
_LOSS_TOL = 1e-8
_MAX_HALVINGS = 30


class TrainingDivergenceError(RuntimeError):
    """Raised when the training loss is non-finite after all step halvings."""


@dataclass(frozen=True)
class ClassifierSpec:
    """Hyperparameters; two specs compare equal iff they train identically."""

    kind: str = "logistic"
    hidden_width: int = 16
    l2: float = 1e-4
    learning_rate: float = 0.5
    epochs: int = 300
    init_seed: int = 0

    def __post_init__(self):
        if self.kind not in ("logistic", "net"):
            raise ValueError(f"unknown classifier kind {self.kind!r}")
        if self.kind == "net" and self.hidden_width < 1:
            raise ValueError("hidden_width must be at least 1")
        if self.l2 < 0:
            raise ValueError("l2 must be nonnegative")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.epochs < 1:
            raise ValueError("epochs must be at least 1")


def _softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=1, keepdims=True)
    # exp underflow can zero an entry; the head contract is strict positivity
    np.clip(p, 1e-300, None, out=p)
    return p / p.sum(axis=1, keepdims=True)


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def _objective(kind: str, params: dict, Xs: np.ndarray, labels: np.ndarray,
               n_classes: int, l2: float):
    """Mean cross-entropy + L2 on weights, with analytic gradients."""
    n = len(labels)
    rows = np.arange(n)
    if kind == "logistic":
        logits = Xs @ params["W"] + params["b"]
        logp = _log_softmax(logits)
        loss = -logp[rows, labels].mean() + l2 * np.square(params["W"]).sum()
        P = _softmax(logits)
        G = P.copy()
        G[rows, labels] -= 1.0
        G /= n
        grads = {"W": Xs.T @ G + 2.0 * l2 * params["W"], "b": G.sum(axis=0)}
        return loss, grads
    H = np.tanh(Xs @ params["W1"] + params["b1"])
    logits = H @ params["W2"] + params["b2"]
    logp = _log_softmax(logits)
    loss = (-logp[rows, labels].mean()
            + l2 * (np.square(params["W1"]).sum() + np.square(params["W2"]).sum()))
    P = _softmax(logits)
    G = P.copy()
    G[rows, labels] -= 1.0
    G /= n
    dH = (G @ params["W2"].T) * (1.0 - H * H)
    grads = {
        "W1": Xs.T @ dH + 2.0 * l2 * params["W1"],
        "b1": dH.sum(axis=0),
        "W2": H.T @ G + 2.0 * l2 * params["W2"],
        "b2": G.sum(axis=0),
    }
    return loss, grads


def _init_params(spec: ClassifierSpec, d: int, n_classes: int) -> dict:
    if spec.kind == "logistic":
        return {"W": np.zeros((d, n_classes)), "b": np.zeros(n_classes)}
    rng = np.random.default_rng(spec.init_seed)
    h = spec.hidden_width
    return {
        "W1": rng.normal(0.0, 1.0 / np.sqrt(d), size=(d, h)),
        "b1": np.zeros(h),
        "W2": rng.normal(0.0, 1.0 / np.sqrt(h), size=(h, n_classes)),
        "b2": np.zeros(n_classes),
    }


@dataclass
class FittedClassifier:
    """Trained model: standardization constants, parameters, loss trace."""

    spec: ClassifierSpec
    n_classes: int
    mu: np.ndarray
    sigma: np.ndarray
    params: dict
    loss_trace: list = field(default_factory=list)

    def _logits(self, Xs: np.ndarray) -> np.ndarray:
        if self.spec.kind == "logistic":
            return Xs @ self.params["W"] + self.params["b"]
        H = np.tanh(Xs @ self.params["W1"] + self.params["b1"])
        return H @ self.params["W2"] + self.params["b2"]

    def predict_proba_matrix(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 2 or X.shape[1] != len(self.mu):
            raise ValueError(
                f"expected features of width {len(self.mu)}, got shape {X.shape}")
        return _softmax(self._logits((X - self.mu) / self.sigma))

    def predict_proba(self, x) -> ProbVector:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 1 or len(x) != len(self.mu):
            raise ValueError(
                f"expected a feature vector of length {len(self.mu)}, got shape {x.shape}")
        return ProbVector(self.predict_proba_matrix(x[None, :])[0])

    def to_dict(self) -> dict:
        return {
            "format_version": _FORMAT_VERSION,
            "spec": {
                "kind": self.spec.kind,
                "hidden_width": self.spec.hidden_width,
                "l2": self.spec.l2,
                "learning_rate": self.spec.learning_rate,
                "epochs": self.spec.epochs,
                "init_seed": self.spec.init_seed,
            },
            "n_classes": self.n_classes,
            "mu": self.mu.tolist(),
            "sigma": self.sigma.tolist(),
            "params": {k: v.tolist() for k, v in self.params.items()},
            "loss_trace": list(self.loss_trace),
        }

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def from_dict(cls, d: dict) -> "FittedClassifier":
        if d.get("format_version") != _FORMAT_VERSION:
            raise ValueError(f"unsupported model format {d.get('format_version')!r}")
        return cls(
            spec=ClassifierSpec(**d["spec"]),
            n_classes=d["n_classes"],
            mu=np.asarray(d["mu"], dtype=np.float64),
            sigma=np.asarray(d["sigma"], dtype=np.float64),
            params={k: np.asarray(v, dtype=np.float64) for k, v in d["params"].items()},
            loss_trace=list(d["loss_trace"]),
        )

    @classmethod
    def load(cls, path) -> "FittedClassifier":
        return cls.from_dict(json.loads(Path(path).read_text()))


def _standardization(X: np.ndarray):
    mu = X.mean(axis=0)
    sigma = X.std(axis=0)
    sigma[sigma == 0] = 1.0
    return mu, sigma


def fit(spec: ClassifierSpec, data: LabeledSeries) -> FittedClassifier:
    """Train on the given series; deterministic for a fixed (spec, data).

    Each accepted epoch must not increase the loss by more than 1e-8; a
    violating step halves the learning rate and retries, up to 30 halvings
    over the whole run. A non-finite loss that survives all halvings raises
    TrainingDivergenceError.
    """
    if len(data) == 0:
        raise ValueError("cannot fit on an empty series")
    mu, sigma = _standardization(data.features)
    Xs = (data.features - mu) / sigma
    params = _init_params(spec, data.n_features, data.n_classes)
    loss, grads = _objective(spec.kind, params, Xs, data.labels, data.n_classes, spec.l2)
    if not np.isfinite(loss):
        raise TrainingDivergenceError(f"initial loss is {loss}")
    trace = [float(loss)]
    lr = spec.learning_rate
    halvings = 0
    # a too-large step may overflow to inf before the halving logic catches
    # it; the non-finite check below is the handler, so don't warn
    with np.errstate(over="ignore", invalid="ignore"):
        for _ in range(spec.epochs):
            while True:
                candidate = {k: v - lr * grads[k] for k, v in params.items()}
                new_loss, new_grads = _objective(
                    spec.kind, candidate, Xs, data.labels, data.n_classes,
                    spec.l2)
                if np.isfinite(new_loss) and new_loss <= loss + _LOSS_TOL:
                    break
                if halvings >= _MAX_HALVINGS:
                    if not np.isfinite(new_loss):
                        raise TrainingDivergenceError(
                            f"loss {new_loss} after {halvings} halvings")
                    break
                halvings += 1
                lr *= 0.5
            params, loss, grads = candidate, new_loss, new_grads
            trace.append(float(loss))
    return FittedClassifier(spec=spec, n_classes=data.n_classes, mu=mu,
                            sigma=sigma, params=params, loss_trace=trace)


def gradient_check(spec: ClassifierSpec, data: LabeledSeries,
                   step: float = 1e-5) -> float:
    """Max relative gap between analytic and central-difference gradients.

    Evaluated at a random parameter point drawn from `spec.init_seed`. The
    denominator is floored at 1e-4 so near-zero components compare on an
    absolute scale.
    """
    mu, sigma = _standardization(data.features)
    Xs = (data.features - mu) / sigma
    shapes = {k: v.shape for k, v in
              _init_params(spec, data.n_features, data.n_classes).items()}
    rng = np.random.default_rng(derive_seed(spec.init_seed, "gradcheck"))
    params = {k: rng.normal(0.0, 0.5, size=s) for k, s in shapes.items()}
    _, grads = _objective(spec.kind, params, Xs, data.labels, data.n_classes, spec.l2)

    worst = 0.0
    for k in sorted(shapes):
        g = grads[k]
        flat = params[k].ravel()
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            hi, _ = _objective(spec.kind, params, Xs, data.labels,
                               data.n_classes, spec.l2)
            flat[i] = orig - step
            lo, _ = _objective(spec.kind, params, Xs, data.labels,
                               data.n_classes, spec.l2)
            flat[i] = orig
            fd = (hi - lo) / (2.0 * step)
            a = g.ravel()[i]
            rel = abs(a - fd) / max(abs(a) + abs(fd), 1e-4)
            worst = max(worst, rel)
    return worst


def spec_with_seed(spec: ClassifierSpec, seed: int) -> ClassifierSpec:
    return replace(spec, init_seed=int(seed))
