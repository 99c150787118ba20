"""Generative classification-accuracy test.

Generated rows are class 1 and held-out rows class 0. A classifier fitted on
one quarter of each is scored on the other quarters; under the null its error
rates sit near one half, and the z-statistic on ``e1 + e0 - 1`` detects
better-than-chance accuracy.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit
from scipy.stats import norm

from . import mdn as mdn_mod
from . import nn
from .data import Dataset, split_halves
from .errors import (
    DimensionError,
    InvalidSpecError,
    PreconditionError,
    TrainingDivergenceError,
)
from .permutation import fit_or_reuse, generator_info


@dataclass(frozen=True)
class ClassifierSpec:
    """``kind`` is ``"neural"`` (ReLU network) or ``"linear"`` (logistic regression)."""

    kind: str = "neural"
    hidden_widths: tuple[int, ...] = (32,)
    max_epochs: int = 100
    min_steps: int = 1000
    learning_rate: float = 1e-3
    batch_size: int = 32
    patience: int = 20
    validation_fraction: float = 0.0
    tol: float = 1e-8
    max_iter: int = 20000
    threshold: float = 0.0

    def __post_init__(self):
        if self.kind not in ("neural", "linear"):
            raise InvalidSpecError(f"unknown classifier kind {self.kind!r}")
        object.__setattr__(self, "hidden_widths", tuple(self.hidden_widths))
        if self.kind == "neural" and not self.hidden_widths:
            raise InvalidSpecError("neural classifier needs at least one hidden layer")

    @classmethod
    def linear(cls, **kw) -> ClassifierSpec:
        return cls(kind="linear", hidden_widths=(), **kw)


@dataclass(eq=False)
class Classifier:
    """Score ``R(y, x)``; predicts class 1 where the score is at least ``threshold``."""

    params: nn.FnnParams
    mean: np.ndarray
    std: np.ndarray
    threshold: float = 0.0

    def score(self, z) -> np.ndarray:
        z = np.atleast_2d(np.asarray(z, dtype=np.float64))
        return nn.forward(self.params, (z - self.mean) / self.std)[:, 0]

    def predict(self, z) -> np.ndarray:
        return (self.score(z) >= self.threshold).astype(np.int64)


def logistic_loss(r, s):
    """``-s r + log(1 + e^r)``, evaluated without overflow."""
    r = np.asarray(r, dtype=np.float64)
    out = np.logaddexp(0.0, r) - np.asarray(s, dtype=np.float64) * r
    return out if out.ndim else float(out)


def _joint(data) -> np.ndarray:
    return data.joint() if isinstance(data, Dataset) else np.atleast_2d(np.asarray(data, dtype=np.float64))


def _fit_linear(params: nn.FnnParams, z: np.ndarray, s: np.ndarray, spec: ClassifierSpec) -> None:
    # full-batch gradient descent with the 1/L step of the logistic loss
    n = z.shape[0]
    za = np.hstack([z, np.ones((n, 1))])
    lip = 0.25 * np.linalg.norm(za, 2) ** 2 / n
    step = 1.0 / lip
    theta = np.zeros(za.shape[1])
    for _ in range(spec.max_iter):
        grad = za.T @ (expit(za @ theta) - s) / n
        if not np.isfinite(grad).all():
            raise TrainingDivergenceError("non-finite gradient in linear classifier")
        if np.abs(grad).max() < spec.tol:
            break
        theta -= step * grad
    params.weights[0][0, :] = theta[:-1]
    params.biases[0][0] = theta[-1]


def _fit_neural(params: nn.FnnParams, z: np.ndarray, s: np.ndarray, spec: ClassifierSpec, rng) -> None:
    n = z.shape[0]
    order = rng.permutation(n)
    n_val = int(round(spec.validation_fraction * n))
    if n - n_val < 2:
        n_val = 0
    val, tr = order[:n_val], order[n_val:]
    z_tr, s_tr, z_val, s_val = z[tr], s[tr], z[val], s[val]
    state = nn.AdamState.for_params(params, lr=spec.learning_rate)
    m = min(spec.batch_size, len(tr))
    best, best_flat, since = np.inf, params.flat.copy(), 0
    # tiny training sets get extra epochs so that at least ``min_steps`` updates happen
    steps_per_epoch = -(-len(tr) // m)
    epochs = max(spec.max_epochs, -(-spec.min_steps // steps_per_epoch))
    for epoch in range(1, epochs + 1):
        perm = rng.permutation(len(tr))
        for start in range(0, len(tr), m):
            idx = perm[start : start + m]
            out, cache = nn.forward(params, z_tr[idx], return_cache=True)
            g = (expit(out[:, 0]) - s_tr[idx]) / len(idx)
            grad, _ = nn.backward(params, z_tr[idx], g[:, None], cache=cache)
            nn.adam_step(params, grad, state)
        if not n_val:
            continue
        v = float(np.mean(logistic_loss(nn.forward(params, z_val)[:, 0], s_val)))
        if not np.isfinite(v):
            raise TrainingDivergenceError(f"non-finite classifier loss at epoch {epoch}")
        if v < best - 1e-12:
            best, best_flat, since = v, params.flat.copy(), 0
        else:
            since += 1
            if since >= spec.patience:
                break
    if n_val:
        params.flat[...] = best_flat


def fit_classifier(train_pos, train_neg, spec: ClassifierSpec | None = None, seed=0) -> Classifier:
    """Minimise the mean logistic loss with positives labelled 1 and negatives 0."""
    spec = spec or ClassifierSpec()
    zp, zn = _joint(train_pos), _joint(train_neg)
    if len(zp) == 0 or len(zn) == 0:
        raise PreconditionError("both classes need at least one row")
    if zp.shape[1] != zn.shape[1]:
        raise DimensionError("classes have different dimensions")
    z = np.vstack([zp, zn])
    s = np.concatenate([np.ones(len(zp)), np.zeros(len(zn))])
    mean = z.mean(axis=0)
    std = z.std(axis=0)
    std = np.where(std > 0, std, 1.0)
    zs = (z - mean) / std
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    fnn = nn.FnnSpec(
        input_dim=z.shape[1],
        hidden_widths=spec.hidden_widths if spec.kind == "neural" else (),
        output_dim=1,
        activation="relu",
        seed=int(rng.integers(2**63)),
    )
    params = nn.init_params(fnn)
    if spec.kind == "linear":
        _fit_linear(params, zs, s, spec)
    else:
        _fit_neural(params, zs, s, spec, rng)
    return Classifier(params, mean, std, spec.threshold)


def error_rates(classifier, eval_pos, eval_neg) -> tuple[float, float]:
    """Fraction of class-1 rows predicted 0, and of class-0 rows predicted 1."""
    zp, zn = _joint(eval_pos), _joint(eval_neg)
    if len(zp) == 0 or len(zn) == 0:
        raise PreconditionError("both evaluation sets must be non-empty")
    e1 = float(np.mean(classifier.predict(zp) != 1))
    e0 = float(np.mean(classifier.predict(zn) != 0))
    return e1, e0


def clamp_rate(e: float, n: int) -> float:
    lo = 1.0 / (2 * n)
    return min(max(e, lo), 1.0 - lo)


def acc_statistic(e1: float, e0: float, n_eval_per_class: int) -> float:
    """``(e1 + e0 - 1) / sqrt(e1(1-e1)/n + e0(1-e0)/n)`` with rates kept off 0 and 1."""
    n = int(n_eval_per_class)
    if n < 2:
        raise PreconditionError("need at least 2 evaluation rows per class")
    if not (0.0 <= e1 <= 1.0 and 0.0 <= e0 <= 1.0):
        raise PreconditionError("error rates must lie in [0, 1]")
    e1c, e0c = clamp_rate(e1, n), clamp_rate(e0, n)
    return (e1c + e0c - 1.0) / np.sqrt(e1c * (1 - e1c) / n + e0c * (1 - e0c) / n)


@dataclass
class AccTestOutcome:
    e1_hat: float
    e0_hat: float
    statistic: float
    z_alpha: float
    alpha: float
    reject: bool
    n_train_per_class: int
    n_eval_per_class: int
    extra: dict = field(default_factory=dict)


def _check_alpha(alpha: float) -> float:
    if not 0.0 < alpha < 1.0:
        raise PreconditionError(f"alpha must lie in (0, 1), got {alpha}")
    return float(norm.ppf(1.0 - alpha))


def accuracy_test(d_hat21: Dataset, d22: Dataset, alpha: float, classifier_spec=None, seed=0) -> AccTestOutcome:
    """Quarter-split, fit, score and z-test generated (class 1) vs held-out (class 0) rows."""
    z_alpha = _check_alpha(alpha)
    if d_hat21.n != d22.n:
        raise PreconditionError("generated and held-out halves must have equal size")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    pos_train, pos_eval = split_halves(d_hat21, rng)
    neg_train, neg_eval = split_halves(d22, rng)
    if pos_eval.n < 2:
        raise PreconditionError("too few rows for a quarter split")
    clf = fit_classifier(pos_train, neg_train, classifier_spec, rng)
    e1, e0 = error_rates(clf, pos_eval, neg_eval)
    stat = acc_statistic(e1, e0, pos_eval.n)
    return AccTestOutcome(
        e1_hat=e1,
        e0_hat=e0,
        statistic=float(stat),
        z_alpha=z_alpha,
        alpha=alpha,
        reject=bool(stat < -z_alpha),
        n_train_per_class=pos_train.n,
        n_eval_per_class=pos_eval.n,
    )


def _trim_to_multiple_of_4(data2: Dataset, rng) -> Dataset:
    extra = data2.n % 4
    if not extra:
        return data2
    keep = np.sort(rng.permutation(data2.n)[: data2.n - extra])
    return data2.take(keep)


def gca_cdet(
    data1: Dataset,
    data2: Dataset,
    alpha: float = 0.05,
    mdn_spec=None,
    classifier_spec=None,
    seed=0,
    generator=None,
) -> AccTestOutcome:
    """Train the generator on ``data1`` and run the accuracy test on ``data2``.

    Passing a fitted ``generator`` skips training; ``data1`` may then be None.
    """
    _check_alpha(alpha)
    if data2.n < 8:
        raise PreconditionError(f"need n2 >= 8, got {data2.n}")
    ss = np.random.SeedSequence(seed) if not isinstance(seed, np.random.SeedSequence) else seed
    train_ss, split_ss, gen_ss, clf_ss = ss.spawn(4)
    gen = fit_or_reuse(data1, data2, mdn_spec, train_ss, generator)
    split_rng = np.random.default_rng(split_ss)
    data2 = _trim_to_multiple_of_4(data2, split_rng)
    d21, d22 = split_halves(data2, split_rng)
    d_hat21 = mdn_mod.generate_dataset(gen, d21.x, np.random.default_rng(gen_ss))
    out = accuracy_test(d_hat21, d22, alpha, classifier_spec, np.random.default_rng(clf_ss))
    out.extra.update(generator_info(gen))
    return out


def oracle_gca_cdet(true_generator, data2: Dataset, alpha: float = 0.05, classifier_spec=None, seed=0) -> AccTestOutcome:
    """Accuracy test with synthetic responses drawn from a known conditional law.

    ``true_generator(x, rng)`` must return one response row per covariate row.
    """
    _check_alpha(alpha)
    if data2.n < 8:
        raise PreconditionError(f"need n2 >= 8, got {data2.n}")
    ss = np.random.SeedSequence(seed) if not isinstance(seed, np.random.SeedSequence) else seed
    _, split_ss, gen_ss, clf_ss = ss.spawn(4)
    split_rng = np.random.default_rng(split_ss)
    data2 = _trim_to_multiple_of_4(data2, split_rng)
    d21, d22 = split_halves(data2, split_rng)
    y_hat = true_generator(d21.x, np.random.default_rng(gen_ss))
    d_hat21 = Dataset(np.asarray(y_hat).reshape(d21.n, -1), d21.x.copy())
    return accuracy_test(d_hat21, d22, alpha, classifier_spec, np.random.default_rng(clf_ss))
