"""Measurement procedures over trained banks: top-1 accuracy, cross-domain
routing matrices, weight-perturbation sharpness curves, the multi-model
softmax-ensemble baseline, and frozen-feature linear probing.

All procedures leave model parameters bit-exactly as they found them.
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .data import TEST, TRAIN
from .errors import ConfigError, DataError, ShapeError
from .train import run_training

PROBE_MODES = ("trained_only", "concat", "mean")


def _predict(feature, classifier, x, stem=None):
    h = stem.forward(x) if stem is not None else x
    logits = classifier.forward(feature.forward(h))
    # ties break to the lowest class index (argmax returns the first maximum)
    return logits, logits.argmax(axis=1)


def evaluate_accuracy(feature, classifier, data, split=TEST, stem=None, label_offset=0):
    """Fraction of argmax-correct predictions on one split of one domain."""
    x, y = data.split_arrays(split)
    if x.shape[0] == 0:
        raise DataError(f"domain {data.domain_id} has no {split!r} examples")
    _, pred = _predict(feature, classifier, x, stem)
    return float((pred == y + label_offset).mean())


@dataclass
class RoutingMatrix:
    """entries[i][j]: accuracy of domain-i test data routed through partner
    j's module; diagonal entries are the matched-pair reference."""

    mode: str
    domain_ids: tuple
    entries: np.ndarray

    def mean_off_diagonal(self):
        n = self.entries.shape[0]
        mask = ~np.eye(n, dtype=bool)
        return float(self.entries[mask].mean())

    def to_csv(self):
        lines = ["data_domain," + ",".join(f"via_{d}" for d in self.domain_ids)]
        for i, d in enumerate(self.domain_ids):
            lines.append(d + "," + ",".join(repr(v) for v in self.entries[i]))
        return "\n".join(lines) + "\n"


def routing_analysis(bank, dataset, split=TEST):
    """Cross-domain testing: (shared-feature, shared-classifier) matrices.

    shared_feature[i][j]:    x_i -> shared feature -> classifier_j
    shared_classifier[i][j]: x_i -> feature_j -> shared classifier
    """
    if not dataset.homogeneous or not bank.homogeneous:
        raise ConfigError("routing analysis requires a homogeneous dataset and bank")
    n = bank.n_domains
    if dataset.n_domains != n:
        raise ConfigError("bank and dataset disagree on the number of domains")
    ids = tuple(dataset.source_ids())
    shared_feature = np.zeros((n, n))
    shared_classifier = np.zeros((n, n))
    for i, d in enumerate(dataset.sources):
        x, y = d.split_arrays(split)
        if x.shape[0] == 0:
            raise DataError(f"domain {d.domain_id} has no {split!r} examples")
        feats = bank.feature_forward(bank.agnostic.feature, x)
        for j in range(n):
            pred = bank.specific[j].classifier.forward(feats).argmax(axis=1)
            shared_feature[i, j] = (pred == y).mean()
        for j in range(n):
            h = bank.feature_forward(bank.specific[j].feature, x)
            pred = bank.agnostic.classifier.forward(h).argmax(axis=1)
            shared_classifier[i, j] = (pred == y).mean()
    return (
        RoutingMatrix("shared_feature", ids, shared_feature),
        RoutingMatrix("shared_classifier", ids, shared_classifier),
    )


@dataclass
class SharpnessCurve:
    sigmas: np.ndarray
    mean_acc: np.ndarray
    std_acc: np.ndarray
    m_draws: int

    def to_csv(self):
        lines = ["sigma,mean_acc,std_acc"]
        for s, m, v in zip(self.sigmas, self.mean_acc, self.std_acc):
            lines.append(f"{s!r},{m!r},{v!r}")
        return "\n".join(lines) + "\n"

    def to_plot_csv(self):
        lines = ["sigma,accuracy"]
        for s, m, v in zip(self.sigmas, self.mean_acc, self.std_acc):
            lines.append(f"{s!r},{m!r}±{v!r}")
        return "\n".join(lines) + "\n"


def sharpness_analysis(feature, classifier, data, sigmas, m_draws, rng,
                       stem=None, split=TEST):
    """Accuracy under random weight perturbations of growing magnitude.

    For each sigma > 0, draws m perturbations W <- W + sigma*std(W)*eps per
    weight matrix (eps standard Gaussian elementwise, std taken per layer so
    the noise is relative to that layer's scale), evaluates, and restores the
    weights bit-exactly. sigma = 0 reports the unperturbed accuracy with zero
    spread and consumes no randomness.
    """
    mlps = [m for m in (stem, feature, classifier) if m is not None]
    weight_arrays = [l.weights for m in mlps for l in m.layers]
    saved = [w.copy() for w in weight_arrays]
    scales = [w.std() for w in weight_arrays]
    base_acc = evaluate_accuracy(feature, classifier, data, split, stem=stem)
    means, stds = [], []
    try:
        for sigma in sigmas:
            if sigma == 0:
                means.append(base_acc)
                stds.append(0.0)
                continue
            accs = []
            for _ in range(m_draws):
                for w, orig, scale in zip(weight_arrays, saved, scales):
                    w += sigma * scale * rng.standard_normal(w.shape)
                accs.append(evaluate_accuracy(feature, classifier, data, split, stem=stem))
                for w, orig in zip(weight_arrays, saved):
                    w[...] = orig
            means.append(float(np.mean(accs)))
            stds.append(float(np.std(accs)))
    finally:
        for w, orig in zip(weight_arrays, saved):
            w[...] = orig
    return SharpnessCurve(
        sigmas=np.asarray(list(sigmas), dtype=float),
        mean_acc=np.asarray(means),
        std_acc=np.asarray(stds),
        m_draws=m_draws,
    )


def _softmax(logits):
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def ensemble_baseline(dataset, config, n_models, split=TEST):
    """Average the softmax outputs of n independently seeded plain-AGG models
    (seeds config.seed, config.seed+1, ...) and report target accuracy."""
    if not dataset.homogeneous:
        raise ConfigError("the ensemble baseline requires a homogeneous dataset")
    if n_models < 1:
        raise ConfigError("n_models must be >= 1")
    x, y = dataset.target.split_arrays(split)
    if x.shape[0] == 0:
        raise DataError(f"target has no {split!r} examples")
    probs = np.zeros((x.shape[0], dataset.target.label_space))
    for k in range(n_models):
        cfg = replace(config, seed=config.seed + k, variant=frozenset())
        bank, _ = run_training(dataset, cfg)
        logits, _ = _predict(
            bank.agnostic.feature, bank.agnostic.classifier, x, bank.shared_stem
        )
        probs += _softmax(logits)
    pred = (probs / n_models).argmax(axis=1)
    return float((pred == y).mean())


def fit_linear_probe(x, y, num_classes, l2=1e-2, tol=1e-6, max_iters=100_000):
    """Bias-free multinomial logistic regression with a ridge penalty, trained
    by full-batch accelerated gradient descent.

    Minimises mean cross-entropy(XW) + (l2/2)*||W||^2 from a zero init with a
    Lipschitz step size and the strongly-convex Nesterov momentum, stopping
    when the largest gradient entry is <= tol. Deterministic; callers wanting
    an intercept should centre their features first.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    n, d = x.shape
    if n == 0:
        raise DataError("cannot fit a probe on an empty split")
    if l2 <= 0:
        raise ConfigError("probe ridge weight must be positive")
    # softmax-CE Hessian is bounded by 0.5 * max row norm^2, plus the ridge
    sq_norm = float((x * x).sum(axis=1).max())
    lipschitz = 0.5 * sq_norm + l2
    step = 1.0 / lipschitz
    beta = (1.0 - np.sqrt(l2 / lipschitz)) / (1.0 + np.sqrt(l2 / lipschitz))
    onehot = np.zeros((n, num_classes))
    onehot[np.arange(n), y] = 1.0
    w = np.zeros((d, num_classes))
    w_prev = w
    for _ in range(max_iters):
        v = w + beta * (w - w_prev)
        err = (_softmax(x @ v) - onehot) / n
        grad = x.T @ err + l2 * v
        if np.abs(grad).max() <= tol:
            return v
        w_prev = w
        w = v - step * grad
    return w


def probe_predict(w, x):
    return (x @ w).argmax(axis=1)


@dataclass
class ProbeResult:
    target_domain: str
    accuracy: float
    mode: str

    def to_csv(self):
        return (
            "target,mode,accuracy\n"
            f"{self.target_domain},{self.mode},{self.accuracy!r}\n"
        )


def hetero_probe(bank, target, mode="trained_only", baseline_feature=None, l2=1e-2):
    """Train a linear probe on frozen features of the target's train split and
    report its test-split accuracy.

    mode 'concat' stacks the trained features with baseline_feature's outputs;
    'mean' averages them (requires equal widths). baseline_feature consumes
    raw inputs (compose any stem into it beforehand)."""
    if mode not in PROBE_MODES:
        raise ConfigError(f"unknown probe mode {mode!r}; choose from {PROBE_MODES}")
    if mode != "trained_only" and baseline_feature is None:
        raise ConfigError(f"mode {mode!r} needs a baseline feature extractor")

    def extract(x):
        feats = bank.feature_forward(bank.agnostic.feature, x)
        if mode == "trained_only":
            return feats
        base = baseline_feature.forward(x)
        if mode == "concat":
            return np.hstack([feats, base])
        if feats.shape[1] != base.shape[1]:
            raise ShapeError(
                f"mean mode needs equal widths, got {feats.shape[1]} and {base.shape[1]}"
            )
        return 0.5 * (feats + base)

    x_train, y_train = target.split_arrays(TRAIN)
    x_test, y_test = target.split_arrays(TEST)
    if x_train.shape[0] == 0 or x_test.shape[0] == 0:
        raise DataError("probe needs labeled target train and test splits")
    f_train = extract(x_train)
    # centre on the train split so the bias-free probe gets an implicit
    # intercept; the offset scales with any feature rescaling, so the
    # ridge/scale correspondence of fit_linear_probe carries over intact
    centre = f_train.mean(axis=0)
    w = fit_linear_probe(f_train - centre, y_train, target.label_space, l2=l2)
    pred = probe_predict(w, extract(x_test) - centre)
    return ProbeResult(
        target_domain=target.domain_id,
        accuracy=float((pred == y_test).mean()),
        mode=mode,
    )
