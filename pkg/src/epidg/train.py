"""Episodic multi-domain training.

Five loss terms drive one interleaved update step:

  l_agg   shared feature + shared classifier on pooled domains
  l_ds    one private (feature, classifier) branch per domain, trained only
          on its own domain's batches
  l_epif  shared feature routed into a *partner* domain's classifier, which
          is treated as constant (gradient-blocked): only the feature learns
  l_epic  mirror image: partner domain's feature (constant) into the shared
          classifier: only the classifier learns
  l_epir  shared feature routed into a frozen randomly initialised head,
          one per domain, matching that domain's cardinality; valid even
          when domains have disjoint label spaces

Each step updates the per-domain branches first, then the shared feature
with grad(l_agg + lambda1*l_epif + lambda3*l_epir), then the shared
classifier with grad(l_agg + lambda2*l_epic); the l_agg forward/backward is
computed once and reused by both shared updates. Variants absent from the
config contribute nothing and trigger no partner forwards, as do terms whose
weight evaluates to zero at the current iteration, so zero-weight runs are
bit-identical to runs without those terms.
"""
from __future__ import annotations

import io
from dataclasses import dataclass, field

import numpy as np

from .bank import ArchSpec, build_bank
from .data import VAL, DomainBatcher
from .errors import ConfigError, DataError, NumericsError
from .nn import SgdState, as_schedule, flat_grads, sgd_step, softmax_cross_entropy, spawn_rngs

METRICS_HEADER = "iter,l_agg,l_ds,l_epif,l_epic,l_epir,total,val_acc"

_VALID_VARIANTS = frozenset("FCR")


def parse_variant(v):
    """Accept 'FCR'-style strings or iterables of flags; '' means pure AGG."""
    if v is None:
        return frozenset()
    flags = frozenset(str(f).upper() for f in v)
    bad = flags - _VALID_VARIANTS
    if bad:
        raise ConfigError(f"unknown variant flags {sorted(bad)}; valid flags are F, C, R")
    return flags


@dataclass
class TrainConfig:
    arch: ArchSpec
    total_iters: int
    seed: int = 0
    lambda1: object = 1.0
    lambda2: object = 1.0
    lambda3: object = 0.5
    alpha: object = 0.01
    momentum: float = 0.9
    weight_decay: float = 0.0
    batch_size: int = 32
    warmup_iters: int | None = None   # default: 5% of total_iters
    warmup_includes_agnostic: bool = True
    variant: frozenset = frozenset()
    eval_every: int | None = None     # default: ~20 evals per run

    def __post_init__(self):
        self.variant = parse_variant(self.variant)
        if self.total_iters < 0:
            raise ConfigError("total_iters must be >= 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.warmup_iters is None:
            self.warmup_iters = self.total_iters // 20
        if self.warmup_iters < 0:
            raise ConfigError("warmup_iters must be >= 0")
        if self.eval_every is None:
            self.eval_every = max(1, self.total_iters // 20)
        if self.eval_every < 1:
            raise ConfigError("eval_every must be >= 1")
        self.lambda1 = as_schedule(self.lambda1)
        self.lambda2 = as_schedule(self.lambda2)
        self.lambda3 = as_schedule(self.lambda3)
        self.alpha = as_schedule(self.alpha)


@dataclass(frozen=True)
class EpisodeAssignment:
    """partners[i] = j picks the mismatched partner branch for domain i."""

    partners: tuple

    def __post_init__(self):
        n = len(self.partners)
        for i, j in enumerate(self.partners):
            if not 0 <= j < n or j == i:
                raise ConfigError(f"invalid partner {j} for domain {i}")


def sample_assignment(n, rng):
    """For each domain, a partner drawn uniformly from the other n-1 domains."""
    if n < 2:
        raise ConfigError("episodic partner sampling needs at least 2 domains")
    partners = []
    for i in range(n):
        j = int(rng.integers(0, n - 1))
        if j >= i:
            j += 1
        partners.append(j)
    return EpisodeAssignment(tuple(partners))


@dataclass
class LossReport:
    iteration: int
    l_agg: float = 0.0
    l_ds: float = 0.0
    l_epif: float = 0.0
    l_epic: float = 0.0
    l_epir: float = 0.0
    total: float = 0.0


def _acc(total, grads, scale=1.0):
    """Accumulate per-layer (dW, db) gradients, scaled."""
    if total is None:
        return [(dw * scale, db * scale) for dw, db in grads]
    return [
        (tw + dw * scale, tb + db * scale)
        for (tw, tb), (dw, db) in zip(total, grads)
    ]


def _theta_forward(bank, x):
    return bank.feature_forward(bank.agnostic.feature, x)


def _theta_backward(bank, dfeats):
    """Backprop through the agnostic feature (and shared stem when present)."""
    fg, dh = bank.agnostic.feature.backward(dfeats)
    sg = None
    if bank.shared_stem is not None:
        sg, _ = bank.shared_stem.backward(dh)
    return fg, sg


def loss_agg(bank, batches):
    """Pooled cross-entropy of the shared model, averaged over domains.

    Returns (loss, grads) with grads keyed 'theta', 'psi' and, in shared-stem
    mode, 'stem'.
    """
    n = len(batches)
    total = 0.0
    theta_g = psi_g = stem_g = None
    for i, (x, y) in enumerate(batches):
        feats = _theta_forward(bank, x)
        logits = bank.agnostic.classifier.forward(feats)
        li, dlogits = softmax_cross_entropy(logits, y + bank.label_offsets[i])
        total += li
        cg, dfeats = bank.agnostic.classifier.backward(dlogits / n)
        fg, sg = _theta_backward(bank, dfeats)
        psi_g = _acc(psi_g, cg)
        theta_g = _acc(theta_g, fg)
        if sg is not None:
            stem_g = _acc(stem_g, sg)
    grads = {"theta": theta_g, "psi": psi_g}
    if stem_g is not None:
        grads["stem"] = stem_g
    return total / n, grads


def loss_ds(bank, batches):
    """Per-domain branch cross-entropies.

    The reported loss is the mean over domains; the returned per-branch grads
    are each branch's own (unscaled) gradient, None for frozen branches. A
    shared stem is treated as constant here: it belongs to the shared
    feature's update.
    """
    total = 0.0
    per_branch = []
    for i, (x, y) in enumerate(batches):
        br = bank.specific[i]
        h = bank.feature_forward(br.feature, x)
        logits = br.classifier.forward(h)
        li, dlogits = softmax_cross_entropy(logits, y)
        total += li
        if br.trainable:
            cg, dh = br.classifier.backward(dlogits)
            fg, _ = br.feature.backward(dh)
            per_branch.append({"theta": fg, "psi": cg})
        else:
            per_branch.append(None)
    return total / len(batches), per_branch


def loss_epif(bank, batches, assignment):
    """Shared feature against partner classifiers.

    The partner classifier's backward pass is used only to chain the gradient
    into the feature; its parameter gradients are discarded, realising the
    gradient block."""
    if not bank.homogeneous:
        raise ConfigError("episodic feature training requires a shared label space")
    n = len(batches)
    total = 0.0
    theta_g = stem_g = None
    for i, (x, y) in enumerate(batches):
        j = assignment.partners[i]
        if j == i:
            raise ConfigError(f"partner index equals domain index {i}")
        feats = _theta_forward(bank, x)
        logits = bank.specific[j].classifier.forward(feats)
        li, dlogits = softmax_cross_entropy(logits, y)
        total += li
        _, dfeats = bank.specific[j].classifier.backward(dlogits / n)
        fg, sg = _theta_backward(bank, dfeats)
        theta_g = _acc(theta_g, fg)
        if sg is not None:
            stem_g = _acc(stem_g, sg)
    grads = {"theta": theta_g}
    if stem_g is not None:
        grads["stem"] = stem_g
    return total / n, grads


def loss_epic(bank, batches, assignment):
    """Shared classifier against partner feature extractors (held constant)."""
    if not bank.homogeneous:
        raise ConfigError("episodic classifier training requires a shared label space")
    n = len(batches)
    total = 0.0
    psi_g = None
    for i, (x, y) in enumerate(batches):
        j = assignment.partners[i]
        if j == i:
            raise ConfigError(f"partner index equals domain index {i}")
        h = bank.feature_forward(bank.specific[j].feature, x)
        logits = bank.agnostic.classifier.forward(h)
        li, dlogits = softmax_cross_entropy(logits, y)
        total += li
        cg, _ = bank.agnostic.classifier.backward(dlogits / n)
        psi_g = _acc(psi_g, cg)
    return total / n, {"psi": psi_g}


def loss_epir(bank, batches):
    """Shared feature against the frozen random head of each domain.

    Valid for homogeneous and heterogeneous label spaces alike; domain i's
    data only ever meets its own random head."""
    n = len(batches)
    total = 0.0
    theta_g = stem_g = None
    for i, (x, y) in enumerate(batches):
        head = bank.random[i]
        if len(y) and y.max() >= head.domain_cardinality:
            raise DataError(
                f"domain {i} labels exceed its random head cardinality "
                f"{head.domain_cardinality}"
            )
        feats = _theta_forward(bank, x)
        logits = head.classifier.forward(feats)
        li, dlogits = softmax_cross_entropy(logits, y)
        total += li
        _, dfeats = head.classifier.backward(dlogits / n)
        fg, sg = _theta_backward(bank, dfeats)
        theta_g = _acc(theta_g, fg)
        if sg is not None:
            stem_g = _acc(stem_g, sg)
    grads = {"theta": theta_g}
    if stem_g is not None:
        grads["stem"] = stem_g
    return total / n, grads


@dataclass
class TrainerState:
    """Optimizer states (one per module) plus the episode-sampling stream."""

    assign_rng: object
    sgd: dict = field(default_factory=dict)

    @classmethod
    def create(cls, bank, config, assign_rng):
        def fresh():
            return SgdState(
                lr=config.alpha,
                momentum=config.momentum,
                weight_decay=config.weight_decay,
            )

        sgd = {"theta": fresh(), "psi": fresh()}
        if bank.shared_stem is not None:
            sgd["stem"] = fresh()
        for i in range(bank.n_domains):
            sgd[f"spec{i}.theta"] = fresh()
            sgd[f"spec{i}.psi"] = fresh()
        return cls(assign_rng=assign_rng, sgd=sgd)


def _named(term, fn, *args):
    """Run one loss term, tagging numerical failures with the term name."""
    try:
        return fn(*args)
    except NumericsError as exc:
        raise NumericsError(f"{term}: {exc}") from exc


def train_step(bank, batcher, config, iteration, state):
    """One interleaved update step; returns the per-term LossReport."""
    t = iteration
    n = bank.n_domains
    variant = config.variant
    in_warmup = t < config.warmup_iters
    batches = [batcher.next_batch(i) for i in range(n)]

    # (a) per-domain branches
    ds_value, per_branch = _named("l_ds", loss_ds, bank, batches)
    for i, grads in enumerate(per_branch):
        if grads is None:
            continue
        br = bank.specific[i]
        sgd_step(br.feature.params(), flat_grads(grads["theta"]),
                 state.sgd[f"spec{i}.theta"], t)
        sgd_step(br.classifier.params(), flat_grads(grads["psi"]),
                 state.sgd[f"spec{i}.psi"], t)

    report = LossReport(iteration=t, l_ds=ds_value)
    theta_total = psi_total = stem_total = None

    agnostic_active = (not in_warmup) or config.warmup_includes_agnostic
    if agnostic_active:
        report.l_agg, agg_g = _named("l_agg", loss_agg, bank, batches)
        theta_total = agg_g["theta"]
        psi_total = agg_g["psi"]
        stem_total = agg_g.get("stem")

    lam1 = config.lambda1.value(t) if "F" in variant else 0.0
    lam2 = config.lambda2.value(t) if "C" in variant else 0.0
    lam3 = config.lambda3.value(t) if "R" in variant else 0.0
    if in_warmup:
        lam1 = lam2 = lam3 = 0.0

    assignment = None
    if lam1 != 0.0 or lam2 != 0.0:
        assignment = sample_assignment(n, state.assign_rng)
    if lam1 != 0.0:
        report.l_epif, g = _named("l_epif", loss_epif, bank, batches, assignment)
        theta_total = _acc(theta_total, g["theta"], lam1)
        if "stem" in g:
            stem_total = _acc(stem_total, g["stem"], lam1)
    if lam3 != 0.0:
        report.l_epir, g = _named("l_epir", loss_epir, bank, batches)
        theta_total = _acc(theta_total, g["theta"], lam3)
        if "stem" in g:
            stem_total = _acc(stem_total, g["stem"], lam3)
    if lam2 != 0.0:
        report.l_epic, g = _named("l_epic", loss_epic, bank, batches, assignment)
        psi_total = _acc(psi_total, g["psi"], lam2)

    # (b) shared feature (with stem), then (c) shared classifier; the shared
    # classifier's l_agg gradient was taken before the feature update.
    if theta_total is not None:
        sgd_step(bank.agnostic.feature.params(), flat_grads(theta_total),
                 state.sgd["theta"], t)
    if stem_total is not None:
        sgd_step(bank.shared_stem.params(), flat_grads(stem_total),
                 state.sgd["stem"], t)
    if psi_total is not None:
        sgd_step(bank.agnostic.classifier.params(), flat_grads(psi_total),
                 state.sgd["psi"], t)

    report.total = (
        report.l_agg
        + report.l_ds
        + lam1 * report.l_epif
        + lam2 * report.l_epic
        + lam3 * report.l_epir
    )
    return report


@dataclass
class MetricsRow:
    report: LossReport
    val_acc: float | None = None

    def csv_row(self):
        r = self.report
        val = "" if self.val_acc is None else repr(self.val_acc)
        return (
            f"{r.iteration},{r.l_agg!r},{r.l_ds!r},{r.l_epif!r},"
            f"{r.l_epic!r},{r.l_epir!r},{r.total!r},{val}"
        )


def metrics_to_csv(metrics):
    buf = io.StringIO()
    buf.write(METRICS_HEADER + "\n")
    for row in metrics:
        buf.write(row.csv_row() + "\n")
    return buf.getvalue()


def validate_config(dataset, config):
    if config.arch.input_dim != dataset.dim:
        raise ConfigError(
            f"arch expects input dim {config.arch.input_dim}, dataset has {dataset.dim}"
        )
    if not dataset.homogeneous and config.variant & {"F", "C"}:
        raise ConfigError(
            "variants F and C require a shared label space; use variant R "
            "for heterogeneous domains"
        )
    if dataset.n_domains < 2 and config.variant & {"F", "C"}:
        raise ConfigError("variants F and C need at least 2 source domains")


def _source_val_accuracy(bank, dataset):
    """Mean accuracy of the shared model over the source validation splits
    (labels shifted into the union space for heterogeneous banks). None when
    no domain carries a val split."""
    correct = 0
    seen = 0
    for i, d in enumerate(dataset.sources):
        x, y = d.split_arrays(VAL)
        if x.shape[0] == 0:
            continue
        logits = bank.agnostic.classifier.forward(_theta_forward(bank, x))
        pred = logits.argmax(axis=1)
        correct += int((pred == y + bank.label_offsets[i]).sum())
        seen += x.shape[0]
    return correct / seen if seen else None


def run_training(dataset, config, bank=None):
    """Drive the full loop; returns (bank, metrics rows).

    Deterministic given (seed, config): bank init, batch order and episode
    sampling each use their own child stream of config.seed. Any non-finite
    loss aborts with the offending term and iteration in the message.
    """
    validate_config(dataset, config)
    bank_rng, batch_rng, assign_rng = spawn_rngs(config.seed, 3)
    if bank is None:
        bank = build_bank(
            config.arch,
            dataset.n_domains,
            dataset.label_spaces,
            bank_rng,
            homogeneous=dataset.homogeneous,
        )
    batcher = DomainBatcher(dataset.sources, config.batch_size, batch_rng)
    state = TrainerState.create(bank, config, assign_rng)
    metrics = []
    for t in range(config.total_iters):
        try:
            report = train_step(bank, batcher, config, t, state)
        except NumericsError as exc:
            raise NumericsError(f"training aborted at iteration {t}: {exc}") from exc
        val = None
        if (t + 1) % config.eval_every == 0 or t == config.total_iters - 1:
            val = _source_val_accuracy(bank, dataset)
        metrics.append(MetricsRow(report, val))
    return bank, metrics
