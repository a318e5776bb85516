"""Multi-domain datasets: synthetic covariate-shift generators, feature-CSV
ingestion/export, and per-domain batch sampling.

The synthetic family draws shared (homogeneous) or per-domain (heterogeneous)
class prototypes in a latent space, then gives each domain its own linear
distortion whose magnitude is one dial: a rotation (orthogonalised
identity-plus-Gaussian, so strength 0 means no rotation), a diagonal scaling
in [1-s, 1+s], and a bias of norm s*sqrt(dim). Class noise is Gaussian.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataError
from .nn import check_finite

TRAIN, VAL, TEST = "train", "val", "test"
SPLITS = (TRAIN, VAL, TEST)
NOISE_STD = 0.1


@dataclass
class DomainData:
    """One domain: feature rows, integer labels, and per-example split tags."""

    domain_id: str
    features: np.ndarray
    labels: np.ndarray
    label_space: int
    splits: np.ndarray

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.splits = np.asarray(self.splits)
        if self.features.ndim != 2:
            raise DataError(f"domain {self.domain_id}: features must be 2-D")
        n = self.features.shape[0]
        if self.labels.shape != (n,) or self.splits.shape != (n,):
            raise DataError(f"domain {self.domain_id}: row counts disagree")
        if n and (self.labels.min() < 0 or self.labels.max() >= self.label_space):
            raise DataError(
                f"domain {self.domain_id}: labels outside [0, {self.label_space})"
            )
        bad = set(np.unique(self.splits)) - set(SPLITS)
        if bad:
            raise DataError(f"domain {self.domain_id}: unknown split tags {sorted(bad)}")
        check_finite(f"domain {self.domain_id} features", self.features)

    @property
    def dim(self):
        return self.features.shape[1]

    def indices(self, split):
        if split not in SPLITS:
            raise DataError(f"unknown split {split!r}")
        return np.flatnonzero(self.splits == split)

    def split_arrays(self, split):
        idx = self.indices(split)
        return self.features[idx], self.labels[idx]


@dataclass
class MultiDomainDataset:
    sources: list
    target: DomainData
    homogeneous: bool
    warnings: tuple = ()

    def __post_init__(self):
        ids = [d.domain_id for d in self.sources] + [self.target.domain_id]
        if len(set(ids)) != len(ids):
            raise DataError(f"domain ids must be distinct, got {ids}")
        dims = {d.dim for d in self.sources} | {self.target.dim}
        if len(dims) != 1:
            raise DataError(f"feature dims differ across domains: {sorted(dims)}")
        if self.homogeneous:
            spaces = {d.label_space for d in self.sources} | {self.target.label_space}
            if len(spaces) != 1:
                raise DataError("homogeneous dataset requires one shared label space")

    @property
    def n_domains(self):
        return len(self.sources)

    @property
    def dim(self):
        return self.target.dim

    @property
    def label_spaces(self):
        return tuple(d.label_space for d in self.sources)

    def source_ids(self):
        return [d.domain_id for d in self.sources]


class DomainBatcher:
    """Per-domain shuffled minibatch cursors over the train split.

    Every batch holds exactly batch_size examples from one domain; an epoch
    emits each training example once, dropping the final partial batch. The
    order is reshuffled from the run RNG at each epoch boundary.
    """

    def __init__(self, sources, batch_size, rng):
        if batch_size < 1:
            raise DataError("batch_size must be >= 1")
        self.batch_size = int(batch_size)
        self.rng = rng
        self._x = []
        self._y = []
        self._order = []
        self._cursor = []
        self.epochs = []
        for d in sources:
            x, y = d.split_arrays(TRAIN)
            if x.shape[0] < self.batch_size:
                raise DataError(
                    f"domain {d.domain_id} has {x.shape[0]} training examples, "
                    f"needs at least batch_size={self.batch_size}"
                )
            self._x.append(x)
            self._y.append(y)
            self._order.append(rng.permutation(x.shape[0]))
            self._cursor.append(0)
            self.epochs.append(0)

    @property
    def n_domains(self):
        return len(self._x)

    def batches_per_epoch(self, domain_index):
        return self._x[domain_index].shape[0] // self.batch_size

    def next_batch(self, domain_index):
        i = domain_index
        n = self._x[i].shape[0]
        if self._cursor[i] + self.batch_size > n:
            self._order[i] = self.rng.permutation(n)
            self._cursor[i] = 0
            self.epochs[i] += 1
        sel = self._order[i][self._cursor[i] : self._cursor[i] + self.batch_size]
        self._cursor[i] += self.batch_size
        return self._x[i][sel], self._y[i][sel]


def _split_tags(n, rng, val_fraction, test_fraction):
    n_test = int(round(n * test_fraction))
    n_val = int(round(n * val_fraction))
    if n - n_test - n_val < 1:
        raise DataError("per_domain too small for the requested split fractions")
    tags = np.array([TRAIN] * (n - n_val - n_test) + [VAL] * n_val + [TEST] * n_test)
    return tags[rng.permutation(n)]


def _domain_transform(dim, shift_strength, rng):
    """One domain's linear distortion: (rotation, diag scaling, bias).

    The rotation orthogonalises identity + (s/sqrt(dim)) * Gaussian; the
    1/sqrt(dim) keeps the perturbation's spectral norm ~2s independent of
    dimension, so the strength dial behaves comparably across feature sizes
    and strength 0 is exactly the identity."""
    s = float(shift_strength)
    if s < 0:
        raise DataError("shift_strength must be >= 0")
    g = rng.standard_normal((dim, dim))
    q, r = np.linalg.qr(np.eye(dim) + (s / np.sqrt(dim)) * g)
    signs = np.sign(np.diag(r))
    signs[signs == 0] = 1.0
    rotation = q * signs
    scaling = rng.uniform(1.0 - s, 1.0 + s, size=dim)
    direction = rng.standard_normal(dim)
    norm = np.linalg.norm(direction)
    bias = (s * np.sqrt(dim) / norm) * direction if norm > 0 else np.zeros(dim)
    return rotation, scaling, bias


def _balanced_labels(n, k, rng):
    return rng.permutation(np.arange(n) % k)


def _make_domain(domain_id, prototypes, per_domain, shift_strength, rng,
                 noise_std, val_fraction, test_fraction):
    k, dim = prototypes.shape
    rotation, scaling, bias = _domain_transform(dim, shift_strength, rng)
    labels = _balanced_labels(per_domain, k, rng)
    latent = prototypes[labels] + noise_std * rng.standard_normal((per_domain, dim))
    feats = (latent * scaling) @ rotation.T + bias
    tags = _split_tags(per_domain, rng, val_fraction, test_fraction)
    return DomainData(domain_id, feats, labels, k, tags)


def gen_synthetic_homogeneous(n_domains, n_classes, dim, per_domain, shift_strength,
                              rng, noise_std=NOISE_STD, val_fraction=0.15,
                              test_fraction=0.15):
    """n source domains plus one held-out target, all sharing one prototype
    set; each domain applies its own random distortion of the given strength.
    Deterministic given the generator."""
    if n_domains < 2:
        raise DataError("need at least 2 source domains")
    if n_classes < 2:
        raise DataError("need at least 2 classes")
    if per_domain < 1:
        raise DataError("per_domain must be >= 1")
    warnings = ()
    if dim < n_classes:
        warnings = (f"dim {dim} < n_classes {n_classes}: prototypes may crowd",)
    prototypes = rng.standard_normal((n_classes, dim))
    sources = [
        _make_domain(f"src{i}", prototypes, per_domain, shift_strength, rng,
                     noise_std, val_fraction, test_fraction)
        for i in range(n_domains)
    ]
    target = _make_domain("target", prototypes, per_domain, shift_strength, rng,
                          noise_std, val_fraction, test_fraction)
    return MultiDomainDataset(sources, target, homogeneous=True, warnings=warnings)


def gen_synthetic_heterogeneous(n_source, label_spaces, dim, per_domain,
                                shift_strength, rng, target_label_space,
                                noise_std=NOISE_STD, val_fraction=0.15,
                                test_fraction=0.15):
    """Heterogeneous variant: every domain (and the target) owns a disjoint
    prototype set of its own cardinality."""
    label_spaces = [int(k) for k in label_spaces]
    if len(label_spaces) != n_source:
        raise DataError(f"expected {n_source} label spaces, got {len(label_spaces)}")
    if n_source < 2:
        raise DataError("need at least 2 source domains")
    if per_domain < 1:
        raise DataError("per_domain must be >= 1")
    if any(k < 2 for k in label_spaces) or target_label_space < 2:
        raise DataError("every label space needs at least 2 classes")
    warnings = ()
    if dim < max(max(label_spaces), target_label_space):
        warnings = (f"dim {dim} < largest label space: prototypes may crowd",)
    sources = []
    for i, k in enumerate(label_spaces):
        prototypes = rng.standard_normal((k, dim))
        sources.append(
            _make_domain(f"src{i}", prototypes, per_domain, shift_strength, rng,
                         noise_std, val_fraction, test_fraction)
        )
    target_protos = rng.standard_normal((target_label_space, dim))
    target = _make_domain("target", target_protos, per_domain, shift_strength, rng,
                          noise_std, val_fraction, test_fraction)
    return MultiDomainDataset(sources, target, homogeneous=False, warnings=warnings)


@dataclass
class CsvSchema:
    """How to interpret a set of feature CSV files.

    target_domain names the held-out domain. label_spaces, when omitted, are
    inferred per domain as max(label)+1; homogeneity, when omitted, is
    inferred as "all label spaces equal". Rows tagged split=auto are assigned
    train/test 70/30 using split_seed.
    """

    target_domain: str
    homogeneous: bool | None = None
    label_spaces: dict | None = None
    split_seed: int = 0
    auto_train_fraction: float = 0.7


def save_feature_csv(dataset, out_dir):
    """One CSV per domain (schema: domain,label,split,f0,f1,...) plus a
    meta.json sidecar recording target id, homogeneity and label spaces."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    domains = list(dataset.sources) + [dataset.target]
    for d in domains:
        path = out_dir / f"{d.domain_id}.csv"
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["domain", "label", "split"] + [f"f{j}" for j in range(d.dim)])
            for row in range(d.features.shape[0]):
                writer.writerow(
                    [d.domain_id, int(d.labels[row]), str(d.splits[row])]
                    + [repr(float(v)) for v in d.features[row]]
                )
        paths.append(path)
    meta = {
        "domains": [d.domain_id for d in domains],
        "target": dataset.target.domain_id,
        "homogeneous": dataset.homogeneous,
        "label_spaces": {d.domain_id: int(d.label_space) for d in domains},
        "dim": int(dataset.dim),
        "files": [p.name for p in paths],
    }
    with open(out_dir / "meta.json", "w") as fh:
        json.dump(meta, fh, indent=2)
    return paths


def load_meta(data_dir):
    path = Path(data_dir) / "meta.json"
    if not path.exists():
        return None
    with open(path) as fh:
        return json.load(fh)


def _parse_row(row, n_features, path, line_no):
    if len(row) != 3 + n_features:
        raise DataError(
            f"{path}:{line_no}: expected {3 + n_features} fields, got {len(row)}"
        )
    domain, label_s, split = row[0], row[1], row[2]
    try:
        label = int(label_s)
    except ValueError:
        raise DataError(f"{path}:{line_no}: label {label_s!r} is not an integer") from None
    try:
        feats = [float(v) for v in row[3:]]
    except ValueError:
        raise DataError(f"{path}:{line_no}: non-numeric feature value") from None
    if split not in SPLITS + ("auto",):
        raise DataError(f"{path}:{line_no}: unknown split tag {split!r}")
    return domain, label, split, feats


def load_feature_csv(paths, schema):
    """Load one-or-many CSV files into a MultiDomainDataset.

    Accepts one file per domain or combined files; the `domain` column always
    decides membership. Domain order follows first appearance across files in
    the order given."""
    rows_by_domain = {}
    n_features = None
    for path in [Path(p) for p in paths]:
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if header is None or header[:3] != ["domain", "label", "split"]:
                raise DataError(f"{path}:1: header must start with domain,label,split")
            if n_features is None:
                n_features = len(header) - 3
            elif len(header) - 3 != n_features:
                raise DataError(f"{path}:1: feature count differs from earlier files")
            for line_no, row in enumerate(reader, start=2):
                if not row:
                    continue
                domain, label, split, feats = _parse_row(row, n_features, path, line_no)
                rows_by_domain.setdefault(domain, []).append((label, split, feats))
    if not rows_by_domain:
        raise DataError("no data rows found")
    if schema.target_domain not in rows_by_domain:
        raise DataError(f"target domain {schema.target_domain!r} not present in files")

    auto_rng = np.random.default_rng(schema.split_seed)
    domains = {}
    for domain_id, rows in rows_by_domain.items():
        labels = np.array([r[0] for r in rows], dtype=np.int64)
        feats = np.array([r[2] for r in rows], dtype=np.float64)
        splits = np.array([r[1] for r in rows])
        declared = (schema.label_spaces or {}).get(domain_id)
        label_space = int(declared) if declared is not None else int(labels.max()) + 1
        if labels.max() >= label_space:
            raise DataError(
                f"domain {domain_id}: label {labels.max()} outside declared range "
                f"[0, {label_space})"
            )
        auto = splits == "auto"
        if auto.any():
            idx = np.flatnonzero(auto)
            perm = auto_rng.permutation(len(idx))
            n_train = int(round(len(idx) * schema.auto_train_fraction))
            assigned = np.array([TEST] * len(idx), dtype=object)
            assigned[perm[:n_train]] = TRAIN
            splits = splits.astype(object)
            splits[idx] = assigned
            splits = splits.astype(str)
        domains[domain_id] = DomainData(domain_id, feats, labels, label_space, splits)

    target = domains.pop(schema.target_domain)
    sources = list(domains.values())
    if not sources:
        raise DataError("no source domains left after removing the target")
    homogeneous = schema.homogeneous
    if homogeneous is None:
        spaces = {d.label_space for d in sources} | {target.label_space}
        homogeneous = len(spaces) == 1
    return MultiDomainDataset(sources, target, homogeneous=homogeneous)
