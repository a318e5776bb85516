"""Parameter bank: the agnostic branch, per-domain branches, frozen random
classifier heads, optional globally shared stem, and checkpoint I/O.

An MLP architecture is a chain input -> hidden... -> classes with ReLU on
every layer except the final linear one. `split_point` says how many layers
belong to the feature extractor; the rest form the classifier head. With
`stem_layers` > 0 the first layers of the feature side live in a single
shared stem referenced by all branches.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import CheckpointError, ConfigError, ShapeError
from .nn import IDENTITY, RELU, DenseLayer, Mlp, build_mlp

CHECKPOINT_MAGIC = b"EPIDG"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ArchSpec:
    """Layer layout shared by the agnostic and domain-specific branches."""

    input_dim: int
    hidden_dims: tuple
    split_point: int | None = None  # layers on the feature side; default: all hidden
    stem_layers: int = 0            # leading feature layers shared across branches

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(d) for d in self.hidden_dims))
        if self.input_dim < 1 or any(d < 1 for d in self.hidden_dims):
            raise ConfigError("all layer dims must be >= 1")
        if not self.hidden_dims:
            raise ConfigError("need at least one hidden layer to split into feature/classifier")
        split = self.split_point if self.split_point is not None else len(self.hidden_dims)
        object.__setattr__(self, "split_point", int(split))
        n_layers = len(self.hidden_dims) + 1
        if not 1 <= self.split_point <= n_layers - 1:
            raise ConfigError(
                f"split_point {self.split_point} out of range [1, {n_layers - 1}]"
            )
        if not 0 <= self.stem_layers < self.split_point:
            raise ConfigError(
                f"stem_layers {self.stem_layers} must lie in [0, split_point)"
            )

    @property
    def feature_dim(self):
        """Output width of the feature side."""
        return self.hidden_dims[self.split_point - 1]

    def chain(self, out_dim):
        return (self.input_dim,) + self.hidden_dims + (int(out_dim),)

    def stem_dims(self):
        return self.chain(0)[: self.stem_layers + 1]

    def feature_dims(self):
        """Dims of the per-branch feature layers (after the stem)."""
        return self.chain(0)[self.stem_layers : self.split_point + 1]

    def classifier_dims(self, out_dim):
        return self.chain(out_dim)[self.split_point :]


@dataclass
class BranchPair:
    """A feature extractor plus its classifier head."""

    feature: Mlp
    classifier: Mlp
    trainable: bool = True

    def __post_init__(self):
        if self.feature.out_dim != self.classifier.in_dim:
            raise ShapeError(
                f"feature out {self.feature.out_dim} != classifier in {self.classifier.in_dim}"
            )


@dataclass
class RandomClassifier:
    """Single frozen linear head, sampled once at bank construction."""

    classifier: Mlp
    domain_cardinality: int


@dataclass
class DomainBank:
    arch: ArchSpec
    label_spaces: tuple
    homogeneous: bool
    agnostic: BranchPair
    specific: list
    random: list
    shared_stem: Mlp | None = None
    label_offsets: tuple = field(init=False)

    def __post_init__(self):
        if len(self.specific) != len(self.random):
            raise ShapeError("specific and random lists must have equal length")
        if len(self.label_spaces) != len(self.specific):
            raise ShapeError("label_spaces length must equal number of domains")
        if self.homogeneous:
            offsets = (0,) * len(self.label_spaces)
        else:
            # Heterogeneous: the agnostic head classifies over the disjoint
            # union of all source label spaces; domain i's labels are shifted
            # by the total cardinality of the domains before it.
            offsets = tuple(int(x) for x in np.cumsum((0,) + self.label_spaces[:-1]))
        self.label_offsets = offsets

    @property
    def n_domains(self):
        return len(self.specific)

    @property
    def agnostic_out(self):
        return self.agnostic.classifier.out_dim

    def feature_forward(self, feature, x):
        """Run the shared stem (if any), then the given feature extractor."""
        h = self.shared_stem.forward(x) if self.shared_stem is not None else x
        return feature.forward(h)

    def all_mlps(self):
        """(name, Mlp) pairs in checkpoint declaration order."""
        out = []
        if self.shared_stem is not None:
            out.append(("stem", self.shared_stem))
        out.append(("agnostic.feature", self.agnostic.feature))
        out.append(("agnostic.classifier", self.agnostic.classifier))
        for i, br in enumerate(self.specific):
            out.append((f"specific[{i}].feature", br.feature))
            out.append((f"specific[{i}].classifier", br.classifier))
        for i, rc in enumerate(self.random):
            out.append((f"random[{i}]", rc.classifier))
        return out


def _activations_for(dims, final_identity):
    n = len(dims) - 1
    acts = [RELU] * n
    if final_identity:
        acts[-1] = IDENTITY
    return acts


def _build_feature(arch, rng):
    dims = arch.feature_dims()
    return build_mlp(dims, [RELU] * (len(dims) - 1), rng)


def _build_classifier(arch, out_dim, rng):
    dims = arch.classifier_dims(out_dim)
    return build_mlp(dims, _activations_for(dims, final_identity=True), rng)


def build_bank(arch, n_domains, label_spaces, rng, homogeneous=None):
    """Initialise every parameter set: one agnostic branch, n domain-specific
    branches, and n frozen random heads, all independently sampled from `rng`
    in a fixed order (stem, agnostic, specific 0..n-1, random 0..n-1).
    """
    label_spaces = tuple(int(k) for k in label_spaces)
    if n_domains < 1:
        raise ConfigError("need at least one source domain")
    if len(label_spaces) != n_domains:
        raise ConfigError(f"expected {n_domains} label spaces, got {len(label_spaces)}")
    if any(k < 2 for k in label_spaces):
        raise ConfigError("every label space needs at least 2 classes")
    if homogeneous is None:
        homogeneous = len(set(label_spaces)) == 1
    if homogeneous and len(set(label_spaces)) != 1:
        raise ConfigError("homogeneous bank requires equal label spaces")

    stem = None
    if arch.stem_layers > 0:
        dims = arch.stem_dims()
        stem = build_mlp(dims, [RELU] * (len(dims) - 1), rng)
    agnostic_out = label_spaces[0] if homogeneous else sum(label_spaces)
    agnostic = BranchPair(
        feature=_build_feature(arch, rng),
        classifier=_build_classifier(arch, agnostic_out, rng),
    )
    specific = [
        BranchPair(
            feature=_build_feature(arch, rng),
            classifier=_build_classifier(arch, label_spaces[i], rng),
        )
        for i in range(n_domains)
    ]
    random_heads = [
        RandomClassifier(
            classifier=Mlp([DenseLayer.initialized(arch.feature_dim, label_spaces[i], IDENTITY, rng)]),
            domain_cardinality=label_spaces[i],
        )
        for i in range(n_domains)
    ]
    return DomainBank(
        arch=arch,
        label_spaces=label_spaces,
        homogeneous=homogeneous,
        agnostic=agnostic,
        specific=specific,
        random=random_heads,
        shared_stem=stem,
    )


def freeze_specific(bank):
    """Mark every domain-specific branch frozen; their L_ds updates become no-ops."""
    for br in bank.specific:
        br.trainable = False
    return bank


def unfreeze_specific(bank):
    for br in bank.specific:
        br.trainable = True
    return bank


def clone_bank(bank):
    """Deep copy (stem sharing preserved as a single copy)."""
    return DomainBank(
        arch=bank.arch,
        label_spaces=bank.label_spaces,
        homogeneous=bank.homogeneous,
        agnostic=BranchPair(
            bank.agnostic.feature.copy(),
            bank.agnostic.classifier.copy(),
            bank.agnostic.trainable,
        ),
        specific=[
            BranchPair(br.feature.copy(), br.classifier.copy(), br.trainable)
            for br in bank.specific
        ],
        random=[
            RandomClassifier(rc.classifier.copy(), rc.domain_cardinality)
            for rc in bank.random
        ],
        shared_stem=bank.shared_stem.copy() if bank.shared_stem is not None else None,
    )


def _write_tensor(fh, arr):
    arr = np.atleast_2d(np.asarray(arr, dtype=np.float64))
    fh.write(struct.pack("<II", arr.shape[0], arr.shape[1]))
    fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def _read_exact(fh, n, what):
    data = fh.read(n)
    if len(data) != n:
        raise CheckpointError(f"truncated checkpoint while reading {what}")
    return data


def _read_tensor(fh, expect_shape, what):
    rows, cols = struct.unpack("<II", _read_exact(fh, 8, f"{what} header"))
    if (rows, cols) != tuple(expect_shape):
        raise CheckpointError(
            f"dimension header for {what} is ({rows}, {cols}), expected {tuple(expect_shape)}"
        )
    raw = _read_exact(fh, rows * cols * 8, what)
    return np.frombuffer(raw, dtype="<f8").reshape(rows, cols).astype(np.float64)


def checkpoint_save(bank, path):
    """Versioned binary dump; round-trips bit-exactly."""
    arch = bank.arch
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        flags = (1 if bank.shared_stem is not None else 0) | (
            2 if bank.homogeneous else 0
        )
        fh.write(
            struct.pack(
                "<HBIIII",
                CHECKPOINT_VERSION,
                flags,
                bank.n_domains,
                arch.input_dim,
                len(arch.hidden_dims),
                arch.split_point,
            )
        )
        fh.write(struct.pack(f"<{len(arch.hidden_dims)}I", *arch.hidden_dims))
        fh.write(struct.pack("<II", arch.stem_layers, bank.agnostic_out))
        fh.write(struct.pack(f"<{bank.n_domains}I", *bank.label_spaces))
        fh.write(struct.pack("<B", 1 if bank.agnostic.trainable else 0))
        fh.write(
            struct.pack(
                f"<{bank.n_domains}B",
                *(1 if br.trainable else 0 for br in bank.specific),
            )
        )
        for _, mlp in bank.all_mlps():
            for layer in mlp.layers:
                _write_tensor(fh, layer.weights)
                _write_tensor(fh, layer.bias.reshape(1, -1))
    return path


def _read_mlp(fh, dims, activations, name):
    layers = []
    for i in range(len(dims) - 1):
        w = _read_tensor(fh, (dims[i], dims[i + 1]), f"{name} layer {i} weights")
        b = _read_tensor(fh, (1, dims[i + 1]), f"{name} layer {i} bias")
        layers.append(DenseLayer(w, b.ravel(), activations[i]))
    return Mlp(layers)


def checkpoint_load(path, expect_n_domains=None):
    with open(path, "rb") as fh:
        magic = _read_exact(fh, len(CHECKPOINT_MAGIC), "magic")
        if magic != CHECKPOINT_MAGIC:
            raise CheckpointError(f"bad magic bytes {magic!r}")
        version, flags, n_domains, input_dim, n_hidden, split_point = struct.unpack(
            "<HBIIII", _read_exact(fh, 19, "header")
        )
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(
                f"checkpoint version {version}, this build reads {CHECKPOINT_VERSION}"
            )
        if expect_n_domains is not None and n_domains != expect_n_domains:
            raise CheckpointError(
                f"checkpoint has {n_domains} domains, expected {expect_n_domains}"
            )
        hidden = struct.unpack(f"<{n_hidden}I", _read_exact(fh, 4 * n_hidden, "hidden dims"))
        stem_layers, agnostic_out = struct.unpack("<II", _read_exact(fh, 8, "stem/out"))
        label_spaces = struct.unpack(
            f"<{n_domains}I", _read_exact(fh, 4 * n_domains, "label spaces")
        )
        (agnostic_trainable,) = struct.unpack("<B", _read_exact(fh, 1, "flags"))
        spec_trainable = struct.unpack(
            f"<{n_domains}B", _read_exact(fh, n_domains, "trainable flags")
        )
        try:
            arch = ArchSpec(
                input_dim=input_dim,
                hidden_dims=hidden,
                split_point=split_point,
                stem_layers=stem_layers,
            )
        except ConfigError as exc:
            raise CheckpointError(f"inconsistent architecture header: {exc}") from exc
        homogeneous = bool(flags & 2)

        stem = None
        if flags & 1:
            dims = arch.stem_dims()
            stem = _read_mlp(fh, dims, [RELU] * (len(dims) - 1), "stem")
        fdims = arch.feature_dims()
        facts = [RELU] * (len(fdims) - 1)
        agn_cdims = arch.classifier_dims(agnostic_out)
        agnostic = BranchPair(
            _read_mlp(fh, fdims, facts, "agnostic.feature"),
            _read_mlp(
                fh, agn_cdims, _activations_for(agn_cdims, True), "agnostic.classifier"
            ),
            trainable=bool(agnostic_trainable),
        )
        specific = []
        for i in range(n_domains):
            cdims = arch.classifier_dims(label_spaces[i])
            specific.append(
                BranchPair(
                    _read_mlp(fh, fdims, facts, f"specific[{i}].feature"),
                    _read_mlp(
                        fh, cdims, _activations_for(cdims, True), f"specific[{i}].classifier"
                    ),
                    trainable=bool(spec_trainable[i]),
                )
            )
        random_heads = [
            RandomClassifier(
                _read_mlp(
                    fh,
                    (arch.feature_dim, label_spaces[i]),
                    [IDENTITY],
                    f"random[{i}]",
                ),
                domain_cardinality=label_spaces[i],
            )
            for i in range(n_domains)
        ]
        if fh.read(1):
            raise CheckpointError("trailing bytes after final tensor")
    return DomainBank(
        arch=arch,
        label_spaces=tuple(label_spaces),
        homogeneous=homogeneous,
        agnostic=agnostic,
        specific=specific,
        random=random_heads,
        shared_stem=stem,
    )
