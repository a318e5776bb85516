"""Dense-MLP substrate: layers, softmax cross-entropy, momentum SGD, schedules,
seeded RNG and a finite-difference gradient checker.

Tensors are plain numpy arrays: 2-D float64 for activations/weights, 1-D for
biases. Everything runs in 64-bit so training is bit-reproducible and gradient
checks have headroom. Every public operation validates finiteness; NaN/Inf
raise NumericsError instead of propagating silently.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import NumericsError, ShapeError

RELU = "relu"
IDENTITY = "identity"
ACTIVATIONS = (RELU, IDENTITY)

# Relative-error floor for gradient comparisons. Central differences on O(1)
# losses carry ~1e-10 absolute noise; dividing by anything smaller than this
# floor would let that noise dominate coordinates whose true gradient is tiny.
REL_ERROR_FLOOR = 1e-4


def seeded_rng(seed):
    """Deterministic generator: the same seed always yields the same stream."""
    return np.random.default_rng(seed)


def spawn_rngs(seed, n):
    """Derive n independent child generators from one root seed.

    Consumers that must stay bit-reproducible (bank init, batching, episode
    sampling) each take their own child so adding or removing one consumer
    does not shift the streams of the others.
    """
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(n)]


def check_finite(name, arr):
    """Raise NumericsError if `arr` contains NaN/Inf."""
    if not np.all(np.isfinite(arr)):
        raise NumericsError(f"non-finite values in {name}")
    return arr


def as_tensor2(x, name="tensor"):
    """Coerce to a finite 2-D float64 array."""
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {arr.shape}")
    return check_finite(name, arr)


def gaussian_init(rows, cols, scale, rng):
    """rows x cols Gaussian draw with standard deviation `scale`."""
    return scale * rng.standard_normal((rows, cols))


class DenseLayer:
    """One dense layer: y = act(x @ W + b) with W of shape (in_dim, out_dim)."""

    def __init__(self, weights, bias, activation):
        weights = as_tensor2(weights, "weights")
        bias = np.asarray(bias, dtype=np.float64)
        if bias.ndim != 1 or bias.shape[0] != weights.shape[1]:
            raise ShapeError(
                f"bias shape {bias.shape} does not match weights {weights.shape}"
            )
        if activation not in ACTIVATIONS:
            raise ShapeError(f"unknown activation {activation!r}")
        check_finite("bias", bias)
        self.weights = weights
        self.bias = bias
        self.activation = activation
        self._x = None
        self._pre = None

    @classmethod
    def initialized(cls, in_dim, out_dim, activation, rng):
        """Fan-in scaled Gaussian weights (sqrt(2/fan_in) for ReLU,
        sqrt(1/fan_in) for identity), zero bias."""
        gain = 2.0 if activation == RELU else 1.0
        std = math.sqrt(gain / in_dim)
        return cls(gaussian_init(in_dim, out_dim, std, rng), np.zeros(out_dim), activation)

    @property
    def in_dim(self):
        return self.weights.shape[0]

    @property
    def out_dim(self):
        return self.weights.shape[1]

    def forward(self, x):
        x = as_tensor2(x, "layer input")
        if x.shape[1] != self.in_dim:
            raise ShapeError(f"input has {x.shape[1]} columns, layer expects {self.in_dim}")
        pre = x @ self.weights + self.bias
        self._x = x
        self._pre = pre
        out = np.maximum(pre, 0.0) if self.activation == RELU else pre
        return check_finite("layer output", out)

    def backward(self, dout):
        """Return ((dW, db), dx) for the most recent forward; clears the cache."""
        if self._x is None:
            raise ShapeError("backward called without a preceding forward")
        dout = as_tensor2(dout, "dout")
        if dout.shape != self._pre.shape:
            raise ShapeError(f"dout shape {dout.shape} != output shape {self._pre.shape}")
        dpre = dout * (self._pre > 0.0) if self.activation == RELU else dout
        dw = self._x.T @ dpre
        db = dpre.sum(axis=0)
        dx = dpre @ self.weights.T
        self._x = None
        self._pre = None
        return (dw, db), check_finite("dinput", dx)


class Mlp:
    """Ordered stack of dense layers. forward caches per-layer state so the
    matching backward can produce parameter gradients plus the gradient with
    respect to the input batch (for chaining through partner modules)."""

    def __init__(self, layers):
        layers = list(layers)
        if not layers:
            raise ShapeError("Mlp needs at least one layer")
        for a, b in zip(layers, layers[1:]):
            if a.out_dim != b.in_dim:
                raise ShapeError(
                    f"layer dims do not chain: {a.out_dim} -> {b.in_dim}"
                )
        self.layers = layers

    @property
    def in_dim(self):
        return self.layers[0].in_dim

    @property
    def out_dim(self):
        return self.layers[-1].out_dim

    def forward(self, batch):
        out = as_tensor2(batch, "batch")
        for layer in self.layers:
            out = layer.forward(out)
        return out

    def backward(self, dout):
        """Return (grads, dinput).

        grads is a list of (dW, db) pairs, one per layer in forward order.
        dinput is the gradient w.r.t. the batch passed to the last forward.
        """
        grads = [None] * len(self.layers)
        d = dout
        for k in range(len(self.layers) - 1, -1, -1):
            grads[k], d = self.layers[k].backward(d)
        return grads, d

    def params(self):
        """Flat parameter list [W0, b0, W1, b1, ...] (live arrays, not copies)."""
        out = []
        for layer in self.layers:
            out.append(layer.weights)
            out.append(layer.bias)
        return out

    def param_copy(self):
        return [p.copy() for p in self.params()]

    def load_param_copy(self, snapshot):
        params = self.params()
        if len(snapshot) != len(params):
            raise ShapeError("snapshot length does not match parameter count")
        for p, s in zip(params, snapshot):
            if p.shape != s.shape:
                raise ShapeError("snapshot shapes do not match parameters")
            p[...] = s

    def copy(self):
        return Mlp(
            [
                DenseLayer(l.weights.copy(), l.bias.copy(), l.activation)
                for l in self.layers
            ]
        )


def flat_grads(grads):
    """Flatten [(dW, db), ...] into [dW0, db0, dW1, db1, ...] matching Mlp.params()."""
    out = []
    for dw, db in grads:
        out.append(dw)
        out.append(db)
    return out


def build_mlp(dims, activations, rng):
    """Construct an Mlp from a dim chain [d0, d1, ..., dk] and one activation
    per layer."""
    if len(dims) < 2 or len(activations) != len(dims) - 1:
        raise ShapeError("dims/activations mismatch")
    return Mlp(
        [
            DenseLayer.initialized(dims[i], dims[i + 1], activations[i], rng)
            for i in range(len(dims) - 1)
        ]
    )


def softmax_cross_entropy(logits, labels):
    """Mean cross-entropy over a batch of logits against integer class labels.

    Returns (loss, dlogits) with dlogits = (softmax - one_hot) / batch_size,
    i.e. the gradient of the mean loss w.r.t. the logits.
    """
    logits = as_tensor2(logits, "logits")
    n, k = logits.shape
    if n == 0:
        raise ShapeError("empty batch")
    labels = np.asarray(labels)
    if labels.shape != (n,):
        raise ShapeError(f"labels shape {labels.shape} != ({n},)")
    if not np.issubdtype(labels.dtype, np.integer):
        labels = labels.astype(np.int64)
    if labels.min() < 0 or labels.max() >= k:
        raise ShapeError(f"label out of range [0, {k})")
    shifted = logits - logits.max(axis=1, keepdims=True)
    logsumexp = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logprobs = shifted - logsumexp
    loss = float(-logprobs[np.arange(n), labels].mean())
    dlogits = np.exp(logprobs)
    dlogits[np.arange(n), labels] -= 1.0
    dlogits /= n
    check_finite("cross-entropy loss", np.array([loss]))
    check_finite("dlogits", dlogits)
    return loss, dlogits


class Constant:
    """Schedule that always evaluates to the same value."""

    def __init__(self, value):
        value = float(value)
        if not (value >= 0.0 and math.isfinite(value)):
            raise ShapeError(f"constant schedule value must be finite and >= 0, got {value}")
        self.base = value

    def value(self, t):
        return self.base

    def __repr__(self):
        return f"Constant({self.base!r})"

    def __eq__(self, other):
        return isinstance(other, Constant) and self.base == other.base


class StepDecay:
    """base divided by `factor` at each milestone iteration in decay_iters."""

    def __init__(self, base, decay_iters, factor):
        self.base = float(base)
        self.decay_iters = tuple(int(m) for m in decay_iters)
        self.factor = float(factor)
        if self.base <= 0 or self.factor <= 0:
            raise ShapeError("StepDecay needs positive base and factor")
        if any(m < 0 for m in self.decay_iters):
            raise ShapeError("StepDecay milestones must be >= 0")

    def value(self, t):
        drops = sum(1 for m in self.decay_iters if t >= m)
        return self.base / self.factor**drops

    def __repr__(self):
        return f"StepDecay({self.base!r}, {self.decay_iters!r}, {self.factor!r})"

    def __eq__(self, other):
        return (
            isinstance(other, StepDecay)
            and (self.base, self.decay_iters, self.factor)
            == (other.base, other.decay_iters, other.factor)
        )


class Reciprocal:
    """numerator / (t + offset); positive for all t >= 0 when offset > 0."""

    def __init__(self, numerator, offset):
        self.numerator = float(numerator)
        self.offset = float(offset)
        if self.numerator <= 0 or self.offset <= 0:
            raise ShapeError("Reciprocal needs positive numerator and offset")

    def value(self, t):
        return self.numerator / (t + self.offset)

    def __repr__(self):
        return f"Reciprocal({self.numerator!r}, {self.offset!r})"

    def __eq__(self, other):
        return isinstance(other, Reciprocal) and (self.numerator, self.offset) == (
            other.numerator,
            other.offset,
        )


def as_schedule(x):
    """Coerce a bare number to a Constant schedule; pass schedules through."""
    if isinstance(x, (Constant, StepDecay, Reciprocal)):
        return x
    return Constant(float(x))


@dataclass
class SgdState:
    """Momentum-SGD state: lr (scalar or schedule), momentum, weight decay and
    lazily created velocity buffers.

    One state is bound to one fixed parameter list; callers must pass the same
    tensors in the same order on every step.
    """

    lr: object
    momentum: float = 0.0
    weight_decay: float = 0.0
    velocities: list = field(default_factory=list, repr=False)

    def __post_init__(self):
        self.lr = as_schedule(self.lr)


def sgd_step(params, grads, state, iteration=0):
    """Heavy-ball update, in place:

        v <- momentum*v + (grad + wd*param);  param <- param - alpha*v

    Weight decay enters as an additive L2 term in the gradient. Returns the
    (mutated) params.
    """
    params = list(params)
    grads = list(grads)
    if len(params) != len(grads):
        raise ShapeError(f"{len(params)} params vs {len(grads)} grads")
    if not state.velocities:
        state.velocities = [np.zeros_like(p) for p in params]
    if len(state.velocities) != len(params):
        raise ShapeError("optimizer state bound to a different parameter list")
    alpha = state.lr.value(iteration)
    for p, g, v in zip(params, grads, state.velocities):
        if p.shape != g.shape or p.shape != v.shape:
            raise ShapeError(f"shape mismatch: param {p.shape}, grad {g.shape}")
        v *= state.momentum
        v += g
        if state.weight_decay:
            v += state.weight_decay * p
        p -= alpha * v
    return params


def max_relative_error(analytic, numeric, floor=REL_ERROR_FLOOR):
    """max |a - n| / max(|a|, |n|, floor) over all elements of both arrays."""
    a = np.asarray(analytic, dtype=np.float64)
    b = np.asarray(numeric, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch {a.shape} vs {b.shape}")
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    if a.size == 0:
        return 0.0
    return float((np.abs(a - b) / denom).max())


@dataclass
class GradCheckReport:
    max_rel_error: float
    tolerance: float
    passed: bool
    worst_layer: int
    worst_param: str


def grad_check(model, batch, labels, tolerance=1e-5, eps=1e-6):
    """Compare the model's analytic gradients of the mean softmax cross-entropy
    against central finite differences, elementwise over every parameter.

    Report-only: never raises on failure. Intended for small models
    (<= ~1e4 parameters).
    """
    batch = as_tensor2(batch, "batch")

    def loss_value():
        out = model.forward(batch)
        shifted = out - out.max(axis=1, keepdims=True)
        logprobs = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
        return float(-logprobs[np.arange(out.shape[0]), labels].mean())

    out = model.forward(batch)
    loss, dlogits = softmax_cross_entropy(out, labels)
    grads, _ = model.backward(dlogits)

    worst = (0.0, 0, "weights")
    for li, layer in enumerate(model.layers):
        for name, param, grad in (
            ("weights", layer.weights, grads[li][0]),
            ("bias", layer.bias, grads[li][1]),
        ):
            numeric = np.zeros_like(param)
            it = np.nditer(param, flags=["multi_index"])
            for _ in it:
                idx = it.multi_index
                orig = param[idx]
                param[idx] = orig + eps
                f_plus = loss_value()
                param[idx] = orig - eps
                f_minus = loss_value()
                param[idx] = orig
                numeric[idx] = (f_plus - f_minus) / (2.0 * eps)
            err = max_relative_error(grad, numeric)
            if err > worst[0]:
                worst = (err, li, name)
    max_err = worst[0]
    return GradCheckReport(
        max_rel_error=max_err,
        tolerance=tolerance,
        passed=max_err <= tolerance,
        worst_layer=worst[1],
        worst_param=worst[2],
    )
