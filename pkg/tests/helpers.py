"""Shared test oracles: finite differences and nested-loop reference forwards,
kept independent of the code paths they verify."""
import numpy as np


def fd_grad(loss_fn, param, eps=1e-6):
    """Central finite differences of a scalar-valued loss_fn() w.r.t. `param`.

    loss_fn must recompute the loss from scratch (fresh forwards) on every
    call; `param` is mutated in place and restored.
    """
    numeric = np.zeros_like(param)
    it = np.nditer(param, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        orig = param[idx]
        param[idx] = orig + eps
        f_plus = loss_fn()
        param[idx] = orig - eps
        f_minus = loss_fn()
        param[idx] = orig
        numeric[idx] = (f_plus - f_minus) / (2.0 * eps)
    return numeric


def naive_matmul(a, b):
    """Nested-loop matrix multiply, independent of numpy's dot path."""
    n, k = a.shape
    k2, m = b.shape
    assert k == k2
    out = np.zeros((n, m))
    for i in range(n):
        for j in range(m):
            s = 0.0
            for t in range(k):
                s += a[i, t] * b[t, j]
            out[i, j] = s
    return out


def naive_mlp_forward(layers, x):
    """Reference forward pass using the nested-loop matmul.

    layers: list of (W, b, activation) with activation in {"relu", "identity"}.
    """
    out = x
    for w, b, act in layers:
        out = naive_matmul(out, w) + b
        if act == "relu":
            out = np.where(out > 0.0, out, 0.0)
    return out


def relu_kink_free(model, batch):
    """True if no hidden ReLU pre-activation is exactly zero for this batch.

    Finite differences are meaningless at a ReLU kink, and exact zeros do
    occur with zero-initialised biases (a fully dead input row propagates
    exact zeros). Gradient-check tests redraw batches until this holds.
    """
    h = batch
    for layer in model.layers:
        pre = h @ layer.weights + layer.bias
        if layer.activation == "relu":
            if np.any(pre == 0.0):
                return False
            h = np.maximum(pre, 0.0)
        else:
            h = pre
    return True


def kink_free_batch(model, rng, batch_size, max_tries=50):
    """Draw a standard-normal batch avoiding exact ReLU kinks."""
    for _ in range(max_tries):
        batch = rng.standard_normal((batch_size, model.in_dim))
        if relu_kink_free(model, batch):
            return batch
    raise AssertionError("could not draw a kink-free batch")


def naive_cross_entropy(logits, labels):
    """Reference mean cross-entropy via explicit per-row softmax."""
    total = 0.0
    for i in range(logits.shape[0]):
        row = logits[i] - logits[i].max()
        p = np.exp(row) / np.exp(row).sum()
        total += -np.log(p[labels[i]])
    return total / logits.shape[0]


def mlp_as_layers(mlp):
    return [(l.weights, l.bias, l.activation) for l in mlp.layers]


def jitter_biases(bank, seed=123, scale=0.05):
    """Give every bias in the bank a small random value.

    Zero-initialised biases make exact ReLU kinks (pre-activation 0.0) easy
    to hit, where finite differences are biased; gradient tests jitter first
    so they compare at differentiable points.
    """
    rng = np.random.default_rng(seed)
    for _, mlp in bank.all_mlps():
        for layer in mlp.layers:
            layer.bias[...] = scale * rng.standard_normal(layer.bias.shape)
    return bank


def standalone_agg_training(dataset, config):
    """Plain pooled-domains trainer written without the episodic machinery.

    Uses the same seed-derivation convention and nn primitives as the real
    trainer but drives its own loop: one forward/backward of the shared model
    per domain per iteration, mean gradient, one momentum-SGD step for the
    feature then one for the classifier. Returns (bank, per-iteration
    parameter snapshots of the shared model).
    """
    from epidg.bank import build_bank
    from epidg.data import DomainBatcher
    from epidg.nn import SgdState, flat_grads, sgd_step, softmax_cross_entropy, spawn_rngs

    bank_rng, batch_rng, _ = spawn_rngs(config.seed, 3)
    bank = build_bank(
        config.arch, dataset.n_domains, dataset.label_spaces, bank_rng,
        homogeneous=dataset.homogeneous,
    )
    batcher = DomainBatcher(dataset.sources, config.batch_size, batch_rng)
    theta_state = SgdState(config.alpha, config.momentum, config.weight_decay)
    psi_state = SgdState(config.alpha, config.momentum, config.weight_decay)
    feature, classifier = bank.agnostic.feature, bank.agnostic.classifier
    n = dataset.n_domains
    snapshots = []
    for t in range(config.total_iters):
        batches = [batcher.next_batch(i) for i in range(n)]
        theta_tot = psi_tot = None
        for x, y in batches:
            logits = classifier.forward(feature.forward(x))
            _, dlogits = softmax_cross_entropy(logits, y)
            cg, dh = classifier.backward(dlogits / n)
            fg, _ = feature.backward(dh)
            if theta_tot is None:
                theta_tot = fg
                psi_tot = cg
            else:
                theta_tot = [(a + b, c + d) for (a, c), (b, d) in zip(theta_tot, fg)]
                psi_tot = [(a + b, c + d) for (a, c), (b, d) in zip(psi_tot, cg)]
        sgd_step(feature.params(), flat_grads(theta_tot), theta_state, t)
        sgd_step(classifier.params(), flat_grads(psi_tot), psi_state, t)
        snapshots.append([p.copy() for p in feature.params() + classifier.params()])
    return bank, snapshots


def agnostic_snapshot(bank):
    return [p.copy() for p in bank.agnostic.feature.params() + bank.agnostic.classifier.params()]
