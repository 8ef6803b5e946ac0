"""Independent oracles shared by the unit and acceptance suites.

Everything here recomputes expected values from first principles (finite
differences, brute-force search, closed forms) without touching the
package's gradient or calibration code paths.
"""

import numpy as np

from miadip import nn


def finite_diff_grads(net, batch, labels, reg=None, h=1e-5):
    """Central-difference gradients of the mean loss for every parameter
    and every input entry. Returns (weight_grads, bias_grads, input_grad).
    """

    def loss_with(weights_override=None, batch_override=None):
        layers = []
        for k, layer in enumerate(net.layers):
            w, b = layer.weights, layer.biases
            if weights_override is not None and weights_override[0] == k:
                kind, idx, val = weights_override[1:]
                if kind == "w":
                    w = w.copy()
                    w[idx] = val
                else:
                    b = b.copy()
                    b[idx] = val
            layers.append(nn.Layer(w, b, layer.activation, layer.trainable))
        use_batch = batch if batch_override is None else batch_override
        return nn.loss_and_grads(nn.Network(layers), use_batch, labels, reg).loss

    weight_grads, bias_grads = [], []
    for k, layer in enumerate(net.layers):
        gw = np.zeros_like(layer.weights)
        for idx in np.ndindex(*layer.weights.shape):
            w0 = layer.weights[idx]
            up = loss_with(weights_override=(k, "w", idx, w0 + h))
            dn = loss_with(weights_override=(k, "w", idx, w0 - h))
            gw[idx] = (up - dn) / (2 * h)
        gb = np.zeros_like(layer.biases)
        for idx in np.ndindex(*layer.biases.shape):
            b0 = layer.biases[idx]
            up = loss_with(weights_override=(k, "b", idx, b0 + h))
            dn = loss_with(weights_override=(k, "b", idx, b0 - h))
            gb[idx] = (up - dn) / (2 * h)
        weight_grads.append(gw)
        bias_grads.append(gb)

    gx = np.zeros_like(batch)
    for idx in np.ndindex(*batch.shape):
        up_b = batch.copy()
        up_b[idx] += h
        dn_b = batch.copy()
        dn_b[idx] -= h
        gx[idx] = (loss_with(batch_override=up_b) - loss_with(batch_override=dn_b)) / (
            2 * h
        )
    return weight_grads, bias_grads, gx


def assert_grads_close(analytic, numeric, rel=1e-4, abs_floor=1e-8):
    analytic = np.asarray(analytic)
    numeric = np.asarray(numeric)
    denom = np.maximum(np.abs(analytic), np.abs(numeric))
    err = np.abs(analytic - numeric)
    ok = err <= rel * denom + abs_floor
    assert ok.all(), (
        f"gradient mismatch: worst abs err {err.max():.3e} "
        f"at analytic {analytic[np.unravel_index(err.argmax(), err.shape)]:.6e}"
    )


def random_small_net(rng, max_layers=3, max_width=8):
    """Random architecture within the gradient-check envelope."""
    n_layers = int(rng.integers(1, max_layers + 1))
    dims = [int(rng.integers(2, max_width + 1)) for _ in range(n_layers + 1)]
    net = nn.build_network(dims, seed=int(rng.integers(0, 2**31)))
    # Nudge weights off the Glorot lattice so relu kinks are generic.
    layers = [
        nn.Layer(
            l.weights + 0.1 * rng.standard_normal(l.weights.shape),
            l.biases + 0.1 * rng.standard_normal(l.biases.shape),
            l.activation,
            l.trainable,
        )
        for l in net.layers
    ]
    return nn.Network(layers)


def brute_force_threshold(values, flags, member_if_geq=True):
    """Exhaustive threshold maximizer over midpoint candidates plus ±inf.

    Mirrors the documented candidate set but searches by dumb enumeration,
    recomputing TPR/TNR per candidate from scratch.
    """
    values = np.asarray(values, dtype=float)
    flags = np.asarray(flags)
    distinct = np.unique(values)  # sorted, +inf last if present
    candidates = [-np.inf]
    for a, b in zip(distinct, distinct[1:]):
        candidates.append((a + b) / 2.0)
    candidates.append(np.inf)

    best = None
    for tau in candidates:  # ascending, so the first max is the smallest tau
        pred = values >= tau if member_if_geq else values <= tau
        tp = int(np.sum(pred & (flags == 1)))
        fn = int(np.sum(~pred & (flags == 1)))
        tn = int(np.sum(~pred & (flags == 0)))
        fp = int(np.sum(pred & (flags == 0)))
        tpr = tp / (tp + fn)
        tnr = tn / (tn + fp)
        asr = 0.5 * (tpr + tnr)
        if best is None or asr > best[1]:
            best = (tau, asr)
    return best


def analytic_linear_distance(weights, biases, x, y_true):
    """Exact L2 distance from x to the nearest decision boundary of a
    linear multiclass classifier logits = x @ weights + biases.
    """
    logits = x @ weights + biases
    best = np.inf
    for c in range(weights.shape[1]):
        if c == y_true:
            continue
        dw = weights[:, y_true] - weights[:, c]
        margin = logits[y_true] - logits[c]
        norm = np.linalg.norm(dw)
        if norm == 0:
            continue
        best = min(best, abs(margin) / norm)
    return best
