"""Minimal dense-network engine with exact reverse-mode gradients.

Design constraints that shape everything here:
  * float64 only, deterministic given seeds, no hidden global state;
  * gradients are exact (no autograd library), including gradients with
    respect to the input batch, which the white-box attack consumes;
  * per-layer trainable flags so a fine-tuning stage can freeze a prefix
    of the stack, with frozen parameters preserved bit for bit;
  * per-sample clipped-and-noised gradients for the private training
    variant.

A "layer" is one dense transform plus its activation. Layer counting for
freezing purposes counts these weight-bearing units; there are no
activation-only entries.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .errors import CheckpointError, ConfigError, NumericError, ShapeError
from .seeding import TAG_INIT, derive_rng

CHECKPOINT_FORMAT_VERSION = 1
ACTIVATIONS = ("relu", "identity")

# Regularization is either None or a (kind, lam) pair, kind in {"l1", "l2"}.
Regularization = Optional[Tuple[str, float]]


@dataclass
class Layer:
    """One dense layer: y = act(x @ weights + biases).

    weights: (fan_in, fan_out) float64, row-major.
    biases: (fan_out,) float64.
    """

    weights: np.ndarray
    biases: np.ndarray
    activation: str = "relu"
    trainable: bool = True

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.biases = np.asarray(self.biases, dtype=np.float64)
        if self.weights.ndim != 2:
            raise ShapeError(f"layer weights must be 2-D, got {self.weights.shape}")
        if self.biases.shape != (self.weights.shape[1],):
            raise ShapeError(
                f"bias shape {self.biases.shape} does not match fan_out "
                f"{self.weights.shape[1]}"
            )
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"unknown activation {self.activation!r}")

    @property
    def fan_in(self) -> int:
        return self.weights.shape[0]

    @property
    def fan_out(self) -> int:
        return self.weights.shape[1]


class Network:
    """A stack of dense layers ending in identity logits.

    Networks are treated as immutable values: training steps return new
    Network objects and never write into existing arrays. Frozen layers of
    a derived network share (or bit-exactly copy) the parent's parameters.
    """

    def __init__(self, layers: Sequence[Layer]):
        layers = list(layers)
        if not layers:
            raise ConfigError("a network needs at least one layer")
        for a, b in zip(layers, layers[1:]):
            if a.fan_out != b.fan_in:
                raise ShapeError(
                    f"layer chain mismatch: fan_out {a.fan_out} feeds fan_in {b.fan_in}"
                )
        if layers[-1].activation != "identity":
            raise ConfigError("final layer must have identity activation (logits)")
        self.layers: List[Layer] = layers

    @property
    def num_layers(self) -> int:
        return len(self.layers)

    @property
    def input_dim(self) -> int:
        return self.layers[0].fan_in

    @property
    def output_dim(self) -> int:
        return self.layers[-1].fan_out

    def copy(self) -> "Network":
        return Network(
            [
                Layer(l.weights.copy(), l.biases.copy(), l.activation, l.trainable)
                for l in self.layers
            ]
        )


@dataclass
class GradientBundle:
    """Gradients of the mean loss over a batch.

    weight_grads / bias_grads align with Network.layers and are present for
    every layer, trainable or not; sgd_step is what honors the flags.
    input_gradient has the batch's shape (B, d): the gradient of the mean
    loss with respect to each input row.
    """

    weight_grads: List[np.ndarray]
    bias_grads: List[np.ndarray]
    input_gradient: np.ndarray
    loss: float


def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def build_network(
    dims: Sequence[int], seed: int, hidden_activation: str = "relu"
) -> Network:
    """Fresh network with layer sizes dims = [in, h1, ..., out].

    Weights are Glorot-uniform from a stream derived from seed; biases start
    at zero. Hidden layers use hidden_activation, the head is identity.
    """
    dims = [int(d) for d in dims]
    if len(dims) < 2:
        raise ConfigError("need at least input and output dims")
    if any(d <= 0 for d in dims):
        raise ConfigError(f"layer dims must be positive, got {dims}")
    rng = derive_rng(seed, TAG_INIT)
    layers = []
    for i, (fi, fo) in enumerate(zip(dims, dims[1:])):
        act = "identity" if i == len(dims) - 2 else hidden_activation
        layers.append(Layer(glorot_uniform(rng, fi, fo), np.zeros(fo), act))
    return Network(layers)


def _check_batch(net: Network, batch: np.ndarray) -> np.ndarray:
    batch = np.asarray(batch, dtype=np.float64)
    if batch.ndim != 2:
        raise ShapeError(f"batch must be 2-D (B, d), got shape {batch.shape}")
    if batch.shape[1] != net.input_dim:
        raise ShapeError(
            f"batch feature dim {batch.shape[1]} != network input dim {net.input_dim}"
        )
    return batch


def _forward_trace(net: Network, batch: np.ndarray):
    """All layer activations, cheapest form the backward pass can reuse.

    Returns (activations, preacts): activations[0] is the input, and
    activations[k+1] = act(preacts[k]); preacts[k] = activations[k] @ W + b.
    """
    activations = [batch]
    preacts = []
    a = batch
    for layer in net.layers:
        z = a @ layer.weights + layer.biases  # (B, fan_out)
        preacts.append(z)
        a = np.maximum(z, 0.0) if layer.activation == "relu" else z
        activations.append(a)
    return activations, preacts


def forward(net: Network, batch: np.ndarray) -> np.ndarray:
    """Logits for a batch, shape (B, output_dim)."""
    batch = _check_batch(net, batch)
    activations, _ = _forward_trace(net, batch)
    return activations[-1]


def predict_labels(net: Network, batch: np.ndarray) -> np.ndarray:
    """Argmax labels; ties resolve to the smallest class index."""
    return np.argmax(forward(net, batch), axis=1)


def softmax(logits: np.ndarray) -> np.ndarray:
    """Row-wise softmax with max subtraction. Rows sum to 1 within 1e-9."""
    z = logits - np.max(logits, axis=-1, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=-1, keepdims=True)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - np.max(logits, axis=-1, keepdims=True)
    return z - np.log(np.sum(np.exp(z), axis=-1, keepdims=True))


def _check_labels(net: Network, batch: np.ndarray, labels: np.ndarray) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.shape != (batch.shape[0],):
        raise ShapeError(
            f"labels shape {labels.shape} does not match batch size {batch.shape[0]}"
        )
    if labels.size and (labels.min() < 0 or labels.max() >= net.output_dim):
        raise ShapeError(
            f"labels must lie in [0, {net.output_dim}), got "
            f"[{labels.min()}, {labels.max()}]"
        )
    return labels.astype(np.int64)


def _check_reg(reg: Regularization) -> Regularization:
    if reg is None:
        return None
    kind, lam = reg
    if kind not in ("l1", "l2"):
        raise ConfigError(f"unknown regularization kind {kind!r}")
    lam = float(lam)
    if lam < 0:
        raise ConfigError(f"regularization strength must be >= 0, got {lam}")
    return (kind, lam)


def _penalty_and_grad(layer: Layer, reg: Regularization):
    """Weights-only penalty. Biases are never regularized."""
    kind, lam = reg
    w = layer.weights
    if kind == "l1":
        return lam * np.abs(w).sum(), lam * np.sign(w)
    return lam * np.square(w).sum(), 2.0 * lam * w


def _assert_finite_trace(preacts, activations) -> None:
    for i, z in enumerate(preacts):
        if not np.isfinite(z).all():
            raise NumericError(f"non-finite values at layer {i}")
    # relu/identity preserve finiteness, so checking preacts covers the
    # activations too; the input is the caller's problem until it hits
    # layer 0's check above.
    del activations


def _backprop(net: Network, activations, preacts, delta_out: np.ndarray):
    """Reverse pass from d(loss)/d(logits) = delta_out.

    Returns (weight_grads, bias_grads, input_gradient). delta_out carries
    whatever normalization the loss uses (1/B for a mean loss).
    """
    weight_grads: List[Optional[np.ndarray]] = [None] * net.num_layers
    bias_grads: List[Optional[np.ndarray]] = [None] * net.num_layers
    delta = delta_out  # (B, fan_out of current layer)
    for k in range(net.num_layers - 1, -1, -1):
        layer = net.layers[k]
        a_prev = activations[k]  # (B, fan_in)
        weight_grads[k] = a_prev.T @ delta
        bias_grads[k] = delta.sum(axis=0)
        delta = delta @ layer.weights.T  # (B, fan_in)
        if k > 0 and net.layers[k - 1].activation == "relu":
            delta = delta * (preacts[k - 1] > 0.0)
    return weight_grads, bias_grads, delta


def _ce_loss_and_delta(logits, labels):
    """Mean cross-entropy and d(mean loss)/d(logits)."""
    n = logits.shape[0]
    logp = log_softmax(logits)
    loss = -logp[np.arange(n), labels].mean()
    delta = softmax(logits)
    delta[np.arange(n), labels] -= 1.0
    return loss, delta / n


def loss_and_grads(
    net: Network,
    batch: np.ndarray,
    labels: np.ndarray,
    reg: Regularization = None,
) -> GradientBundle:
    """Mean softmax cross-entropy with optional weight penalty, plus exact
    gradients for every layer and for the input batch.

    The penalty applies to weights only. Gradients are computed for frozen
    layers as well; applying or ignoring them is sgd_step's job.
    """
    batch = _check_batch(net, batch)
    if batch.shape[0] == 0:
        raise ShapeError("empty batch")
    labels = _check_labels(net, batch, labels)
    reg = _check_reg(reg)

    activations, preacts = _forward_trace(net, batch)
    _assert_finite_trace(preacts, activations)
    loss, delta = _ce_loss_and_delta(activations[-1], labels)
    weight_grads, bias_grads, input_grad = _backprop(net, activations, preacts, delta)

    if reg is not None and reg[1] != 0.0:
        for k, layer in enumerate(net.layers):
            pen, pgrad = _penalty_and_grad(layer, reg)
            loss = loss + pen
            weight_grads[k] = weight_grads[k] + pgrad

    if not np.isfinite(loss):
        raise NumericError(f"non-finite loss at layer {net.num_layers - 1}")
    return GradientBundle(weight_grads, bias_grads, input_grad, float(loss))


def loss_and_grads_soft(
    net: Network,
    batch: np.ndarray,
    target_probs: np.ndarray,
    reg: Regularization = None,
) -> GradientBundle:
    """Cross-entropy against soft target distributions (distillation)."""
    batch = _check_batch(net, batch)
    target_probs = np.asarray(target_probs, dtype=np.float64)
    if target_probs.shape != (batch.shape[0], net.output_dim):
        raise ShapeError(
            f"target_probs shape {target_probs.shape} != "
            f"({batch.shape[0]}, {net.output_dim})"
        )
    reg = _check_reg(reg)

    activations, preacts = _forward_trace(net, batch)
    _assert_finite_trace(preacts, activations)
    logits = activations[-1]
    n = logits.shape[0]
    loss = -(target_probs * log_softmax(logits)).sum(axis=1).mean()
    delta = (softmax(logits) - target_probs) / n
    weight_grads, bias_grads, input_grad = _backprop(net, activations, preacts, delta)

    if reg is not None and reg[1] != 0.0:
        for k, layer in enumerate(net.layers):
            pen, pgrad = _penalty_and_grad(layer, reg)
            loss = loss + pen
            weight_grads[k] = weight_grads[k] + pgrad

    if not np.isfinite(loss):
        raise NumericError(f"non-finite loss at layer {net.num_layers - 1}")
    return GradientBundle(weight_grads, bias_grads, input_grad, float(loss))


def sgd_step(net: Network, grads: GradientBundle, lr: float) -> Network:
    """One step w <- w - lr * g on trainable layers.

    Frozen layers pass through bit-identical: the returned network shares
    their arrays, so no arithmetic can perturb them.
    """
    if len(grads.weight_grads) != net.num_layers:
        raise ShapeError(
            f"gradient bundle has {len(grads.weight_grads)} layers, "
            f"network has {net.num_layers}"
        )
    lr = float(lr)
    new_layers = []
    for layer, gw, gb in zip(net.layers, grads.weight_grads, grads.bias_grads):
        if not layer.trainable:
            new_layers.append(layer)
            continue
        if gw.shape != layer.weights.shape or gb.shape != layer.biases.shape:
            raise ShapeError("gradient shape does not match layer")
        new_layers.append(
            Layer(
                layer.weights - lr * gw,
                layer.biases - lr * gb,
                layer.activation,
                layer.trainable,
            )
        )
    return Network(new_layers)


def per_sample_clipped_noisy_grads(
    net: Network,
    batch: np.ndarray,
    labels: np.ndarray,
    clip_norm: float,
    noise_mult: float,
    rng: np.random.Generator,
) -> GradientBundle:
    """Private-training gradients: per-sample L2 clip, average, add noise.

    Each sample's full parameter gradient (weights and biases of every
    layer, jointly) is scaled to L2 norm at most clip_norm before the batch
    average; then i.i.d. Gaussian noise with per-coordinate std
    noise_mult * clip_norm / B is added to the averaged gradient. Noise is
    drawn layer by layer, weights before biases, so a given rng state yields
    one fixed noise realization.

    input_gradient and loss report the plain unclipped mean-loss values
    (the clipped objective has no input gradient of its own).
    """
    batch = _check_batch(net, batch)
    if batch.shape[0] == 0:
        raise ShapeError("empty batch")
    labels = _check_labels(net, batch, labels)
    clip_norm = float(clip_norm)
    if clip_norm <= 0:
        raise ConfigError(f"clip_norm must be > 0, got {clip_norm}")
    noise_mult = float(noise_mult)
    if noise_mult < 0:
        raise ConfigError(f"noise_mult must be >= 0, got {noise_mult}")

    n = batch.shape[0]
    activations, preacts = _forward_trace(net, batch)
    _assert_finite_trace(preacts, activations)
    logits = activations[-1]
    logp = log_softmax(logits)
    loss = -logp[np.arange(n), labels].mean()

    # Per-sample deltas, unscaled: d(l_b)/d(logits_b).
    delta = softmax(logits)
    delta[np.arange(n), labels] -= 1.0

    # Reverse pass keeping the batch axis on every gradient.
    per_w = []  # (B, fan_in, fan_out) per layer
    per_b = []  # (B, fan_out) per layer
    d = delta
    for k in range(net.num_layers - 1, -1, -1):
        layer = net.layers[k]
        a_prev = activations[k]
        per_w.append(np.einsum("bi,bo->bio", a_prev, d))
        per_b.append(d)
        d = d @ layer.weights.T
        if k > 0 and net.layers[k - 1].activation == "relu":
            d = d * (preacts[k - 1] > 0.0)
    per_w.reverse()
    per_b.reverse()
    input_grad = d / n

    sq_norms = np.zeros(n)
    for gw, gb in zip(per_w, per_b):
        sq_norms += np.square(gw).sum(axis=(1, 2)) + np.square(gb).sum(axis=1)
    norms = np.sqrt(sq_norms)
    with np.errstate(divide="ignore"):
        factors = np.where(norms > 0.0, np.minimum(1.0, clip_norm / norms), 1.0)

    weight_grads = []
    bias_grads = []
    noise_std = noise_mult * clip_norm / n
    for gw, gb in zip(per_w, per_b):
        mw = np.einsum("b,bio->io", factors, gw) / n
        mb = (factors[:, None] * gb).sum(axis=0) / n
        if noise_std > 0.0:
            mw = mw + rng.normal(0.0, noise_std, size=mw.shape)
            mb = mb + rng.normal(0.0, noise_std, size=mb.shape)
        weight_grads.append(mw)
        bias_grads.append(mb)

    if not np.isfinite(loss):
        raise NumericError(f"non-finite loss at layer {net.num_layers - 1}")
    return GradientBundle(weight_grads, bias_grads, input_grad, float(loss))


def save_checkpoint(net: Network, path: str) -> None:
    """Versioned JSON checkpoint. Round-trips finite float64 bit-exactly."""
    layers = []
    for layer in net.layers:
        if not (np.isfinite(layer.weights).all() and np.isfinite(layer.biases).all()):
            raise NumericError("refusing to checkpoint non-finite parameters")
        layers.append(
            {
                "rows": layer.fan_in,
                "cols": layer.fan_out,
                "activation": layer.activation,
                "trainable": bool(layer.trainable),
                "weights": layer.weights.reshape(-1).tolist(),  # row-major
                "biases": layer.biases.tolist(),
            }
        )
    doc = {"format_version": CHECKPOINT_FORMAT_VERSION, "layers": layers}
    tmp = f"{path}.tmp.{os.getpid()}"
    with open(tmp, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, allow_nan=False)
        fh.write("\n")
    os.replace(tmp, path)


def load_checkpoint(path: str) -> Network:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    version = doc.get("format_version")
    if version != CHECKPOINT_FORMAT_VERSION:
        raise CheckpointError(
            f"checkpoint format_version {version!r} unsupported "
            f"(expected {CHECKPOINT_FORMAT_VERSION})"
        )
    layers = []
    for i, spec in enumerate(doc.get("layers", [])):
        try:
            rows, cols = int(spec["rows"]), int(spec["cols"])
            w = np.asarray(spec["weights"], dtype=np.float64).reshape(rows, cols)
            b = np.asarray(spec["biases"], dtype=np.float64)
            layers.append(Layer(w, b, spec["activation"], bool(spec["trainable"])))
        except (KeyError, ValueError, ShapeError, ConfigError) as exc:
            raise CheckpointError(f"bad layer {i} in {path}: {exc}") from exc
    if not layers:
        raise CheckpointError(f"checkpoint {path} has no layers")
    try:
        return Network(layers)
    except (ShapeError, ConfigError) as exc:
        raise CheckpointError(f"inconsistent checkpoint {path}: {exc}") from exc
