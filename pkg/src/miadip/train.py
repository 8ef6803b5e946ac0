"""Training loops: source pretraining, stage-1 transfer, and baselines.

All loops are plain minibatch SGD over shuffled epochs. A run is fully
determined by (config, seed): initialization, shuffling, gradient noise,
and partition draws all come from streams derived in seeding.py.
"""

from dataclasses import dataclass, field, replace
from typing import Optional, Tuple

import numpy as np

from .data import SampleSet
from .errors import ConfigError, NumericError, ShapeError, TrainingError
from .nn import (
    Layer,
    Network,
    build_network,
    forward,
    glorot_uniform,
    loss_and_grads,
    loss_and_grads_soft,
    per_sample_clipped_noisy_grads,
    predict_labels,
    sgd_step,
    softmax,
)
from .seeding import (
    TAG_DP_NOISE,
    TAG_HEAD,
    TAG_SELENA,
    TAG_SELENA_FINAL,
    TAG_SELENA_SUB,
    TAG_SHUFFLE,
    derive_rng,
)

VARIANTS = ("ntl", "tl", "l1", "l2", "dp", "selena")


@dataclass(frozen=True)
class ArchSpec:
    """Hidden widths and activation; input and head sizes come from data."""

    hidden: Tuple[int, ...] = (64, 64, 32)
    activation: str = "relu"

    def __post_init__(self):
        if not self.hidden:
            raise ConfigError("need at least one hidden layer")
        if any(int(h) <= 0 for h in self.hidden):
            raise ConfigError(f"hidden widths must be positive, got {self.hidden}")
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))

    def dims(self, input_dim: int, n_classes: int):
        return [int(input_dim), *self.hidden, int(n_classes)]


def _check_loop_params(epochs, lr, batch_size):
    if int(epochs) != epochs or epochs < 0:
        raise ConfigError(f"epochs must be a nonnegative int, got {epochs}")
    if not (np.isfinite(lr) and lr > 0):
        raise ConfigError(f"lr must be positive and finite, got {lr}")
    if int(batch_size) != batch_size or batch_size < 1:
        raise ConfigError(f"batch_size must be a positive int, got {batch_size}")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 160
    lr: float = 0.1
    batch_size: int = 32
    seed: int = 0

    def __post_init__(self):
        _check_loop_params(self.epochs, self.lr, self.batch_size)


@dataclass(frozen=True)
class TransferConfig:
    """Stage-1 settings: freeze the first frozen_layers dense layers, swap in
    a fresh head when class counts differ (or when asked), SGD on the rest."""

    frozen_layers: int = 0
    epochs: int = 160
    lr: float = 0.1
    batch_size: int = 32
    head_replace: bool = True
    seed: int = 0

    def __post_init__(self):
        _check_loop_params(self.epochs, self.lr, self.batch_size)
        if int(self.frozen_layers) != self.frozen_layers or self.frozen_layers < 0:
            raise ConfigError(
                f"frozen_layers must be a nonnegative int, got {self.frozen_layers}"
            )


@dataclass
class TrainedModel:
    network: Network
    provenance: str
    train_accuracy: float
    eval_accuracy: float  # nan when no eval set was supplied

    @property
    def gap(self) -> float:
        return self.train_accuracy - self.eval_accuracy


def accuracy(net: Network, samples: SampleSet) -> float:
    if len(samples) == 0:
        raise ShapeError("cannot score an empty sample set")
    return float(np.mean(predict_labels(net, samples.features) == samples.labels))


def _run_sgd(net, features, labels, epochs, lr, batch_size, seed, grads_for):
    """Shared loop; grads_for(net, idx) supplies the step's GradientBundle."""
    n = features.shape[0]
    shuffle = derive_rng(seed, TAG_SHUFFLE)
    for epoch in range(int(epochs)):
        order = shuffle.permutation(n)
        for start in range(0, n, int(batch_size)):
            idx = order[start : start + int(batch_size)]
            try:
                bundle = grads_for(net, idx)
            except NumericError as exc:
                raise TrainingError(
                    f"training diverged at epoch {epoch}: {exc}"
                ) from exc
            net = sgd_step(net, bundle, lr)
    return net


def _fit_hard(net, samples, cfg, reg=None):
    f, y = samples.features, samples.labels
    return _run_sgd(
        net,
        f,
        y,
        cfg.epochs,
        cfg.lr,
        cfg.batch_size,
        cfg.seed,
        lambda m, idx: loss_and_grads(m, f[idx], y[idx], reg=reg),
    )


def _finish(net, provenance, train_set, eval_set) -> TrainedModel:
    train_acc = accuracy(net, train_set)
    eval_acc = accuracy(net, eval_set) if eval_set is not None else float("nan")
    return TrainedModel(net, provenance, train_acc, eval_acc)


def train_source(
    arch: ArchSpec,
    source: SampleSet,
    epochs: int,
    lr: float,
    seed: int,
    batch_size: int = 64,
) -> Network:
    """Pretrain on the source task; returns the bare network."""
    _check_loop_params(epochs, lr, batch_size)
    net = build_network(arch.dims(source.dim, source.n_classes), seed, arch.activation)
    f, y = source.features, source.labels
    return _run_sgd(
        net,
        f,
        y,
        epochs,
        lr,
        batch_size,
        seed,
        lambda m, idx: loss_and_grads(m, f[idx], y[idx]),
    )


def transfer_stage1(
    pretrained: Network,
    cfg: TransferConfig,
    target_train: SampleSet,
    eval_set: Optional[SampleSet] = None,
) -> TrainedModel:
    """Freeze the bottom layers of a pretrained network and SGD the rest."""
    k = pretrained.num_layers
    m = int(cfg.frozen_layers)
    if m > k - 1:
        raise ConfigError(
            f"frozen_layers must be at most {k - 1} for a {k}-layer network, got {m}"
        )
    if pretrained.input_dim != target_train.dim:
        raise ShapeError(
            f"pretrained input dim {pretrained.input_dim} != "
            f"target feature dim {target_train.dim}"
        )
    n_classes = target_train.n_classes
    # Frozen layers share the pretrained arrays; sgd_step never writes into
    # existing arrays, so bit-identity is structural, not numeric.
    layers = [
        Layer(l.weights, l.biases, l.activation, trainable=(i >= m))
        for i, l in enumerate(pretrained.layers)
    ]
    if cfg.head_replace or pretrained.output_dim != n_classes:
        head_rng = derive_rng(cfg.seed, TAG_HEAD)
        fan_in = pretrained.layers[-1].fan_in
        layers[-1] = Layer(
            glorot_uniform(head_rng, fan_in, n_classes),
            np.zeros(n_classes),
            "identity",
        )
    net = _fit_hard(Network(layers), target_train, cfg)
    return _finish(net, f"tl({m})", target_train, eval_set)


def train_ntl(
    arch: ArchSpec,
    target_train: SampleSet,
    cfg: TrainConfig,
    eval_set: Optional[SampleSet] = None,
) -> TrainedModel:
    """Target-only baseline: fresh init, nothing frozen."""
    net = build_network(
        arch.dims(target_train.dim, target_train.n_classes), cfg.seed, arch.activation
    )
    net = _fit_hard(net, target_train, cfg)
    return _finish(net, "ntl", target_train, eval_set)


def train_regularized(
    arch: ArchSpec,
    target_train: SampleSet,
    lam: float,
    kind: str,
    cfg: TrainConfig,
    eval_set: Optional[SampleSet] = None,
) -> TrainedModel:
    if kind not in ("l1", "l2"):
        raise ConfigError(f"kind must be 'l1' or 'l2', got {kind!r}")
    if not (np.isfinite(lam) and lam >= 0):
        raise ConfigError(f"lam must be nonnegative and finite, got {lam}")
    net = build_network(
        arch.dims(target_train.dim, target_train.n_classes), cfg.seed, arch.activation
    )
    net = _fit_hard(net, target_train, cfg, reg=(kind, float(lam)))
    return _finish(net, f"{kind}({lam:g})", target_train, eval_set)


def train_dp_lite(
    arch: ArchSpec,
    target_train: SampleSet,
    clip_norm: float,
    noise_mult: float,
    cfg: TrainConfig,
    eval_set: Optional[SampleSet] = None,
) -> TrainedModel:
    """Per-sample clipped, noise-perturbed SGD."""
    if not (np.isfinite(clip_norm) and clip_norm > 0):
        raise ConfigError(f"clip_norm must be positive and finite, got {clip_norm}")
    if not (np.isfinite(noise_mult) and noise_mult >= 0):
        raise ConfigError(f"noise_mult must be nonnegative, got {noise_mult}")
    net = build_network(
        arch.dims(target_train.dim, target_train.n_classes), cfg.seed, arch.activation
    )
    noise = derive_rng(cfg.seed, TAG_DP_NOISE)
    f, y = target_train.features, target_train.labels
    net = _run_sgd(
        net,
        f,
        y,
        cfg.epochs,
        cfg.lr,
        cfg.batch_size,
        cfg.seed,
        lambda m, idx: per_sample_clipped_noisy_grads(
            m, f[idx], y[idx], clip_norm, noise_mult, noise
        ),
    )
    return _finish(net, f"dp({clip_norm:g},{noise_mult:g})", target_train, eval_set)


def _derived_seed(master_seed: int, *tags: int) -> int:
    return int(derive_rng(master_seed, *tags).integers(2**63))


def train_selena_lite(
    arch: ArchSpec,
    target_train: SampleSet,
    k_parts: int,
    cfg: TrainConfig,
    eval_set: Optional[SampleSet] = None,
) -> TrainedModel:
    """Leave-one-partition-out self-distillation.

    Submodel j trains on every partition except j; each sample's soft label
    is the softmax of the submodel that never saw it; the final model is
    trained against those soft targets.
    """
    n = len(target_train)
    if int(k_parts) != k_parts or k_parts < 2:
        raise ConfigError(f"k_parts must be an int >= 2, got {k_parts}")
    k_parts = int(k_parts)
    if k_parts > n:
        raise ConfigError(
            f"cannot split {n} samples into {k_parts} nonempty partitions"
        )
    perm = derive_rng(cfg.seed, TAG_SELENA).permutation(n)
    parts = np.array_split(perm, k_parts)

    dims = arch.dims(target_train.dim, target_train.n_classes)
    soft = np.empty((n, target_train.n_classes))
    for j, part in enumerate(parts):
        held_in = np.concatenate([p for i, p in enumerate(parts) if i != j])
        sub_cfg = replace(cfg, seed=_derived_seed(cfg.seed, TAG_SELENA_SUB, j))
        sub = build_network(dims, sub_cfg.seed, arch.activation)
        sub = _fit_hard(sub, target_train.subset(held_in), sub_cfg)
        soft[part] = softmax(forward(sub, target_train.features[part]))

    final_cfg = replace(cfg, seed=_derived_seed(cfg.seed, TAG_SELENA_FINAL))
    net = build_network(dims, final_cfg.seed, arch.activation)
    f = target_train.features
    net = _run_sgd(
        net,
        f,
        target_train.labels,
        final_cfg.epochs,
        final_cfg.lr,
        final_cfg.batch_size,
        final_cfg.seed,
        lambda m, idx: loss_and_grads_soft(m, f[idx], soft[idx]),
    )
    return _finish(net, f"selena_lite({k_parts})", target_train, eval_set)


@dataclass(frozen=True)
class TrainingProcedure:
    """Everything needed to rerun the target's training on other data.

    This is the attacker-side handle: shadow models call fit() with their
    own data and seed but the exact same recipe.
    """

    variant: str
    arch: ArchSpec = field(default_factory=ArchSpec)
    cfg: TrainConfig = field(default_factory=TrainConfig)
    frozen_layers: int = 0
    head_replace: bool = True
    pretrained: Optional[Network] = None
    lam: float = 0.0
    clip_norm: float = 1.0
    noise_mult: float = 0.0
    k_parts: int = 2

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(
                f"variant must be one of {list(VARIANTS)}, got {self.variant!r}"
            )
        if self.variant == "tl" and self.pretrained is None:
            raise ConfigError("tl variant needs a pretrained network")

    def fit(self, train_set: SampleSet, seed: int, eval_set=None) -> TrainedModel:
        cfg = replace(self.cfg, seed=int(seed))
        if self.variant == "ntl":
            return train_ntl(self.arch, train_set, cfg, eval_set)
        if self.variant == "tl":
            tcfg = TransferConfig(
                frozen_layers=self.frozen_layers,
                epochs=cfg.epochs,
                lr=cfg.lr,
                batch_size=cfg.batch_size,
                head_replace=self.head_replace,
                seed=cfg.seed,
            )
            return transfer_stage1(self.pretrained, tcfg, train_set, eval_set)
        if self.variant in ("l1", "l2"):
            return train_regularized(
                self.arch, train_set, self.lam, self.variant, cfg, eval_set
            )
        if self.variant == "dp":
            return train_dp_lite(
                self.arch, train_set, self.clip_norm, self.noise_mult, cfg, eval_set
            )
        return train_selena_lite(self.arch, train_set, self.k_parts, cfg, eval_set)
