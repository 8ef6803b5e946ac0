"""Training loops: freeze contracts, baselines, determinism."""

import numpy as np
import pytest

from miadip import data, nn, train
from miadip.errors import ConfigError, ShapeError, TrainingError
from miadip.train import ArchSpec, TrainConfig, TrainingProcedure, TransferConfig


@pytest.fixture(scope="module")
def pair():
    cfg = data.TaskPairConfig(
        dim=24,
        source_classes=6,
        target_classes=4,
        overlap=1.0,
        source_n=600,
        target_train_n=40,
        target_eval_n=80,
        class_separation=4.0,
        noise_std=1.0,
        seed=7,
    )
    return data.gen_task_pair(cfg)


ARCH = ArchSpec(hidden=(16, 12))
FAST = TrainConfig(epochs=30, lr=0.1, batch_size=16, seed=3)


def weights_of(net):
    return [l.weights for l in net.layers]


def test_train_source_separable_blobs(pair):
    source, _, _ = pair
    net = train.train_source(ARCH, source, epochs=20, lr=0.1, seed=1)
    assert train.accuracy(net, source) >= 0.99
    assert net.output_dim == source.n_classes


def test_train_source_zero_epochs_is_init(pair):
    source, _, _ = pair
    net = train.train_source(ARCH, source, epochs=0, lr=0.1, seed=5)
    fresh = nn.build_network(ARCH.dims(source.dim, source.n_classes), 5)
    for a, b in zip(net.layers, fresh.layers):
        assert np.array_equal(a.weights, b.weights)
        assert np.array_equal(a.biases, b.biases)


def test_train_source_seed_reproducible(pair):
    source, _, _ = pair
    a = train.train_source(ARCH, source, epochs=5, lr=0.1, seed=9)
    b = train.train_source(ARCH, source, epochs=5, lr=0.1, seed=9)
    for wa, wb in zip(weights_of(a), weights_of(b)):
        assert np.array_equal(wa, wb)


def test_divergence_raises_training_error(pair):
    _, target, _ = pair
    cfg = TrainConfig(epochs=200, lr=1e15, batch_size=16, seed=0)
    with np.errstate(over="ignore", invalid="ignore"):
        with pytest.raises(TrainingError, match="diverged at epoch"):
            train.train_ntl(ARCH, target, cfg)


@pytest.fixture(scope="module")
def pretrained(pair):
    source, _, _ = pair
    return train.train_source(ARCH, source, epochs=20, lr=0.1, seed=1)


def test_transfer_freezes_exactly_m_layers(pair, pretrained):
    _, target, ev = pair
    k = pretrained.num_layers
    for m in range(k):
        cfg = TransferConfig(frozen_layers=m, epochs=10, lr=0.1, batch_size=16, seed=2)
        model = train.transfer_stage1(pretrained, cfg, target, eval_set=ev)
        assert model.provenance == f"tl({m})"
        for i in range(m):
            assert np.array_equal(
                model.network.layers[i].weights, pretrained.layers[i].weights
            )
            assert np.array_equal(
                model.network.layers[i].biases, pretrained.layers[i].biases
            )
            assert not model.network.layers[i].trainable
        # Head is replaced (class counts differ), so it never matches.
        assert model.network.output_dim == target.n_classes
        assert model.network.layers[-1].trainable


def test_transfer_max_freeze_trains_only_head(pair, pretrained):
    _, target, _ = pair
    k = pretrained.num_layers
    cfg = TransferConfig(frozen_layers=k - 1, epochs=10, lr=0.1, batch_size=16, seed=2)
    model = train.transfer_stage1(pretrained, cfg, target)
    for i in range(k - 1):
        assert np.array_equal(
            model.network.layers[i].weights, pretrained.layers[i].weights
        )
    assert np.isnan(model.eval_accuracy)


def test_transfer_rejects_m_of_k(pair, pretrained):
    _, target, _ = pair
    cfg = TransferConfig(frozen_layers=pretrained.num_layers)
    with pytest.raises(ConfigError):
        train.transfer_stage1(pretrained, cfg, target)
    with pytest.raises(ConfigError):
        TransferConfig(frozen_layers=-1)


def test_transfer_rejects_dim_mismatch(pair, pretrained):
    _, target, _ = pair
    narrow = data.SampleSet(
        target.features[:, :10], target.labels, target.membership, target.n_classes
    )
    with pytest.raises(ShapeError):
        train.transfer_stage1(pretrained, TransferConfig(), narrow)


def test_transfer_m0_matches_ntl_architecture(pair, pretrained):
    _, target, _ = pair
    cfg = TransferConfig(frozen_layers=0, epochs=5, lr=0.1, batch_size=16, seed=4)
    tl = train.transfer_stage1(pretrained, cfg, target)
    ntl = train.train_ntl(ARCH, target, TrainConfig(epochs=5, lr=0.1, batch_size=16, seed=4))
    assert [l.weights.shape for l in tl.network.layers] == [
        l.weights.shape for l in ntl.network.layers
    ]
    # Same loop, different init: weights differ.
    assert not np.array_equal(tl.network.layers[0].weights, ntl.network.layers[0].weights)


def test_head_kept_when_classes_match_and_not_replacing(pair):
    source, _, _ = pair
    pre = train.train_source(ARCH, source, epochs=2, lr=0.1, seed=1)
    cfg = TransferConfig(
        frozen_layers=pre.num_layers - 1, epochs=0, head_replace=False, seed=0
    )
    model = train.transfer_stage1(pre, cfg, source.subset(np.arange(30)))
    assert np.array_equal(model.network.layers[-1].weights, pre.layers[-1].weights)


def test_ntl_zero_epochs_near_chance(pair):
    _, target, ev = pair
    cfg = TrainConfig(epochs=0, lr=0.1, batch_size=16, seed=0)
    model = train.train_ntl(ARCH, target, cfg, eval_set=ev)
    chance = 1.0 / target.n_classes
    assert abs(model.train_accuracy - chance) <= 0.10 + 1e-9
    assert abs(model.eval_accuracy - chance) <= 0.10 + 1e-9


def test_ntl_determinism(pair):
    _, target, _ = pair
    a = train.train_ntl(ARCH, target, FAST)
    b = train.train_ntl(ARCH, target, FAST)
    for wa, wb in zip(weights_of(a.network), weights_of(b.network)):
        assert np.array_equal(wa, wb)
    assert a.train_accuracy == b.train_accuracy


def test_regularized_lambda_zero_equals_ntl(pair):
    _, target, _ = pair
    plain = train.train_ntl(ARCH, target, FAST)
    reg = train.train_regularized(ARCH, target, 0.0, "l2", FAST)
    for wa, wb in zip(weights_of(plain.network), weights_of(reg.network)):
        assert np.array_equal(wa, wb)
    assert reg.provenance == "l2(0)"


def test_regularized_large_lambda_shrinks_weights(pair):
    _, target, _ = pair
    # lr * 2 * lam must stay below 1 or the penalty step itself explodes.
    cfg = TrainConfig(epochs=30, lr=0.001, batch_size=16, seed=FAST.seed)
    init = nn.build_network(ARCH.dims(target.dim, target.n_classes), cfg.seed)
    init_norm = sum(np.square(l.weights).sum() for l in init.layers)
    model = train.train_regularized(ARCH, target, 100.0, "l2", cfg)
    norm = sum(np.square(l.weights).sum() for l in model.network.layers)
    assert norm < init_norm


def test_regularized_l1_smoke(pair):
    _, target, ev = pair
    model = train.train_regularized(ARCH, target, 0.001, "l1", FAST, eval_set=ev)
    assert model.provenance == "l1(0.001)"
    assert 0.0 <= model.eval_accuracy <= 1.0
    with pytest.raises(ConfigError):
        train.train_regularized(ARCH, target, 0.1, "linf", FAST)


def test_dp_zero_noise_huge_clip_matches_ntl(pair):
    _, target, _ = pair
    plain = train.train_ntl(ARCH, target, FAST)
    dp = train.train_dp_lite(ARCH, target, 1e9, 0.0, FAST)
    for wa, wb in zip(weights_of(plain.network), weights_of(dp.network)):
        np.testing.assert_allclose(wa, wb, rtol=0, atol=1e-9)
    assert dp.provenance == "dp(1e+09,0)"


def test_dp_noise_changes_weights_and_hurts_eval(pair):
    _, target, ev = pair
    accs = {0.0: [], 2.0: []}
    for seed in range(5):
        cfg = TrainConfig(epochs=30, lr=0.1, batch_size=16, seed=seed)
        for z in accs:
            model = train.train_dp_lite(ARCH, target, 1.0, z, cfg, eval_set=ev)
            accs[z].append(model.eval_accuracy)
    assert np.mean(accs[2.0]) < np.mean(accs[0.0])


def test_selena_partition_teachers_exclude_own_samples(pair):
    _, target, _ = pair
    with pytest.raises(ConfigError):
        train.train_selena_lite(ARCH, target, 1, FAST)
    with pytest.raises(ConfigError):
        train.train_selena_lite(ARCH, target, len(target) + 1, FAST)
    model = train.train_selena_lite(ARCH, target, 4, FAST)
    assert model.provenance == "selena_lite(4)"
    assert 0.0 <= model.train_accuracy <= 1.0


def test_selena_determinism(pair):
    _, target, _ = pair
    a = train.train_selena_lite(ARCH, target, 2, FAST)
    b = train.train_selena_lite(ARCH, target, 2, FAST)
    for wa, wb in zip(weights_of(a.network), weights_of(b.network)):
        assert np.array_equal(wa, wb)


def test_procedure_fit_dispatch(pair, pretrained):
    _, target, ev = pair
    proc = TrainingProcedure("ntl", ARCH, FAST)
    direct = train.train_ntl(ARCH, target, FAST, eval_set=ev)
    via = proc.fit(target, FAST.seed, eval_set=ev)
    assert np.array_equal(via.network.layers[0].weights, direct.network.layers[0].weights)
    assert via.eval_accuracy == direct.eval_accuracy

    proc_tl = TrainingProcedure(
        "tl", ARCH, FAST, frozen_layers=2, pretrained=pretrained
    )
    model = proc_tl.fit(target, 11)
    assert model.provenance == "tl(2)"
    assert np.array_equal(model.network.layers[0].weights, pretrained.layers[0].weights)

    with pytest.raises(ConfigError):
        TrainingProcedure("tl", ARCH, FAST)
    with pytest.raises(ConfigError):
        TrainingProcedure("boost", ARCH, FAST)
