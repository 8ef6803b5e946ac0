import os
import time

# Pin BLAS pools before numpy loads anywhere in the suite, matching what
# the CLI does; cross-run bitwise comparisons depend on it.
for _var in (
    "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS", "OMP_NUM_THREADS",
    "NUMEXPR_NUM_THREADS", "VECLIB_MAXIMUM_THREADS",
):
    os.environ.setdefault(_var, "1")

import numpy as np
import pytest

from miadip.nn import build_network, loss_and_grads, predict_labels, sgd_step


def two_blob_data(rng, n, dim, sep):
    """Binary gaussian blobs split along the first axis."""
    y = rng.integers(0, 2, n)
    mu = np.zeros(dim)
    mu[0] = sep / 2
    X = rng.normal(size=(n, dim)) + np.where(y[:, None] == 1, mu, -mu)
    return X, y.astype(np.int64)


@pytest.fixture(scope="session")
def linear_problem():
    """A trained 2-class linear net plus 200 correctly classified probe
    points with their analytic boundary distances |w.x+b|/|w|.

    The attacks' distance estimates are checked against these margins, so
    probes that the net itself gets wrong are dropped (their estimate is 0
    by definition, not a distance).
    """
    rng = np.random.default_rng(1234)
    dim = 16
    Xtr, ytr = two_blob_data(rng, 600, dim, 4.0)
    net = build_network([dim, 2], seed=5)
    for _ in range(40):
        order = rng.permutation(len(Xtr))
        for start in range(0, len(Xtr), 64):
            idx = order[start:start + 64]
            net = sgd_step(net, loss_and_grads(net, Xtr[idx], ytr[idx]), 0.2)
    Xte, yte = two_blob_data(rng, 500, dim, 4.0)
    keep = predict_labels(net, Xte) == yte
    Xte, yte = Xte[keep][:200], yte[keep][:200]
    assert len(Xte) == 200
    w = net.layers[0].weights[:, 1] - net.layers[0].weights[:, 0]
    b = net.layers[0].biases[1] - net.layers[0].biases[0]
    margins = np.abs(Xte @ w + b) / np.linalg.norm(w)
    return net, Xte, yte, margins


class Bundle:
    """Five paired seeds of the headline experiment at default scale.

    Per seed: an untransferred baseline cell, a transfer cell at the best
    frozen depth, and the same transfer cell with tuned smoothing on top.
    The trend assertions all read from here, so the expensive runs happen
    once per session.
    """

    def __init__(self, cells, sources, stage1_seconds, total_seconds):
        self.cells = cells  # (kind, seed) -> CellResult
        self.sources = sources  # seed -> source Network
        self.stage1_seconds = stage1_seconds  # source + ntl + plain tl per seed
        self.total_seconds = total_seconds
        self.seeds = sorted({s for _, s in cells})

    def ntl(self, seed):
        return self.cells[("ntl", seed)]

    def tl(self, seed):
        return self.cells[("tl", seed)]

    def tuned(self, seed):
        return self.cells[("tuned", seed)]


@pytest.fixture(scope="session")
def bundle():
    from miadip.config import RunConfig
    from miadip.data import gen_task_pair
    from miadip.experiment import CellSpec, run_cell
    from miadip.train import train_source

    cfg = RunConfig()
    seeds = range(5)
    cells = {}
    sources = {}
    stage1_seconds = 0.0
    t_all = time.perf_counter()
    for seed in seeds:
        t0 = time.perf_counter()
        source_set, _, _ = gen_task_pair(cfg.task_config(seed))
        sources[seed] = train_source(
            cfg.arch_spec(), source_set, cfg.source.epochs, cfg.source.lr,
            seed, cfg.source.batch_size,
        )
        cells[("ntl", seed)] = run_cell(CellSpec("ntl", 0.0, 64, 0.0, seed), cfg)
        cells[("tl", seed)] = run_cell(
            CellSpec("tl", "best", 64, 0.0, seed), cfg, source_net=sources[seed])
        stage1_seconds += time.perf_counter() - t0
        cells[("tuned", seed)] = run_cell(
            CellSpec("tl", "best", 64, "tune", seed), cfg, source_net=sources[seed])
    return Bundle(cells, sources, stage1_seconds, time.perf_counter() - t_all)
