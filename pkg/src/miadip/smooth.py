"""Randomized-smoothing wrapper and the sigma tuner.

The smoothed classifier replicates each input s times with Gaussian
feature noise, averages the base model's softmax vectors, and answers
with one label. Noise is keyed per sample: a given (master_seed, key)
always sees the same s noise vectors, so a black-box attacker probing one
sample faces a fixed decision function rather than a flickering one.

Since the noise enters a dense first layer, base(x + n) only differs from
base(x) by n @ W1 before the first nonlinearity. The per-key projections
n @ W1 are therefore cached, which makes repeated queries against the
same sample (the attack access pattern) cheap.
"""

from collections import OrderedDict
from dataclasses import dataclass
from typing import List, Optional

import numpy as np

from .attack import HsjBudget, LabelOracle, calibrate_threshold, hsj_distance_batch
from .data import SampleSet
from .errors import ConfigError, NumericError
from .metrics import classification_accuracy
from .nn import Network, forward, softmax
from .seeding import TAG_SMOOTH, derive_rng

_CACHE_KEYS = 4096


class SmoothedClassifier:
    """Soft-voting noisy ensemble around a base network.

    vote selects the label rule: "soft" takes the argmax of the averaged
    probability vector, "majority" the most common per-draw argmax.
    fresh_noise=True redraws noise on every query (flicker mode for
    experiments); the default keyed mode is what the defense deploys.
    """

    def __init__(
        self,
        base: Network,
        sigma: float,
        s_noise: int = 32,
        master_seed: int = 0,
        vote: str = "soft",
        fresh_noise: bool = False,
    ):
        if not (np.isfinite(sigma) and sigma >= 0):
            raise ConfigError(f"sigma must be finite and >= 0, got {sigma}")
        if int(s_noise) != s_noise or s_noise < 1:
            raise ConfigError(f"s_noise must be a positive int, got {s_noise}")
        if vote not in ("soft", "majority"):
            raise ConfigError(f"vote must be 'soft' or 'majority', got {vote!r}")
        self.base = base
        self.sigma = float(sigma)
        self.s_noise = int(s_noise)
        self.master_seed = int(master_seed)
        self.vote = vote
        self.fresh_noise = bool(fresh_noise)
        self._proj_cache: OrderedDict = OrderedDict()
        self._fresh_rng = derive_rng(self.master_seed, TAG_SMOOTH)

    def _noise_proj(self, key: int) -> np.ndarray:
        """sigma-scaled (s, fan_out) projection of this key's noise onto
        the first layer's weights."""
        key = int(key)
        cached = self._proj_cache.get(key)
        if cached is not None:
            self._proj_cache.move_to_end(key)
            return cached
        w1 = self.base.layers[0].weights
        noise = derive_rng(self.master_seed, TAG_SMOOTH, key).standard_normal(
            (self.s_noise, w1.shape[0])
        )
        proj = (noise @ w1) * self.sigma
        self._proj_cache[key] = proj
        if len(self._proj_cache) > _CACHE_KEYS:
            self._proj_cache.popitem(last=False)
        return proj

    def _proba_and_votes(self, X: np.ndarray, keys: np.ndarray):
        """Averaged probabilities (n, C) and per-draw vote counts (n, C)."""
        layers = self.base.layers
        w1, b1 = layers[0].weights, layers[0].biases
        n, s = X.shape[0], self.s_noise
        c = self.base.output_dim
        z1 = X @ w1 + b1

        probs = np.empty((n, c))
        votes = np.zeros((n, c))
        chunk = max(1, 65536 // s)
        for start in range(0, n, chunk):
            stop = min(start + chunk, n)
            m = stop - start
            if self.fresh_noise:
                proj = (
                    self._fresh_rng.standard_normal((m, s, w1.shape[0])) @ w1
                ) * self.sigma
            else:
                proj = np.stack([self._noise_proj(k) for k in keys[start:stop]])
            a = z1[start:stop, None, :] + proj  # (m, s, h1) preactivation
            if layers[0].activation == "relu":
                a = np.maximum(a, 0.0)
            a = a.reshape(m * s, -1)
            for layer in layers[1:]:
                a = a @ layer.weights + layer.biases
                if layer.activation == "relu":
                    a = np.maximum(a, 0.0)
            if not np.isfinite(a).all():
                raise NumericError("non-finite logits under smoothing noise")
            p = softmax(a).reshape(m, s, c)
            probs[start:stop] = p.mean(axis=1)
            draw_labels = a.reshape(m, s, c).argmax(axis=2)
            for j in range(s):
                votes[np.arange(start, stop), draw_labels[:, j]] += 1.0
        return probs, votes

    def predict_proba_batch(self, X, keys) -> np.ndarray:
        X, keys = self._check(X, keys)
        if self.sigma == 0.0:
            return softmax(forward(self.base, X))
        return self._proba_and_votes(X, keys)[0]

    def predict_batch(self, X, keys) -> np.ndarray:
        X, keys = self._check(X, keys)
        if self.sigma == 0.0:
            return forward(self.base, X).argmax(axis=1)
        probs, votes = self._proba_and_votes(X, keys)
        table = votes if self.vote == "majority" else probs
        return table.argmax(axis=1)

    def _check(self, X, keys):
        X = np.asarray(X, dtype=np.float64)
        if X.ndim == 1:
            X = X[None, :]
        if X.shape[1] != self.base.input_dim:
            raise ConfigError(
                f"input dim {X.shape[1]} != network dim {self.base.input_dim}"
            )
        if not np.isfinite(X).all():
            raise NumericError("smoothed classifier got non-finite inputs")
        keys = np.asarray(keys, dtype=np.int64)
        if keys.shape != (X.shape[0],):
            raise ConfigError(f"need {X.shape[0]} keys, got shape {keys.shape}")
        return X, keys


def smooth_predict(sc: SmoothedClassifier, x, sample_key: int) -> int:
    return int(sc.predict_batch(np.atleast_2d(x), [int(sample_key)])[0])


def smooth_predict_proba(sc: SmoothedClassifier, x, sample_key: int) -> np.ndarray:
    return sc.predict_proba_batch(np.atleast_2d(x), [int(sample_key)])[0]


def oracle_for(sc: SmoothedClassifier) -> LabelOracle:
    return LabelOracle(lambda X, keys: sc.predict_batch(X, keys))


@dataclass
class TuneRow:
    sigma: float
    acc: float
    asr: float
    # per-sample boundary distances behind asr, members first; callers
    # reuse them for reporting instead of re-attacking at the chosen sigma
    estimates: Optional[list] = None


@dataclass
class TuneResult:
    sigma: float
    flagged: bool  # no candidate kept enough accuracy; fell back to 0
    acc_base: float
    rows: List[TuneRow]


def tune_sigma(
    base: Network,
    candidates,
    members: SampleSet,
    nonmembers: SampleSet,
    budget: HsjBudget,
    master_seed: int,
    s_noise: int = 32,
    acc_floor: float = 0.02,
    subsample: Optional[int] = None,
) -> TuneResult:
    """Pick the candidate sigma minimizing measured ASR while keeping
    nonmember accuracy within acc_floor of the unsmoothed model.

    ASR per candidate is the eval-set-best label-only ASR: boundary
    distances through the smoothed oracle, threshold chosen by the
    calibration maximizer on this very bundle. That upper-bounds any
    realistic attacker, so the tuner optimizes against the worst case.
    Ties go to the smaller sigma. subsample caps the per-class bundle
    size to keep tuning queries proportionate.
    """
    cands = sorted(float(s) for s in candidates)
    if not cands:
        raise ConfigError("need at least one sigma candidate")
    if any(not (np.isfinite(s) and s >= 0) for s in cands):
        raise ConfigError(f"sigma candidates must be finite and >= 0: {cands}")
    if subsample is not None:
        members = members.subset(np.arange(min(int(subsample), len(members))))
        nonmembers = nonmembers.subset(np.arange(min(int(subsample), len(nonmembers))))

    keys_m = np.arange(len(members))
    keys_n = len(members) + np.arange(len(nonmembers))
    X = np.vstack([members.features, nonmembers.features])
    y = np.concatenate([members.labels, nonmembers.labels])
    truth = np.concatenate([np.ones(len(members)), np.zeros(len(nonmembers))])
    all_keys = np.concatenate([keys_m, keys_n])

    acc_base = classification_accuracy(base, nonmembers)
    rows = []
    best = None  # (asr, sigma)
    for sigma in cands:
        sc = SmoothedClassifier(base, sigma, s_noise, master_seed)
        estimates = hsj_distance_batch(
            oracle_for(sc), X, y, budget, master_seed, keys=all_keys
        )
        deltas = np.array([e.delta_hat for e in estimates])
        _, asr = calibrate_threshold(deltas, truth)
        acc = classification_accuracy(sc, nonmembers, keys=keys_n)
        rows.append(TuneRow(sigma=sigma, acc=acc, asr=asr, estimates=estimates))
        if acc >= acc_base - acc_floor and (best is None or asr < best[0]):
            best = (asr, sigma)

    if best is None:
        return TuneResult(sigma=0.0, flagged=True, acc_base=acc_base, rows=rows)
    return TuneResult(sigma=best[1], flagged=False, acc_base=acc_base, rows=rows)
