"""Boundary-distance membership attacks and threshold calibration.

Distance estimators come in two flavors: bim_* needs white-box weight
access and walks the input gradient; hsj_* only ever sees predicted
labels through a LabelOracle. Both are implemented batch-first: the
single-sample entry points wrap the batch path, and every per-sample
random stream is keyed by (master_seed, sample_key) so serial and batched
schedules consume identical draws.
"""

from dataclasses import dataclass, field
from typing import Callable, List, Optional

import numpy as np

from .data import SampleSet, split_membership
from .errors import CalibrationError, ConfigError
from .metrics import rates_from_counts
from .nn import Network, loss_and_grads, predict_labels
from .seeding import TAG_HSJ, TAG_SHADOW, derive_rng
from .train import TrainedModel, TrainingProcedure


class LabelOracle:
    """Batched label queries with a monotone query counter.

    fn(X, keys) -> labels; keys identify the attacked sample each row
    belongs to, which deterministic smoothed classifiers need. Plain
    networks ignore them.
    """

    def __init__(self, fn: Callable[[np.ndarray, np.ndarray], np.ndarray]):
        self._fn = fn
        self.query_count = 0

    def query(self, X: np.ndarray, keys) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if X.ndim == 1:
            X = X[None, :]
        keys = np.asarray(keys, dtype=np.int64)
        if keys.shape != (X.shape[0],):
            raise ConfigError(
                f"need one key per query row: {keys.shape} vs {X.shape[0]} rows"
            )
        self.query_count += X.shape[0]
        return np.asarray(self._fn(X, keys))


def oracle_for_network(net: Network) -> LabelOracle:
    return LabelOracle(lambda X, keys: predict_labels(net, X))


@dataclass
class WhiteBoxTarget:
    """BIM's view of the victim: weights for gradients, plus the label
    function that decides when the attack has crossed the boundary.

    stop_oracle defaults to the bare network's argmax. Pointing it at a
    smoothed wrapper attacks the defended decision function with the base
    model's gradients.
    """

    network: Network
    stop_oracle: Optional[LabelOracle] = None

    def __post_init__(self):
        if self.stop_oracle is None:
            self.stop_oracle = oracle_for_network(self.network)

    def labels(self, X, keys):
        return self.stop_oracle.query(X, keys)


@dataclass(frozen=True)
class BimBudget:
    alpha: float = 0.02
    max_iters: int = 1000
    clip_lo: Optional[float] = None
    clip_hi: Optional[float] = None

    def __post_init__(self):
        if not (np.isfinite(self.alpha) and self.alpha > 0):
            raise ConfigError(f"alpha must be positive, got {self.alpha}")
        if int(self.max_iters) != self.max_iters or self.max_iters < 1:
            raise ConfigError(f"max_iters must be a positive int, got {self.max_iters}")
        if (
            self.clip_lo is not None
            and self.clip_hi is not None
            and self.clip_lo >= self.clip_hi
        ):
            raise ConfigError("clip_lo must be below clip_hi")


@dataclass(frozen=True)
class HsjBudget:
    init_trials: int = 10
    bsearch_tol: float = 0.01
    grad_probes: int = 64
    max_rounds: int = 12
    max_queries: int = 3000
    box_lo: float = -12.0
    box_hi: float = 12.0

    def __post_init__(self):
        for name in ("init_trials", "grad_probes", "max_rounds", "max_queries"):
            v = getattr(self, name)
            if int(v) != v or v < 1:
                raise ConfigError(f"{name} must be a positive int, got {v}")
        if not (0 < self.bsearch_tol < 1):
            raise ConfigError(f"bsearch_tol must be in (0, 1), got {self.bsearch_tol}")
        if not (self.box_lo < self.box_hi):
            raise ConfigError("box_lo must be below box_hi")


@dataclass(frozen=True)
class AttackBudget:
    bim: BimBudget = field(default_factory=BimBudget)
    hsj: HsjBudget = field(default_factory=HsjBudget)


@dataclass
class DistanceEstimate:
    """delta_hat is 0 when the clean point is already misclassified and
    +inf when no adversarial point was found within budget. adv_x holds
    the misclassified point backing any finite nonzero estimate."""

    delta_hat: float
    queries_used: int
    converged: bool
    adv_x: Optional[np.ndarray] = None


def _rows(X) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[None, :]
    if X.ndim != 2:
        raise ConfigError(f"expected a (n, d) batch, got shape {X.shape}")
    return X


def _default_keys(n: int, keys) -> np.ndarray:
    if keys is None:
        return np.arange(n, dtype=np.int64)
    keys = np.asarray(keys, dtype=np.int64)
    if keys.shape != (n,):
        raise ConfigError(f"need {n} sample keys, got shape {keys.shape}")
    return keys


def bim_distance_batch(
    target,
    X,
    y_true,
    budget: BimBudget,
    keys=None,
) -> List[DistanceEstimate]:
    """L2 distance to the boundary via normalized-gradient ascent steps.

    Steps x <- clip(x + alpha * g/|g|) on the cross-entropy loss of the
    true label and stops each sample at its first label flip.
    """
    wb = target if isinstance(target, WhiteBoxTarget) else WhiteBoxTarget(target)
    X0 = _rows(X)
    n = X0.shape[0]
    y = np.asarray(y_true, dtype=np.int64).reshape(n)
    keys = _default_keys(n, keys)

    queries = np.ones(n, dtype=np.int64)
    out: List[Optional[DistanceEstimate]] = [None] * n
    labels0 = wb.labels(X0, keys)
    for i in np.nonzero(labels0 != y)[0]:
        out[i] = DistanceEstimate(0.0, 1, True, X0[i].copy())

    active = np.nonzero(labels0 == y)[0]
    Xc = X0[active].copy()
    for _ in range(int(budget.max_iters)):
        if active.size == 0:
            break
        g = loss_and_grads(wb.network, Xc, y[active]).input_gradient
        norms = np.linalg.norm(g, axis=1)
        dead = norms == 0.0
        for i in active[dead]:
            out[i] = DistanceEstimate(np.inf, int(queries[i]), False)
        active, Xc, g, norms = (
            active[~dead],
            Xc[~dead],
            g[~dead],
            norms[~dead],
        )
        if active.size == 0:
            break
        Xc = Xc + budget.alpha * g / norms[:, None]
        if budget.clip_lo is not None or budget.clip_hi is not None:
            Xc = np.clip(Xc, budget.clip_lo, budget.clip_hi)
        labels = wb.labels(Xc, keys[active])
        queries[active] += 1
        flipped = labels != y[active]
        for row, i in zip(np.nonzero(flipped)[0], active[flipped]):
            delta = float(np.linalg.norm(Xc[row] - X0[i]))
            out[i] = DistanceEstimate(delta, int(queries[i]), True, Xc[row].copy())
        active, Xc = active[~flipped], Xc[~flipped]
    for i in active:
        out[i] = DistanceEstimate(np.inf, int(queries[i]), False)
    return out  # type: ignore[return-value]


def bim_distance(target, x, y_true, budget: BimBudget, key: int = 0) -> DistanceEstimate:
    return bim_distance_batch(target, _rows(x), [int(y_true)], budget, keys=[key])[0]


class _HsjState:
    """Per-sample bookkeeping for the lockstep batch attack."""

    __slots__ = (
        "x0", "y", "key", "rng", "queries", "boundary", "best_delta",
        "best_adv", "done", "converged",
    )

    def __init__(self, x0, y, key, rng):
        self.x0 = x0
        self.y = int(y)
        self.key = int(key)
        self.rng = rng
        self.queries = 0
        self.boundary = None      # current adversarial-side point
        self.best_delta = np.inf
        self.best_adv = None
        self.done = False
        self.converged = False

    def can_spend(self, rows: int, cap: int) -> bool:
        return self.queries + rows <= cap

    def record(self, adv_point):
        delta = float(np.linalg.norm(adv_point - self.x0))
        if delta < self.best_delta:
            self.best_delta = delta
            self.best_adv = adv_point.copy()

    def finish(self, converged: bool):
        self.done = True
        self.converged = converged


def _oracle_flags(oracle, states, points):
    """One stacked query; returns per-state booleans 'is adversarial'."""
    X = np.vstack([p for pts in points for p in np.atleast_2d(pts)])
    keys = np.concatenate(
        [np.full(len(np.atleast_2d(pts)), st.key) for st, pts in zip(states, points)]
    )
    labels = oracle.query(X, keys)
    flags, pos = [], 0
    for st, pts in zip(states, points):
        m = len(np.atleast_2d(pts))
        flags.append(labels[pos : pos + m] != st.y)
        st.queries += m
        pos += m
    return flags


def _bisect_to_boundary(oracle, states, advs, tol, cap):
    """Shrink [clean, adversarial] segments until the bracket is within
    tol * current distance; returns the adversarial-side endpoints."""
    los = [st.x0.copy() for st in states]
    his = [a.copy() for a in advs]
    live = list(range(len(states)))
    while live:
        todo = []
        for i in live:
            st = states[i]
            gap = np.linalg.norm(his[i] - los[i])
            dist = np.linalg.norm(his[i] - st.x0)
            if gap <= tol * dist or not st.can_spend(1, cap):
                continue
            todo.append(i)
        if not todo:
            break
        mids = [(los[i] + his[i]) / 2.0 for i in todo]
        flags = _oracle_flags(oracle, [states[i] for i in todo], mids)
        for i, mid, flag in zip(todo, mids, flags):
            if flag[0]:
                his[i] = mid
            else:
                los[i] = mid
        live = todo
    return his


def hsj_distance_batch(
    oracle: LabelOracle,
    X,
    y_true,
    budget: HsjBudget,
    master_seed: int,
    keys=None,
) -> List[DistanceEstimate]:
    """Label-only boundary distance, lockstep over a batch.

    Per sample: find any misclassified point from uniform box draws,
    bisect to the boundary, then rounds of signed-probe normal estimation,
    a geometrically decaying step, and re-projection. The estimate is the
    closest boundary point seen. Every random draw comes from the sample's
    own (master_seed, TAG_HSJ, key) stream, so batch composition cannot
    change results.
    """
    X0 = _rows(X)
    n, d = X0.shape
    y = np.asarray(y_true, dtype=np.int64).reshape(n)
    keys = _default_keys(n, keys)
    cap = int(budget.max_queries)

    states = [
        _HsjState(X0[i], y[i], keys[i], derive_rng(master_seed, TAG_HSJ, int(keys[i])))
        for i in range(n)
    ]

    flags = _oracle_flags(oracle, states, [st.x0 for st in states])
    for st, f in zip(states, flags):
        if f[0]:
            st.best_delta = 0.0
            st.best_adv = st.x0.copy()
            st.finish(True)

    # Initialization: per-sample uniform box draws until one misclassifies.
    searching = [st for st in states if not st.done]
    starts = {id(st): None for st in searching}
    for _ in range(int(budget.init_trials)):
        trying = [
            st for st in searching if starts[id(st)] is None and st.can_spend(1, cap)
        ]
        if not trying:
            break
        cands = [
            st.rng.uniform(budget.box_lo, budget.box_hi, size=d) for st in trying
        ]
        flags = _oracle_flags(oracle, trying, cands)
        for st, cand, flag in zip(trying, cands, flags):
            if flag[0]:
                starts[id(st)] = cand
    for st in searching:
        if starts[id(st)] is None:
            st.finish(False)  # budget exhausted without misclassification

    live = [st for st in states if not st.done]
    if live:
        his = _bisect_to_boundary(
            oracle, live, [starts[id(st)] for st in live], budget.bsearch_tol, cap
        )
        for st, hi in zip(live, his):
            st.boundary = hi
            st.record(hi)

    for t in range(1, int(budget.max_rounds) + 1):
        # A round costs grad_probes + up to ~10 step checks + the bisection.
        active = [st for st in live if not st.done]
        budget_ok = []
        for st in active:
            if st.can_spend(int(budget.grad_probes) + 1, cap):
                budget_ok.append(st)
            else:
                st.finish(False)
        active = budget_ok
        if not active:
            break

        # Normal estimation from signed probes around the boundary point.
        probes, units = [], []
        for st in active:
            u = st.rng.standard_normal((int(budget.grad_probes), d))
            u /= np.linalg.norm(u, axis=1, keepdims=True)
            eta = max(st.best_delta / d, 1e-12)
            units.append(u)
            probes.append(st.boundary + eta * u)
        flags = _oracle_flags(oracle, active, probes)
        dirs = {}
        for st, u, f in zip(active, units, flags):
            phi = np.where(f, 1.0, -1.0)
            g = (phi[:, None] * u).mean(axis=0)
            norm = np.linalg.norm(g)
            if norm == 0.0:
                g = st.boundary - st.x0
                norm = np.linalg.norm(g)
            dirs[id(st)] = g / norm

        # Geometric step into the adversarial side, halved until it lands.
        stepped = {id(st): None for st in active}
        scale = {id(st): np.linalg.norm(st.boundary - st.x0) / np.sqrt(t) for st in active}
        for _ in range(10):
            trying = [
                st
                for st in active
                if stepped[id(st)] is None and st.can_spend(1, cap)
            ]
            if not trying:
                break
            cands = {
                id(st): st.boundary + scale[id(st)] * dirs[id(st)] for st in trying
            }
            flags = _oracle_flags(oracle, trying, [cands[id(st)] for st in trying])
            for st, f in zip(trying, flags):
                if f[0]:
                    stepped[id(st)] = cands[id(st)]
                else:
                    scale[id(st)] /= 2.0

        movers = [st for st in active if stepped[id(st)] is not None]
        if movers:
            his = _bisect_to_boundary(
                oracle,
                movers,
                [stepped[id(st)] for st in movers],
                budget.bsearch_tol,
                cap,
            )
            for st, hi in zip(movers, his):
                st.boundary = hi
                st.record(hi)

    for st in states:
        if not st.done:
            st.finish(True)

    results = []
    for st in states:
        results.append(
            DistanceEstimate(
                st.best_delta, st.queries, st.converged,
                None if st.best_adv is None else st.best_adv,
            )
        )
        if st.queries > cap:
            raise CalibrationError(
                f"internal error: sample used {st.queries} queries, cap {cap}"
            )
    return results


def hsj_distance(
    oracle: LabelOracle, x, y_true, budget: HsjBudget, master_seed: int, key: int = 0
) -> DistanceEstimate:
    return hsj_distance_batch(
        oracle, _rows(x), [int(y_true)], budget, master_seed, keys=[key]
    )[0]


def calibrate_threshold(values, flags, member_if_geq: bool = True):
    """Threshold maximizing ASR = 0.5 (TPR + TNR).

    member_if_geq picks the decision direction: distances use v >= tau,
    entropy scores use v <= tau. Candidates are +-inf and midpoints of
    adjacent distinct values; ties resolve to the smallest tau.
    """
    v = np.asarray(values, dtype=np.float64)
    f = np.asarray(flags)
    if v.ndim != 1 or f.shape != v.shape:
        raise CalibrationError(
            f"values and flags must be equal-length 1-D, got {v.shape} and {f.shape}"
        )
    if np.isnan(v).any():
        raise CalibrationError("NaN scores cannot be calibrated")
    if not np.isin(f, (0, 1)).all():
        raise CalibrationError("membership flags must be 0/1")
    f = f.astype(bool)
    if f.all() or not f.any():
        raise CalibrationError("need both members and nonmembers to calibrate")

    distinct = np.unique(v)
    with np.errstate(invalid="ignore"):  # inf midpoints are intentional
        mids = (distinct[:-1] + distinct[1:]) / 2.0
    # a midpoint with an infinite neighbor collapses to that infinity, which
    # under <= merges "all finite" with "everything"; put a finite candidate
    # back between the extreme finite value and the infinity
    finite = distinct[np.isfinite(distinct)]
    seps = []
    if len(finite) and distinct[-1] == np.inf:
        seps.append(finite[-1] + 1.0)
    if len(finite) and distinct[0] == -np.inf:
        seps.append(finite[0] - 1.0)
    cands = np.unique(np.concatenate([[-np.inf], mids, seps, [np.inf]]))

    members = np.sort(v[f])
    nonmembers = np.sort(v[~f])
    nm, nn = len(members), len(nonmembers)
    if member_if_geq:
        tp = nm - np.searchsorted(members, cands, side="left")
        tn = np.searchsorted(nonmembers, cands, side="left")
    else:
        tp = np.searchsorted(members, cands, side="right")
        tn = nn - np.searchsorted(nonmembers, cands, side="right")
    # tp*nn + tn*nm orders candidates exactly like ASR but in integers, so
    # the maximizer and its tie-break never hinge on float rounding
    score = tp * nn + tn * nm
    best = int(np.argmax(score))  # first max = smallest tau
    _, _, asr = rates_from_counts(
        int(tp[best]), nm - int(tp[best]), int(tn[best]), nn - int(tn[best])
    )
    return float(cands[best]), float(asr)


def entropy_scores(probs: np.ndarray, y_true) -> np.ndarray:
    """Cross-entropy of the true label, floored at 1e-12 confidence."""
    probs = np.asarray(probs, dtype=np.float64)
    y = np.asarray(y_true, dtype=np.int64)
    p = probs[np.arange(len(y)), y]
    return -np.log(np.clip(p, 1e-12, None))


def entropy_mia(proba_fn, samples: SampleSet, tau: float, keys=None):
    """Member iff the true-label cross entropy is <= tau."""
    keys = _default_keys(len(samples), keys)
    probs = proba_fn(samples.features, keys)
    scores = entropy_scores(probs, samples.labels)
    return scores <= tau, scores


@dataclass
class ShadowFit:
    """A shadow model plus the member/nonmember split it was built on."""

    model: TrainedModel
    members: SampleSet
    nonmembers: SampleSet


def train_shadow(
    procedure: TrainingProcedure,
    adversary_data: SampleSet,
    n_members: int,
    seed: int,
) -> ShadowFit:
    """Replicate the target's training recipe on attacker-owned data."""
    if len(adversary_data) < 2 * n_members:
        raise ConfigError(
            f"adversary pool has {len(adversary_data)} samples; "
            f"need at least {2 * n_members} for a balanced shadow split"
        )
    members, rest = split_membership(adversary_data, n_members, seed)
    shadow_seed = int(derive_rng(seed, TAG_SHADOW).integers(2**63))
    model = procedure.fit(members, shadow_seed, eval_set=rest)
    return ShadowFit(model, members, rest)


@dataclass
class AttackRecord:
    sample_id: int
    true_member: int
    delta_hat: float
    queries: int
    converged: bool
    predicted_member: int


def run_label_only_mia(
    target,
    members: SampleSet,
    nonmembers: SampleSet,
    tau: float,
    budget: AttackBudget,
    mode: str,
    master_seed: int = 0,
    start_id: int = 0,
) -> List[AttackRecord]:
    """Distance every sample, predict member iff delta_hat >= tau.

    mode 'bim' wants a Network or WhiteBoxTarget; 'hsj' wants a
    LabelOracle. Sample ids double as smoothing keys and rng stream ids,
    numbered start_id..start_id+n-1 across members then nonmembers.
    """
    if mode not in ("bim", "hsj"):
        raise ConfigError(f"mode must be 'bim' or 'hsj', got {mode!r}")
    X = np.vstack([members.features, nonmembers.features])
    y = np.concatenate([members.labels, nonmembers.labels])
    truth = np.concatenate(
        [np.ones(len(members), np.int64), np.zeros(len(nonmembers), np.int64)]
    )
    ids = start_id + np.arange(len(truth))
    if mode == "bim":
        estimates = bim_distance_batch(target, X, y, budget.bim, keys=ids)
    else:
        if not isinstance(target, LabelOracle):
            raise ConfigError("hsj mode needs a LabelOracle")
        estimates = hsj_distance_batch(
            target, X, y, budget.hsj, master_seed, keys=ids
        )
    return [
        AttackRecord(
            sample_id=int(i),
            true_member=int(t),
            delta_hat=float(est.delta_hat),
            queries=int(est.queries_used),
            converged=bool(est.converged),
            predicted_member=int(est.delta_hat >= tau),
        )
        for i, t, est in zip(ids, truth, estimates)
    ]
