"""Experiment cells: train one target, attack it three ways, report.

A cell is the unit of the evaluation grid (variant, frozen fraction,
target size, smoothing sigma, seed). Each cell is a pure function of its
spec plus the run configuration, so sweeps can execute cells in any
order or process pool and still byte-reproduce their CSV rows.

Threat model per attack column:
  bim      white-box gradients of the base network. A query-time
           smoothing wrapper never changes the weights, so bim always
           targets the base model and its column moves only with training.
  hsj      label-only queries against the deployed decision function,
           which is the smoothed wrapper whenever smoothing is on.
  entropy  confidence vectors of the deployed classifier; one query per
           sample. Its per-sample CSV reuses the delta_hat column for the
           loss score.

Thresholds in the CSV are shadow-calibrated: the attacker replays the
victim's training recipe on its own pool, picks tau there, and carries it
over. The eval-set-best tau/asr pair is reported alongside as the
attacker upper bound; the sigma tuner already optimizes against that
upper bound, so tuned cells reuse its rows instead of re-attacking.
"""

import csv
import json
import os
import time
from concurrent.futures import ProcessPoolExecutor
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple, Union

import numpy as np

from .attack import (
    AttackRecord,
    WhiteBoxTarget,
    bim_distance_batch,
    calibrate_threshold,
    entropy_scores,
    hsj_distance_batch,
    oracle_for_network,
    train_shadow,
)
from .config import RunConfig
from .data import gen_adversary_pool, gen_task_pair
from .errors import ConfigError, ExperimentError, MiadipError
from .metrics import classification_accuracy, confusion_counts, rates_from_counts
from .nn import Network, forward, save_checkpoint, softmax
from .smooth import SmoothedClassifier, TuneResult, oracle_for, tune_sigma
from .train import TrainedModel, TrainingProcedure, train_source

RESULT_COLUMNS = (
    "cell_id", "variant", "M_frac", "N", "sigma", "seed",
    "asr_bim", "asr_hsj", "asr_entropy", "acc", "train_acc", "gap",
    "queries_total", "wall_ms",
)

RECORD_COLUMNS = (
    "sample_id", "true_member", "delta_hat", "queries", "converged",
    "predicted_member",
)

# Shadow-side sample ids; keeps the shadow's rng/noise streams disjoint
# from the target bundle, whose ids start at 0.
SHADOW_START_ID = 10_000


@dataclass(frozen=True)
class CellSpec:
    """One grid point. m_frac is the fraction of dense layers frozen
    ("best" sweeps all depths and keeps the best eval accuracy); sigma is
    in mean-per-feature-std units ("tune" runs the sigma tuner)."""

    variant: str
    m_frac: Union[float, str] = 0.0
    n: int = 64
    sigma: Union[float, str] = 0.0
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.m_frac, str) and self.m_frac != "best":
            raise ConfigError(f"m_frac must be a fraction or 'best', got {self.m_frac!r}")
        if not isinstance(self.m_frac, str) and not 0 <= self.m_frac <= 1:
            raise ConfigError(f"m_frac must lie in [0, 1], got {self.m_frac}")
        if isinstance(self.sigma, str) and self.sigma != "tune":
            raise ConfigError(f"sigma must be a number or 'tune', got {self.sigma!r}")

    @property
    def cell_id(self) -> str:
        return (
            f"{self.variant}-m{_tag(self.m_frac)}-n{self.n}"
            f"-s{_tag(self.sigma)}-seed{self.seed}"
        )

    @property
    def family(self) -> str:
        """cell_id minus the seed, the aggregation key for summaries."""
        return self.cell_id.rsplit("-seed", 1)[0]


def _tag(v) -> str:
    return v if isinstance(v, str) else f"{float(v):g}"


@contextmanager
def _stage(name: str):
    """Tag runtime failures with the pipeline stage. Config mistakes pass
    through untouched so they keep their exit-code-2 meaning."""
    try:
        yield
    except (ConfigError, ExperimentError):
        raise
    except MiadipError as exc:
        raise ExperimentError(name, str(exc)) from exc


@dataclass
class AttackEval:
    """One attack column: shadow-calibrated decision plus the eval-best
    upper bound, with the per-sample records behind both."""

    attack: str
    tau: float          # shadow-calibrated threshold
    asr: float          # at tau, on the target bundle
    tp: int
    fn: int
    tn: int
    fp: int
    tau_best: float     # threshold maximizing ASR on this very bundle
    asr_best: float
    shadow_asr: float   # what tau achieved on the shadow bundle
    queries: int        # target-side oracle queries
    records: List[AttackRecord] = field(repr=False, default_factory=list)


@dataclass
class CellResult:
    spec: CellSpec
    cell_id: str
    frozen_layers: int
    m_frac: float            # realized M/K
    n_members: int           # bundle size per side
    sigma_std: float         # deployed sigma, std units
    sigma_raw: float         # deployed sigma, feature units
    feature_std: float       # mean per-feature std of the training set
    model: TrainedModel
    attacks: Dict[str, AttackEval]
    acc: float               # deployed classifier on the full eval set
    acc_bundle: float        # deployed classifier on the attacked nonmembers
    acc_base_bundle: float   # bare network on the attacked nonmembers
    tune: Optional[TuneResult]
    m_scan: List[Tuple[int, float]]
    source_train_acc: Optional[float]
    queries_total: int
    wall_ms: float
    warnings: List[str]


def _resolve_frozen(spec: CellSpec, n_layers: int) -> Optional[int]:
    """None means sweep all depths; otherwise the exact layer count."""
    if spec.variant != "tl":
        return 0
    if spec.m_frac == "best":
        return None
    m = int(round(float(spec.m_frac) * n_layers))
    if m > n_layers - 1:
        raise ConfigError(
            f"m_frac {spec.m_frac} freezes {m} of {n_layers} layers; "
            "the head must stay trainable"
        )
    return m


def _fit_target(spec, cfg, source_net, target_train, target_eval):
    """Train the cell's model; returns (model, procedure, M, m_scan)."""
    arch = cfg.arch_spec()
    n_layers = len(arch.hidden) + 1
    tcfg = cfg.train_config()
    tr = cfg.transfer

    def procedure_at(m: int) -> TrainingProcedure:
        return TrainingProcedure(
            spec.variant, arch, tcfg,
            frozen_layers=m, head_replace=tr.head_replace,
            pretrained=source_net if spec.variant == "tl" else None,
            lam=tr.lam, clip_norm=tr.clip_norm, noise_mult=tr.noise_mult,
            k_parts=tr.k_parts,
        )

    frozen = _resolve_frozen(spec, n_layers)
    if frozen is not None:
        proc = procedure_at(frozen)
        model = proc.fit(target_train, spec.seed, eval_set=target_eval)
        return model, proc, frozen, [(frozen, model.eval_accuracy)]

    m_scan, fits = [], []
    for m in range(n_layers):
        fitted = procedure_at(m).fit(target_train, spec.seed, eval_set=target_eval)
        fits.append(fitted)
        m_scan.append((m, fitted.eval_accuracy))
    # strict > keeps the shallowest freeze on ties
    best = max(range(n_layers), key=lambda i: (fits[i].eval_accuracy, -i))
    return fits[best], procedure_at(best), best, m_scan


def _distance_attack(mode, network, smoothed, X, y, ids, budget, master_seed):
    """Boundary-distance estimates for one side (target or shadow)."""
    if mode == "bim":
        est = bim_distance_batch(WhiteBoxTarget(network), X, y, budget.bim, keys=ids)
    else:
        oracle = oracle_for(smoothed) if smoothed is not None else oracle_for_network(network)
        est = hsj_distance_batch(oracle, X, y, budget.hsj, master_seed, keys=ids)
    deltas = np.array([e.delta_hat for e in est])
    queries = np.array([e.queries_used for e in est])
    converged = np.array([e.converged for e in est])
    return deltas, queries, converged


def _proba_fn(network, smoothed):
    if smoothed is not None:
        return smoothed.predict_proba_batch
    return lambda X, keys: softmax(forward(network, X))


def _attack_eval(attack, ids, truth, deltas, queries, converged,
                 tau_shadow, shadow_asr, member_if_geq) -> AttackEval:
    predicted = deltas >= tau_shadow if member_if_geq else deltas <= tau_shadow
    tp, fn, tn, fp = confusion_counts(predicted, truth)
    _, _, asr = rates_from_counts(tp, fn, tn, fp)
    tau_best, asr_best = calibrate_threshold(deltas, truth, member_if_geq)
    records = [
        AttackRecord(
            sample_id=int(i), true_member=int(t), delta_hat=float(d),
            queries=int(q), converged=bool(c), predicted_member=int(p),
        )
        for i, t, d, q, c, p in zip(ids, truth, deltas, queries, converged, predicted)
    ]
    return AttackEval(
        attack=attack, tau=float(tau_shadow), asr=float(asr),
        tp=tp, fn=fn, tn=tn, fp=fp,
        tau_best=float(tau_best), asr_best=float(asr_best),
        shadow_asr=float(shadow_asr),
        queries=int(queries.sum()), records=records,
    )


def run_cell(spec: CellSpec, cfg: RunConfig, source_net: Optional[Network] = None,
             network: Optional[Network] = None) -> CellResult:
    """Execute one cell. source_net short-circuits source pretraining
    (sweeps share one per seed); network skips target training entirely
    and attacks the given checkpoint instead."""
    t0 = time.perf_counter()
    warnings: List[str] = []
    with _stage("data"):
        task_cfg = cfg.task_config(spec.seed, spec.n)
        source_set, target_train, target_eval = gen_task_pair(task_cfg)
    budget = cfg.budget()

    source_train_acc = None
    if spec.variant == "tl":
        with _stage("source"):
            if source_net is None:
                source_net = train_source(
                    cfg.arch_spec(), source_set, cfg.source.epochs,
                    cfg.source.lr, spec.seed, cfg.source.batch_size,
                )
            source_train_acc = classification_accuracy(source_net, source_set)
        if source_train_acc < 0.8:
            warnings.append(
                f"source model train accuracy {source_train_acc:.3f} below 0.8; "
                "transferred features may be weak"
            )

    with _stage("train"):
        if network is not None:
            model = TrainedModel(
                network, "checkpoint",
                classification_accuracy(network, target_train),
                classification_accuracy(network, target_eval),
            )
            frozen = 0 if spec.variant != "tl" else (
                0 if spec.m_frac == "best"
                else int(round(float(spec.m_frac) * (len(cfg.arch.hidden) + 1)))
            )
            proc = None
            m_scan = []
        else:
            model, proc, frozen, m_scan = _fit_target(
                spec, cfg, source_net, target_train, target_eval,
            )
    n_layers = len(cfg.arch.hidden) + 1

    # balanced attacked bundle: members from the training set, nonmembers
    # fresh draws, equal counts by construction
    nb = min(len(target_train), len(target_eval), cfg.eval.eval_cap)
    members = target_train.subset(np.arange(nb))
    nonmembers = target_eval.subset(np.arange(nb))
    ids = np.arange(2 * nb)
    truth = np.concatenate([np.ones(nb, np.int64), np.zeros(nb, np.int64)])
    X = np.vstack([members.features, nonmembers.features])
    y = np.concatenate([members.labels, nonmembers.labels])

    feature_std = float(np.mean(target_train.features.std(axis=0)))
    sm = cfg.smooth
    tune = None
    hsj_reused = None  # (deltas, queries, converged) recycled from tuning
    if spec.sigma == "tune":
        cand_std = sorted(float(c) for c in sm.candidates)
        cand_raw = [c * feature_std for c in cand_std]
        with _stage("smooth"):
            tune = tune_sigma(
                model.network, cand_raw, members, nonmembers, budget.hsj,
                master_seed=spec.seed, s_noise=sm.s_noise, acc_floor=sm.acc_floor,
            )
        sigma_raw = tune.sigma
        if sigma_raw in cand_raw:
            sigma_std = cand_std[cand_raw.index(sigma_raw)]
            chosen = next(r for r in tune.rows if r.sigma == sigma_raw)
            hsj_reused = (
                np.array([e.delta_hat for e in chosen.estimates]),
                np.array([e.queries_used for e in chosen.estimates]),
                np.array([e.converged for e in chosen.estimates]),
            )
        else:
            # flagged fallback to 0 when 0 was not on the candidate list;
            # nothing to reuse, the cell attacks the bare model below
            sigma_std = 0.0
        if tune.flagged:
            warnings.append("no sigma candidate met the accuracy floor; deployed sigma 0")
    else:
        sigma_std = float(spec.sigma)
        sigma_raw = sigma_std * feature_std

    if sigma_raw > 0:
        # tuned cells deploy exactly what the tuner measured: soft vote,
        # keyed noise
        if spec.sigma == "tune":
            smoothed = SmoothedClassifier(model.network, sigma_raw, sm.s_noise, spec.seed)
        else:
            smoothed = SmoothedClassifier(
                model.network, sigma_raw, sm.s_noise, spec.seed,
                vote=sm.vote, fresh_noise=sm.fresh_noise,
            )
    else:
        smoothed = None

    # shadow: replay the training recipe on attacker-owned data, defended
    # the same way (the attacker knows the deployed mechanism)
    if proc is None:
        arch = cfg.arch_spec()
        tr = cfg.transfer
        proc = TrainingProcedure(
            spec.variant, arch, cfg.train_config(),
            frozen_layers=frozen, head_replace=tr.head_replace,
            pretrained=source_net if spec.variant == "tl" else None,
            lam=tr.lam, clip_norm=tr.clip_norm, noise_mult=tr.noise_mult,
            k_parts=tr.k_parts,
        )
    with _stage("shadow"):
        pool = gen_adversary_pool(task_cfg, 2 * len(target_train))
        shadow = train_shadow(proc, pool, len(target_train), spec.seed)
    sb = min(len(shadow.members), len(shadow.nonmembers), cfg.eval.eval_cap)
    sh_members = shadow.members.subset(np.arange(sb))
    sh_nonmembers = shadow.nonmembers.subset(np.arange(sb))
    sh_ids = SHADOW_START_ID + np.arange(2 * sb)
    sh_truth = np.concatenate([np.ones(sb, np.int64), np.zeros(sb, np.int64)])
    sh_X = np.vstack([sh_members.features, sh_nonmembers.features])
    sh_y = np.concatenate([sh_members.labels, sh_nonmembers.labels])
    sh_net = shadow.model.network
    sh_smoothed = (
        SmoothedClassifier(sh_net, sigma_raw, sm.s_noise, spec.seed)
        if smoothed is not None else None
    )

    attacks: Dict[str, AttackEval] = {}
    with _stage("attack"):
        for mode in ("bim", "hsj"):
            sh_smooth_for_mode = sh_smoothed if mode == "hsj" else None
            d_sh, _, _ = _distance_attack(
                mode, sh_net, sh_smooth_for_mode, sh_X, sh_y, sh_ids, budget, spec.seed)
            tau_sh, asr_sh = calibrate_threshold(d_sh, sh_truth)
            if mode == "hsj" and hsj_reused is not None:
                deltas, queries, converged = hsj_reused
            else:
                smooth_for_mode = smoothed if mode == "hsj" else None
                deltas, queries, converged = _distance_attack(
                    mode, model.network, smooth_for_mode, X, y, ids, budget, spec.seed)
            attacks[mode] = _attack_eval(
                mode, ids, truth, deltas, queries, converged, tau_sh, asr_sh, True)

        sh_scores = entropy_scores(
            _proba_fn(sh_net, sh_smoothed)(sh_X, sh_ids), sh_y)
        tau_sh, asr_sh = calibrate_threshold(sh_scores, sh_truth, member_if_geq=False)
        scores = entropy_scores(_proba_fn(model.network, smoothed)(X, ids), y)
        attacks["entropy"] = _attack_eval(
            "entropy", ids, truth, scores, np.ones(len(ids), np.int64),
            np.ones(len(ids), bool), tau_sh, asr_sh, False)

    acc_base_bundle = classification_accuracy(model.network, nonmembers)
    if smoothed is None:
        acc = model.eval_accuracy
        acc_bundle = acc_base_bundle
    else:
        acc = classification_accuracy(smoothed, target_eval)
        # same keys the attacks used for these rows, so the number matches
        # what the tuner (when present) already reported
        acc_bundle = classification_accuracy(smoothed, nonmembers, keys=nb + np.arange(nb))

    return CellResult(
        spec=spec,
        cell_id=spec.cell_id,
        frozen_layers=frozen,
        m_frac=frozen / n_layers,
        n_members=nb,
        sigma_std=sigma_std,
        sigma_raw=sigma_raw,
        feature_std=feature_std,
        model=model,
        attacks=attacks,
        acc=float(acc),
        acc_bundle=float(acc_bundle),
        acc_base_bundle=float(acc_base_bundle),
        tune=tune,
        m_scan=m_scan,
        source_train_acc=source_train_acc,
        queries_total=int(sum(a.queries for a in attacks.values())),
        wall_ms=(time.perf_counter() - t0) * 1000.0,
        warnings=warnings,
    )


# ----------------------------------------------------------------- I/O


def result_row(res: CellResult) -> Dict[str, object]:
    return {
        "cell_id": res.cell_id,
        "variant": res.spec.variant,
        "M_frac": res.m_frac,
        "N": res.spec.n,
        "sigma": res.sigma_std,
        "seed": res.spec.seed,
        "asr_bim": res.attacks["bim"].asr,
        "asr_hsj": res.attacks["hsj"].asr,
        "asr_entropy": res.attacks["entropy"].asr,
        "acc": res.acc,
        "train_acc": res.model.train_accuracy,
        "gap": res.model.gap,
        "queries_total": res.queries_total,
        "wall_ms": res.wall_ms,
    }


def _cell_text(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_results_csv(rows: List[Dict[str, object]], path: str) -> None:
    rows = sorted(rows, key=lambda r: str(r["cell_id"]))
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(RESULT_COLUMNS)
        for r in rows:
            w.writerow([_cell_text(r[c]) for c in RESULT_COLUMNS])


def read_results_csv(path: str) -> List[Dict[str, object]]:
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        out = []
        for raw in reader:
            row: Dict[str, object] = dict(raw)
            for k in ("M_frac", "sigma", "asr_bim", "asr_hsj", "asr_entropy",
                      "acc", "train_acc", "gap", "wall_ms"):
                row[k] = float(raw[k])
            for k in ("N", "seed", "queries_total"):
                row[k] = int(raw[k])
            out.append(row)
        return out


def write_records_csv(records: List[AttackRecord], path: str) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(RECORD_COLUMNS)
        for r in records:
            w.writerow([
                r.sample_id, r.true_member, repr(r.delta_hat), r.queries,
                int(r.converged), r.predicted_member,
            ])


def _json_ready(obj):
    if isinstance(obj, dict):
        return {k: _json_ready(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_json_ready(v) for v in obj]
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    return obj


def cell_report(res: CellResult, cfg: RunConfig) -> Dict[str, object]:
    atk = {}
    for name, a in res.attacks.items():
        tpr, tnr, asr = rates_from_counts(a.tp, a.fn, a.tn, a.fp)
        atk[name] = {
            "tau": a.tau, "asr": a.asr,
            "tp": a.tp, "fn": a.fn, "tn": a.tn, "fp": a.fp,
            "tpr": float(tpr), "tnr": float(tnr),
            "tau_best": a.tau_best, "asr_best": a.asr_best,
            "shadow_asr": a.shadow_asr, "queries": a.queries,
        }
        assert float(asr) == a.asr  # report rows must recompute exactly
    report = {
        "cell_id": res.cell_id,
        "spec": {
            "variant": res.spec.variant, "m_frac": res.spec.m_frac,
            "n": res.spec.n, "sigma": res.spec.sigma, "seed": res.spec.seed,
        },
        "frozen_layers": res.frozen_layers,
        "m_frac": res.m_frac,
        "n_members": res.n_members,
        "sigma_std": res.sigma_std,
        "sigma_raw": res.sigma_raw,
        "feature_std": res.feature_std,
        "train_acc": res.model.train_accuracy,
        "eval_acc": res.model.eval_accuracy,
        "gap": res.model.gap,
        "acc_deployed": res.acc,
        "acc_bundle": res.acc_bundle,
        "acc_base_bundle": res.acc_base_bundle,
        "source_train_acc": res.source_train_acc,
        "attacks": atk,
        "m_scan": [[m, a] for m, a in res.m_scan],
        "tune": None if res.tune is None else {
            "sigma_raw": res.tune.sigma,
            "flagged": res.tune.flagged,
            "acc_base": res.tune.acc_base,
            "rows": [
                {"sigma_raw": r.sigma, "acc": r.acc, "asr": r.asr}
                for r in res.tune.rows
            ],
        },
        "queries_total": res.queries_total,
        "wall_ms": res.wall_ms,
        "warnings": list(res.warnings),
        "config": cfg.to_dict(),
    }
    return _json_ready(report)


def persist_cell(res: CellResult, cfg: RunConfig, out_dir: str) -> str:
    cell_dir = os.path.join(out_dir, "cells", res.cell_id)
    os.makedirs(cell_dir, exist_ok=True)
    save_checkpoint(res.model.network, os.path.join(cell_dir, "checkpoint.npz"))
    for name, a in res.attacks.items():
        write_records_csv(a.records, os.path.join(cell_dir, f"records_{name}.csv"))
    report = cell_report(res, cfg)
    with open(os.path.join(cell_dir, "report.json"), "w", encoding="utf-8") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")
    if res.tune is not None:
        with open(os.path.join(cell_dir, "tune.csv"), "w", encoding="utf-8",
                  newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["sigma_raw", "acc", "asr"])
            for r in res.tune.rows:
                w.writerow([repr(r.sigma), repr(r.acc), repr(r.asr)])
    return cell_dir


def spec_from_config(cfg: RunConfig) -> CellSpec:
    tr = cfg.transfer
    n_layers = len(cfg.arch.hidden) + 1
    if tr.frozen_layers == "best":
        m_frac: Union[float, str] = "best"
    else:
        m_frac = int(tr.frozen_layers) / n_layers
    sigma: Union[float, str] = 0.0
    if cfg.smooth.enabled:
        sigma = cfg.smooth.sigma
    return CellSpec(
        variant=tr.variant, m_frac=m_frac, n=cfg.task.target_train_n,
        sigma=sigma, seed=cfg.run.seed,
    )


def train_target(cfg: RunConfig, source_net: Optional[Network] = None):
    """Stage-1 only: train the configured target model without attacking.

    Returns (model, frozen_layers, m_scan); trains the source itself when
    the variant needs one and no network was passed.
    """
    spec = spec_from_config(cfg)
    with _stage("data"):
        task_cfg = cfg.task_config(spec.seed, spec.n)
        source_set, target_train, target_eval = gen_task_pair(task_cfg)
    if spec.variant == "tl" and source_net is None:
        with _stage("source"):
            source_net = train_source(
                cfg.arch_spec(), source_set, cfg.source.epochs,
                cfg.source.lr, spec.seed, cfg.source.batch_size,
            )
    with _stage("train"):
        model, _, frozen, m_scan = _fit_target(
            spec, cfg, source_net, target_train, target_eval)
    return model, frozen, m_scan


def run_experiment(cfg: RunConfig, out_dir: str,
                   spec: Optional[CellSpec] = None,
                   network: Optional[Network] = None,
                   source_net: Optional[Network] = None) -> CellResult:
    """One cell end to end, persisted under out_dir/cells/<cell_id>."""
    if spec is None:
        spec = spec_from_config(cfg)
    res = run_cell(spec, cfg, source_net=source_net, network=network)
    os.makedirs(out_dir, exist_ok=True)
    persist_cell(res, cfg, out_dir)
    return res


# --------------------------------------------------------------- sweep


@dataclass
class SweepResult:
    rows: List[Dict[str, object]]
    failures: List[Tuple[str, str]]
    results_path: str
    summary_path: str
    plot_paths: List[str]


def grid_specs(cfg: RunConfig) -> List[CellSpec]:
    """Cross product of the sweep axes. Frozen fractions only vary the
    tl variant; every other variant collapses to m_frac 0."""
    sw = cfg.sweep
    seen: Dict[str, CellSpec] = {}
    for variant in sw.variants:
        m_list = sw.m_fracs if variant == "tl" else (0.0,)
        for m in m_list:
            for n in sw.n_sizes:
                for s in sw.sigmas:
                    for seed in sw.seeds:
                        spec = CellSpec(variant, float(m), int(n), s, int(seed))
                        seen[spec.cell_id] = spec
    return list(seen.values())


def build_source_cache(cfg: RunConfig, seeds) -> Dict[int, Network]:
    """One source model per seed; the source draw and pretraining depend
    only on (task, arch, source hyperparameters, seed), never on N."""
    cache: Dict[int, Network] = {}
    for seed in sorted(set(int(s) for s in seeds)):
        task_cfg = cfg.task_config(seed)
        source_set, _, _ = gen_task_pair(task_cfg)
        cache[seed] = train_source(
            cfg.arch_spec(), source_set, cfg.source.epochs, cfg.source.lr,
            seed, cfg.source.batch_size,
        )
    return cache


def _cell_task(args):
    spec, cfg, source_net, out_dir = args
    try:
        res = run_cell(spec, cfg, source_net=source_net)
        persist_cell(res, cfg, out_dir)
        return spec.cell_id, result_row(res), None
    except Exception as exc:  # record the failure, keep the sweep alive
        return spec.cell_id, None, f"{type(exc).__name__}: {exc}"


def summarize_rows(rows: List[Dict[str, object]]) -> List[Dict[str, object]]:
    """Per-family means over seeds, plus the hsj spread."""
    groups: Dict[str, List[Dict[str, object]]] = {}
    for r in rows:
        fam = str(r["cell_id"]).rsplit("-seed", 1)[0]
        groups.setdefault(fam, []).append(r)
    out = []
    for fam in sorted(groups):
        g = groups[fam]
        mean = lambda k: sum(float(r[k]) for r in g) / len(g)
        hsj = [float(r["asr_hsj"]) for r in g]
        out.append({
            "family": fam,
            "variant": g[0]["variant"],
            "M_frac": g[0]["M_frac"],
            "N": g[0]["N"],
            "n_seeds": len(g),
            "asr_bim_mean": mean("asr_bim"),
            "asr_hsj_mean": mean("asr_hsj"),
            "asr_hsj_min": min(hsj),
            "asr_hsj_max": max(hsj),
            "asr_entropy_mean": mean("asr_entropy"),
            "acc_mean": mean("acc"),
            "gap_mean": mean("gap"),
        })
    return out


def write_summary_csv(rows: List[Dict[str, object]], path: str) -> None:
    summary = summarize_rows(rows)
    cols = ("family", "variant", "M_frac", "N", "n_seeds", "asr_bim_mean",
            "asr_hsj_mean", "asr_hsj_min", "asr_hsj_max",
            "asr_entropy_mean", "acc_mean", "gap_mean")
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for r in summary:
            w.writerow([_cell_text(r[c]) for c in cols])


def sweep(cfg: RunConfig, out_dir: str, jobs: Optional[int] = None) -> SweepResult:
    """Run the configured grid; cells that raise are recorded in
    failures.csv and the rest still produce rows. Output rows are sorted
    by cell_id, so worker scheduling never changes the CSV."""
    jobs = int(jobs if jobs is not None else cfg.run.jobs)
    if jobs < 1:
        raise ConfigError(f"jobs must be >= 1, got {jobs}")
    os.makedirs(out_dir, exist_ok=True)
    specs = grid_specs(cfg)
    sources: Dict[int, Network] = {}
    if any(s.variant == "tl" for s in specs):
        sources = build_source_cache(
            cfg, sorted({s.seed for s in specs if s.variant == "tl"}))

    tasks = [(s, cfg, sources.get(s.seed), out_dir) for s in specs]
    if jobs == 1:
        outcomes = [_cell_task(t) for t in tasks]
    else:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            outcomes = list(pool.map(_cell_task, tasks))

    rows = [row for _, row, err in outcomes if err is None]
    failures = [(cid, err) for cid, _, err in outcomes if err is not None]

    results_path = os.path.join(out_dir, "results.csv")
    write_results_csv(rows, results_path)
    summary_path = os.path.join(out_dir, "summary.csv")
    write_summary_csv(rows, summary_path)
    if failures:
        with open(os.path.join(out_dir, "failures.csv"), "w", encoding="utf-8",
                  newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["cell_id", "error"])
            for cid, err in sorted(failures):
                w.writerow([cid, err])

    plot_paths: List[str] = []
    if rows:
        from .plots import render_report
        plot_paths = render_report(
            read_results_csv(results_path), os.path.join(out_dir, "plots"))
    return SweepResult(
        rows=sorted(rows, key=lambda r: str(r["cell_id"])),
        failures=failures,
        results_path=results_path,
        summary_path=summary_path,
        plot_paths=plot_paths,
    )
