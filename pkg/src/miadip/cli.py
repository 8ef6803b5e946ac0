"""Command-line front end.

BLAS thread pools are pinned to one thread before numpy first loads in
this process: sweep parallelism comes from --jobs worker processes, and
per-cell numerics must not depend on how many cores the host shows.
"""

import os

for _var in (
    "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS", "OMP_NUM_THREADS",
    "NUMEXPR_NUM_THREADS", "VECLIB_MAXIMUM_THREADS",
):
    os.environ.setdefault(_var, "1")

import argparse
import sys
from dataclasses import replace

from .config import RunConfig, config_from_toml
from .errors import ConfigError, MiadipError
from .train import VARIANTS


def _load_config(args) -> RunConfig:
    cfg = config_from_toml(args.config) if args.config else RunConfig()
    run_updates = {}
    if getattr(args, "seed", None) is not None:
        run_updates["seed"] = args.seed
    if getattr(args, "out", None):
        run_updates["out"] = args.out
    if getattr(args, "jobs", None) is not None:
        run_updates["jobs"] = args.jobs
    if run_updates:
        cfg = replace(cfg, run=replace(cfg.run, **run_updates))
    if getattr(args, "variant", None):
        cfg = replace(cfg, transfer=replace(cfg.transfer, variant=args.variant))
    return cfg


def _out_dir(cfg: RunConfig) -> str:
    return cfg.run.out or os.environ.get("MIADIP_OUT") or "miadip-out"


def cmd_print_config(args) -> int:
    cfg = _load_config(args)
    sys.stdout.write(cfg.to_toml())
    return 0


def cmd_train_source(args) -> int:
    from .data import gen_task_pair
    from .metrics import classification_accuracy
    from .nn import save_checkpoint
    from .train import train_source

    cfg = _load_config(args)
    out = _out_dir(cfg)
    os.makedirs(out, exist_ok=True)
    seed = cfg.run.seed
    source_set, _, _ = gen_task_pair(cfg.task_config(seed))
    net = train_source(
        cfg.arch_spec(), source_set, cfg.source.epochs, cfg.source.lr,
        seed, cfg.source.batch_size,
    )
    path = os.path.join(out, f"source-seed{seed}.npz")
    save_checkpoint(net, path)
    acc = classification_accuracy(net, source_set)
    print(f"source model: train acc {acc:.4f}")
    print(f"checkpoint: {path}")
    return 0


def cmd_transfer(args) -> int:
    from .experiment import train_target
    from .nn import load_checkpoint, save_checkpoint

    cfg = _load_config(args)
    out = _out_dir(cfg)
    os.makedirs(out, exist_ok=True)
    source_net = load_checkpoint(args.source) if args.source else None
    model, frozen, m_scan = train_target(cfg, source_net=source_net)
    path = os.path.join(
        out, f"target-{cfg.transfer.variant}-m{frozen}-seed{cfg.run.seed}.npz")
    save_checkpoint(model.network, path)
    if len(m_scan) > 1:
        scan = ", ".join(f"M={m}: {a:.4f}" for m, a in m_scan)
        print(f"frozen-depth scan: {scan}")
    print(
        f"{model.provenance}: train acc {model.train_accuracy:.4f}, "
        f"eval acc {model.eval_accuracy:.4f}, gap {model.gap:.4f}"
    )
    print(f"checkpoint: {path}")
    return 0


def cmd_attack(args) -> int:
    from .experiment import run_experiment
    from .nn import load_checkpoint

    cfg = _load_config(args)
    out = _out_dir(cfg)
    network = load_checkpoint(args.target) if args.target else None
    res = run_experiment(cfg, out, network=network)
    print(f"cell {res.cell_id}: N={res.n_members}+{res.n_members} attacked")
    for name in ("bim", "hsj", "entropy"):
        a = res.attacks[name]
        print(
            f"  {name:8s} asr {a.asr:.4f} (tau {a.tau:.4g}), "
            f"best asr {a.asr_best:.4f}, queries {a.queries}"
        )
    print(f"  acc {res.acc:.4f}, train acc {res.model.train_accuracy:.4f}, "
          f"gap {res.model.gap:.4f}")
    if res.sigma_std > 0:
        print(f"  smoothing sigma {res.sigma_std:g} (train-std units)")
    for w in res.warnings:
        print(f"  warning: {w}", file=sys.stderr)
    print(f"outputs: {os.path.join(out, 'cells', res.cell_id)}")
    return 0


def cmd_sweep(args) -> int:
    from .experiment import sweep

    cfg = _load_config(args)
    out = _out_dir(cfg)
    result = sweep(cfg, out, jobs=cfg.run.jobs)
    for cid, err in result.failures:
        print(f"cell failed: {cid}: {err}", file=sys.stderr)
    print(f"{len(result.rows)} rows -> {result.results_path}")
    print(f"summary -> {result.summary_path}")
    for p in result.plot_paths:
        print(f"plot -> {p}")
    if not result.rows:
        print("all cells failed", file=sys.stderr)
        return 3
    return 0


def cmd_report(args) -> int:
    from .experiment import read_results_csv, summarize_rows
    from .plots import render_report

    rows = read_results_csv(args.results)
    if not rows:
        print(f"no rows in {args.results}", file=sys.stderr)
        return 3
    summary = summarize_rows(rows)
    cols = ("family", "N", "n_seeds", "asr_bim_mean", "asr_hsj_mean",
            "asr_entropy_mean", "acc_mean", "gap_mean")
    widths = {c: max(len(c), max(len(_fmt(r[c])) for r in summary)) for c in cols}
    print("  ".join(c.ljust(widths[c]) for c in cols))
    for r in summary:
        print("  ".join(_fmt(r[c]).ljust(widths[c]) for c in cols))
    plot_dir = args.out or os.path.join(
        os.path.dirname(os.path.abspath(args.results)), "plots")
    for p in render_report(rows, plot_dir):
        print(f"plot -> {p}")
    return 0


def _fmt(v) -> str:
    if isinstance(v, float):
        return f"{v:.4f}"
    return str(v)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="miadip",
        description="Membership-inference defense experiments: transfer "
                    "learning and randomized smoothing against label-only "
                    "boundary-distance attacks.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, jobs=False, variant=False):
        p.add_argument("--config", metavar="PATH", help="TOML config file")
        p.add_argument("--out", metavar="DIR",
                       help="output directory (default: $MIADIP_OUT or ./miadip-out)")
        p.add_argument("--seed", type=int, metavar="N", help="override run seed")
        if jobs:
            p.add_argument("--jobs", type=int, metavar="N",
                           help="worker processes for sweep cells")
        if variant:
            p.add_argument("--variant", choices=VARIANTS,
                           help="override the training variant")

    p = sub.add_parser("print-config", help="print the effective config as TOML")
    common(p)
    p.set_defaults(func=cmd_print_config)

    p = sub.add_parser("train-source", help="pretrain the source model")
    common(p)
    p.set_defaults(func=cmd_train_source)

    p = sub.add_parser("transfer", help="train the target model (stage 1)")
    common(p, variant=True)
    p.add_argument("source", nargs="?", metavar="SOURCE_CKPT",
                   help="source checkpoint; trained fresh when omitted")
    p.set_defaults(func=cmd_transfer)

    p = sub.add_parser("attack", help="train (or load) a target and attack it")
    common(p, variant=True)
    p.add_argument("target", nargs="?", metavar="TARGET_CKPT",
                   help="target checkpoint; trained fresh when omitted")
    p.set_defaults(func=cmd_attack)

    p = sub.add_parser("sweep", help="run the configured experiment grid")
    common(p, jobs=True)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("report", help="summarize a results CSV and render plots")
    p.add_argument("results", metavar="RESULTS_CSV")
    p.add_argument("--out", metavar="DIR", help="directory for rendered plots")
    p.set_defaults(func=cmd_report)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except MiadipError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except OSError as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
