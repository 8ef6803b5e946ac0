"""Run configuration: strict TOML parsing and self-documenting defaults.

Every knob lives in a frozen section dataclass; parsing rejects unknown
keys with a nearest-name suggestion so typos fail loudly instead of
silently running defaults. sigma values here are expressed in units of
the mean per-feature training std; the experiment layer converts to raw
feature units when it builds the smoothed classifier.
"""

import difflib
import math
from dataclasses import dataclass, field, fields, replace
from typing import Optional, Tuple, Union

try:
    import tomllib as tomli  # 3.11+
except ModuleNotFoundError:
    import tomli

from .attack import AttackBudget, BimBudget, HsjBudget
from .data import TaskPairConfig
from .errors import ConfigError
from .train import ArchSpec, TrainConfig, VARIANTS


@dataclass(frozen=True)
class TaskSection:
    dim: int = 320
    source_classes: int = 20
    target_classes: int = 5
    overlap: float = 1.0
    source_n: int = 20000
    target_train_n: int = 64
    target_eval_n: int = 512
    class_separation: float = 4.0
    noise_std: float = 1.0


@dataclass(frozen=True)
class ArchSection:
    hidden: Tuple[int, ...] = (64, 64, 32)
    activation: str = "relu"


@dataclass(frozen=True)
class SourceSection:
    epochs: int = 20
    lr: float = 0.1
    batch_size: int = 64


@dataclass(frozen=True)
class TransferSection:
    variant: str = "tl"
    # "best" sweeps every freezable depth and keeps the best eval accuracy
    frozen_layers: Union[int, str] = "best"
    epochs: int = 160
    lr: float = 0.1
    batch_size: int = 32
    head_replace: bool = True
    lam: float = 0.01        # l1/l2 penalty weight
    clip_norm: float = 1.0   # dp per-sample gradient clip
    noise_mult: float = 1.0  # dp noise multiplier z
    k_parts: int = 4         # selena partitions


@dataclass(frozen=True)
class SmoothSection:
    enabled: bool = False
    sigma: Union[float, str] = "tune"  # std units, or "tune" for the sweep
    candidates: Tuple[float, ...] = (0.0, 0.05, 0.1, 0.2, 0.4)
    s_noise: int = 32
    vote: str = "soft"
    fresh_noise: bool = False
    acc_floor: float = 0.02


@dataclass(frozen=True)
class BimSection:
    alpha: float = 0.02
    max_iters: int = 1000
    clip_lo: float = -math.inf  # -inf/inf disable box clipping
    clip_hi: float = math.inf


@dataclass(frozen=True)
class HsjSection:
    init_trials: int = 10
    bsearch_tol: float = 0.01
    grad_probes: int = 64
    max_rounds: int = 12
    max_queries: int = 3000
    box_lo: float = -12.0
    box_hi: float = 12.0


@dataclass(frozen=True)
class EvalSection:
    eval_cap: int = 128  # per-class cap on the attacked member/nonmember bundle


@dataclass(frozen=True)
class RunSection:
    seed: int = 0
    out: str = ""  # empty -> $MIADIP_OUT or ./miadip-out
    jobs: int = 1


@dataclass(frozen=True)
class SweepSection:
    variants: Tuple[str, ...] = ("ntl", "tl")
    m_fracs: Tuple[float, ...] = (0.0, 0.25, 0.5, 0.75)
    n_sizes: Tuple[int, ...] = (64,)
    sigmas: Tuple[Union[float, str], ...] = (0.0,)
    seeds: Tuple[int, ...] = (0, 1, 2, 3, 4)


@dataclass(frozen=True)
class RunConfig:
    task: TaskSection = field(default_factory=TaskSection)
    arch: ArchSection = field(default_factory=ArchSection)
    source: SourceSection = field(default_factory=SourceSection)
    transfer: TransferSection = field(default_factory=TransferSection)
    smooth: SmoothSection = field(default_factory=SmoothSection)
    attack_bim: BimSection = field(default_factory=BimSection)
    attack_hsj: HsjSection = field(default_factory=HsjSection)
    eval: EvalSection = field(default_factory=EvalSection)
    run: RunSection = field(default_factory=RunSection)
    sweep: SweepSection = field(default_factory=SweepSection)

    # -- builders for the library layers -------------------------------

    def task_config(self, seed: int, target_train_n: Optional[int] = None) -> TaskPairConfig:
        t = self.task
        return TaskPairConfig(
            dim=t.dim, source_classes=t.source_classes,
            target_classes=t.target_classes, overlap=t.overlap,
            source_n=t.source_n,
            target_train_n=int(target_train_n if target_train_n is not None
                               else t.target_train_n),
            target_eval_n=t.target_eval_n,
            class_separation=t.class_separation, noise_std=t.noise_std,
            seed=int(seed),
        )

    def arch_spec(self) -> ArchSpec:
        return ArchSpec(hidden=tuple(self.arch.hidden), activation=self.arch.activation)

    def train_config(self, seed: int = 0) -> TrainConfig:
        tr = self.transfer
        return TrainConfig(epochs=tr.epochs, lr=tr.lr,
                           batch_size=tr.batch_size, seed=int(seed))

    def budget(self) -> AttackBudget:
        b, h = self.attack_bim, self.attack_hsj
        return AttackBudget(
            bim=BimBudget(
                alpha=b.alpha, max_iters=b.max_iters,
                clip_lo=None if b.clip_lo == -math.inf else b.clip_lo,
                clip_hi=None if b.clip_hi == math.inf else b.clip_hi,
            ),
            hsj=HsjBudget(
                init_trials=h.init_trials, bsearch_tol=h.bsearch_tol,
                grad_probes=h.grad_probes, max_rounds=h.max_rounds,
                max_queries=h.max_queries, box_lo=h.box_lo, box_hi=h.box_hi,
            ),
        )

    def to_dict(self) -> dict:
        def section(obj):
            out = {}
            for f in fields(obj):
                v = getattr(obj, f.name)
                out[f.name] = list(v) if isinstance(v, tuple) else v
            return out

        return {
            "task": section(self.task),
            "arch": section(self.arch),
            "source": section(self.source),
            "transfer": section(self.transfer),
            "smooth": section(self.smooth),
            "attack": {"bim": section(self.attack_bim),
                       "hsj": section(self.attack_hsj)},
            "eval": section(self.eval),
            "run": section(self.run),
            "sweep": section(self.sweep),
        }

    def to_toml(self) -> str:
        lines = []
        for name, body in self.to_dict().items():
            nested = {k: v for k, v in body.items() if isinstance(v, dict)}
            flat = {k: v for k, v in body.items() if not isinstance(v, dict)}
            if flat:
                lines.append(f"[{name}]")
                lines += [f"{k} = {_toml_value(v)}" for k, v in flat.items()]
                lines.append("")
            for sub, vals in nested.items():
                lines.append(f"[{name}.{sub}]")
                lines += [f"{k} = {_toml_value(v)}" for k, v in vals.items()]
                lines.append("")
        return "\n".join(lines)


def _toml_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, str):
        return '"' + v.replace("\\", "\\\\").replace('"', '\\"') + '"'
    if isinstance(v, float):
        if math.isinf(v):
            return "inf" if v > 0 else "-inf"
        return repr(v)
    if isinstance(v, int):
        return str(v)
    if isinstance(v, (list, tuple)):
        return "[" + ", ".join(_toml_value(x) for x in v) + "]"
    raise ConfigError(f"cannot serialize {type(v).__name__} to TOML")


_SECTIONS = {
    "task": TaskSection,
    "arch": ArchSection,
    "source": SourceSection,
    "transfer": TransferSection,
    "smooth": SmoothSection,
    "eval": EvalSection,
    "run": RunSection,
    "sweep": SweepSection,
}


def _reject_unknown(given, valid, where: str):
    for key in given:
        if key not in valid:
            close = difflib.get_close_matches(key, valid, n=1, cutoff=0.5)
            hint = (f"did you mean '{close[0]}'?" if close
                    else "valid keys: " + ", ".join(sorted(valid)))
            raise ConfigError(f"unknown key '{key}' in [{where}]; {hint}")


def _coerce(value, template, where: str, key: str):
    """Type-check a parsed TOML value against the default's type."""
    name = f"'{key}' in [{where}]"
    if isinstance(template, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{name} must be a boolean, got {value!r}")
        return value
    if isinstance(template, int) and not isinstance(template, bool):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{name} must be an integer, got {value!r}")
        return value
    if isinstance(template, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{name} must be a number, got {value!r}")
        return float(value)
    if isinstance(template, str):
        # str-typed fields that also accept numbers (sigma, frozen_layers)
        if isinstance(value, (str, int, float)) and not isinstance(value, bool):
            return value
        raise ConfigError(f"{name} must be a string or number, got {value!r}")
    if isinstance(template, tuple):
        if not isinstance(value, list):
            raise ConfigError(f"{name} must be a list, got {value!r}")
        return tuple(value)
    raise ConfigError(f"{name} has unsupported type {type(template).__name__}")


def _parse_section(cls, body, where: str):
    if not isinstance(body, dict):
        raise ConfigError(f"[{where}] must be a table, got {body!r}")
    defaults = cls()
    valid = [f.name for f in fields(cls)]
    _reject_unknown(body, valid, where)
    kwargs = {
        k: _coerce(v, getattr(defaults, k), where, k) for k, v in body.items()
    }
    return replace(defaults, **kwargs)


def config_from_dict(raw: dict, where: str = "config") -> RunConfig:
    if not isinstance(raw, dict):
        raise ConfigError(f"{where} must be a table of sections")
    _reject_unknown(raw, list(_SECTIONS) + ["attack"], where)
    kwargs = {}
    for name, cls in _SECTIONS.items():
        if name in raw:
            kwargs[name] = _parse_section(cls, raw[name], name)
    if "attack" in raw:
        atk = raw["attack"]
        if not isinstance(atk, dict):
            raise ConfigError("[attack] must contain [attack.bim] / [attack.hsj]")
        _reject_unknown(atk, ["bim", "hsj"], "attack")
        if "bim" in atk:
            kwargs["attack_bim"] = _parse_section(BimSection, atk["bim"], "attack.bim")
        if "hsj" in atk:
            kwargs["attack_hsj"] = _parse_section(HsjSection, atk["hsj"], "attack.hsj")
    cfg = RunConfig(**kwargs)
    _validate(cfg)
    return cfg


def config_from_toml(path: str) -> RunConfig:
    try:
        with open(path, "rb") as fh:
            raw = tomli.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except tomli.TOMLDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid TOML: {exc}")
    return config_from_dict(raw, where=path)


def _validate(cfg: RunConfig) -> None:
    tr = cfg.transfer
    if tr.variant not in VARIANTS:
        raise ConfigError(
            f"'variant' in [transfer] must be one of {sorted(VARIANTS)}, "
            f"got {tr.variant!r}")
    fl = tr.frozen_layers
    if isinstance(fl, str):
        if fl != "best":
            raise ConfigError(
                f"'frozen_layers' in [transfer] must be an integer or \"best\", "
                f"got {fl!r}")
    elif not isinstance(fl, int) or fl < 0:
        raise ConfigError(
            f"'frozen_layers' in [transfer] must be an integer >= 0 or \"best\", "
            f"got {fl!r}")
    sm = cfg.smooth
    if isinstance(sm.sigma, str) and sm.sigma != "tune":
        raise ConfigError(
            f"'sigma' in [smooth] must be a number or \"tune\", got {sm.sigma!r}")
    if not isinstance(sm.sigma, str) and sm.sigma < 0:
        raise ConfigError(f"'sigma' in [smooth] must be >= 0, got {sm.sigma}")
    for v in cfg.sweep.variants:
        if v not in VARIANTS:
            raise ConfigError(
                f"'variants' in [sweep] must draw from {sorted(VARIANTS)}, "
                f"got {v!r}")
    for c in sm.candidates:
        if isinstance(c, bool) or not isinstance(c, (int, float)) or c < 0:
            raise ConfigError(
                f"'candidates' in [smooth] must be numbers >= 0, got {c!r}")
    for s in cfg.sweep.sigmas:
        if isinstance(s, str):
            if s != "tune":
                raise ConfigError(
                    f"'sigmas' in [sweep] entries must be numbers or \"tune\", "
                    f"got {s!r}")
        elif isinstance(s, bool) or not isinstance(s, (int, float)) or s < 0:
            raise ConfigError(
                f"'sigmas' in [sweep] entries must be numbers >= 0 or \"tune\", "
                f"got {s!r}")
    for m in cfg.sweep.m_fracs:
        if isinstance(m, bool) or not isinstance(m, (int, float)) or not 0 <= m <= 1:
            raise ConfigError(
                f"'m_fracs' in [sweep] must lie in [0, 1], got {m!r}")
    if cfg.run.jobs < 1:
        raise ConfigError(f"'jobs' in [run] must be >= 1, got {cfg.run.jobs}")
    if cfg.eval.eval_cap < 1:
        raise ConfigError(f"'eval_cap' in [eval] must be >= 1, got {cfg.eval.eval_cap}")


def default_config_toml() -> str:
    return RunConfig().to_toml()
