"""Synthetic source/target task pairs with a controllable overlap knob.

Both tasks are Gaussian blobs around class prototypes. Source prototypes sit
at distance class_separation from the origin along orthonormal directions;
each target class direction blends one source direction with a fresh
direction orthogonal to the whole source subspace:

    v_t = sqrt(overlap) * u_t + sqrt(1 - overlap) * q_t

so overlap=1 puts target prototypes exactly inside the source discriminative
subspace, overlap=0 makes them orthogonal to it, and every principal-angle
cosine between the two prototype subspaces equals sqrt(overlap).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Tuple

import numpy as np

from .errors import ConfigError, ParseError, SplitError
from .seeding import TAG_DATA, TAG_PROTO, TAG_SPLIT, derive_rng

# Stream indices for sample draws. Train/eval/adversary pools are disjoint
# because they consume disjoint substreams of the same task seed.
STREAM_SOURCE = 0
STREAM_TARGET_TRAIN = 1
STREAM_TARGET_EVAL = 2
STREAM_ADV_POOL = 3


@dataclass(frozen=True)
class TaskPairConfig:
    dim: int = 320
    source_classes: int = 20
    target_classes: int = 5
    overlap: float = 1.0
    source_n: int = 20000
    target_train_n: int = 64
    target_eval_n: int = 512
    class_separation: float = 4.0
    noise_std: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.source_classes < 2 or self.target_classes < 2:
            raise ConfigError("both tasks need at least 2 classes")
        if self.dim < self.source_classes + self.target_classes:
            raise ConfigError(
                f"dim={self.dim} too small: need >= source_classes + target_classes "
                f"= {self.source_classes + self.target_classes} for fresh "
                "orthogonal directions"
            )
        if not 0.0 <= self.overlap <= 1.0:
            raise ConfigError(f"overlap must be in [0, 1], got {self.overlap}")
        if min(self.source_n, self.target_train_n, self.target_eval_n) <= 0:
            raise ConfigError("sample counts must be positive")
        if self.target_train_n < self.target_classes:
            raise ConfigError(
                f"target_train_n={self.target_train_n} < target_classes="
                f"{self.target_classes}: need at least one sample per class"
            )
        if self.class_separation <= 0:
            raise ConfigError("class_separation must be > 0")
        if self.noise_std < 0:
            raise ConfigError("noise_std must be >= 0")


@dataclass
class SampleSet:
    """Features with integer labels and 0/1 membership flags."""

    features: np.ndarray  # (N, d) float64
    labels: np.ndarray    # (N,) int64
    membership: np.ndarray  # (N,) int64 in {0, 1}
    n_classes: int

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.membership = np.asarray(self.membership, dtype=np.int64)
        n = self.features.shape[0]
        if self.features.ndim != 2:
            raise ConfigError("features must be 2-D")
        if self.labels.shape != (n,) or self.membership.shape != (n,):
            raise ConfigError("labels/membership length must match features")
        if n and (self.labels.min() < 0 or self.labels.max() >= self.n_classes):
            raise ConfigError(
                f"labels must lie in [0, {self.n_classes}), "
                f"got [{self.labels.min()}, {self.labels.max()}]"
            )
        if n and not np.isin(self.membership, (0, 1)).all():
            raise ConfigError("membership flags must be 0 or 1")

    def __len__(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def subset(self, idx: np.ndarray) -> "SampleSet":
        return SampleSet(
            self.features[idx], self.labels[idx], self.membership[idx], self.n_classes
        )

    def with_membership(self, flag: int) -> "SampleSet":
        return SampleSet(
            self.features,
            self.labels,
            np.full(len(self), int(flag), dtype=np.int64),
            self.n_classes,
        )


def _orthonormal_frame(rng: np.random.Generator, dim: int, k: int) -> np.ndarray:
    """(k, dim) orthonormal rows, Gram-Schmidt order on seeded draws.

    QR with the diagonal forced positive equals classical Gram-Schmidt on
    the drawn columns: row j spans what the first j draws span.
    """
    raw = rng.standard_normal((dim, k))
    q, r = np.linalg.qr(raw)
    q = q * np.sign(np.diag(r))
    return q.T


class TaskPair:
    """Prototype geometry for one (source, target) pair plus samplers."""

    def __init__(self, cfg: TaskPairConfig):
        self.cfg = cfg
        frame = _orthonormal_frame(
            derive_rng(cfg.seed, TAG_PROTO),
            cfg.dim,
            cfg.source_classes + cfg.target_classes,
        )
        self.source_dirs = frame[: cfg.source_classes]  # (C_s, d)
        fresh = frame[cfg.source_classes :]  # (C_t, d)
        shared = self.source_dirs[
            np.arange(cfg.target_classes) % cfg.source_classes
        ]
        mix = np.sqrt(cfg.overlap) * shared + np.sqrt(1.0 - cfg.overlap) * fresh
        self.source_protos = cfg.class_separation * self.source_dirs
        self.target_protos = cfg.class_separation * mix  # (C_t, d)

    def _draw(
        self,
        protos: np.ndarray,
        n: int,
        n_classes: int,
        stream: int,
        member: int,
    ) -> SampleSet:
        rng = derive_rng(self.cfg.seed, TAG_DATA, stream)
        counts = np.full(n_classes, n // n_classes)
        counts[: n % n_classes] += 1
        labels = np.repeat(np.arange(n_classes), counts)
        labels = labels[rng.permutation(n)]
        feats = protos[labels] + self.cfg.noise_std * rng.standard_normal(
            (n, self.cfg.dim)
        )
        flags = np.full(n, member, dtype=np.int64)
        return SampleSet(feats, labels, flags, n_classes)

    def sample_source(self, n: int, stream: int = STREAM_SOURCE) -> SampleSet:
        return self._draw(self.source_protos, n, self.cfg.source_classes, stream, 1)

    def sample_target(self, n: int, stream: int, member: int) -> SampleSet:
        return self._draw(self.target_protos, n, self.cfg.target_classes, stream, member)


def build_task_pair(cfg: TaskPairConfig) -> TaskPair:
    return TaskPair(cfg)


def gen_task_pair(cfg: TaskPairConfig) -> Tuple[SampleSet, SampleSet, SampleSet]:
    """(source, target_train, target_eval) for one seed.

    Every target_train row is a member (flag 1); target_eval rows are fresh
    draws from the same distribution, all flag 0.
    """
    pair = TaskPair(cfg)
    source = pair.sample_source(cfg.source_n)
    target_train = pair.sample_target(cfg.target_train_n, STREAM_TARGET_TRAIN, 1)
    target_eval = pair.sample_target(cfg.target_eval_n, STREAM_TARGET_EVAL, 0)
    return source, target_train, target_eval


def gen_adversary_pool(cfg: TaskPairConfig, n: int) -> SampleSet:
    """Attacker-owned draw from the target distribution, disjoint stream
    from both target_train and target_eval; flags start at 0."""
    return TaskPair(cfg).sample_target(int(n), STREAM_ADV_POOL, 0)


def split_membership(
    pool: SampleSet, n_members: int, seed: int
) -> Tuple[SampleSet, SampleSet]:
    """Class-stratified split into (members, nonmembers).

    Largest-remainder allocation per class, seeded shuffle within classes.
    The two halves are disjoint and together exhaust the pool; member flags
    are set to 1 and 0 respectively.
    """
    n = len(pool)
    if n == 0:
        raise SplitError("cannot split an empty pool")
    if not 0 <= n_members <= n:
        raise SplitError(f"n_members={n_members} outside [0, {n}]")

    quotas = {}
    fracs = {}
    classes = np.unique(pool.labels)
    for c in classes:
        exact = n_members * (pool.labels == c).sum() / n
        quotas[c] = int(np.floor(exact))
        fracs[c] = exact - np.floor(exact)
    short = n_members - sum(quotas.values())
    # Hand out the remainder by largest fractional part, class index breaking ties.
    for c in sorted(classes, key=lambda c: (-fracs[c], c))[:short]:
        quotas[c] += 1

    rng = derive_rng(seed, TAG_SPLIT)
    member_idx = []
    nonmember_idx = []
    for c in classes:
        idx = np.flatnonzero(pool.labels == c)
        idx = idx[rng.permutation(len(idx))]
        take = quotas[c]
        if take > len(idx):
            raise SplitError(f"class {c} has {len(idx)} samples, needs {take}")
        member_idx.append(idx[:take])
        nonmember_idx.append(idx[take:])
    members = pool.subset(np.sort(np.concatenate(member_idx))).with_membership(1)
    nonmembers = pool.subset(np.sort(np.concatenate(nonmember_idx))).with_membership(0)
    return members, nonmembers


def save_csv(sset: SampleSet, path: str) -> None:
    """Delimited dump: f0..f{d-1},label,member with round-trip floats."""
    d = sset.dim
    header = ",".join([f"f{i}" for i in range(d)] + ["label", "member"])
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(header + "\n")
        for row, lab, mem in zip(sset.features, sset.labels, sset.membership):
            cells = [repr(float(v)) for v in row]
            cells.append(str(int(lab)))
            cells.append(str(int(mem)))
            fh.write(",".join(cells) + "\n")


def load_csv(path: str) -> SampleSet:
    """Parse a feature CSV; a missing member column defaults to 0.

    Raises ParseError with a 1-based line number on any malformed content.
    """
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise ParseError("line 1: empty file, expected a header")
    cols = lines[0].split(",")
    has_member = cols[-1] == "member"
    feat_cols = cols[:-2] if has_member else cols[:-1]
    if (not feat_cols) or cols[len(feat_cols)] != "label":
        raise ParseError("line 1: header must be f0,...,f{d-1},label[,member]")
    for i, name in enumerate(feat_cols):
        if name != f"f{i}":
            raise ParseError(f"line 1: expected column f{i}, found {name!r}")
    d = len(feat_cols)

    feats, labels, members = [], [], []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        cells = line.split(",")
        if len(cells) != len(cols):
            raise ParseError(
                f"line {lineno}: expected {len(cols)} cells, found {len(cells)}"
            )
        try:
            row = [float(c) for c in cells[:d]]
        except ValueError as exc:
            raise ParseError(f"line {lineno}: bad float ({exc})") from exc
        try:
            lab = int(cells[d])
        except ValueError as exc:
            raise ParseError(f"line {lineno}: bad label {cells[d]!r}") from exc
        if lab < 0:
            raise ParseError(f"line {lineno}: negative label {lab}")
        mem = 0
        if has_member:
            if cells[d + 1] not in ("0", "1"):
                raise ParseError(
                    f"line {lineno}: member flag must be 0 or 1, got {cells[d + 1]!r}"
                )
            mem = int(cells[d + 1])
        feats.append(row)
        labels.append(lab)
        members.append(mem)

    if not feats:
        return SampleSet(np.zeros((0, d)), np.zeros(0), np.zeros(0), 0)
    labels_arr = np.asarray(labels, dtype=np.int64)
    return SampleSet(
        np.asarray(feats, dtype=np.float64),
        labels_arr,
        np.asarray(members, dtype=np.int64),
        int(labels_arr.max()) + 1,
    )
