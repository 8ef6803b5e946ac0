"""Deterministic RNG derivation.

Every random stream in the package is derived from a master seed plus a
small domain tag (and, where relevant, a per-sample index), so that serial
and batched/parallel schedules consume identical values per sample.
"""

import numpy as np

# Domain tags. Never reuse a value; streams must not collide.
TAG_INIT = 1          # weight initialization
TAG_SHUFFLE = 2       # epoch shuffling
TAG_PROTO = 3         # task prototype frame
TAG_DATA = 4          # sample draws (combined with a stream index)
TAG_DP_NOISE = 5      # gradient noise
TAG_SMOOTH = 6        # smoothing noise (combined with a sample key)
TAG_HSJ = 7           # black-box attack probes (combined with a sample index)
TAG_SPLIT = 8         # membership splits
TAG_SELENA = 9        # partition shuffle
TAG_SELENA_SUB = 10   # per-submodel seeds
TAG_SELENA_FINAL = 11
TAG_SHADOW = 12       # shadow-model training
TAG_HEAD = 13         # fresh head initialization


def derive_rng(master_seed: int, *tags: int) -> np.random.Generator:
    """Generator seeded by (master_seed, *tags) via SeedSequence entropy."""
    return np.random.default_rng([int(master_seed), *map(int, tags)])
