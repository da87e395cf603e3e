"""Per-purpose child seeds derived from one master seed."""

from __future__ import annotations

import numpy as np

# Fixed purpose keys. Never renumber: existing run directories depend on them.
PURPOSES = {
    "partition": 0,
    "split": 1,
    "smote": 2,
    "init": 3,
    "shuffle": 4,
    "synth": 5,
}


def child_seed(master: int, purpose: str, *path: int) -> int:
    """Return a 63-bit seed for ``purpose`` (and an optional integer path).

    Seeds for different purposes are independent, so toggling one pipeline
    stage (e.g. SMOTE) never perturbs the draws of another (e.g. init).
    """
    key = PURPOSES[purpose]
    seq = np.random.SeedSequence([int(master) & 0xFFFFFFFFFFFFFFFF, key, *[int(p) for p in path]])
    return int(seq.generate_state(1, dtype=np.uint64)[0] >> np.uint64(1))


def rng_for(master: int, purpose: str, *path: int) -> np.random.Generator:
    return np.random.default_rng(child_seed(master, purpose, *path))
