"""Named RNG substream derivation.

All randomness in the pipeline flows from a single integer seed. Each
component draws from its own named substream so that, e.g., changing the
number of noise draws does not perturb trimming or initialization.
"""

from __future__ import annotations

import numpy as np

# Stream names in use: "ingest-shuffle", "init", "trim", "sgld-noise",
# "table", "gibbs", "bench", "constraint-check", "synth".


def substream(seed: int, name: str) -> np.random.Generator:
    """Return a Generator for (seed, name), independent across names."""
    tag = int.from_bytes(name.encode("utf-8"), "little")
    return np.random.default_rng(np.random.SeedSequence([int(seed), tag]))


def worker_states(seed: int, name: str, n: int) -> np.ndarray:
    """Nonzero uint64 xorshift states for n workers, derived from (seed, name)."""
    rng = substream(seed, name)
    states = rng.integers(1, np.iinfo(np.uint64).max, size=n, dtype=np.uint64)
    return states
