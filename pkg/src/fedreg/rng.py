"""Named RNG streams fanned out from one experiment seed.

Every source of randomness in a run owns a stream keyed by (seed, tag, ...),
so results do not depend on execution order: a client trained in a thread
pool draws exactly the bits it would draw sequentially.
"""

import numpy as np

INIT = 0
PARTITION = 1
SAMPLING = 2
CLIENT = 3
AUGMENT = 4
SYNTH = 5


def stream(seed: int, *path: int) -> np.random.Generator:
    """Generator for the stream addressed by (seed, *path)."""
    return np.random.default_rng(np.random.SeedSequence((seed, *path)))


def child_seed(seed: int, *path: int) -> int:
    """Derived integer seed for APIs that take a seed rather than a stream."""
    return int(np.random.SeedSequence((seed, *path)).generate_state(1)[0])
