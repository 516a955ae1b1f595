"""Counter-based random streams keyed by (master seed, replication, purpose)."""

from __future__ import annotations

import numpy as np

SIMULATION = 0
ALGORITHM = 1


def stream(seed: int, *key: int) -> np.random.Generator:
    """Philox generator that depends only on ``seed`` and ``key``.

    Replication ``r`` uses ``stream(seed, r, SIMULATION)`` for its data and
    ``stream(seed, r, ALGORITHM)`` for stochastic estimators, so results do
    not depend on the order in which replications are executed.
    """
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(int(k) for k in key))
    return np.random.Generator(np.random.Philox(ss))
