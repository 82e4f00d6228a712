"""Counter-based random streams keyed by (purpose, sweep, mode).

Every draw of a sweep comes from a Philox generator whose key is derived from
the root seed and a small integer tuple, so no stream is shared between
phases and the result never depends on how work is split across threads.
Per-entity noise is drawn as one (N, D) block whose row ``i`` belongs to
entity ``i``; workers only ever read their rows.
"""

import enum

import numpy as np


class Purpose(enum.IntEnum):
    INIT = 0
    HYPER = 1
    LINK = 2
    LAMBDA_BETA = 3
    LATENT = 4
    ALPHA = 5


class RngStreams:
    def __init__(self, seed):
        self.seed = int(seed)
        if self.seed < 0:
            raise ValueError("seed must be non-negative")

    def generator(self, purpose, *key):
        ss = np.random.SeedSequence(self.seed, spawn_key=(int(purpose),) + tuple(int(k) for k in key))
        return np.random.Generator(np.random.Philox(ss))

    def entity_normals(self, purpose, sweep, mode, n_entities, dim):
        return self.generator(purpose, sweep, mode).standard_normal((n_entities, dim))
