"""Counter-based Gaussian increments.

Each (seed, source, agent) pair owns a Philox key. Path ``p`` occupies a
fixed block of the counter space, so any path range can be generated
independently and the draws for one agent never depend on N, on batching,
or on which thread produced them.
"""

import numpy as np
from scipy.special import ndtri

STATE = 0        # W0 / W_i
OBSERVATION = 1  # W̄0 / W̄_i
LEADER = 0       # agent index of the leader; followers are 1..N


class RngStreams:
    def __init__(self, seed: int):
        self.seed = int(seed)
        self._keys = {}

    def key(self, source: int, agent: int) -> np.ndarray:
        k = (source, agent)
        if k not in self._keys:
            ss = np.random.SeedSequence(self.seed, spawn_key=(source, agent))
            self._keys[k] = ss.generate_state(2, np.uint64)
        return self._keys[k]

    def normals(self, source: int, agent: int, path_start: int, path_stop: int,
                steps: int, dim: int) -> np.ndarray:
        """Standard normals of shape (paths, steps, dim) for a path range."""
        L = steps * dim
        block = -(-L // 4) * 4   # Philox emits 4 words per counter value
        ctr = np.zeros(4, dtype=np.uint64)
        ctr[0] = path_start * (block // 4)
        bg = np.random.Philox(key=self.key(source, agent), counter=ctr)
        raw = bg.random_raw((path_stop - path_start) * block)
        raw = raw.reshape(path_stop - path_start, block)[:, :L]
        u = ((raw >> np.uint64(11)).astype(np.float64) + 0.5) * 2.0**-53
        return ndtri(u).reshape(path_stop - path_start, steps, dim)
