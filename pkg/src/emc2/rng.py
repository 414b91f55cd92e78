"""Counter-addressed random streams.

A stream is identified by ``(purpose, iteration, key)``. Drawing from a stream
never depends on how many draws other streams made, so per-anchor work can
run in any order and a run can resume mid-way from nothing but the seed and
the iteration counter.
"""
from __future__ import annotations

import numpy as np

# stream purposes
INIT_CHAIN = 0
INIT_PARAMS = 1
BATCH = 2
CHAIN = 3
AUGMENT = 4
DATASET = 5
PROBE = 6


class RandomStream:
    def __init__(self, seed: int):
        if not 0 <= int(seed) < 2**64:
            raise ValueError(f"seed must be a 64-bit unsigned integer, got {seed}")
        self.seed = int(seed)

    def generator(self, purpose: int, iteration: int = 0, key: int = 0) -> np.random.Generator:
        # iteration may be -1 for evaluation-only draws
        ss = np.random.SeedSequence(self.seed, spawn_key=(purpose, iteration + 1, key))
        return np.random.Generator(np.random.PCG64(ss))

    def chain_draws(self, iteration: int, key: int, n_steps: int, n_choices: int, lanes: int = 1):
        """Proposal indices and acceptance uniforms for one chain in one iteration.

        Step ``r`` of lane ``l`` always reads slot ``[l, r]``; a step that needs
        no acceptance draw simply leaves its uniform unused.
        """
        g = self.generator(CHAIN, iteration, key)
        idx = g.integers(0, n_choices, size=(lanes, n_steps))
        u = g.random((lanes, n_steps))
        return idx, u

    def __repr__(self):
        return f"RandomStream(seed={self.seed})"
