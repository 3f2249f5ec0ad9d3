"""Counter-based random streams for reproducible, partition-independent runs.

Every draw is keyed by (seed, replicate, purpose, event index, round), so a
particle's variates never depend on how many other particles were rejected,
how the ensemble is partitioned across workers, or how many draws happened
earlier in the run.
"""

from __future__ import annotations

import numpy as np

# Purpose tags select disjoint key spaces within one (seed, replicate).
MICRO = 0
RESAMPLE = 1
INIT = 2


class RandomStreams:
    """Philox-backed substreams keyed by (seed, replicate, purpose, step, round)."""

    def __init__(self, seed: int, replicate: int = 0):
        self.seed = int(seed)
        self.replicate = int(replicate)
        self._keys = {}

    def _key(self, purpose):
        key = self._keys.get(purpose)
        if key is None:
            ss = np.random.SeedSequence([self.seed, self.replicate, purpose])
            key = ss.generate_state(2, dtype=np.uint64)
            self._keys[purpose] = key
        return key

    def _generator(self, purpose, step, round_):
        counter = np.array([0, 0, round_, step], dtype=np.uint64)
        return np.random.Generator(np.random.Philox(counter=counter, key=self._key(purpose)))

    def normals(self, step: int, round_: int, shape) -> np.ndarray:
        """Standard normal block for micro step `step`, redraw round `round_`."""
        return self._generator(MICRO, step, round_).standard_normal(shape)

    def resample_uniforms(self, event: int, n: int) -> np.ndarray:
        """Uniform[0,1) block for the `event`-th resampling of the run."""
        return self._generator(RESAMPLE, event, 0).random(n)

    def initial(self) -> np.random.Generator:
        """Generator reserved for sampling the initial ensemble."""
        return self._generator(INIT, 0, 0)
