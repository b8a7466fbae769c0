"""Counter-based random streams.

Each :class:`Rng` owns a Philox generator whose 128-bit key is derived from
``(seed, stream path)``. Splitting appends to the path, so substreams used for
shuffling, noise and initialization never share a key and can be reseeded
independently.
"""

from __future__ import annotations

import numpy as np

from .tensor import Tensor


class Rng:
    def __init__(self, seed: int, stream_id: int = 0, _parent_path: tuple[int, ...] = ()):
        if seed < 0:
            raise ValueError(f"seed must be non-negative, got {seed}")
        self.seed = int(seed)
        self.stream_id = int(stream_id)
        self.path = _parent_path + (self.stream_id,)
        key = np.random.SeedSequence(self.seed, spawn_key=self.path).generate_state(2, dtype=np.uint64)
        self._gen = np.random.Generator(np.random.Philox(key=key))

    def split(self, stream_id: int) -> "Rng":
        """Independent child stream; does not advance this stream."""
        return Rng(self.seed, stream_id, self.path)

    def fresh(self) -> "Rng":
        """Same stream rewound to its start."""
        return Rng(self.seed, self.stream_id, self.path[:-1])

    def __repr__(self) -> str:
        return f"Rng(seed={self.seed}, path={self.path})"

    # raw draws
    def normal(self, shape) -> np.ndarray:
        return self._gen.standard_normal(shape)

    def uniform(self, low=0.0, high=1.0, shape=None) -> np.ndarray:
        return self._gen.uniform(low, high, shape)

    def integers(self, low, high=None, shape=None) -> np.ndarray:
        return self._gen.integers(low, high, shape)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def choice(self, n: int, size: int, replace: bool = False) -> np.ndarray:
        return self._gen.choice(n, size=size, replace=replace)

    def bernoulli(self, p, shape) -> np.ndarray:
        return (self._gen.random(shape) < p).astype(np.float64)


def standard_normal(rng: Rng, shape) -> Tensor:
    return Tensor(rng.normal(shape))
