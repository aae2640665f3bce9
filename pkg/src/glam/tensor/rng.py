"""Seeded, counter-based random streams (Philox) with serializable state."""

from __future__ import annotations

import numpy as np


class Rng:
    """Thin wrapper over a Philox generator.

    Philox is counter-based, so identical seed + identical call sequence gives
    identical draws on every platform numpy supports. Child streams are derived
    with :meth:`spawn` from ``(seed, stream path)`` and never overlap the parent.
    """

    def __init__(self, seed: int, stream: tuple[int, ...] = ()):
        self.seed = int(seed) & 0xFFFF_FFFF_FFFF_FFFF
        self.stream = tuple(stream)
        ss = np.random.SeedSequence(self.seed, spawn_key=self.stream)
        self.gen = np.random.Generator(np.random.Philox(ss))

    def spawn(self, key: int) -> "Rng":
        return Rng(self.seed, self.stream + (int(key),))

    def normal(self, shape, scale: float = 1.0, dtype=np.float32) -> np.ndarray:
        return (self.gen.standard_normal(shape) * scale).astype(dtype)

    def uniform(self, low: float, high: float, shape, dtype=np.float32) -> np.ndarray:
        return self.gen.uniform(low, high, shape).astype(dtype)

    def random(self, shape=None, dtype=np.float64):
        return self.gen.random(shape, dtype=dtype)

    def integers(self, low: int, high: int | None = None, size=None):
        return self.gen.integers(low, high, size=size)

    def categorical(self, probs: np.ndarray) -> np.ndarray:
        """Sample indices along the last axis by inverse CDF (deterministic given the stream)."""
        cdf = np.cumsum(probs, axis=-1, dtype=np.float64)
        u = self.gen.random(probs.shape[:-1] + (1,)) * cdf[..., -1:]
        idx = (cdf <= u).sum(axis=-1)
        return np.minimum(idx, probs.shape[-1] - 1)

    # checkpoint support
    def get_state(self) -> dict:
        st = self.gen.bit_generator.state
        return {
            "seed": self.seed,
            "stream": list(self.stream),
            "counter": [int(v) for v in st["state"]["counter"]],
            "key": [int(v) for v in st["state"]["key"]],
            "buffer": [int(v) for v in st["buffer"]],
            "buffer_pos": int(st["buffer_pos"]),
            "has_uint32": int(st["has_uint32"]),
            "uinteger": int(st["uinteger"]),
        }

    def set_state(self, state: dict) -> None:
        self.seed = int(state["seed"])
        self.stream = tuple(state["stream"])
        self.gen.bit_generator.state = {
            "bit_generator": "Philox",
            "state": {
                "counter": np.array(state["counter"], dtype=np.uint64),
                "key": np.array(state["key"], dtype=np.uint64),
            },
            "buffer": np.array(state["buffer"], dtype=np.uint64),
            "buffer_pos": state["buffer_pos"],
            "has_uint32": state["has_uint32"],
            "uinteger": state["uinteger"],
        }

    @classmethod
    def from_state(cls, state: dict) -> "Rng":
        r = cls(state["seed"], tuple(state["stream"]))
        r.set_state(state)
        return r
