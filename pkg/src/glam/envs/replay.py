"""FIFO replay of uint8 frames with uniform sampling of contiguous windows."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..tensor import Rng
from .processing import from_uint8, to_uint8


class ReplayNotReady(RuntimeError):
    """Raised when fewer steps are stored than one window needs."""


@dataclass
class TrajectoryBatch:
    """``obs (B, L, H, W)`` float in [0, 1]; ``action, reward, done, cont (B, L)``.

    Step ``i`` holds the observation before ``action[i]`` and the reward and
    termination that followed it. A window may run past an episode end;
    ``done`` marks where, so losses can mask the crossing.
    """

    obs: np.ndarray
    action: np.ndarray
    reward: np.ndarray
    done: np.ndarray

    @property
    def cont(self) -> np.ndarray:
        return (1.0 - self.done.astype(np.float32)).astype(np.float32)

    @property
    def shape(self) -> tuple[int, int]:
        return self.action.shape


class ReplayBuffer:
    def __init__(self, capacity: int, frame_shape: tuple[int, int]):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self.frame_shape = tuple(frame_shape)
        self.obs = np.zeros((capacity,) + self.frame_shape, dtype=np.uint8)
        self.action = np.zeros(capacity, dtype=np.int64)
        self.reward = np.zeros(capacity, dtype=np.float32)
        self.done = np.zeros(capacity, dtype=bool)
        self.pos = 0
        self.size = 0
        self.total = 0

    def __len__(self) -> int:
        return self.size

    def append(self, obs, action: int, reward: float, done: bool) -> None:
        o = np.asarray(obs)
        if o.shape != self.frame_shape:
            raise ValueError(f"frame shape {o.shape} != {self.frame_shape}")
        self.obs[self.pos] = o if o.dtype == np.uint8 else to_uint8(o)
        self.action[self.pos] = action
        self.reward[self.pos] = reward
        self.done[self.pos] = done
        self.pos = (self.pos + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)
        self.total += 1

    def _physical(self, logical: np.ndarray) -> np.ndarray:
        return (self.pos - self.size + logical) % self.capacity

    def window_starts(self, length: int) -> int:
        return self.size - length + 1

    def sample(self, rng: Rng, batch: int = 32, length: int = 64) -> TrajectoryBatch:
        """Windows whose start is uniform over all ``size - length + 1`` logical positions."""
        n = self.window_starts(length)
        if n < 1:
            raise ReplayNotReady(f"replay holds {self.size} steps; a window needs {length}")
        starts = rng.integers(0, n, size=batch)
        idx = self._physical(starts[:, None] + np.arange(length)[None])
        return TrajectoryBatch(from_uint8(self.obs[idx]), self.action[idx].copy(),
                               self.reward[idx].copy(), self.done[idx].copy())

    def state(self) -> dict[str, np.ndarray]:
        order = self._physical(np.arange(self.size))
        return {"obs": self.obs[order], "action": self.action[order], "reward": self.reward[order],
                "done": self.done[order], "meta": np.array([self.capacity, self.total], dtype=np.int64)}

    @classmethod
    def from_state(cls, st: dict[str, np.ndarray]) -> "ReplayBuffer":
        capacity, total = (int(v) for v in st["meta"])
        buf = cls(capacity, st["obs"].shape[1:])
        n = len(st["action"])
        buf.obs[:n], buf.action[:n] = st["obs"], st["action"]
        buf.reward[:n], buf.done[:n] = st["reward"], st["done"]
        buf.size, buf.pos, buf.total = n, n % capacity, total
        return buf
