"""Environment adapter interface shared by the built-in toy games and any external binding."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..tensor import Rng


class EnvDoneError(RuntimeError):
    """Raised when stepping an environment whose episode has ended."""


@dataclass(frozen=True)
class EnvSpec:
    name: str
    frame_shape: tuple[int, int]
    action_count: int
    max_episode_steps: int
    dynamics: str = ""

    def __post_init__(self):
        h, w = self.frame_shape
        if h not in (32, 64) or w not in (32, 64):
            raise ValueError(f"frame sides must be 32 or 64, got {self.frame_shape}")
        if self.action_count < 2:
            raise ValueError("action_count must be >= 2")


class Env:
    """Raw-step environment.

    ``reset(rng)`` returns the first frame; ``step(action)`` returns
    ``(frame, reward, done)``. Frames are grayscale floats in ``[0, 1]``.
    Dynamics are a pure function of ``get_state()`` and the action.
    """

    spec: EnvSpec

    def reset(self, rng: Rng | None = None) -> np.ndarray:
        raise NotImplementedError

    def step(self, action: int) -> tuple[np.ndarray, float, bool]:
        raise NotImplementedError

    def render(self) -> np.ndarray:
        raise NotImplementedError

    def get_state(self) -> dict:
        raise NotImplementedError

    def set_state(self, state: dict) -> None:
        raise NotImplementedError

    def _check_action(self, action) -> int:
        a = int(action)
        if not 0 <= a < self.spec.action_count:
            raise IndexError(f"{self.spec.name}: action {a} outside [0, {self.spec.action_count})")
        return a
