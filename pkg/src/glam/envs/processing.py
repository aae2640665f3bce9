"""Action repeat with max-pooling over the last two raw frames, then resize to the model resolution."""

from __future__ import annotations

import numpy as np
from PIL import Image

from ..tensor import Rng
from .base import Env, EnvDoneError


def to_gray(frame: np.ndarray) -> np.ndarray:
    f = np.asarray(frame, dtype=np.float32)
    if f.ndim == 3:
        # ITU-R 601 luma, as used by common grayscale conversions
        f = f[..., :3] @ np.array([0.299, 0.587, 0.114], dtype=np.float32)
    return f


def resize(frame: np.ndarray, size: int) -> np.ndarray:
    if frame.shape == (size, size):
        return frame
    img = Image.fromarray(np.asarray(frame, dtype=np.float32), mode="F")
    return np.asarray(img.resize((size, size), Image.BILINEAR), dtype=np.float32)


def process_frames(raw_frames, size: int) -> np.ndarray:
    """Elementwise max of the last two raw frames, grayscale, resized and clipped to [0, 1]."""
    last = [to_gray(f) for f in raw_frames[-2:]]
    pooled = last[0] if len(last) == 1 else np.maximum(last[0], last[1])
    return np.clip(resize(pooled, size), 0.0, 1.0)


class FrameProcessor:
    """Wraps a raw :class:`Env` so that each agent action runs ``repeat`` raw steps.

    Rewards within a group are summed; the group stops early when the episode ends.
    """

    def __init__(self, env: Env, repeat: int = 4, size: int = 32):
        if repeat < 1:
            raise ValueError("repeat must be >= 1")
        self.env = env
        self.repeat = repeat
        self.size = size
        self.done = True

    @property
    def action_count(self) -> int:
        return self.env.spec.action_count

    def reset(self, rng: Rng | None = None) -> np.ndarray:
        self.done = False
        return process_frames([self.env.reset(rng)], self.size)

    def step(self, action) -> tuple[np.ndarray, float, bool]:
        if self.done:
            raise EnvDoneError("episode is over; call reset()")
        raw, total = [], 0.0
        for _ in range(self.repeat):
            frame, r, done = self.env.step(action)
            raw.append(frame)
            total += r
            if done:
                break
        self.done = done
        return process_frames(raw, self.size), total, done

    def get_state(self) -> dict:
        return {"env": self.env.get_state(), "done": self.done}

    def set_state(self, st: dict) -> None:
        self.env.set_state(st["env"])
        self.done = st["done"]


def to_uint8(frame: np.ndarray) -> np.ndarray:
    return np.round(np.clip(frame, 0.0, 1.0) * 255.0).astype(np.uint8)


def from_uint8(frames: np.ndarray) -> np.ndarray:
    return np.asarray(frames, dtype=np.float32) / np.float32(255.0)
