"""Toy pixel environments, frame processing, replay and episode logs."""

from __future__ import annotations

import numpy as np

from ..tensor import Rng
from .base import Env, EnvDoneError, EnvSpec
from .episode_log import EpisodeLogWriter, LogRecord, read_header, read_log
from .minicollect import MiniCollect
from .minipong import MiniPong
from .processing import FrameProcessor, from_uint8, process_frames, resize, to_gray, to_uint8
from .replay import ReplayBuffer, ReplayNotReady, TrajectoryBatch

ENVS = {"minipong": MiniPong, "minicollect": MiniCollect}


def register_env(name: str, factory) -> None:
    """Make an external environment (anything implementing :class:`Env`) available by name."""
    ENVS[name] = factory


def make_env(name: str, random_start: bool = True, repeat: int = 4, size: int = 32) -> FrameProcessor:
    try:
        factory = ENVS[name]
    except KeyError:
        raise ValueError(f"unknown environment {name!r}; choose from {sorted(ENVS)}") from None
    return FrameProcessor(factory(random_start=random_start), repeat, size)


def run_episode(env: FrameProcessor, policy, rng: Rng) -> float:
    """Play one episode; ``policy(frame, rng) -> action``. Returns the summed reward."""
    frame = env.reset(rng.spawn(0))
    total, done = 0.0, False
    while not done:
        frame, r, done = env.step(policy(frame, rng))
        total += r
    return total


def random_baseline(name: str, episodes: int = 1000, seed: int = 0, repeat: int = 4, size: int = 32) -> np.ndarray:
    """Per-episode returns of a uniformly random policy."""
    env = make_env(name, True, repeat, size)
    n = env.action_count
    root = Rng(seed)
    return np.array([run_episode(env, lambda f, r: int(r.integers(0, n)), root.spawn(i)) for i in range(episodes)])
