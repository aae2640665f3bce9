"""Pellet collection on an 8x8 grid rendered at 4 px per cell."""

from __future__ import annotations

import numpy as np

from ..tensor import Rng
from .base import Env, EnvDoneError, EnvSpec

GRID = 8
CELL = 4
PELLETS = 6
MAX_STEPS = 500
MOVES = ((-1, 0), (1, 0), (0, -1), (0, 1))  # up, down, left, right


class MiniCollect(Env):
    """Actions move the agent one cell (0 up, 1 down, 2 left, 3 right); walls block.

    Landing on a pellet gives +1 and respawns it on a free cell chosen by a
    hash of the episode seed and the pickup count. Episodes last 500 steps.
    """

    spec = EnvSpec("minicollect", (GRID * CELL, GRID * CELL), 4, MAX_STEPS,
                   "agent moves one cell per step; pellets respawn deterministically")

    def __init__(self, random_start: bool = True):
        self.random_start = random_start
        self._state: dict | None = None

    def reset(self, rng: Rng | None = None) -> np.ndarray:
        if self.random_start and rng is None:
            raise ValueError("random_start needs an rng")
        seed = int(rng.integers(0, 2 ** 31)) if self.random_start else 0
        cells = np.random.Generator(np.random.Philox(seed)).permutation(GRID * GRID)[:PELLETS + 1]
        self._state = {
            "agent": [int(cells[0] // GRID), int(cells[0] % GRID)],
            "pellets": sorted(int(c) for c in cells[1:]),
            "seed": seed,
            "pickups": 0,
            "steps": 0,
            "done": False,
        }
        return self.render()

    def step(self, action) -> tuple[np.ndarray, float, bool]:
        s = self._state
        if s is None:
            raise EnvDoneError("reset() must be called first")
        if s["done"]:
            raise EnvDoneError("episode is over; call reset()")
        dr, dc = MOVES[self._check_action(action)]
        r = min(max(s["agent"][0] + dr, 0), GRID - 1)
        c = min(max(s["agent"][1] + dc, 0), GRID - 1)
        s["agent"] = [r, c]
        reward = 0.0
        here = r * GRID + c
        if here in s["pellets"]:
            reward = 1.0
            s["pellets"].remove(here)
            s["pickups"] += 1
            free = [i for i in range(GRID * GRID) if i != here and i not in s["pellets"]]
            k = np.random.SeedSequence([s["seed"], s["pickups"]]).generate_state(1)[0]
            s["pellets"] = sorted(s["pellets"] + [free[int(k) % len(free)]])
        s["steps"] += 1
        s["done"] = s["steps"] >= MAX_STEPS
        return self.render(), reward, s["done"]

    def render(self) -> np.ndarray:
        s = self._state
        f = np.zeros((GRID * CELL, GRID * CELL), dtype=np.float32)
        for p in s["pellets"]:
            r, c = divmod(p, GRID)
            f[r * CELL + 1:r * CELL + 3, c * CELL + 1:c * CELL + 3] = 0.5
        r, c = s["agent"]
        f[r * CELL:(r + 1) * CELL, c * CELL:(c + 1) * CELL] = 1.0
        return f

    def get_state(self) -> dict:
        s = self._state
        return None if s is None else {**s, "agent": list(s["agent"]), "pellets": list(s["pellets"])}

    def set_state(self, state: dict) -> None:
        self._state = None if state is None else {**state, "agent": list(state["agent"]),
                                                  "pellets": list(state["pellets"])}
