"""Single-player pong on a 32x32 screen against a scripted half-speed opponent."""

from __future__ import annotations

import numpy as np

from ..tensor import Rng
from .base import Env, EnvDoneError, EnvSpec

SIZE = 32
PADDLE_H = 6
BALL = 2
AGENT_X = SIZE - 2
OPP_X = 1
WIN_SCORE = 5
MAX_STEPS = 20_000
SERVE_VY = (-1.0, -0.5, 0.5, 1.0)


class MiniPong(Env):
    """Actions: 0 noop, 1 up, 2 down. The agent holds the right paddle.

    Each point gives +1 (agent scores) or -1 (opponent scores); every serve
    starts at the center and travels toward the agent. The opponent follows
    the ball at half the agent speed while it approaches. The episode ends when
    either side reaches five points.
    """

    spec = EnvSpec("minipong", (SIZE, SIZE), 3, MAX_STEPS,
                   "ball moves 1 px/step horizontally; agent paddle 1 px/step; opponent tracks an approaching ball at 0.5 px/step")

    def __init__(self, random_start: bool = True):
        self.random_start = random_start
        self._state: dict | None = None

    def reset(self, rng: Rng | None = None) -> np.ndarray:
        if self.random_start and rng is None:
            raise ValueError("random_start needs an rng")
        seed = int(rng.integers(0, 2 ** 31)) if self.random_start else 0
        self._state = {
            "agent_y": float(SIZE // 2 - PADDLE_H // 2),
            "opp_y": float(SIZE // 2 - PADDLE_H // 2),
            "ball": [0.0, 0.0],
            "vel": [0.0, 0.0],
            "score": [0, 0],
            "steps": 0,
            "serves": 0,
            "seed": seed,
            "done": False,
        }
        self._serve()
        return self.render()

    def _serve(self) -> None:
        s = self._state
        # a hashed serve counter keeps dynamics a pure function of the state
        h = np.random.SeedSequence([s["seed"], s["serves"]]).generate_state(2)
        s["serves"] += 1
        s["ball"] = [SIZE / 2 - BALL / 2, float(8 + h[0] % (SIZE - 16))]
        s["vel"] = [1.0, SERVE_VY[h[1] % len(SERVE_VY)]]

    def step(self, action) -> tuple[np.ndarray, float, bool]:
        s = self._state
        if s is None:
            raise EnvDoneError("reset() must be called first")
        if s["done"]:
            raise EnvDoneError("episode is over; call reset()")
        a = self._check_action(action)
        lim = SIZE - PADDLE_H
        s["agent_y"] = float(np.clip(s["agent_y"] + (-1.0 if a == 1 else 1.0 if a == 2 else 0.0), 0, lim))
        # the opponent only reacts while the ball is coming toward it
        target = s["ball"][1] + BALL / 2 - PADDLE_H / 2 if s["vel"][0] < 0 else lim / 2
        s["opp_y"] = float(np.clip(s["opp_y"] + 0.5 * np.sign(target - s["opp_y"]), 0, lim))

        bx, by = s["ball"]
        vx, vy = s["vel"]
        bx, by = bx + vx, by + vy
        if by < 0:
            by, vy = -by, -vy
        elif by > SIZE - BALL:
            by, vy = 2 * (SIZE - BALL) - by, -vy
        reward = 0.0
        if vx > 0 and bx + BALL >= AGENT_X:
            if self._hits(s["agent_y"], by):
                bx, vx, vy = AGENT_X - BALL, -vx, self._deflect(s["agent_y"], by, vy)
            elif bx >= SIZE - BALL:
                reward = -1.0
        elif vx < 0 and bx <= OPP_X + 1:
            if self._hits(s["opp_y"], by):
                bx, vx, vy = OPP_X + 1, -vx, self._deflect(s["opp_y"], by, vy)
            elif bx <= 0:
                reward = 1.0
        s["ball"], s["vel"] = [bx, by], [vx, vy]
        s["steps"] += 1
        if reward:
            s["score"][0 if reward > 0 else 1] += 1
            self._serve()
        s["done"] = max(s["score"]) >= WIN_SCORE or s["steps"] >= MAX_STEPS
        return self.render(), reward, s["done"]

    @staticmethod
    def _hits(paddle_y: float, ball_y: float) -> bool:
        return ball_y + BALL > paddle_y and ball_y < paddle_y + PADDLE_H

    @staticmethod
    def _deflect(paddle_y: float, ball_y: float, vy_in: float) -> float:
        """Edge hits steer the ball; center hits keep its vertical speed."""
        off = (ball_y + BALL / 2 - (paddle_y + PADDLE_H / 2)) / (PADDLE_H / 2 + BALL / 2)
        kick = float(np.round(off * 2) / 2)
        return vy_in if kick == 0 else float(np.clip(kick * 2, -1.0, 1.0))

    def render(self) -> np.ndarray:
        s = self._state
        f = np.zeros((SIZE, SIZE), dtype=np.float32)
        ay, oy = int(round(s["agent_y"])), int(round(s["opp_y"]))
        f[ay:ay + PADDLE_H, AGENT_X:AGENT_X + 1] = 1.0
        f[oy:oy + PADDLE_H, OPP_X:OPP_X + 1] = 1.0
        bx, by = int(round(s["ball"][0])), int(round(s["ball"][1]))
        bx, by = min(max(bx, 0), SIZE - BALL), min(max(by, 0), SIZE - BALL)
        f[by:by + BALL, bx:bx + BALL] = 1.0
        return f

    @property
    def score(self) -> tuple[int, int]:
        return tuple(self._state["score"])

    def get_state(self) -> dict:
        s = self._state
        return None if s is None else {**s, "ball": list(s["ball"]), "vel": list(s["vel"]),
                                       "score": list(s["score"])}

    def set_state(self, state: dict) -> None:
        self._state = None if state is None else {**state, "ball": list(state["ball"]),
                                                  "vel": list(state["vel"]), "score": list(state["score"])}
