"""Adam with global-norm gradient clipping."""

from __future__ import annotations

import logging
import math
from typing import Mapping, Sequence

import numpy as np

from .nn import Parameter

log = logging.getLogger(__name__)

BETA1 = 0.9
BETA2 = 0.999
EPS = 1e-8


def global_norm(grads: Sequence[np.ndarray]) -> float:
    # float64 accumulation in a fixed order keeps the result reproducible
    return math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads))


def clip_by_global_norm(grads: list[np.ndarray], clip_norm: float) -> tuple[list[np.ndarray], float]:
    norm = global_norm(grads)
    if norm > clip_norm:
        scale = clip_norm / norm
        grads = [g * np.asarray(scale, dtype=g.dtype) for g in grads]
    return grads, norm


def adam_step(params: Sequence[Parameter], grads: Mapping[str, np.ndarray], lr: float,
              clip_norm: float, betas=(BETA1, BETA2), eps: float = EPS) -> float:
    """Clip the global gradient norm to ``clip_norm`` then apply one Adam update.

    Parameters without an entry in ``grads`` are treated as having zero gradient.
    Returns the pre-clip global norm.
    """
    if lr <= 0 or clip_norm <= 0:
        raise ValueError("lr and clip_norm must be positive")
    gs = []
    for p in params:
        g = grads.get(p.name)
        if g is None:
            log.debug("no gradient for %s; using zero", p.name)
            g = np.zeros_like(p.data)
        gs.append(np.asarray(g, dtype=p.data.dtype))
    gs, norm = clip_by_global_norm(gs, clip_norm)
    b1, b2 = betas
    for p, g in zip(params, gs):
        st = p.adam_state
        st.step += 1
        st.m = b1 * st.m + (1 - b1) * g
        st.v = b2 * st.v + (1 - b2) * (g * g)
        m_hat = st.m / (1 - b1 ** st.step)
        v_hat = st.v / (1 - b2 ** st.step)
        p.assign(p.data - lr * m_hat / (np.sqrt(v_hat) + eps))
    return norm


class Adam:
    """Holds a parameter list and its hyperparameters; moments live on the parameters."""

    def __init__(self, params: Sequence[Parameter], lr: float, clip_norm: float):
        self.params = list(params)
        self.lr = lr
        self.clip_norm = clip_norm

    def step(self, grads: Mapping[str, np.ndarray]) -> float:
        return adam_step(self.params, grads, self.lr, self.clip_norm)

    def state(self) -> dict[str, np.ndarray]:
        out = {}
        for p in self.params:
            out[f"{p.name}/m"] = p.adam_state.m
            out[f"{p.name}/v"] = p.adam_state.v
            out[f"{p.name}/step"] = np.asarray(p.adam_state.step, dtype=np.int64)
        return out

    def load_state(self, state: Mapping[str, np.ndarray]) -> None:
        for p in self.params:
            p.adam_state.m = np.asarray(state[f"{p.name}/m"], dtype=p.data.dtype)
            p.adam_state.v = np.asarray(state[f"{p.name}/v"], dtype=p.data.dtype)
            p.adam_state.step = int(state[f"{p.name}/step"])
