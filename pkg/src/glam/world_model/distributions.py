"""Grouped categorical latents, symlog transform and two-hot bins."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .. import tensor as T
from ..tensor import Rng, Tensor


def symlog(x):
    x = np.asarray(x)
    return np.sign(x) * np.log1p(np.abs(x))


def symexp(y):
    y = np.asarray(y)
    return np.sign(y) * np.expm1(np.abs(y))


def make_bins(n: int = 255, low: float = -20.0, high: float = 20.0, dtype=np.float32) -> np.ndarray:
    """Bin centers, uniform in symlog space."""
    return np.linspace(low, high, n).astype(dtype)


def twohot_encode(values, bins: np.ndarray) -> np.ndarray:
    """Linear interpolation weights on the two nearest bins; values are clipped to the bin range."""
    v = np.clip(np.asarray(values, dtype=np.float64), bins[0], bins[-1])
    n = len(bins)
    hi = np.clip(np.searchsorted(bins, v, side="right"), 1, n - 1)
    lo = hi - 1
    b_lo = bins[lo].astype(np.float64)
    b_hi = bins[hi].astype(np.float64)
    w_hi = (v - b_lo) / (b_hi - b_lo)
    w_hi = np.clip(w_hi, 0.0, 1.0)
    out = np.zeros(v.shape + (n,), dtype=bins.dtype)
    np.put_along_axis(out, lo[..., None], (1.0 - w_hi)[..., None], axis=-1)
    np.put_along_axis(out, hi[..., None], w_hi[..., None], axis=-1)
    return out


def twohot_expectation(probs, bins: np.ndarray) -> np.ndarray:
    return np.asarray(probs, dtype=np.float64) @ bins.astype(np.float64)


def twohot_cross_entropy(logits, target: np.ndarray) -> Tensor:
    """``-sum(target * log_softmax(logits))`` over the last axis."""
    return T.neg(T.sum_(T.mul(T.log_softmax(logits, -1), target), axis=-1))


@dataclass
class LatentDist:
    """Logits of ``groups`` independent categoricals with ``classes`` outcomes each.

    ``logits`` has trailing dimension ``groups * classes``; the unimix fraction
    is mixed in whenever probabilities are formed.
    """

    logits: Tensor
    groups: int = 32
    classes: int = 32
    unimix: float = 0.01

    def grouped(self, x) -> Tensor:
        x = T.as_tensor(x)
        return T.reshape(x, x.shape[:-1] + (self.groups, self.classes))

    def probs(self) -> Tensor:
        p = T.softmax(self.grouped(self.logits), -1)
        if self.unimix > 0:
            p = T.add(T.mul(p, 1.0 - self.unimix), self.unimix / self.classes)
        return p

    def log_probs(self) -> Tensor:
        if self.unimix > 0:
            return T.log(self.probs())
        return T.log_softmax(self.grouped(self.logits), -1)

    def sample(self, rng: Rng | None = None, mode: bool = False) -> Tensor:
        """Straight-through one-hot sample, flattened to ``groups * classes``.

        The forward value is exactly one-hot; gradients flow to the probabilities.
        ``mode=True`` takes the argmax instead of sampling.
        """
        p = self.probs()
        if mode:
            idx = np.argmax(p.data, axis=-1)
        else:
            if rng is None:
                raise ValueError("sampling needs an rng")
            idx = rng.categorical(p.data)
        hot = T.one_hot(idx, self.classes).data.astype(p.dtype)
        st = T.add(T.sub(p, T.stop_gradient(p)), hot)
        return T.reshape(st, st.shape[:-2] + (self.groups * self.classes,))

    def detach(self) -> "LatentDist":
        return LatentDist(T.stop_gradient(self.logits), self.groups, self.classes, self.unimix)


def kl_categorical(p_log: Tensor, q_log: Tensor) -> Tensor:
    """``KL[p || q]`` per group from log-probabilities ``(..., K, C)``, summed over groups."""
    p = T.exp(p_log)
    return T.sum_(T.mul(p, T.sub(p_log, q_log)), axis=(-2, -1))
