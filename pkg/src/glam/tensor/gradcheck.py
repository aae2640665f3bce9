"""Central finite-difference checks of tape gradients."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .core import Tape, Tensor
from .rng import Rng


@dataclass
class GradCheckReport:
    max_rel_err: float
    tolerance: float
    per_input: list[float] = field(default_factory=list)
    checked: int = 0

    @property
    def passed(self) -> bool:
        return self.max_rel_err <= self.tolerance


def rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Largest absolute deviation relative to the largest gradient magnitude (infinity-norm relative error).

    Measuring against the gradient's overall scale keeps the O(h^2)
    truncation error of entries that are nearly zero from dominating.
    """
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    if a.size == 0:
        return 0.0
    scale = max(np.max(np.abs(a)), np.max(np.abs(n)))
    if scale == 0.0:
        return 0.0
    return float(np.max(np.abs(a - n)) / scale)


def _set(t: Tensor, value: np.ndarray) -> None:
    t.data = value


def grad_check(fn: Callable[[], Tensor], inputs: Sequence[Tensor], h: float = 1e-3,
               tolerance: float = 1e-4, max_entries: int | None = 64,
               rng: Rng | None = None) -> GradCheckReport:
    """Compare tape gradients of ``fn()`` wrt ``inputs`` against central differences.

    ``fn`` must read the current ``.data`` of each input and return a scalar.
    Run it under 64-bit precision; inputs are perturbed in place and restored.
    For inputs with more than ``max_entries`` elements a seeded random subset
    of entries is checked.
    """
    rng = rng or Rng(0)
    with Tape() as tape:
        loss = fn()
    analytic = tape.grad(loss, list(inputs))
    report = GradCheckReport(0.0, tolerance)
    for t, ga in zip(inputs, analytic):
        base = t.data
        flat_n = base.size
        if max_entries is not None and flat_n > max_entries:
            idx = np.sort(rng.gen.choice(flat_n, size=max_entries, replace=False))
        else:
            idx = np.arange(flat_n)
        num = np.empty(len(idx))
        for j, i in enumerate(idx):
            plus = base.copy()
            plus.flat[i] += h
            _set(t, plus)
            fp = float(fn().data)
            minus = base.copy()
            minus.flat[i] -= h
            _set(t, minus)
            fm = float(fn().data)
            num[j] = (fp - fm) / (2 * h)
        _set(t, base)
        err = rel_error(ga.ravel()[idx], num)
        report.per_input.append(err)
        report.checked += len(idx)
        report.max_rel_err = max(report.max_rel_err, err)
    return report
