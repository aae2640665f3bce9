"""Selective state-space (S6) recurrence with input-dependent discretization.

Shapes follow the usual S6 layout: ``x (B, L, D)``, diagonal state matrix
``A (D, N)``, per-step ``B_t, C_t (B, L, N)`` shared across channels, and a
per-channel step size ``delta (B, L, D)``. There is no skip (``D``) term.

Two evaluation paths produce the same result:

* :func:`scan_sequential` unrolls ``h_t = A_bar_t h_{t-1} + B_bar_t x_t`` step by
  step out of elementary tape ops; it is the reference.
* :func:`scan_parallel` evaluates the recurrence with an associative
  (Hillis-Steele) scan over ``(A_bar, B_bar x)`` pairs, fused into one
  primitive with a hand-written backward pass.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Module, Parameter, Rng, Tensor
from .tensor.core import ShapeError, _prep, record, scan_recurrence


def inverse_softplus(y: np.ndarray) -> np.ndarray:
    return y + np.log(-np.expm1(-y))


@dataclass
class ScanState:
    """Hidden state ``h (B, D, N)`` carried between chunks of a sequence."""

    h: np.ndarray


class SelectiveSSM(Module):
    """Parameters of one selective scan over ``d_inner`` channels.

    ``A = -softplus(a_raw)`` so the continuous-time system is always stable.
    ``delta = softplus(x W_down W_up + dt_bias)`` is a low-rank projection.
    """

    def __init__(self, d_inner: int, n_state: int, rng: Rng, dt_rank: int | None = None,
                 dt_min: float = 1e-3, dt_max: float = 1e-1, discretization: str = "simplified"):
        if discretization not in ("simplified", "zoh"):
            raise ValueError(f"unknown discretization {discretization!r}")
        dtype = T.get_dtype()
        self.d_inner, self.n_state = d_inner, n_state
        self.dt_rank = dt_rank or max(1, math.ceil(d_inner / 16))
        self.discretization = discretization
        a_init = np.tile(np.arange(1, n_state + 1, dtype=np.float64), (d_inner, 1))
        self.a_raw = Parameter(inverse_softplus(a_init).astype(dtype))
        bound = 1.0 / math.sqrt(d_inner)
        self.w_b = Parameter(rng.uniform(-bound, bound, (d_inner, n_state), dtype))
        self.b_bias = Parameter(np.zeros(n_state, dtype))
        self.w_c = Parameter(rng.spawn(1).uniform(-bound, bound, (d_inner, n_state), dtype))
        self.c_bias = Parameter(np.zeros(n_state, dtype))
        self.w_dt_down = Parameter(rng.spawn(2).uniform(-bound, bound, (d_inner, self.dt_rank), dtype))
        up = self.dt_rank ** -0.5
        self.w_dt_up = Parameter(rng.spawn(3).uniform(-up, up, (self.dt_rank, d_inner), dtype))
        r = rng.spawn(4).random(d_inner)
        dt = np.exp(r * (math.log(dt_max) - math.log(dt_min)) + math.log(dt_min))
        self.dt_bias = Parameter(inverse_softplus(dt).astype(dtype))

    def A(self) -> Tensor:
        return T.neg(T.softplus(self.a_raw))


def selective_project(ssm: SelectiveSSM, x) -> tuple[Tensor, Tensor, Tensor]:
    """Map inputs ``x (..., D)`` to ``(delta (..., D) > 0, B (..., N), C (..., N))``."""
    x = T.as_tensor(x)
    if x.shape[-1] != ssm.d_inner:
        raise ShapeError(f"selective_project: expected last dim {ssm.d_inner}, got {x.shape}")
    delta = T.softplus(T.add(T.matmul(T.matmul(x, ssm.w_dt_down), ssm.w_dt_up), ssm.dt_bias))
    B = T.add(T.matmul(x, ssm.w_b), ssm.b_bias)
    C = T.add(T.matmul(x, ssm.w_c), ssm.c_bias)
    return delta, B, C


def discretize(delta, A, B, method: str = "simplified") -> tuple[Tensor, Tensor]:
    """Return ``(A_bar, B_bar)`` of shape ``(..., D, N)``.

    ``A_bar = exp(delta A)`` in both modes. ``"simplified"`` uses
    ``B_bar = delta B``; ``"zoh"`` the exact hold ``(exp(delta A) - 1) / A * B``.
    """
    delta, A, B = T.as_tensor(delta), T.as_tensor(A), T.as_tensor(B)
    d = T.reshape(delta, delta.shape + (1,))
    dA = T.mul(d, A)
    A_bar = T.exp(dA)
    Bx = T.reshape(B, B.shape[:-1] + (1, B.shape[-1]))
    if method == "simplified":
        B_bar = T.mul(d, Bx)
    elif method == "zoh":
        B_bar = T.mul(T.div(T.sub(A_bar, 1.0), A), Bx)
    else:
        raise ValueError(f"unknown discretization {method!r}")
    return A_bar, B_bar


def _check_input(ssm: SelectiveSSM, x: Tensor, h0) -> None:
    if x.ndim != 3 or x.shape[-1] != ssm.d_inner or x.shape[1] < 1:
        raise ShapeError(f"scan: expected x of shape (B, L>=1, {ssm.d_inner}), got {x.shape}")
    if h0 is not None and np.shape(h0) != (x.shape[0], ssm.d_inner, ssm.n_state):
        raise ShapeError(f"scan: h0 shape {np.shape(h0)} does not match input {x.shape}")


def scan_sequential(ssm: SelectiveSSM, x, h0: np.ndarray | None = None) -> tuple[Tensor, ScanState]:
    """Reference left-to-right recurrence. Returns ``(y (B, L, D), final state)``."""
    x = T.as_tensor(x)
    _check_input(ssm, x, h0)
    delta, B, C = selective_project(ssm, x)
    A = ssm.A()
    Bt, L, D = x.shape
    h = T.Tensor(np.zeros((Bt, D, ssm.n_state), dtype=x.dtype) if h0 is None else h0)
    ys = []
    for t in range(L):
        A_bar, B_bar = discretize(delta[:, t], A, B[:, t], ssm.discretization)
        xt = T.reshape(x[:, t], (Bt, D, 1))
        h = T.add(T.mul(A_bar, h), T.mul(B_bar, xt))
        Ct = T.reshape(C[:, t], (Bt, 1, ssm.n_state))
        ys.append(T.sum_(T.mul(h, Ct), axis=-1))
    return T.stack(ys, axis=1), ScanState(np.array(h.data))


def selective_scan(x, delta, A, B, C, h0: np.ndarray | None = None) -> tuple[Tensor, np.ndarray]:
    """Fused simplified-discretization scan; returns ``(y, h_L)`` with ``h0`` treated as constant."""
    x, delta, A, B, C = _prep("selective_scan", x, delta, A, B, C)
    xd, dd, Ad, Bd, Cd = x.data, delta.data, A.data, B.data, C.data
    Ab = np.exp(dd[..., None] * Ad)
    dx = dd * xd
    bx = dx[..., None] * Bd[:, :, None, :]
    if h0 is not None:
        bx[:, 0] += Ab[:, 0] * h0
    h = scan_recurrence(Ab, bx, "parallel")
    del bx
    y = (h @ Cd[..., None])[..., 0]
    h_last = h[:, -1].copy()

    def bwd(g):
        gC = (g[:, :, None, :] @ h)[:, :, 0, :]
        gh = g[..., None] * Cd[:, :, None, :]
        Ab_ = np.exp(dd[..., None] * Ad)
        a_next = np.zeros_like(Ab_)
        a_next[:, :-1] = Ab_[:, 1:]
        lam = scan_recurrence(a_next[:, ::-1], gh[:, ::-1], "parallel")[:, ::-1]
        del gh, a_next
        h_prev = np.empty_like(h)
        h_prev[:, 1:] = h[:, :-1]
        h_prev[:, 0] = 0 if h0 is None else h0
        g_dA = lam * h_prev * Ab_
        del h_prev, Ab_
        gdx = (lam @ Bd[..., None])[..., 0]
        gB = (dx[:, :, None, :] @ lam)[:, :, 0, :]
        gdelta = (g_dA * Ad).sum(axis=-1) + gdx * xd
        gA = (g_dA * dd[..., None]).sum(axis=(0, 1))
        gx = gdx * dd
        return gx, gdelta, gA, gB, gC

    return record("selective_scan", y, (x, delta, A, B, C), bwd), h_last


T.register_primitive("selective_scan", selective_scan)


def scan_parallel(ssm: SelectiveSSM, x, h0: np.ndarray | None = None) -> tuple[Tensor, ScanState]:
    """Associative-scan evaluation of the same recurrence as :func:`scan_sequential`."""
    x = T.as_tensor(x)
    _check_input(ssm, x, h0)
    delta, B, C = selective_project(ssm, x)
    A = ssm.A()
    if ssm.discretization == "simplified":
        y, h_last = selective_scan(x, delta, A, B, C, h0)
        return y, ScanState(h_last)
    A_bar, B_bar = discretize(delta, A, B, "zoh")
    bx = T.mul(B_bar, T.reshape(x, x.shape + (1,)))
    h = T.linear_scan(A_bar, bx, None if h0 is None else T.Tensor(h0), method="parallel")
    Cx = T.reshape(C, C.shape[:2] + (1, C.shape[-1]))
    y = T.sum_(T.mul(h, Cx), axis=-1)
    return y, ScanState(np.array(h.data[:, -1]))


def scan(ssm: SelectiveSSM, x, h0: np.ndarray | None = None, method: str = "parallel"):
    if method == "parallel":
        return scan_parallel(ssm, x, h0)
    if method == "sequential":
        return scan_sequential(ssm, x, h0)
    raise ValueError(f"unknown scan method {method!r}")
