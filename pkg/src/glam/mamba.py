"""Mamba layer and the two variation-aware sequence modules built from it.

``LMambaModule`` reads short windows of features and returns
``post_map(e + Norm(M(e)))``. ``GMambaModule`` reads a whole feature sequence,
works on consecutive differences ``d_i = e_{i+1} - e_i`` and returns
``SiLU(LayerNorm(MLP(d + Norm(M(d)))))``. ``SequenceMambaModule`` is the
plain stateful variant (no windowing, no differences) used by ablations.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .ssm import SelectiveSSM, scan
from .tensor import MLP, LayerNorm, Linear, Module, Parameter, Rng, Tensor


@dataclass
class MambaState:
    """Carried state of one layer: last ``K-1`` pre-conv inputs and the scan state."""

    conv_tail: np.ndarray | None
    h: np.ndarray


class MambaLayer(Module):
    def __init__(self, d_model: int, rng: Rng, expand: int = 2, n_state: int = 16,
                 conv_width: int = 4, use_conv: bool = True, discretization: str = "simplified"):
        d_inner = expand * d_model
        self.d_model, self.d_inner, self.conv_width = d_model, d_inner, conv_width
        self.pre_norm = LayerNorm(d_model)
        self.in_proj = Linear(d_model, 2 * d_inner, rng.spawn(0))
        self.use_conv = use_conv
        if use_conv:
            bound = 1.0 / np.sqrt(conv_width)
            self.conv_weight = Parameter(rng.spawn(1).uniform(-bound, bound, (conv_width, d_inner), T.get_dtype()))
            self.conv_bias = Parameter(np.zeros(d_inner, T.get_dtype()))
        self.ssm = SelectiveSSM(d_inner, n_state, rng.spawn(2), discretization=discretization)
        self.out_proj = Linear(d_inner, d_model, rng.spawn(3))

    def __call__(self, x, state: MambaState | None = None, method: str = "parallel") -> tuple[Tensor, MambaState]:
        return mamba_forward(self, x, state, method)


def mamba_forward(layer: MambaLayer, x, state: MambaState | None = None,
                  method: str = "parallel") -> tuple[Tensor, MambaState]:
    """``out_proj(SiLU(gate) * scan(SiLU(conv(branch))))`` over ``x (B, L, D)``.

    Passing the returned state into the next call continues the sequence
    exactly as if both chunks had been evaluated together.
    """
    x = T.as_tensor(x)
    if x.ndim != 3 or x.shape[-1] != layer.d_model:
        raise T.ShapeError(f"mamba_forward: expected (B, L, {layer.d_model}), got {x.shape}")
    Bt = x.shape[0]
    xz = layer.in_proj(layer.pre_norm(x))
    branch = xz[..., :layer.d_inner]
    gate = xz[..., layer.d_inner:]
    tail = None
    if layer.use_conv:
        K = layer.conv_width
        prev = state.conv_tail if state is not None and state.conv_tail is not None else \
            np.zeros((Bt, K - 1, layer.d_inner), dtype=x.dtype)
        xp = T.concat([T.Tensor(prev), branch], axis=1)
        tail = xp.data[:, xp.shape[1] - (K - 1):].copy()
        branch = T.silu(T.add(T.depthwise_conv1d(xp, layer.conv_weight), layer.conv_bias))
    y, sstate = scan(layer.ssm, branch, None if state is None else state.h, method)
    out = layer.out_proj(T.mul(y, T.silu(gate)))
    return out, MambaState(tail, sstate.h)


def _run_layers(layers, x, states=None, method="parallel"):
    # layers after the first are residual; a bare chain starves the first layer of gradient at init
    new_states = []
    for i, layer in enumerate(layers):
        y, st = mamba_forward(layer, x, None if states is None else states[i], method)
        x = y if i == 0 else T.add(x, y)
        new_states.append(st)
    return x, new_states


class LMambaModule(Module):
    """Local module: windows of exactly ``window`` features."""

    def __init__(self, d_model: int, rng: Rng, n_layers: int = 1, window: int = 4, **layer_kw):
        if not 1 <= n_layers <= 2:
            raise ValueError("LMamba supports 1 or 2 layers")
        self.window = window
        self.layers = [MambaLayer(d_model, rng.spawn(i), **layer_kw) for i in range(n_layers)]
        self.out_norm = LayerNorm(d_model)
        self.post_map = Linear(d_model, d_model, rng.spawn(10))

    def __call__(self, e, method: str = "parallel") -> Tensor:
        return lmamba_forward(self, e, method)


def lmamba_forward(module: LMambaModule, e, method: str = "parallel") -> Tensor:
    """``e (B, s, D)`` -> ``u^l (B, s, D)``; each window starts from a zero state."""
    e = T.as_tensor(e)
    if e.ndim != 3 or e.shape[1] != module.window:
        raise ValueError(f"LMamba expects windows of length {module.window}, got shape {e.shape}")
    s, _ = _run_layers(module.layers, e, method=method)
    return module.post_map(T.add(e, module.out_norm(s)))


@dataclass
class GMambaState:
    prev_e: np.ndarray | None = None
    layers: list | None = None
    steps: int = 0


class GMambaModule(Module):
    """Global module over feature differences."""

    def __init__(self, d_model: int, rng: Rng, n_layers: int = 1, seq_len: int = 16, **layer_kw):
        if not 1 <= n_layers <= 2:
            raise ValueError("GMamba supports 1 or 2 layers")
        self.seq_len = seq_len
        self.layers = [MambaLayer(d_model, rng.spawn(i), **layer_kw) for i in range(n_layers)]
        self.out_norm = LayerNorm(d_model)
        self.post_map = MLP([d_model, d_model, d_model], rng.spawn(10))
        self.post_norm = LayerNorm(d_model)

    def __call__(self, e, state: GMambaState | None = None, check_length: bool = True,
                 method: str = "parallel"):
        return gmamba_forward(self, e, state, check_length, method)

    def post(self, u) -> Tensor:
        return T.silu(self.post_norm(self.post_map(u)))


def gmamba_forward(module: GMambaModule, e, state: GMambaState | None = None,
                   check_length: bool = True, method: str = "parallel") -> tuple[Tensor, GMambaState]:
    """Differences of ``e (B, L, D)`` through the Mamba stack and the post chain.

    Fresh call: returns ``L-1`` outputs, output ``i`` built from ``e_{i+1} - e_i``.
    With a carried state the previous last feature is prepended, giving ``L``
    outputs. ``check_length`` enforces ``L == seq_len`` on fresh calls.
    """
    e = T.as_tensor(e)
    if state is None or state.prev_e is None:
        if check_length and e.shape[1] != module.seq_len:
            raise ValueError(f"GMamba expects sequences of length {module.seq_len}, got {e.shape[1]}")
        if e.shape[1] < 2:
            raise ValueError("GMamba needs at least two features to form a difference")
        full = e
    else:
        full = T.concat([T.Tensor(state.prev_e[:, None]), e], axis=1)
    n = full.shape[1]
    d = T.sub(full[:, 1:], full[:, :n - 1])
    s, layer_states = _run_layers(module.layers, d, None if state is None else state.layers, method)
    u = module.post(T.add(d, module.out_norm(s)))
    steps = (0 if state is None else state.steps) + d.shape[1]
    return u, GMambaState(np.array(e.data[:, -1]), layer_states, steps)


class SequenceMambaModule(Module):
    """Plain causal Mamba over the raw feature sequence, carried state, no windowing."""

    def __init__(self, d_model: int, rng: Rng, n_layers: int = 1, **layer_kw):
        self.layers = [MambaLayer(d_model, rng.spawn(i), **layer_kw) for i in range(n_layers)]
        self.out_norm = LayerNorm(d_model)
        self.post_map = Linear(d_model, d_model, rng.spawn(10))

    def __call__(self, e, states=None, method: str = "parallel"):
        e = T.as_tensor(e)
        s, new_states = _run_layers(self.layers, e, states, method)
        return self.post_map(T.add(e, self.out_norm(s))), new_states
