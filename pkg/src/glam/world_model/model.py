"""GLAM world model: pixels -> categorical latents -> variation-aware sequence heads.

Training runs every step of a window at once (:meth:`GlamModel.predict_parallel`);
imagination advances one step at a time through a :class:`ModelContext`
(:meth:`GlamModel.step`). Both produce the same numbers for the same inputs.

Index conventions for a window of ``T`` steps ``0..T-1``:

* ``e_i = f(z_i, a_i)``.
* Global branch output ``u^g_i`` (``i >= 1``) comes from ``e_i - e_{i-1}``.
* Local branch output ``u^l_i`` (``i >= s-1``) comes from ``e_{i-s+1..i}``.
* Heads at ``i`` emit the reward ``r_i``, continuation ``c_i`` and the
  distribution of ``z_{i+1}``; the parallel path covers ``i = s-1 .. T-1``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .. import tensor as T
from ..config import ModelConfig
from ..mamba import (
    GMambaModule,
    GMambaState,
    LMambaModule,
    SequenceMambaModule,
    gmamba_forward,
    lmamba_forward,
)
from ..tensor import MLP, Conv2d, ConvTranspose2d, Linear, Module, Rng, Tensor
from .distributions import LatentDist, make_bins


class ConvEncoder(Module):
    """Stride-2 convolutions down to 4x4, then a linear map to latent logits."""

    def __init__(self, frame_size: int, depth: int, out_dim: int, rng: Rng):
        n = int(np.log2(frame_size // 4))
        chans = [1] + [depth * 2 ** i for i in range(n)]
        self.convs = [Conv2d(a, b, 4, rng.spawn(i)) for i, (a, b) in enumerate(zip(chans[:-1], chans[1:]))]
        self.flat_dim = chans[-1] * 16
        self.out = Linear(self.flat_dim, out_dim, rng.spawn(99))

    def __call__(self, frames) -> Tensor:
        x = T.as_tensor(frames)
        lead = x.shape[:-2]
        x = T.reshape(x, (-1, 1) + x.shape[-2:])
        x = T.sub(x, 0.5)
        for conv in self.convs:
            x = T.silu(conv(x))
        x = T.reshape(x, (x.shape[0], self.flat_dim))
        return T.reshape(self.out(x), lead + (self.out.weight.shape[1],))


class ConvDecoder(Module):
    def __init__(self, frame_size: int, depth: int, in_dim: int, rng: Rng):
        n = int(np.log2(frame_size // 4))
        chans = [depth * 2 ** i for i in reversed(range(n))] + [1]
        self.base = chans[0]
        self.inp = Linear(in_dim, self.base * 16, rng.spawn(99))
        self.deconvs = [ConvTranspose2d(a, b, 4, rng.spawn(i))
                        for i, (a, b) in enumerate(zip(chans[:-1], chans[1:]))]

    def __call__(self, z) -> Tensor:
        z = T.as_tensor(z)
        lead = z.shape[:-1]
        x = T.silu(self.inp(T.reshape(z, (-1, z.shape[-1]))))
        x = T.reshape(x, (x.shape[0], self.base, 4, 4))
        for i, dc in enumerate(self.deconvs):
            x = dc(x)
            if i < len(self.deconvs) - 1:
                x = T.silu(x)
        x = T.add(x, 0.5)
        return T.reshape(x, lead + x.shape[-2:])


@dataclass
class WorldModelOutputs:
    """Predictions for one or more steps (leading dims ``(B,)`` or ``(B, T')``)."""

    next_latent: LatentDist
    reward_logits: Tensor
    cont_logit: Tensor
    feature: Tensor
    var_logits: Tensor | None = None
    u_global: Tensor | None = None
    u_local: Tensor | None = None
    reconstruction: Tensor | None = None

    @property
    def continuation_prob(self) -> np.ndarray:
        return T.core._sigmoid(self.cont_logit.data)

    def reward_probs(self) -> np.ndarray:
        return T.softmax(T.stop_gradient(self.reward_logits), -1).data


@dataclass
class ModelContext:
    """Per-rollout state for single-step prediction.

    ``window`` holds the last ``s`` features (zero-padded when cold);
    ``states`` holds the carried Mamba states of stateful branches.
    """

    batch: int
    window: np.ndarray
    count: int = 0
    states: dict = field(default_factory=dict)
    feature: np.ndarray | None = None


class GlamModel(Module):
    def __init__(self, cfg: ModelConfig, action_count: int, frame_size: int, rng: Rng):
        self.cfg = cfg
        self.action_count = action_count
        self.frame_size = frame_size
        D = cfg.d_model
        K, C = cfg.latent_groups, cfg.latent_classes
        self.latent_dim = K * C
        layer_kw = dict(expand=cfg.expand, n_state=cfg.n_state, conv_width=cfg.conv_width,
                        use_conv=cfg.use_conv, discretization=cfg.discretization)
        self.encoder = ConvEncoder(frame_size, cfg.cnn_depth, K * C, rng.spawn(0))
        self.decoder = ConvDecoder(frame_size, cfg.cnn_depth, K * C, rng.spawn(1))
        self.feature_encoder = MLP([K * C + action_count, D, D], rng.spawn(2))
        if cfg.disable_gmamba:
            self.global_kind = None
            self.gmamba = None
        elif cfg.dbl_mamba:
            self.global_kind = "window"
            self.gmamba = LMambaModule(D, rng.spawn(3), cfg.gmamba_layers, cfg.lmamba_window, **layer_kw)
        else:
            self.global_kind = "diff"
            self.gmamba = GMambaModule(D, rng.spawn(3), cfg.gmamba_layers, cfg.gmamba_len, **layer_kw)
        if cfg.plain_local:
            self.local_kind = "sequence"
            self.lmamba = SequenceMambaModule(D, rng.spawn(4), cfg.lmamba_layers, **layer_kw)
        else:
            self.local_kind = "window"
            self.lmamba = LMambaModule(D, rng.spawn(4), cfg.lmamba_layers, cfg.lmamba_window, **layer_kw)
        self.fusion_dim = D * (2 if self.gmamba is not None else 1)
        H = cfg.head_hidden
        self.dyn_head = MLP([self.fusion_dim, H, K * C], rng.spawn(5))
        self.reward_head = MLP([self.fusion_dim, H, cfg.reward_bins], rng.spawn(6), out_scale=0.0)
        self.cont_head = MLP([self.fusion_dim, H, 1], rng.spawn(7))
        self.var_out = Linear(H, K * C, rng.spawn(8)) if self.gmamba is not None else None
        self.bins = make_bins(cfg.reward_bins, cfg.bin_low, cfg.bin_high)
        self.bind_names("world_model")

    @property
    def window(self) -> int:
        return self.cfg.lmamba_window

    def latent(self, logits) -> LatentDist:
        c = self.cfg
        return LatentDist(T.as_tensor(logits), c.latent_groups, c.latent_classes, c.unimix)

    # ----------------------------------------------------------- per step maps

    def encode(self, frames) -> LatentDist:
        """``frames (..., H, W)`` in [0, 1] -> latent distribution over ``K x C``."""
        frames = T.as_tensor(frames)
        if frames.shape[-2:] != (self.frame_size, self.frame_size):
            raise T.ShapeError(f"encode: expected frames of side {self.frame_size}, got {frames.shape}")
        if T.is_strict() and (frames.data.min() < 0 or frames.data.max() > 1):
            raise T.NumericGuardError("encode: pixel values outside [0, 1]")
        return self.latent(self.encoder(frames))

    def decode(self, z) -> Tensor:
        return self.decoder(z)

    def features(self, z, actions) -> Tensor:
        a = np.asarray(actions)
        if a.size and (a.min() < 0 or a.max() >= self.action_count):
            raise IndexError(f"action index out of range [0, {self.action_count})")
        return self.feature_encoder(T.concat([z, T.one_hot(a, self.action_count)], axis=-1))

    def heads(self, u_g: Tensor | None, u_l: Tensor) -> WorldModelOutputs:
        fused = u_l if u_g is None else T.concat([u_g, u_l], axis=-1)
        dyn = self.dyn_head(fused)
        var = None
        if u_g is not None and self.var_out is not None:
            trunk_in = T.concat([u_g, T.Tensor(np.zeros(u_l.shape, dtype=u_l.dtype))], axis=-1)
            var = self.var_out(self.dyn_head.trunk(trunk_in))
        cont = self.cont_head(fused)
        return WorldModelOutputs(
            next_latent=self.latent(dyn),
            reward_logits=self.reward_head(fused),
            cont_logit=T.reshape(cont, cont.shape[:-1]),
            feature=fused,
            var_logits=var,
            u_global=u_g,
            u_local=u_l,
        )

    # ------------------------------------------------------------ parallel path

    def _windows(self, e: Tensor) -> Tensor:
        """Stack ``e (B, T, D)`` into overlapping blocks ``(B, T-s+1, s, D)``."""
        s = self.window
        n = e.shape[1] - s + 1
        return T.stack([e[:, j:j + n] for j in range(s)], axis=2)

    def _window_branch(self, module: LMambaModule, e: Tensor) -> Tensor:
        blocks = self._windows(e)
        Bt, n, s, D = blocks.shape
        u = lmamba_forward(module, T.reshape(blocks, (Bt * n, s, D)))
        return T.reshape(u[:, s - 1], (Bt, n, D))

    def predict_parallel(self, z, actions) -> WorldModelOutputs:
        """Heads for steps ``s-1 .. T-1`` from latents ``z (B, T, K*C)`` and actions ``(B, T)``."""
        z = T.as_tensor(z)
        Tn = z.shape[1]
        s = self.window
        if Tn < max(s, self.cfg.gmamba_len if self.global_kind == "diff" else s):
            raise ValueError(f"sequence of length {Tn} is shorter than the model context")
        e = self.features(z, actions)
        first = s - 1
        if self.local_kind == "window":
            u_l = self._window_branch(self.lmamba, e)
        else:
            u_l, _ = self.lmamba(e)
            u_l = u_l[:, first:]
        u_g = None
        if self.global_kind == "diff":
            u_all, _ = gmamba_forward(self.gmamba, e, check_length=False)
            u_g = u_all[:, first - 1:]
        elif self.global_kind == "window":
            u_g = self._window_branch(self.gmamba, e)
        return self.heads(u_g, u_l)

    def parallel_train_forward(self, obs, actions, rng: Rng | None = None, mode: bool = False,
                               decode: bool = True):
        """Encode a batch of windows and run all heads at once.

        Returns ``(posterior LatentDist (B, T), sampled z (B, T, K*C), outputs)``
        where outputs cover steps ``s-1 .. T-1`` and carry reconstructions of
        the same steps when ``decode`` is set.
        """
        post = self.encode(obs)
        z = post.sample(rng, mode=mode)
        out = self.predict_parallel(z, actions)
        if decode:
            out.reconstruction = self.decode(z[:, self.window - 1:])
        return post, z, out

    # --------------------------------------------------------- single-step path

    def init_context(self, batch: int) -> ModelContext:
        D = self.cfg.d_model
        return ModelContext(batch, np.zeros((batch, self.window, D), dtype=T.get_dtype()))

    def step(self, ctx: ModelContext, z, action) -> WorldModelOutputs:
        """Advance ``ctx`` by one step with latent ``z (B, K*C)`` and ``action (B,)``.

        With fewer than ``s`` features seen, the local window is left-padded
        with zero features; before the first difference exists the global
        branch emits its post chain applied to a zero vector.
        """
        z = T.as_tensor(z)
        if z.shape != (ctx.batch, self.latent_dim):
            raise T.ShapeError(f"step: latent shape {z.shape} != {(ctx.batch, self.latent_dim)}")
        e = self.features(z, action)
        ctx.window = np.concatenate([ctx.window[:, 1:], e.data[:, None]], axis=1)
        s = self.window
        win_t = T.concat([T.Tensor(ctx.window[:, :s - 1]), T.reshape(e, (ctx.batch, 1, -1))], axis=1)
        if self.local_kind == "window":
            u_l = lmamba_forward(self.lmamba, win_t)[:, s - 1]
        else:
            u_seq, ctx.states["local"] = self.lmamba(T.reshape(e, (ctx.batch, 1, -1)), ctx.states.get("local"))
            u_l = u_seq[:, 0]
        u_g = None
        if self.global_kind == "diff":
            st: GMambaState | None = ctx.states.get("global")
            if st is None:
                zero = T.Tensor(np.zeros(e.shape, dtype=e.dtype))
                u_g = self.gmamba.post(zero)
                ctx.states["global"] = GMambaState(np.array(e.data), None, 0)
            else:
                u_seq, ctx.states["global"] = gmamba_forward(self.gmamba, T.reshape(e, (ctx.batch, 1, -1)), st)
                u_g = u_seq[:, 0]
        elif self.global_kind == "window":
            u_g = lmamba_forward(self.gmamba, win_t)[:, s - 1]
        ctx.count += 1
        out = self.heads(u_g, u_l)
        ctx.feature = out.feature.data
        return out

    def warm_context(self, z_hist, a_hist) -> tuple[ModelContext, WorldModelOutputs | None]:
        """Feed ``(B, n)`` real latents/actions through :meth:`step`; returns the context and last outputs."""
        z_hist = np.asarray(z_hist.data if isinstance(z_hist, Tensor) else z_hist)
        a_hist = np.asarray(a_hist)
        ctx = self.init_context(z_hist.shape[0])
        out = None
        for i in range(z_hist.shape[1]):
            out = self.step(ctx, z_hist[:, i], a_hist[:, i])
        return ctx, out
