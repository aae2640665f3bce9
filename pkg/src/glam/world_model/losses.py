"""World-model objectives: prediction, dynamics/representation KL, variation KL."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .. import tensor as T
from ..tensor import Tensor
from .distributions import LatentDist, kl_categorical, symlog, twohot_cross_entropy, twohot_encode


def free_bits(kl: Tensor, floor: float = 1.0) -> Tensor:
    """``max(floor, kl)`` elementwise; the gradient is zero wherever ``kl < floor``."""
    return T.clamp_min(kl, floor)


def _masked_mean(x: Tensor, mask: np.ndarray | None) -> Tensor:
    if mask is None:
        return T.mean(x)
    m = np.asarray(mask, dtype=x.dtype)
    denom = max(float(m.sum()), 1.0)
    return T.div(T.sum_(T.mul(x, m)), denom)


def reward_loss(reward_logits, rewards, bins: np.ndarray) -> Tensor:
    target = twohot_encode(symlog(rewards), bins)
    return twohot_cross_entropy(reward_logits, target)


def reconstruction_loss(recon, frames) -> Tensor:
    """Squared error summed over pixels, one value per frame."""
    diff = T.sub(recon, np.asarray(frames, dtype=T.as_tensor(recon).dtype))
    return T.sum_(T.mul(diff, diff), axis=(-2, -1))


def continuation_loss(cont_logit, cont) -> Tensor:
    """Binary cross-entropy from a logit: ``softplus(x) - c x``."""
    x = T.as_tensor(cont_logit)
    return T.sub(T.softplus(x), T.mul(x, np.asarray(cont, dtype=x.dtype)))


def loss_pred(reward_logits, cont_logit, recon, rewards, conts, frames, bins: np.ndarray) -> tuple[Tensor, dict]:
    """Mean over batch and time of reward CE + reconstruction SE + continuation BCE."""
    shapes = {T.as_tensor(reward_logits).shape[:-1], T.as_tensor(cont_logit).shape, np.shape(rewards),
              np.shape(conts)}
    if recon is not None:
        shapes.add(T.as_tensor(recon).shape[:-2])
        shapes.add(np.shape(frames)[:-2])
    if len(shapes) != 1:
        raise ValueError(f"loss_pred: misaligned prediction/target shapes {sorted(shapes)}")
    r = T.mean(reward_loss(reward_logits, rewards, bins))
    c = T.mean(continuation_loss(cont_logit, conts))
    total = T.add(r, c)
    parts = {"reward": float(r.data), "cont": float(c.data)}
    if recon is not None:
        o = T.mean(reconstruction_loss(recon, frames))
        total = T.add(total, o)
        parts["recon"] = float(o.data)
    return total, parts


def loss_dyn_rep(post_next: LatentDist, prior_next: LatentDist, mask=None,
                 floor: float = 1.0) -> tuple[Tensor, Tensor]:
    """``(max(1, KL[sg(post) || prior]), max(1, KL[post || sg(prior)]))`` averaged over unmasked steps."""
    dyn_kl = kl_categorical(post_next.detach().log_probs(), prior_next.log_probs())
    rep_kl = kl_categorical(post_next.log_probs(), prior_next.detach().log_probs())
    return (_masked_mean(free_bits(dyn_kl, floor), mask),
            _masked_mean(free_bits(rep_kl, floor), mask))


def variation_target(z_t, z_next, groups: int) -> Tensor:
    """Per-group softmax of the stopped latent difference ``z_{t+1} - z_t``."""
    delta = T.stop_gradient(T.sub(z_next, z_t))
    return T.softmax(T.reshape(delta, delta.shape[:-1] + (groups, delta.shape[-1] // groups)), -1)


def loss_var(z_t, z_next, var_logits, groups: int, mask=None, floor: float = 1.0) -> Tensor:
    """``max(1, KL[softmax(sg(z_{t+1} - z_t)) || softmax(var_logits)])`` per group, summed over groups."""
    target = variation_target(z_t, z_next, groups)
    v = T.as_tensor(var_logits)
    pred_log = T.log_softmax(T.reshape(v, v.shape[:-1] + (groups, v.shape[-1] // groups)), -1)
    kl = kl_categorical(T.log(target), pred_log)
    return _masked_mean(free_bits(kl, floor), mask)


def total_loss(pred, dyn, rep, var, beta_dyn: float = 0.5, beta_rep: float = 0.1, beta_var: float = 0.1):
    """``pred + beta_dyn dyn + beta_rep rep + beta_var var``; accepts tensors or floats."""
    out = T.add(T.as_tensor(pred), T.mul(T.as_tensor(dyn), beta_dyn))
    out = T.add(out, T.mul(T.as_tensor(rep), beta_rep))
    if var is not None and beta_var:
        out = T.add(out, T.mul(T.as_tensor(var), beta_var))
    return out


@dataclass
class LossReport:
    total: Tensor
    pred: float
    dyn: float
    rep: float
    var: float
    parts: dict


def world_model_loss(model, batch, rng, cfg) -> LossReport:
    """Full objective on a replay batch with fields ``obs, action, reward, cont, done`` of shape ``(B, T, ...)``.

    Heads at step ``i`` predict ``z_{i+1}``, ``r_i`` and ``c_i`` for ``i = s-1 .. T-1``.
    The next-latent terms are only defined up to ``T-2`` and are masked where
    step ``i`` ends an episode, because ``z_{i+1}`` then belongs to a new one.
    ``cfg`` is a :class:`~glam.config.WorldModelConfig`.
    """
    obs = np.asarray(batch.obs)
    s = model.window
    post, z, out = model.parallel_train_forward(obs, batch.action, rng)
    sl = slice(s - 1, None)
    pred, parts = loss_pred(out.reward_logits, out.cont_logit, out.reconstruction,
                            batch.reward[:, sl], batch.cont[:, sl], obs[:, sl], model.bins)
    # heads at s-1..T-2 have a target z_{i+1} inside the window
    keep = 1.0 - np.asarray(batch.done[:, s - 1:-1], dtype=np.float64)
    prior = model.latent(out.next_latent.logits[:, :-1])
    post_next = model.latent(post.logits[:, s:])
    dyn, rep = loss_dyn_rep(post_next, prior, keep, cfg.free_bits)
    var = None
    if out.var_logits is not None and cfg.beta_var:
        var = loss_var(z[:, s - 1:-1], z[:, s:], out.var_logits[:, :-1], model.cfg.latent_groups, keep,
                       cfg.free_bits)
    total = total_loss(pred, dyn, rep, var, cfg.beta_dyn, cfg.beta_rep, cfg.beta_var)
    return LossReport(total, float(pred.data), float(dyn.data), float(rep.data),
                      0.0 if var is None else float(var.data), parts)
