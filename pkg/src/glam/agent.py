"""Actor-critic trained on rollouts imagined by the world model."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .config import AgentConfig
from .tensor import MLP, Adam, Module, Rng, Tensor
from .world_model.distributions import make_bins, symexp, symlog, twohot_cross_entropy, twohot_encode


def horizon_at(step: int, cfg: AgentConfig | None = None) -> int:
    """``min(n0 + floor(step / period) * increase, n_max)``."""
    cfg = cfg or AgentConfig()
    if step < 0:
        raise ValueError("step must be non-negative")
    n = cfg.horizon_init + (step // cfg.horizon_period) * cfg.horizon_increase
    return int(min(n, cfg.horizon_max))


class ActorCritic(Module):
    """Policy and value heads over ``concat(z_t, fused model feature)``.

    The value is a two-hot distribution over the same symlog bins as rewards.
    """

    def __init__(self, in_dim: int, action_count: int, cfg: AgentConfig, bins: np.ndarray, rng: Rng):
        H = cfg.hidden
        self.action_count = action_count
        self.actor = MLP([in_dim, H, H, action_count], rng.spawn(0))
        self.critic = MLP([in_dim, H, H, len(bins)], rng.spawn(1), out_scale=0.0)
        self.bins = bins
        self.bind_names("agent")

    def policy_logits(self, x) -> Tensor:
        return self.actor(x)

    def value_logits(self, x) -> Tensor:
        return self.critic(x)

    def value(self, x) -> np.ndarray:
        """Expected value in raw (un-symlogged) units."""
        with T.no_grad():
            p = T.softmax(self.critic(x), -1).data
        return symexp(p.astype(np.float64) @ self.bins.astype(np.float64))

    def act(self, x, rng: Rng | None, greedy: bool = False) -> np.ndarray:
        with T.no_grad():
            probs = T.softmax(self.actor(x), -1).data
        if greedy:
            return np.argmax(probs, axis=-1)
        return rng.categorical(probs)


@dataclass
class ImaginationRollout:
    """``states (B, n+1, F)``, ``actions/rewards/conts (B, n)``."""

    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    conts: np.ndarray

    @property
    def horizon(self) -> int:
        return self.actions.shape[1]


def agent_state(z, feature) -> np.ndarray:
    return np.concatenate([np.asarray(z), np.asarray(feature)], axis=-1)


def imagine(model, ac: ActorCritic, z_ctx, a_ctx, horizon: int, rng: Rng, greedy: bool = False,
            mode_latents: bool = False) -> ImaginationRollout:
    """Warm the model on real ``z_ctx (B, n, K*C)`` / ``a_ctx (B, n)``, then roll out ``horizon`` steps.

    The start state is the latent predicted after the last real step together
    with the fused feature that produced it. Nothing is recorded on a tape.
    """
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    z_ctx = np.asarray(z_ctx)
    if z_ctx.ndim != 3 or z_ctx.shape[1] < 1:
        raise ValueError("imagination needs a non-empty real context of shape (B, n, K*C)")
    with T.no_grad():
        ctx, out = model.warm_context(z_ctx, a_ctx)
        B = z_ctx.shape[0]
        z = out.next_latent.sample(rng, mode=mode_latents).data
        feat = out.feature.data
        states = [agent_state(z, feat)]
        actions, rewards, conts = [], [], []
        for _ in range(horizon):
            a = ac.act(states[-1], rng, greedy)
            out = model.step(ctx, z, a)
            r = symexp(out.reward_probs().astype(np.float64) @ model.bins.astype(np.float64))
            c = out.continuation_prob.astype(np.float64)
            z = out.next_latent.sample(rng, mode=mode_latents).data
            feat = out.feature.data
            actions.append(a)
            rewards.append(r)
            conts.append(c)
            states.append(agent_state(z, feat))
    return ImaginationRollout(np.stack(states, 1), np.stack(actions, 1).reshape(B, horizon),
                              np.stack(rewards, 1), np.stack(conts, 1))


def lambda_returns(rewards, conts, values, gamma: float, lam: float) -> np.ndarray:
    """``R_t = r_t + gamma c_t [(1 - lam) V_{t+1} + lam R_{t+1}]`` with ``R_n = V_n``.

    ``rewards, conts (B, n)``; ``values (B, n+1)``. Returns ``(B, n)``.
    """
    r = np.asarray(rewards, dtype=np.float64)
    c = np.asarray(conts, dtype=np.float64)
    v = np.asarray(values, dtype=np.float64)
    if not (0 <= gamma <= 1 and 0 <= lam <= 1):
        raise ValueError("gamma and lam must lie in [0, 1]")
    n = r.shape[-1]
    if v.shape[-1] != n + 1:
        raise ValueError(f"values need {n + 1} entries along time, got {v.shape[-1]}")
    out = np.empty_like(r)
    nxt = v[..., n]
    for t in reversed(range(n)):
        nxt = r[..., t] + gamma * c[..., t] * ((1 - lam) * v[..., t + 1] + lam * nxt)
        out[..., t] = nxt
    return out


class ReturnNormalizer:
    """EMA of the 5th-95th percentile return range; advantages are divided by ``max(1, range)``."""

    def __init__(self, decay: float = 0.99):
        self.decay = decay
        self.low: float | None = None
        self.high: float | None = None

    def update(self, returns: np.ndarray) -> float:
        lo, hi = np.percentile(returns, [5.0, 95.0])
        if self.low is None:
            self.low, self.high = float(lo), float(hi)
        else:
            d = self.decay
            self.low = d * self.low + (1 - d) * float(lo)
            self.high = d * self.high + (1 - d) * float(hi)
        return self.scale

    @property
    def scale(self) -> float:
        if self.low is None:
            return 1.0
        return max(1.0, self.high - self.low)

    def state(self) -> dict:
        return {"decay": self.decay, "low": self.low, "high": self.high}

    def load(self, st: dict) -> None:
        self.decay, self.low, self.high = st["decay"], st["low"], st["high"]


@dataclass
class AgentLosses:
    actor: float
    critic: float
    entropy: float
    return_mean: float
    scale: float


class AgentTrainer:
    """Owns the actor-critic, its two optimizers and the return normalizer."""

    def __init__(self, ac: ActorCritic, cfg: AgentConfig):
        self.ac = ac
        self.cfg = cfg
        self.actor_opt = Adam(ac.actor.parameters(), cfg.lr, cfg.grad_clip)
        self.critic_opt = Adam(ac.critic.parameters(), cfg.lr, cfg.grad_clip)
        self.normalizer = ReturnNormalizer(cfg.return_norm_decay)

    def update(self, rollout: ImaginationRollout) -> AgentLosses:
        return agent_update(self, rollout)


def agent_update(trainer: AgentTrainer, rollout: ImaginationRollout) -> AgentLosses:
    """One REINFORCE + entropy step for the actor and one two-hot regression step for the critic.

    Steps are weighted by the probability of still being alive,
    ``prod_{j<t} c_j``, so imagined post-termination steps count less.
    """
    ac, cfg = trainer.ac, trainer.cfg
    n = rollout.horizon
    x = rollout.states.astype(T.get_dtype())
    values = ac.value(x)
    R = lambda_returns(rollout.rewards, rollout.conts, values, cfg.gamma, cfg.lam)
    scale = trainer.normalizer.update(R)
    adv = (R - values[:, :n]) / scale
    alive = np.concatenate([np.ones_like(rollout.conts[:, :1]), np.cumprod(rollout.conts[:, :-1], 1)], 1)
    w = (alive / alive.size).astype(x.dtype)
    with T.Tape() as tape:
        logp = T.log_softmax(ac.policy_logits(x[:, :n]), -1)
        taken = T.sum_(T.mul(logp, T.one_hot(rollout.actions, ac.action_count)), axis=-1)
        ent = T.neg(T.sum_(T.mul(T.exp(logp), logp), axis=-1))
        actor_loss = T.neg(T.sum_(T.mul(T.add(T.mul(taken, adv.astype(x.dtype)), T.mul(ent, cfg.entropy_coef)), w)))
        target = twohot_encode(symlog(R), ac.bins)
        critic_loss = T.sum_(T.mul(twohot_cross_entropy(ac.value_logits(x[:, :n]), target), w))
        loss = T.add(actor_loss, critic_loss)
        grads = tape.backward(loss, ac.parameters())
    trainer.actor_opt.step(grads)
    trainer.critic_opt.step(grads)
    return AgentLosses(float(actor_loss.data), float(critic_loss.data),
                       float(ent.data.mean()), float(R.mean()), scale)


def make_agent(model, action_count: int, cfg: AgentConfig, rng: Rng) -> ActorCritic:
    in_dim = model.latent_dim + model.fusion_dim
    return ActorCritic(in_dim, action_count, cfg, make_bins(len(model.bins), float(model.bins[0]),
                                                             float(model.bins[-1])), rng)


def entropy_of(logits) -> float:
    p = T.softmax(T.as_tensor(logits), -1).data.astype(np.float64)
    return float(-(p * np.log(np.maximum(p, 1e-300))).sum(-1).mean())

