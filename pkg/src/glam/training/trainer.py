"""Collection, world-model and agent updates, evaluation, checkpoints and metrics."""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .. import tensor as T
from ..agent import AgentTrainer, agent_state, horizon_at, imagine, make_agent
from ..config import Config, config_from_dict, dump_config
from ..envs import EpisodeLogWriter, ReplayBuffer, make_env
from ..envs.processing import from_uint8, to_uint8
from ..tensor import Adam, Rng
from ..world_model import GlamModel, world_model_loss
from .checkpoint import CheckpointMismatch, read_container, write_container
from .metrics import MetricsWriter

STREAMS = {"model": 0, "agent": 1, "env": 2, "act": 3, "wm": 4, "imagine": 5, "eval": 6}
FORMAT_VERSION = 1


def episode_rng(seed: int, episode: int) -> Rng:
    """Reset stream of training episode ``episode``; used to replay episode logs."""
    return Rng(seed).spawn(STREAMS["env"]).spawn(episode)


class TrainingAborted(RuntimeError):
    def __init__(self, message: str, diagnostic: dict):
        super().__init__(message)
        self.diagnostic = diagnostic


@dataclass
class Counters:
    env_step: int = 0
    wm_updates: int = 0
    agent_updates: int = 0
    episodes: int = 0


@dataclass
class Accumulator:
    """Running sums between two metric records."""

    sums: dict = field(default_factory=dict)
    counts: dict = field(default_factory=dict)
    returns: list = field(default_factory=list)

    def add(self, **values) -> None:
        for k, v in values.items():
            self.sums[k] = self.sums.get(k, 0.0) + float(v)
            self.counts[k] = self.counts.get(k, 0) + 1

    def means(self) -> dict:
        return {k: self.sums[k] / self.counts[k] for k in sorted(self.sums)}


def context_feature(model: GlamModel, history: list, length: int) -> np.ndarray:
    """Fused feature after replaying the last ``length`` real ``(z, a)`` pairs; zeros when empty."""
    hist = history[-length:]
    if not hist:
        return np.zeros(model.fusion_dim, dtype=T.get_dtype())
    z = np.stack([h[0] for h in hist])[None]
    a = np.array([h[1] for h in hist])[None]
    with T.no_grad():
        _, out = model.warm_context(z, a)
    return out.feature.data[0]


def _finite(x) -> bool:
    return bool(np.all(np.isfinite(np.asarray(x))))


class Trainer:
    """One training run. All randomness comes from named child streams of ``train.seed``."""

    def __init__(self, cfg: Config, run_dir: str | Path | None = None, log_episodes: bool = True,
                 _resume_step: int | None = None, _log_offset: int | None = None):
        self.cfg = cfg.validate()
        root = Rng(cfg.train.seed)
        self.env = make_env(cfg.env.name, cfg.env.random_start, cfg.env.action_repeat, cfg.env.frame_size)
        self.action_count = self.env.action_count
        self.model = GlamModel(cfg.model, self.action_count, cfg.env.frame_size, root.spawn(STREAMS["model"]))
        self.ac = make_agent(self.model, self.action_count, cfg.agent, root.spawn(STREAMS["agent"]))
        self.agent = AgentTrainer(self.ac, cfg.agent)
        self.wm_opt = Adam(self.model.parameters(), cfg.world_model.lr, cfg.world_model.grad_clip)
        self.rngs = {k: root.spawn(STREAMS[k]) for k in ("act", "wm", "imagine")}
        fs = cfg.env.frame_size
        self.replay = ReplayBuffer(cfg.train.replay_capacity, (fs, fs))
        self.counters = Counters()
        self.acc = Accumulator()
        self.frame: np.ndarray | None = None
        self.history: list[tuple[np.ndarray, int]] = []
        self.ep_return = 0.0
        self.ep_length = 0
        self._t0 = time.time()
        self.run_dir = Path(run_dir) if run_dir is not None else None
        self.metrics = None
        self.episode_log = None
        if self.run_dir is not None:
            self.run_dir.mkdir(parents=True, exist_ok=True)
            (self.run_dir / "config.yaml").write_text(dump_config(cfg))
            self.metrics = MetricsWriter(self.run_dir / "metrics.jsonl", truncate_after=_resume_step)
            if log_episodes:
                path = self.run_dir / "episodes.glamlog"
                if _log_offset is not None and path.exists():
                    with open(path, "r+b") as fh:
                        fh.truncate(_log_offset)
                self.episode_log = EpisodeLogWriter(
                    path, (fs, fs), {"env": cfg.env.name, "seed": cfg.train.seed,
                                     "random_start": cfg.env.random_start, "repeat": cfg.env.action_repeat})

    # ------------------------------------------------------------- collection

    @property
    def warmup(self) -> int:
        return self.cfg.train.warmup_steps

    def _start_episode(self) -> None:
        f = self.env.reset(episode_rng(self.cfg.train.seed, self.counters.episodes))
        self.frame = from_uint8(to_uint8(f))
        self.history = []
        self.ep_return, self.ep_length = 0.0, 0

    def select_action(self, z: np.ndarray) -> int:
        rng = self.rngs["act"]
        if self.counters.env_step < self.warmup:
            return int(rng.integers(0, self.action_count))
        feat = context_feature(self.model, self.history, self.cfg.env.context_length)
        return int(self.ac.act(agent_state(z, feat)[None], rng)[0])

    def env_step(self) -> None:
        """Collect one transition, then run the updates due at this step."""
        if self.frame is None:
            self._start_episode()
        with T.no_grad():
            z = self.model.encode(self.frame[None]).sample(self.rngs["act"]).data[0]
        a = self.select_action(z)
        nxt, r, done = self.env.step(a)
        self.replay.append(self.frame, a, r, done)
        if self.episode_log is not None:
            self.episode_log.append(self.frame, a, r, done, reset=self.ep_length == 0)
        self.history = (self.history + [(z, a)])[-self.cfg.env.context_length:]
        self.ep_return += r
        self.ep_length += 1
        if done:
            self.acc.returns.append(self.ep_return)
            self.counters.episodes += 1
            self.frame = None
        else:
            self.frame = from_uint8(to_uint8(nxt))
        self.counters.env_step += 1
        k = self.counters.env_step - self.warmup
        if k > 0:
            if k % self.cfg.train.wm_every == 0:
                self.world_model_update()
            if k % self.cfg.train.agent_every == 0:
                self.agent_update()
        step = self.counters.env_step
        if step % self.cfg.run.log_every == 0:
            self._emit_metrics()
        if self.run_dir is not None and self.cfg.run.checkpoint_every and step % self.cfg.run.checkpoint_every == 0:
            self.save(self.run_dir / "checkpoints" / f"ckpt_{step}.npz")

    # ---------------------------------------------------------------- updates

    def world_model_update(self) -> None:
        wm = self.cfg.world_model
        rng = self.rngs["wm"]
        batch = self.replay.sample(rng, wm.batch_size, wm.batch_length)
        with T.Tape() as tape:
            rep = world_model_loss(self.model, batch, rng, wm)
            if not _finite(rep.total.data):
                self._abort("world_model", {"pred": rep.pred, "dyn": rep.dyn, "rep": rep.rep, "var": rep.var},
                            batch)
            grads = tape.backward(rep.total, self.model.parameters())
        norm = self.wm_opt.step(grads)
        self.counters.wm_updates += 1
        self.acc.add(wm_loss_total=float(rep.total.data), wm_loss_pred=rep.pred, wm_loss_dyn=rep.dyn,
                     wm_loss_rep=rep.rep, wm_loss_var=rep.var, wm_grad_norm=norm)

    def agent_update(self) -> None:
        ag = self.cfg.agent
        rng = self.rngs["imagine"]
        ctx = self.replay.sample(rng, ag.imagination_batch, ag.context_length)
        with T.no_grad():
            z = self.model.encode(ctx.obs).sample(rng).data
        horizon = horizon_at(self.counters.env_step, ag)
        rollout = imagine(self.model, self.ac, z, ctx.action, horizon, rng)
        losses = self.agent.update(rollout)
        if not (_finite(losses.actor) and _finite(losses.critic)):
            self._abort("agent", asdict(losses), ctx)
        self.counters.agent_updates += 1
        self.acc.add(actor_loss=losses.actor, critic_loss=losses.critic, entropy=losses.entropy,
                     imagined_return=losses.return_mean, horizon=horizon)

    def _abort(self, stage: str, losses: dict, batch) -> None:
        norms = {name: float(np.linalg.norm(p.data)) for name, p in
                 list(self.model.named_parameters("world_model")) + list(self.ac.named_parameters("agent"))}
        diag = {"stage": stage, "env_step": self.counters.env_step, "losses": losses,
                "parameter_norms": norms, "config_hash": self.cfg.hash()}
        if self.run_dir is not None:
            (self.run_dir / "diagnostic.json").write_text(json.dumps(diag, indent=1, default=str))
            np.savez(self.run_dir / "diagnostic_batch.npz", obs=to_uint8(batch.obs), action=batch.action,
                     reward=batch.reward, done=batch.done)
        raise TrainingAborted(f"non-finite {stage} loss at env step {self.counters.env_step}", diag)

    # ---------------------------------------------------------------- metrics

    def _emit_metrics(self) -> dict:
        c = self.counters
        rec = {"env_step": c.env_step, "wm_updates": c.wm_updates, "agent_updates": c.agent_updates,
               "episodes": c.episodes, "horizon": horizon_at(c.env_step, self.cfg.agent)}
        means = self.acc.means()
        for key in ("wm_loss_total", "wm_loss_pred", "wm_loss_dyn", "wm_loss_rep", "wm_loss_var",
                    "wm_grad_norm", "actor_loss", "critic_loss", "entropy", "imagined_return"):
            rec[key] = means.get(key)
        rec["episode_returns"] = list(self.acc.returns)
        rec["mean_episode_return"] = float(np.mean(self.acc.returns)) if self.acc.returns else None
        rec["wall_clock"] = time.time() - self._t0
        self.acc = Accumulator()
        if self.metrics is not None:
            self.metrics.write(rec)
        self.last_record = rec
        return rec

    def run(self, total_steps: int | None = None) -> Counters:
        total = self.cfg.run.total_steps if total_steps is None else total_steps
        with T.strict_mode(self.cfg.train.strict):
            while self.counters.env_step < total:
                self.env_step()
        if self.episode_log is not None:
            self.episode_log.flush()
        if self.run_dir is not None:
            self.save(self.run_dir / "checkpoints" / f"ckpt_{self.counters.env_step}.npz")
        return self.counters

    # ------------------------------------------------------------ checkpoints

    def save(self, path: str | Path) -> Path:
        arrays: dict[str, np.ndarray] = {}
        for opt in (self.wm_opt, self.agent.actor_opt, self.agent.critic_opt):
            for p in opt.params:
                arrays[f"param/{p.name}"] = p.data
            arrays.update({f"adam/{k}": v for k, v in opt.state().items()})
        arrays.update({f"replay/{k}": v for k, v in self.replay.state().items()})
        fs = self.cfg.env.frame_size
        arrays["collect/frame"] = to_uint8(self.frame) if self.frame is not None else np.zeros((0, fs), np.uint8)
        arrays["collect/hist_z"] = np.stack([h[0] for h in self.history]) if self.history else \
            np.zeros((0, self.model.latent_dim), T.get_dtype())
        arrays["collect/hist_a"] = np.array([h[1] for h in self.history], dtype=np.int64)
        log_offset = None
        if self.episode_log is not None:
            self.episode_log.flush()
            log_offset = self.episode_log.path.stat().st_size
        meta = {
            "format": FORMAT_VERSION,
            "config": self.cfg.to_dict(),
            "config_hash": self.cfg.hash(),
            "counters": asdict(self.counters),
            "rngs": {k: r.get_state() for k, r in self.rngs.items()},
            "env": self.env.get_state(),
            "episode": {"return": self.ep_return, "length": self.ep_length, "active": self.frame is not None},
            "accumulator": asdict(self.acc),
            "normalizer": self.agent.normalizer.state(),
            "episode_log_offset": log_offset,
        }
        return write_container(path, arrays, meta)

    @classmethod
    def from_checkpoint(cls, path: str | Path, cfg: Config | None = None, force: bool = False,
                        run_dir: str | Path | None = None, log_episodes: bool = True) -> "Trainer":
        """Rebuild a trainer from ``path``; refuses a different config unless ``force``."""
        arrays, meta = read_container(path)
        saved = config_from_dict(meta["config"])
        if cfg is not None and cfg.hash() != meta["config_hash"] and not force:
            raise CheckpointMismatch(f"{path}: config hash {cfg.hash()} != checkpoint {meta['config_hash']}")
        cfg = cfg or saved
        step = meta["counters"]["env_step"]
        tr = cls(cfg, run_dir, log_episodes, _resume_step=step, _log_offset=meta.get("episode_log_offset"))
        for opt in (tr.wm_opt, tr.agent.actor_opt, tr.agent.critic_opt):
            for p in opt.params:
                key = f"param/{p.name}"
                if key not in arrays:
                    raise CheckpointMismatch(f"{path}: missing parameter {p.name}")
                p.assign(arrays[key])
            opt.load_state({k[len("adam/"):]: v for k, v in arrays.items() if k.startswith("adam/")})
        tr.replay = ReplayBuffer.from_state({k[len("replay/"):]: v for k, v in arrays.items()
                                             if k.startswith("replay/")})
        tr.counters = Counters(**meta["counters"])
        for k, st in meta["rngs"].items():
            tr.rngs[k].set_state(st)
        tr.env.set_state(meta["env"])
        ep = meta["episode"]
        tr.frame = from_uint8(arrays["collect/frame"]) if ep["active"] else None
        tr.history = [(z, int(a)) for z, a in zip(arrays["collect/hist_z"], arrays["collect/hist_a"])]
        tr.ep_return, tr.ep_length = ep["return"], ep["length"]
        tr.acc = Accumulator(**meta["accumulator"])
        tr.agent.normalizer.load(meta["normalizer"])
        return tr


# ------------------------------------------------------------------ evaluation


@dataclass
class EvalResult:
    mean: float
    scores: list[float]


def evaluate(trainer: Trainer, episodes: int | None = None, greedy: bool | None = None,
             env_name: str | None = None, random_start: bool | None = None) -> EvalResult:
    """Play ``episodes`` full episodes with the current policy on a fresh environment."""
    cfg = trainer.cfg
    if env_name is not None and env_name != cfg.env.name:
        raise ValueError(f"environment {env_name!r} does not match the run's {cfg.env.name!r}")
    episodes = cfg.run.eval_episodes if episodes is None else episodes
    if episodes < 1:
        raise ValueError("episodes must be >= 1")
    greedy = cfg.agent.eval_greedy if greedy is None else greedy
    rs = cfg.env.random_start if random_start is None else random_start
    env = make_env(cfg.env.name, rs, cfg.env.action_repeat, cfg.env.frame_size)
    model, ac = trainer.model, trainer.ac
    scores = []
    for i in range(episodes):
        rng = Rng(cfg.train.seed).spawn(STREAMS["eval"]).spawn(i)
        frame = from_uint8(to_uint8(env.reset(rng.spawn(0))))
        history, total, done = [], 0.0, False
        while not done:
            with T.no_grad():
                z = model.encode(frame[None]).sample(rng, mode=greedy).data[0]
            feat = context_feature(model, history, cfg.env.context_length)
            a = int(ac.act(agent_state(z, feat)[None], rng, greedy)[0])
            frame, r, done = env.step(a)
            frame = from_uint8(to_uint8(frame))
            history = (history + [(z, a)])[-cfg.env.context_length:]
            total += r
        scores.append(total)
    return EvalResult(float(np.mean(scores)), scores)


def replay_episode_log(path: str | Path) -> tuple[int, int]:
    """Re-run logged action sequences; returns ``(frames checked, mismatches)``."""
    from ..envs import read_log

    header, records = read_log(path)
    env = make_env(header["env"], header["random_start"], header["repeat"], header["frame_shape"][0])
    checked = mismatches = episode = 0
    expected = None
    for rec in records:
        if rec.reset:
            expected = to_uint8(env.reset(episode_rng(header["seed"], episode)))
            episode += 1
        checked += 1
        if expected is None or not np.array_equal(expected, rec.frame):
            mismatches += 1
        f, _, done = env.step(rec.action)
        expected = None if done else to_uint8(f)
    return checked, mismatches

