"""Multi-agent discrete soft actor-critic with hypergraph-encoded critics.

Every agent owns its actor and critic weights; for speed the per-agent
matrices live in stacked arrays of shape (N, fan_in, fan_out) and are
evaluated with one batched matmul. Slices of different agents never
overlap, so no parameters are shared.

Expectations over the four phases are computed exactly in the TD target
and the actor loss. All losses of one update are evaluated with the
pre-update parameters, then applied in the order critics, actors,
temperature, target networks.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from . import diffcore as dc
from . import simulator as sim
from .datamodel import FlowSpec, RoadNetwork
from .diffcore import Tensor
from .hypergraph import HGConfig, HypergraphEncoder

log = logging.getLogger(__name__)

N_ACTIONS = 4


class ConfigError(ValueError):
    pass


class CheckpointMismatch(ValueError):
    pass


@dataclass
class SACConfig:
    batch_size: int = 20
    episodes: int = 50
    target_entropy: float = -0.5
    lr_actor: float = 1e-4
    lr_critic: float = 1e-3
    lr_alpha: float = 1e-3
    buffer_size: int = 1000
    gamma: float = 0.98
    rho: float = 0.005
    conventional_soft_update: bool = False
    hidden: int = 64
    init_alpha: float = 1.0
    reward_scale: float = 0.01
    count_scale: float = 0.1
    clip_targets: bool = True
    keep_best: bool = True
    episode_length: int = sim.EPISODE_LENGTH
    hg: HGConfig = field(default_factory=HGConfig)

    def __post_init__(self):
        if isinstance(self.hg, dict):
            self.hg = HGConfig(**self.hg)
        for name in ("batch_size", "episodes", "buffer_size", "hidden", "episode_length"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        for name in ("lr_actor", "lr_critic", "lr_alpha", "init_alpha", "reward_scale", "count_scale"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive")
        if not 0.0 <= self.gamma <= 1.0:
            raise ConfigError("gamma must lie in [0, 1]")
        if not 0.0 <= self.rho <= 1.0:
            raise ConfigError("rho must lie in [0, 1]")
        if self.batch_size > self.buffer_size:
            raise ConfigError("batch_size cannot exceed buffer_size")


# ------------------------------------------------------------------ networks


class StackedMLP:
    """One relu MLP per agent, evaluated jointly. Input (..., N, in) -> (..., N, out)."""

    def __init__(self, n_agents: int, sizes: list[int], rng: np.random.Generator, prefix: str):
        self.layers = []
        for k, (a, b) in enumerate(zip(sizes, sizes[1:])):
            w = dc.init_uniform(rng, (n_agents, a, b), a, f"{prefix}.w{k}")
            bias = dc.init_uniform(rng, (n_agents, 1, b), a, f"{prefix}.b{k}")
            self.layers.append((w, bias))

    def params(self) -> dict[str, Tensor]:
        out = {}
        for w, b in self.layers:
            out[w.name] = w
            out[b.name] = b
        return out

    def __call__(self, x) -> Tensor:
        x = dc.as_tensor(x)
        squeeze = x.ndim == 2
        if squeeze:
            x = x.reshape(1, *x.shape)
        h = dc.transpose(x, (1, 0, 2))  # (N, B, in)
        for k, (w, b) in enumerate(self.layers):
            h = h @ w + b
            if k < len(self.layers) - 1:
                h = dc.relu(h)
        h = dc.transpose(h, (1, 0, 2))
        return h.reshape(*h.shape[1:]) if squeeze else h


class Actors:
    def __init__(self, n_agents: int, obs_dim: int, hidden: int, rng):
        self.net = StackedMLP(n_agents, [obs_dim, hidden, hidden, N_ACTIONS], rng, "actor")

    def params(self):
        return self.net.params()

    def __call__(self, obs) -> tuple[Tensor, Tensor]:
        """(probabilities, log-probabilities), both (..., N, 4)."""
        logits = self.net(obs)
        return dc.softmax(logits, axis=-1), dc.log_softmax(logits, axis=-1)


def others_onehot(actions: np.ndarray) -> np.ndarray:
    """(B, N) 0-based actions -> (B, N, 4(N-1)) one-hots of every other agent."""
    actions = np.asarray(actions)
    b, n = actions.shape
    onehot = np.zeros((b, n, N_ACTIONS))
    onehot[np.arange(b)[:, None], np.arange(n)[None, :], actions] = 1.0
    flat = onehot.reshape(b, n * N_ACTIONS)
    cols = np.array(
        [[j * N_ACTIONS + a for j in range(n) if j != i for a in range(N_ACTIONS)] for i in range(n)],
        dtype=np.int64,
    ).reshape(n, -1)
    return flat[:, cols]


class HGCritic:
    """Shared hypergraph encoder feeding twin per-agent Q heads."""

    def __init__(self, n_agents: int, hg: HGConfig, hidden: int, rng, obs_dim: int = sim.OBS_DIM):
        self.n = n_agents
        self.encoder = HypergraphEncoder(n_agents, hg, rng, obs_dim)
        d = hg.d_embed
        width = d + N_ACTIONS * (n_agents - 1) + d
        self.q1 = StackedMLP(n_agents, [width, hidden, N_ACTIONS], rng, "q1")
        self.q2 = StackedMLP(n_agents, [width, hidden, N_ACTIONS], rng, "q2")

    def params(self) -> dict[str, Tensor]:
        out = {f"enc.{k}": v for k, v in self.encoder.params().items()}
        out.update(self.q1.params())
        out.update(self.q2.params())
        return out

    def __call__(self, obs_t, obs_tm1, others: np.ndarray):
        """Q-values (B, N, 4) from both heads plus the reconstruction loss."""
        enc = self.encoder.encode(obs_t, obs_tm1)
        nodes = enc.nodes
        b, n, d = nodes.shape
        graph = dc.mul(enc.graph.reshape(b, 1, d), np.ones((1, n, 1)))
        x = dc.concat([nodes, Tensor(others), graph], axis=-1)
        return self.q1(x), self.q2(x), enc.recon


# -------------------------------------------------------------------- buffer


@dataclass
class Batch:
    obs_prev: np.ndarray  # (B, N, d) observations at t-1
    obs: np.ndarray  # at t
    actions: np.ndarray  # (B, N) 0-based
    rewards: np.ndarray  # (B, N)
    obs_next: np.ndarray  # at t+1
    reward_floor: float | None = None  # lowest reward held by the buffer when sampled


class ReplayBuffer:
    """FIFO ring of joint transitions with uniform sampling without replacement."""

    def __init__(self, capacity: int, n_agents: int, obs_dim: int = sim.OBS_DIM):
        self.capacity = capacity
        self.obs_prev = np.zeros((capacity, n_agents, obs_dim))
        self.obs = np.zeros((capacity, n_agents, obs_dim))
        self.actions = np.zeros((capacity, n_agents), dtype=np.int64)
        self.rewards = np.zeros((capacity, n_agents))
        self.obs_next = np.zeros((capacity, n_agents, obs_dim))
        self.size = 0
        self.head = 0

    def __len__(self) -> int:
        return self.size

    def add(self, obs_prev, obs, actions, rewards, obs_next) -> None:
        k = self.head
        self.obs_prev[k] = obs_prev
        self.obs[k] = obs
        self.actions[k] = actions
        self.rewards[k] = rewards
        self.obs_next[k] = obs_next
        self.head = (k + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def sample(self, batch_size: int, rng: np.random.Generator) -> Batch:
        idx = rng.choice(self.size, size=batch_size, replace=False)
        floor = float(self.rewards[: self.size].min())
        return Batch(self.obs_prev[idx], self.obs[idx], self.actions[idx], self.rewards[idx], self.obs_next[idx], floor)


# -------------------------------------------------------------------- losses


def policy_entropy(probs) -> np.ndarray:
    """Shannon entropy (nats) along the last axis, with 0 log 0 = 0."""
    p = np.asarray(probs, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * np.log(np.where(p > 0, p, 1.0)), 0.0)
    return -terms.sum(axis=-1)


def soft_update(main: list[Tensor], target: list[Tensor], rho: float, conventional: bool = False) -> None:
    """Default mixing is ``target <- rho*target + (1-rho)*main``; ``conventional`` swaps the roles of rho."""
    keep = 1.0 - rho if conventional else rho
    for m, t in zip(main, target):
        if m.shape != t.shape:
            raise dc.ShapeMismatch(f"{m.shape} vs {t.shape}")
        t.data *= keep
        t.data += (1.0 - keep) * m.data


class MASAC:
    """Actors, twin hypergraph critics with targets, and the temperature."""

    def __init__(self, n_agents: int, config: SACConfig | None = None, seed: int = 0):
        self.n = n_agents
        self.config = cfg = config or SACConfig()
        rng = np.random.default_rng(seed)
        self.actors = Actors(n_agents, sim.OBS_DIM, cfg.hidden, rng)
        self.critic = HGCritic(n_agents, cfg.hg, cfg.hidden, rng)
        self.critic_target = HGCritic(n_agents, cfg.hg, cfg.hidden, rng)
        dc.copy_into(self.critic_target.params().values(), self.critic.params().values())
        self.log_alpha = dc.parameter(np.log(cfg.init_alpha), "log_alpha")
        self.opt_actor = dc.Adam(list(self.actors.params().values()), cfg.lr_actor)
        self.opt_critic = dc.Adam(list(self.critic.params().values()), cfg.lr_critic)
        self.opt_alpha = dc.Adam([self.log_alpha], cfg.lr_alpha)
        self.updates = 0

    @property
    def alpha(self) -> float:
        return float(np.exp(self.log_alpha.data))

    def prep(self, obs) -> np.ndarray:
        """Scale lane counts; the phase one-hot passes through."""
        obs = np.array(obs, dtype=float)
        obs[..., 4:] *= self.config.count_scale
        return obs

    # acting

    def policy(self, obs) -> np.ndarray:
        with dc.no_grad():
            probs, _ = self.actors(self.prep(obs))
        return probs.data

    def select_actions(self, obs, mode: str = "sample", rng: np.random.Generator | None = None) -> np.ndarray:
        """1-based phase ids for every agent."""
        probs = self.policy(obs)
        if mode == "greedy":
            return probs.argmax(axis=-1) + 1
        if mode != "sample":
            raise ValueError(f"unknown mode {mode!r}")
        rng = rng if rng is not None else np.random.default_rng()
        cdf = np.cumsum(probs, axis=-1)
        u = rng.random(probs.shape[:-1] + (1,))
        return np.minimum((u > cdf).sum(axis=-1), N_ACTIONS - 1) + 1

    # losses

    def td_target(self, batch: Batch) -> np.ndarray:
        cfg = self.config
        with dc.no_grad():
            obs_t, obs_next = self.prep(batch.obs), self.prep(batch.obs_next)
            probs, logp = self.actors(obs_next)
            next_greedy = probs.data.argmax(axis=-1)
            q1, q2, _ = self.critic_target(obs_next, obs_t, others_onehot(next_greedy))
            q_min = np.minimum(q1.data, q2.data)
            v = (probs.data * (q_min - self.alpha * logp.data)).sum(axis=-1)
        y = batch.rewards + cfg.gamma * v
        if cfg.clip_targets:
            y = np.clip(y, *self.return_bounds(batch))
        return y

    def return_bounds(self, batch: Batch) -> tuple[float, float]:
        """Range every soft return can occupy: rewards are never positive and
        the per-step entropy bonus is at most alpha * ln 4."""
        g = self.config.gamma
        horizon = 1.0 / (1.0 - g) if g < 1 else float(self.config.episode_length // sim.DELTA_T)
        floor = batch.reward_floor if batch.reward_floor is not None else float(batch.rewards.min())
        floor = min(floor, 0.0)
        return floor * horizon, g * self.alpha * np.log(N_ACTIONS) * horizon

    def critic_loss(self, batch: Batch, y: np.ndarray, beta: float | None = None):
        """(total, td term, recon term, q1, q2) for the online critics."""
        beta = self.config.hg.beta if beta is None else beta
        obs_prev, obs_t = self.prep(batch.obs_prev), self.prep(batch.obs)
        q1, q2, recon = self.critic(obs_t, obs_prev, others_onehot(batch.actions))
        rows = np.arange(len(batch.actions))[:, None]
        cols = np.arange(self.n)[None, :]
        q1_a = dc.take(q1, (rows, cols, batch.actions))
        q2_a = dc.take(q2, (rows, cols, batch.actions))
        td = dc.mse(q1_a, y) + dc.mse(q2_a, y)
        total = dc.scale(td, 1.0 - beta) + dc.scale(recon, beta)
        return total, td, recon, q1, q2

    def actor_loss(self, batch: Batch, q_min: np.ndarray):
        """Summed per-agent losses, batch mean of sum_a pi (alpha log pi - Q)."""
        probs, logp = self.actors(self.prep(batch.obs))
        inner = dc.sub(dc.scale(logp, self.alpha), q_min)
        per_agent = dc.mean(dc.tsum(dc.mul(probs, inner), axis=-1), axis=0)
        return dc.tsum(per_agent), probs

    def alpha_loss(self, mean_entropy: float) -> Tensor:
        alpha = dc.exp(self.log_alpha)
        return dc.scale(alpha, mean_entropy - self.config.target_entropy)

    # update

    def update(self, batch: Batch) -> dict[str, float]:
        cfg = self.config
        y = self.td_target(batch)

        self.opt_critic.zero_grad()
        total_c, td, recon, q1, q2 = self.critic_loss(batch, y)
        dc.backward(total_c)

        self.opt_actor.zero_grad()
        q_min = np.minimum(q1.data, q2.data)
        total_a, probs = self.actor_loss(batch, q_min)
        dc.backward(total_a)

        self.opt_alpha.zero_grad()
        entropy = float(policy_entropy(probs.data).mean())
        loss_alpha = self.alpha_loss(entropy)
        dc.backward(loss_alpha)

        self.opt_critic.step()
        self.opt_actor.step()
        self.opt_alpha.step()
        soft_update(
            list(self.critic.params().values()),
            list(self.critic_target.params().values()),
            cfg.rho,
            cfg.conventional_soft_update,
        )
        self.updates += 1
        return {
            "critic_loss": float(total_c.data),
            "actor_loss": float(total_a.data) / self.n,
            "recon_loss": float(recon.data),
            "alpha": self.alpha,
            "entropy": entropy,
        }

    # checkpoints

    def named_tensors(self) -> dict[str, Tensor]:
        out = {f"actor/{k}": v for k, v in self.actors.params().items()}
        out.update({f"critic/{k}": v for k, v in self.critic.params().items()})
        out.update({f"critic_target/{k}": v for k, v in self.critic_target.params().items()})
        out["log_alpha"] = self.log_alpha
        return out

    def save(self, path) -> None:
        arrays = {k: v.data for k, v in self.named_tensors().items()}
        meta = {"n_agents": self.n, "config": asdict(self.config)}
        arrays["meta"] = np.array(json.dumps(meta, sort_keys=True))
        dc.save_tensors(path, arrays)

    @classmethod
    def load(cls, path, n_agents: int | None = None) -> MASAC:
        arrays = dc.load_tensors(path)
        try:
            meta = json.loads(str(arrays.pop("meta")))
        except KeyError as exc:
            raise CheckpointMismatch(f"{path} is not an agent checkpoint") from exc
        if n_agents is not None and meta["n_agents"] != n_agents:
            raise CheckpointMismatch(f"checkpoint has {meta['n_agents']} agents, scenario has {n_agents}")
        agent = cls(meta["n_agents"], SACConfig(**meta["config"]))
        tensors = agent.named_tensors()
        if set(tensors) != set(arrays):
            raise CheckpointMismatch("checkpoint tensor names differ from the model")
        for k, t in tensors.items():
            if t.shape != arrays[k].shape:
                raise CheckpointMismatch(f"{k}: shape {arrays[k].shape} != {t.shape}")
            t.data[...] = arrays[k]
        return agent

    def controller(self, mode: str = "greedy", rng=None) -> Callable:
        def act(state, obs):
            return self.select_actions(obs, mode, rng)

        act.name = "hgdrl"
        return act


# ----------------------------------------------------------------- training


@dataclass
class EpisodeLog:
    episode: int
    att: float
    throughput: int
    critic_loss: float
    actor_loss: float
    recon_loss: float
    alpha: float
    mean_entropy: float


TRAIN_LOG_COLUMNS = (
    "episode", "ATT", "throughput", "critic_loss", "actor_loss", "recon_loss", "alpha", "mean_entropy",
)


@dataclass
class TrainResult:
    agent: MASAC
    history: list[EpisodeLog]
    alpha_trace: list[float]
    updates: int
    validation: list[float] = field(default_factory=list)  # greedy ATT after each learning episode
    best_episode: int | None = None


def train(
    network: RoadNetwork,
    flow: FlowSpec,
    config: SACConfig | None = None,
    seed: int = 0,
    on_episode: Callable[[EpisodeLog], None] | None = None,
    on_update: Callable[[MASAC, dict], None] | None = None,
) -> TrainResult:
    """Collect experience with sampled actions; once the buffer holds
    ``buffer_size`` transitions, do one update per environment step.

    With ``keep_best`` the agent is scored after every episode that learned
    something by one greedy rollout on a fixed validation seed, and the
    best-scoring parameters are restored before returning."""
    cfg = config or SACConfig()
    n = network.n_agents
    if n < 1:
        raise ConfigError("network has no signalized intersections")
    agent = MASAC(n, cfg, seed)
    buffer = ReplayBuffer(cfg.buffer_size, n)
    rng = np.random.default_rng([seed, 1])
    history: list[EpisodeLog] = []
    alpha_trace = [agent.alpha]
    val_seed = int(np.random.default_rng([seed, 2]).integers(2**31))
    validation: list[float] = []
    best: tuple[float, int, dict[str, np.ndarray]] | None = None
    for ep in range(cfg.episodes):
        state, obs = sim.reset(network, flow, seed=int(rng.integers(2**31)), episode_length=cfg.episode_length)
        obs_prev = obs
        stats: dict[str, list[float]] = {k: [] for k in ("critic_loss", "actor_loss", "recon_loss", "entropy")}
        done = state.done
        while not done:
            actions = agent.select_actions(obs, "sample", rng)
            state, obs_next, rewards, done = sim.step(state, actions)
            buffer.add(obs_prev, obs, actions - 1, rewards * cfg.reward_scale, obs_next)
            obs_prev, obs = obs, obs_next
            if len(buffer) >= cfg.buffer_size:
                info = agent.update(buffer.sample(cfg.batch_size, rng))
                alpha_trace.append(info["alpha"])
                for k in stats:
                    stats[k].append(info[k])
                if on_update is not None:
                    on_update(agent, info)
        rec = sim.metrics(state)

        def avg(k):
            return float(np.mean(stats[k])) if stats[k] else float("nan")

        entry = EpisodeLog(
            ep + 1, rec.att, rec.throughput, avg("critic_loss"), avg("actor_loss"),
            avg("recon_loss"), agent.alpha, avg("entropy"),
        )
        history.append(entry)
        log.info("episode %d ATT=%.2f throughput=%d alpha=%.4g", entry.episode, entry.att, entry.throughput, entry.alpha)
        if on_episode is not None:
            on_episode(entry)
        if cfg.keep_best and stats["critic_loss"]:
            score = evaluate(agent, network, flow, val_seed, cfg.episode_length).att
            validation.append(score)
            if best is None or score < best[0]:
                best = (score, ep + 1, {k: t.data.copy() for k, t in agent.named_tensors().items()})
    best_episode = None
    if best is not None:
        for k, t in agent.named_tensors().items():
            t.data[...] = best[2][k]
        best_episode = best[1]
        log.info("restored parameters from episode %d (validation ATT %.2f)", best[1], best[0])
    return TrainResult(agent, history, alpha_trace, agent.updates, validation, best_episode)


def evaluate(
    controller,
    network: RoadNetwork,
    flow: FlowSpec,
    seed: int = 0,
    episode_length: int = sim.EPISODE_LENGTH,
) -> sim.MetricsRecord:
    """Greedy rollout without learning. ``controller`` is a MASAC agent or any
    ``(state, observations) -> phases`` callable."""
    if isinstance(controller, MASAC):
        if controller.n != network.n_agents:
            raise CheckpointMismatch(f"agent has {controller.n} intersections, network {network.n_agents}")
        controller = controller.controller("greedy")
    return sim.run_episode(network, flow, controller, seed, episode_length)


def write_train_log(history: list[EpisodeLog], path) -> None:
    import csv

    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(TRAIN_LOG_COLUMNS)
        for e in history:
            w.writerow(
                (e.episode, repr(e.att), e.throughput, repr(e.critic_loss), repr(e.actor_loss),
                 repr(e.recon_loss), repr(e.alpha), repr(e.mean_entropy))
            )
