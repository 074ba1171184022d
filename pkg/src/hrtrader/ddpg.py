"""DDPG for the low-level controller.

The actor maps an LLC observation to ``N`` tanh outputs in ``[-1, 1]``. Under
the hierarchy those become unsigned sizes ``(a + 1) / 2``; the flat baseline
reads them as signed orders instead. The critic scores ``[obs, action]``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import BufferTooSmall, ShapeMismatch, ValidationError
from .nn import AdamW, Mlp, clip_grad_norm, soft_update


@dataclass(frozen=True)
class DdpgConfig:
    actor_lr: float = 1e-3
    critic_lr: float = 1e-3
    tau: float = 0.005
    gamma: float = 0.99
    batch_size: int = 256
    buffer_capacity: int = 200_000
    noise_sigma: float = 0.3
    noise_final_fraction: float = 0.1
    max_grad_norm: float = 0.5
    weight_decay: float = 0.01
    hidden: tuple[int, ...] = (64, 64)

    def __post_init__(self):
        if not 0 < self.tau <= 1:
            raise ValidationError("tau must lie in (0, 1]")
        if not 0 < self.gamma <= 1:
            raise ValidationError("gamma must lie in (0, 1]")
        if self.batch_size < 1 or self.buffer_capacity < 1:
            raise ValidationError("batch_size and buffer_capacity must be >= 1")
        if self.noise_sigma < 0 or not 0 <= self.noise_final_fraction <= 1:
            raise ValidationError("invalid exploration noise settings")


@dataclass(frozen=True, eq=False)
class Batch:
    obs: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_obs: np.ndarray
    dones: np.ndarray
    indices: np.ndarray


class ReplayBuffer:
    """Fixed-capacity ring of transitions with uniform sampling."""

    def __init__(self, capacity: int, obs_dim: int, act_dim: int):
        self.capacity = int(capacity)
        self.obs_dim = obs_dim
        self.act_dim = act_dim
        self._obs = np.zeros((0, obs_dim))
        self._act = np.zeros((0, act_dim))
        self._rew = np.zeros(0)
        self._next = np.zeros((0, obs_dim))
        self._done = np.zeros(0)
        self.ptr = 0
        self.size = 0

    def _grow(self) -> None:
        # allocate lazily so a 2e5-slot buffer costs nothing until used
        new = min(self.capacity, max(1024, 2 * len(self._rew)))
        for name in ("_obs", "_act", "_rew", "_next", "_done"):
            old = getattr(self, name)
            arr = np.zeros((new,) + old.shape[1:])
            arr[: len(old)] = old
            setattr(self, name, arr)

    def push(self, obs, action, reward: float, next_obs, done: bool) -> None:
        if self.ptr >= len(self._rew):
            self._grow()
        i = self.ptr
        self._obs[i] = obs
        self._act[i] = action
        self._rew[i] = reward
        self._next[i] = next_obs
        self._done[i] = float(done)
        self.ptr = (self.ptr + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def __len__(self) -> int:
        return self.size

    def sample(self, batch_size: int, rng: np.random.Generator) -> Batch:
        if self.size == 0:
            raise BufferTooSmall("buffer is empty")
        idx = rng.integers(0, self.size, size=batch_size)
        return self.take(idx)

    def take(self, idx: np.ndarray) -> Batch:
        return Batch(self._obs[idx], self._act[idx], self._rew[idx], self._next[idx], self._done[idx], idx)

    def state_dict(self) -> dict:
        n = self.size
        return {
            "capacity": self.capacity,
            "ptr": self.ptr,
            "size": n,
            "obs": self._obs[:n].copy(),
            "act": self._act[:n].copy(),
            "rew": self._rew[:n].copy(),
            "next": self._next[:n].copy(),
            "done": self._done[:n].copy(),
        }

    @classmethod
    def from_state(cls, state: dict) -> "ReplayBuffer":
        obs = np.asarray(state["obs"])
        act = np.asarray(state["act"])
        buf = cls(int(state["capacity"]), obs.shape[1], act.shape[1])
        buf._obs, buf._act = obs.copy(), act.copy()
        buf._rew = np.asarray(state["rew"], dtype=np.float64).copy()
        buf._next = np.asarray(state["next"]).copy()
        buf._done = np.asarray(state["done"], dtype=np.float64).copy()
        buf.ptr, buf.size = int(state["ptr"]), int(state["size"])
        return buf


def push(buffer: ReplayBuffer, transition: tuple) -> None:
    buffer.push(*transition)


def act(actor: Mlp, obs, noise_sigma: float, rng: np.random.Generator | None) -> tuple[np.ndarray, np.ndarray]:
    """Noisy actor action. Returns ``(sizes in [0, 1], action in [-1, 1])``."""
    obs = np.asarray(obs, dtype=np.float64)
    if obs.shape != (actor.input_size,):
        raise ShapeMismatch(f"observation {obs.shape} does not match actor input {actor.input_size}")
    a = actor.forward(obs)
    if noise_sigma > 0:
        a = a + noise_sigma * rng.standard_normal(a.shape)
    a = np.clip(a, -1.0, 1.0)
    return (a + 1.0) / 2.0, a


def td_target(critic_target: Mlp, actor_target: Mlp, batch: Batch, gamma: float) -> np.ndarray:
    a_next = actor_target.forward(batch.next_obs)
    q_next = critic_target.forward(np.hstack([batch.next_obs, a_next]))[:, 0]
    return batch.rewards + gamma * (1.0 - batch.dones) * q_next


def actor_objective_grad(actor: Mlp, critic: Mlp, obs: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean ``Q(s, mu(s))`` over ``obs`` and its gradient w.r.t. actor params."""
    B = len(obs)
    a_trace = actor.trace(obs)
    c_trace = critic.trace(np.hstack([obs, a_trace[-1]]))
    q = c_trace[-1][:, 0]
    _, dq_dx = critic.backward_trace(c_trace, np.full((B, 1), 1.0 / B))
    grad, _ = actor.backward_trace(a_trace, dq_dx[:, obs.shape[1] :])
    return float(q.mean()), grad


@dataclass
class DdpgAgent:
    actor: Mlp
    critic: Mlp
    actor_target: Mlp
    critic_target: Mlp
    actor_opt: AdamW
    critic_opt: AdamW
    buffer: ReplayBuffer

    @classmethod
    def create(cls, obs_dim: int, act_dim: int, cfg: DdpgConfig, seed: int = 0) -> "DdpgAgent":
        hidden = list(cfg.hidden)
        acts = ["tanh"] * len(hidden)
        actor = Mlp([obs_dim, *hidden, act_dim], acts + ["tanh"], seed=seed)
        critic = Mlp([obs_dim + act_dim, *hidden, 1], acts + ["identity"], seed=seed + 1)
        return cls(
            actor,
            critic,
            actor.copy(),
            critic.copy(),
            AdamW(actor.n_params, cfg.actor_lr, weight_decay=cfg.weight_decay),
            AdamW(critic.n_params, cfg.critic_lr, weight_decay=cfg.weight_decay),
            ReplayBuffer(cfg.buffer_capacity, obs_dim, act_dim),
        )

    @property
    def obs_dim(self) -> int:
        return self.actor.input_size

    @property
    def act_dim(self) -> int:
        return self.actor.output_size

    def greedy(self, obs) -> np.ndarray:
        return np.clip(self.actor.forward(np.asarray(obs, dtype=np.float64)), -1.0, 1.0)


def critic_loss(critic: Mlp, batch: Batch, y: np.ndarray) -> float:
    q = critic.forward(np.hstack([batch.obs, batch.actions]))[:, 0]
    return float(np.mean((y - q) ** 2))


def ddpg_update(agent: DdpgAgent, cfg: DdpgConfig, rng: np.random.Generator) -> dict:
    """One critic step, one actor step, then soft target updates."""
    if agent.buffer.size < cfg.batch_size:
        raise BufferTooSmall(f"buffer holds {agent.buffer.size} < batch_size {cfg.batch_size}")
    batch = agent.buffer.sample(cfg.batch_size, rng)
    B = cfg.batch_size
    y = td_target(agent.critic_target, agent.actor_target, batch, cfg.gamma)

    c_trace = agent.critic.trace(np.hstack([batch.obs, batch.actions]))
    resid = c_trace[-1][:, 0] - y
    c_loss = float(np.mean(resid**2))
    g_c, _ = agent.critic.backward_trace(c_trace, (2.0 / B) * resid[:, None])
    agent.critic_opt.step(agent.critic, clip_grad_norm(g_c, cfg.max_grad_norm))

    j, g_a = actor_objective_grad(agent.actor, agent.critic, batch.obs)
    agent.actor_opt.step(agent.actor, clip_grad_norm(-g_a, cfg.max_grad_norm))

    soft_update(agent.critic_target, agent.critic, cfg.tau)
    soft_update(agent.actor_target, agent.actor, cfg.tau)
    return {"critic_loss": c_loss, "actor_objective": j, "td_abs_median": float(np.median(np.abs(resid)))}
