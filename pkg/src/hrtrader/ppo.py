"""PPO for the high-level controller.

The policy network emits ``3 * N`` logits, one group of three per stock in the
order (sell, hold, buy). The joint policy over ``3**N`` directives is the
product of the per-stock categoricals, so joint log-probabilities are sums.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import NonFiniteLoss, ShapeMismatch, ValidationError
from .marketdata import MarketFrame, SignalPanel, forward_returns
from .nn import AdamW, Mlp, clip_grad_norm

N_CHOICES = 3  # sell, hold, buy


@dataclass(frozen=True)
class PpoConfig:
    learning_rate: float = 3e-4
    clip_eps: float = 0.2
    gamma: float = 0.99
    gae_lambda: float = 0.95
    epochs: int = 10
    minibatch_size: int = 256
    entropy_coef: float = 0.01
    max_grad_norm: float = 0.5
    weight_decay: float = 0.01
    hidden: tuple[int, ...] = (64, 64)

    def __post_init__(self):
        if not self.clip_eps > 0:
            raise ValidationError("clip_eps must be > 0")
        if not 0 < self.gamma <= 1:
            raise ValidationError("gamma must lie in (0, 1]")
        if not 0 <= self.gae_lambda <= 1:
            raise ValidationError("gae_lambda must lie in [0, 1]")
        if self.epochs < 1 or self.minibatch_size < 1:
            raise ValidationError("epochs and minibatch_size must be >= 1")


def log_softmax_groups(logits: np.ndarray) -> np.ndarray:
    """Per-stock log-probabilities, shape ``(..., N, 3)``."""
    z = logits.reshape(logits.shape[:-1] + (-1, N_CHOICES))
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def directive_to_index(directive) -> np.ndarray:
    return np.asarray(directive, dtype=np.int64) + 1


def index_to_directive(idx) -> np.ndarray:
    return np.asarray(idx, dtype=np.int64) - 1


def sample_directive(policy: Mlp, obs, rng: np.random.Generator) -> tuple[np.ndarray, float, np.ndarray]:
    """Sample one directive. Returns (directive, joint log-prob, per-stock log-probs)."""
    obs = np.asarray(obs, dtype=np.float64)
    if obs.shape != (policy.input_size,):
        raise ShapeMismatch(f"observation {obs.shape} does not match policy input {policy.input_size}")
    logp = log_softmax_groups(policy.forward(obs))
    cdf = np.cumsum(np.exp(logp), axis=-1)
    u = rng.random(logp.shape[0])
    idx = np.minimum((u[:, None] > cdf).sum(axis=-1), N_CHOICES - 1)
    per_stock = logp[np.arange(logp.shape[0]), idx]
    return index_to_directive(idx), float(per_stock.sum()), per_stock


def greedy_directive(policy: Mlp, obs) -> np.ndarray:
    logits = policy.forward(np.asarray(obs, dtype=np.float64))
    return index_to_directive(logits.reshape(-1, N_CHOICES).argmax(axis=-1))


def joint_log_prob(policy: Mlp, obs: np.ndarray, directives: np.ndarray) -> np.ndarray:
    logp = log_softmax_groups(policy.forward(obs))
    idx = directive_to_index(directives)
    return np.take_along_axis(logp, idx[..., None], axis=-1)[..., 0].sum(axis=-1)


@dataclass
class Trajectory:
    obs: list = field(default_factory=list)
    actions: list = field(default_factory=list)
    logp: list = field(default_factory=list)  # per-stock log-probs at sampling time
    values: list = field(default_factory=list)
    rewards: list = field(default_factory=list)
    dones: list = field(default_factory=list)
    last_value: float = 0.0
    advantages: np.ndarray | None = None
    returns: np.ndarray | None = None

    def add(self, obs, action, logp, value, reward, done) -> None:
        self.obs.append(np.asarray(obs, dtype=np.float64))
        self.actions.append(np.asarray(action, dtype=np.int64))
        self.logp.append(np.asarray(logp, dtype=np.float64))
        self.values.append(float(value))
        self.rewards.append(float(reward))
        self.dones.append(bool(done))

    def __len__(self) -> int:
        return len(self.rewards)

    def arrays(self) -> dict[str, np.ndarray]:
        return {
            "obs": np.stack(self.obs),
            "actions": np.stack(self.actions),
            "logp": np.stack(self.logp),
            "values": np.asarray(self.values),
            "rewards": np.asarray(self.rewards),
            "dones": np.asarray(self.dones, dtype=np.float64),
        }


def gae(
    rewards: np.ndarray,
    values: np.ndarray,
    dones: np.ndarray,
    last_value: float,
    gamma: float,
    lam: float,
) -> tuple[np.ndarray, np.ndarray]:
    """Raw GAE advantages and rewards-to-go ``adv + V``."""
    T = len(rewards)
    adv = np.zeros(T)
    next_value = last_value
    acc = 0.0
    for t in range(T - 1, -1, -1):
        nonterminal = 1.0 - dones[t]
        delta = rewards[t] + gamma * next_value * nonterminal - values[t]
        acc = delta + gamma * lam * nonterminal * acc
        adv[t] = acc
        next_value = values[t]
    return adv, adv + values


def compute_gae(traj: Trajectory, cfg: PpoConfig, normalize: bool = True) -> Trajectory:
    a = traj.arrays()
    adv, ret = gae(a["rewards"], a["values"], a["dones"], traj.last_value, cfg.gamma, cfg.gae_lambda)
    traj.returns = ret
    if normalize and len(adv) > 1:
        adv = (adv - adv.mean()) / (adv.std() + 1e-8)
    traj.advantages = adv
    return traj


def clipped_surrogate(ratio, adv, eps: float) -> np.ndarray:
    """Per-sample ``min(r * A, clip(r, 1 - eps, 1 + eps) * A)``."""
    ratio = np.asarray(ratio, dtype=np.float64)
    adv = np.asarray(adv, dtype=np.float64)
    return np.minimum(ratio * adv, np.clip(ratio, 1.0 - eps, 1.0 + eps) * adv)


def policy_objective_grad(
    policy: Mlp,
    obs: np.ndarray,
    actions: np.ndarray,
    old_logp: np.ndarray,
    adv: np.ndarray,
    clip_eps: float,
    entropy_coef: float,
) -> tuple[float, float, np.ndarray, dict]:
    """Clipped surrogate plus entropy bonus for a minibatch and its parameter gradient.

    Returns ``(surrogate, entropy, d objective / d params, internals)``.
    """
    B = len(adv)
    logits = policy.forward(obs)
    logp_all = log_softmax_groups(logits)  # (B, N, 3)
    probs = np.exp(logp_all)
    idx = directive_to_index(actions)
    new_logp = np.take_along_axis(logp_all, idx[..., None], axis=-1)[..., 0]
    ratio = np.exp(new_logp.sum(-1) - old_logp.sum(-1))
    terms = clipped_surrogate(ratio, adv, clip_eps)
    # gradient flows only where the unclipped branch attains the minimum
    active = ratio * adv <= np.clip(ratio, 1 - clip_eps, 1 + clip_eps) * adv
    coef = np.where(active, ratio * adv, 0.0) / B

    ent = -(probs * logp_all).sum(-1)  # (B, N)
    onehot = np.zeros_like(probs)
    np.put_along_axis(onehot, idx[..., None], 1.0, axis=-1)
    d_logits = coef[:, None, None] * (onehot - probs)
    d_logits += (entropy_coef / B) * (-probs * (logp_all + ent[..., None]))
    grad = policy.backward(obs, d_logits.reshape(B, -1))
    internals = {"ratio": ratio, "adv": adv, "terms": terms, "active": active}
    return float(terms.mean()), float(ent.sum(-1).mean()), grad, internals


@dataclass
class HlcAgent:
    """Policy and value networks plus optimizers and a fixed input scaling."""

    policy: Mlp
    value: Mlp
    pi_opt: AdamW
    v_opt: AdamW
    obs_scale: np.ndarray

    @classmethod
    def create(cls, n_stocks: int, cfg: PpoConfig, seed: int = 0, obs_scale=None) -> "HlcAgent":
        d = 2 * n_stocks
        hidden = list(cfg.hidden)
        acts = ["tanh"] * len(hidden)
        policy = Mlp([d, *hidden, N_CHOICES * n_stocks], acts + ["identity"], seed=seed)
        # small final layer keeps the initial policy near uniform
        W, _ = list(policy.layers())[-1]
        W *= 0.01
        value = Mlp([d, *hidden, 1], acts + ["identity"], seed=seed + 1)
        if obs_scale is None:
            obs_scale = np.ones(d)
        return cls(
            policy,
            value,
            AdamW(policy.n_params, cfg.learning_rate, weight_decay=cfg.weight_decay),
            AdamW(value.n_params, cfg.learning_rate, weight_decay=cfg.weight_decay),
            np.asarray(obs_scale, dtype=np.float64),
        )

    @property
    def n_stocks(self) -> int:
        return self.policy.output_size // N_CHOICES

    def prep(self, obs) -> np.ndarray:
        return np.asarray(obs, dtype=np.float64) * self.obs_scale

    def act(self, obs, rng: np.random.Generator):
        x = self.prep(obs)
        d, lp, per_stock = sample_directive(self.policy, x, rng)
        return d, lp, per_stock, float(self.value.forward(x)[0])

    def greedy(self, obs) -> np.ndarray:
        return greedy_directive(self.policy, self.prep(obs))

    def state_value(self, obs) -> float:
        return float(self.value.forward(self.prep(obs))[0])


def signal_scale(signals: SignalPanel, stop: int | None = None) -> np.ndarray:
    """Per-feature input scaling (1 / dispersion of fr and ss) from the training days."""
    fr = signals.fr[:, :stop]
    ss = signals.ss[:, :stop]
    n = fr.shape[0]
    sf = float(np.std(fr)) or 1.0
    sss = float(np.std(ss)) or 1.0
    return np.concatenate([np.full(n, 1.0 / sf), np.full(n, 1.0 / sss)])


def ppo_update(
    agent: HlcAgent,
    traj: Trajectory,
    cfg: PpoConfig,
    rng: np.random.Generator,
    keep_internals: bool = False,
) -> dict:
    """Run ``cfg.epochs`` passes of shuffled minibatch updates over one rollout."""
    if traj.advantages is None or traj.returns is None:
        raise ValidationError("compute advantages before ppo_update")
    a = traj.arrays()
    obs = a["obs"] * agent.obs_scale
    actions, old_logp = a["actions"], a["logp"]
    adv, ret = traj.advantages, traj.returns
    T = len(adv)
    stats = {"surrogate": [], "value_loss": [], "entropy": [], "clip_fraction": []}
    internals = []
    step = 0
    for _ in range(cfg.epochs):
        order = rng.permutation(T)
        for lo in range(0, T, cfg.minibatch_size):
            mb = order[lo : lo + cfg.minibatch_size]
            surr, ent, g_pi, inner = policy_objective_grad(
                agent.policy, obs[mb], actions[mb], old_logp[mb], adv[mb], cfg.clip_eps, cfg.entropy_coef
            )
            v = agent.value.forward(obs[mb])[:, 0]
            resid = v - ret[mb]
            v_loss = float(np.mean(resid**2))
            if not (np.isfinite(surr) and np.isfinite(v_loss) and np.isfinite(ent)):
                raise NonFiniteLoss("PPO loss is not finite", step=step)
            g_v = agent.value.backward(obs[mb], (2.0 / len(mb)) * resid[:, None])
            agent.pi_opt.step(agent.policy, clip_grad_norm(-g_pi, cfg.max_grad_norm))
            agent.v_opt.step(agent.value, clip_grad_norm(g_v, cfg.max_grad_norm))
            stats["surrogate"].append(surr)
            stats["value_loss"].append(v_loss)
            stats["entropy"].append(ent)
            stats["clip_fraction"].append(float(np.mean(np.abs(inner["ratio"] - 1.0) > cfg.clip_eps)))
            if keep_internals:
                internals.append(inner)
            step += 1
    out = {k: float(np.mean(v)) for k, v in stats.items()}
    out["updates"] = step
    if keep_internals:
        out["internals"] = internals
    return out


NO_TRADES = type("NoTrades", (), {"__repr__": lambda self: "NoTrades", "__bool__": lambda self: False})()


def hlc_accuracy(agent: HlcAgent, frame: MarketFrame, signals: SignalPanel, start: int = 0, stop: int | None = None):
    """Share of non-hold greedy directives whose sign matches the next open-to-open move.

    Returns ``NO_TRADES`` when the policy holds everything; days with a zero
    realized move are skipped.
    """
    signals.check_matches(frame)
    stop = frame.n_days if stop is None else stop
    fwd = forward_returns(frame)
    hits = total = 0
    for t in range(start, stop - 1):
        obs = np.concatenate([signals.fr[:, t], signals.ss[:, t]])
        d = agent.greedy(obs)
        moved = (d != 0) & (fwd[:, t] != 0)
        hits += int(np.sum(np.sign(fwd[moved, t]) == d[moved]))
        total += int(moved.sum())
    return NO_TRADES if total == 0 else hits / total
