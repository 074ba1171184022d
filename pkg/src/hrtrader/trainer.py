"""Phased alternating training of the two controllers, plus flat baselines.

Phase 1 trains the HLC on alignment rewards only. Phase 2 freezes the HLC and
trains the LLC on its greedy directives. Phase 3 alternates blocks of HLC and
LLC episodes whose lengths grow geometrically, with the HLC reward mixing in
the LLC reward as ``alpha`` decays.

Training advances one episode at a time and every piece of mutable state
(networks, optimizers, replay buffer, RNG streams, schedule position) goes into
the checkpoint, so a resumed run continues bit-for-bit.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import ddpg as ddpg_mod
from .checkpoint import read_checkpoint, write_checkpoint
from .ddpg import DdpgAgent, DdpgConfig, ReplayBuffer
from .env import EnvConfig, TradingEnv, alpha_schedule, hlc_reward
from .errors import ValidationError
from .marketdata import MarketFrame, SignalPanel
from .nn import AdamW, Mlp
from .ppo import HlcAgent, PpoConfig, Trajectory, compute_gae, ppo_update, signal_scale

log = logging.getLogger(__name__)

PHASES = ("phase1", "phase2", "phase3", "done")


@dataclass(frozen=True)
class TrainSchedule:
    e_hlc: int = 60
    e_llc: int = 30
    phase3_block: int = 2
    switch_growth: float = 2.0
    max_phase3_episodes: int = 40
    convergence_window: int = 20
    convergence_tol: float = 1e-3
    total_timesteps: int = 500_000
    alpha0: float = 1.0
    lam: float = 0.001
    seed: int = 0
    checkpoint_every: int = 0

    def __post_init__(self):
        if min(self.e_hlc, self.e_llc, self.phase3_block, self.convergence_window) < 1:
            raise ValidationError("episode counts must be >= 1")
        if self.max_phase3_episodes < 0:
            raise ValidationError("max_phase3_episodes must be >= 0")
        if self.switch_growth < 1:
            raise ValidationError("switch_growth must be >= 1")
        if not self.total_timesteps > 0:
            raise ValidationError("total_timesteps must be > 0")


def block_length(schedule: TrainSchedule, block_index: int) -> int:
    """Episodes in Phase-3 block ``k``; blocks alternate HLC, LLC, HLC, ..."""
    return max(1, int(round(schedule.phase3_block * schedule.switch_growth ** (block_index // 2))))


@dataclass
class Progress:
    phase: str = "phase1"
    phase_episode: int = 0
    global_episode: int = 0
    total_steps: int = 0
    alpha_clock: int = 0
    llc_episodes: int = 0
    block_index: int = 0
    block_done: int = 0
    phase3_returns: list = field(default_factory=list)


def data_fingerprint(frame: MarketFrame, signals: SignalPanel) -> str:
    h = hashlib.sha256()
    h.update(json.dumps(list(frame.tickers)).encode())
    for a in (frame.open, frame.high, frame.low, frame.close, frame.volume, signals.fr, signals.ss):
        h.update(np.ascontiguousarray(a).tobytes())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# agent (de)serialization


def _pack_net(arrays: dict, key: str, net: Mlp) -> None:
    arrays[key] = np.frombuffer(net.to_bytes(), dtype=np.uint8)


def _unpack_net(arrays: dict, key: str) -> Mlp:
    return Mlp.from_bytes(arrays[key].tobytes())


def _pack_opt(arrays: dict, meta: dict, key: str, opt: AdamW) -> None:
    st = opt.state_dict()
    arrays[f"{key}.m"] = st.pop("m")
    arrays[f"{key}.v"] = st.pop("v")
    meta[key] = st


def _unpack_opt(arrays: dict, meta: dict, key: str) -> AdamW:
    return AdamW.from_state({**meta[key], "m": arrays[f"{key}.m"], "v": arrays[f"{key}.v"]})


def pack_hlc(agent: HlcAgent, arrays: dict, meta: dict, prefix: str = "hlc") -> None:
    _pack_net(arrays, f"{prefix}.policy", agent.policy)
    _pack_net(arrays, f"{prefix}.value", agent.value)
    _pack_opt(arrays, meta, f"{prefix}.pi_opt", agent.pi_opt)
    _pack_opt(arrays, meta, f"{prefix}.v_opt", agent.v_opt)
    arrays[f"{prefix}.obs_scale"] = agent.obs_scale


def unpack_hlc(arrays: dict, meta: dict, prefix: str = "hlc") -> HlcAgent:
    return HlcAgent(
        _unpack_net(arrays, f"{prefix}.policy"),
        _unpack_net(arrays, f"{prefix}.value"),
        _unpack_opt(arrays, meta, f"{prefix}.pi_opt"),
        _unpack_opt(arrays, meta, f"{prefix}.v_opt"),
        arrays[f"{prefix}.obs_scale"].copy(),
    )


def pack_llc(agent: DdpgAgent, arrays: dict, meta: dict, prefix: str = "llc", with_buffer: bool = True) -> None:
    for name in ("actor", "critic", "actor_target", "critic_target"):
        _pack_net(arrays, f"{prefix}.{name}", getattr(agent, name))
    _pack_opt(arrays, meta, f"{prefix}.actor_opt", agent.actor_opt)
    _pack_opt(arrays, meta, f"{prefix}.critic_opt", agent.critic_opt)
    buf = agent.buffer.state_dict() if with_buffer else ReplayBuffer(agent.buffer.capacity, agent.obs_dim, agent.act_dim).state_dict()
    meta[f"{prefix}.buffer"] = {k: buf[k] for k in ("capacity", "ptr", "size")}
    for k in ("obs", "act", "rew", "next", "done"):
        arrays[f"{prefix}.buffer.{k}"] = buf[k]


def unpack_llc(arrays: dict, meta: dict, prefix: str = "llc") -> DdpgAgent:
    buf_state = dict(meta[f"{prefix}.buffer"])
    for k in ("obs", "act", "rew", "next", "done"):
        buf_state[k] = arrays[f"{prefix}.buffer.{k}"]
    return DdpgAgent(
        _unpack_net(arrays, f"{prefix}.actor"),
        _unpack_net(arrays, f"{prefix}.critic"),
        _unpack_net(arrays, f"{prefix}.actor_target"),
        _unpack_net(arrays, f"{prefix}.critic_target"),
        _unpack_opt(arrays, meta, f"{prefix}.actor_opt"),
        _unpack_opt(arrays, meta, f"{prefix}.critic_opt"),
        ReplayBuffer.from_state(buf_state),
    )


def _from_dict(cls, d: dict):
    names = {f.name for f in fields(cls)}
    kw = {k: (tuple(v) if isinstance(v, list) and k == "hidden" else v) for k, v in d.items() if k in names}
    return cls(**kw)


# ---------------------------------------------------------------------------


class HrtTrainer:
    """Owns both controllers and the training environment for one run."""

    def __init__(
        self,
        frame: MarketFrame,
        signals: SignalPanel,
        env_cfg: EnvConfig = EnvConfig(),
        ppo_cfg: PpoConfig = PpoConfig(),
        ddpg_cfg: DdpgConfig = DdpgConfig(),
        schedule: TrainSchedule = TrainSchedule(),
        start: int = 0,
        stop: int | None = None,
        log_dir: str | Path | None = None,
        _init: bool = True,
    ):
        self.frame = frame
        self.signals = signals
        self.env_cfg = env_cfg
        self.ppo_cfg = ppo_cfg
        self.ddpg_cfg = ddpg_cfg
        self.schedule = schedule
        self.env = TradingEnv(frame, signals, env_cfg, start, stop)
        self.log_dir = Path(log_dir) if log_dir is not None else None
        self.history: list[dict] = []
        self.progress = Progress()
        if not _init:
            return
        n = frame.n_tickers
        ss = np.random.SeedSequence(schedule.seed)
        net_seed = int(ss.generate_state(1)[0])
        streams = ss.spawn(4)
        self.hlc = HlcAgent.create(n, ppo_cfg, seed=net_seed, obs_scale=signal_scale(signals, self.env.stop))
        self.llc = DdpgAgent.create(3 * n + 1, n, ddpg_cfg, seed=net_seed + 2)
        self.rngs = {
            name: np.random.default_rng(s) for name, s in zip(("hlc_sample", "ppo_shuffle", "llc_noise", "replay"), streams)
        }

    # -- schedule ----------------------------------------------------------

    @property
    def done(self) -> bool:
        return self.progress.phase == "done"

    def _noise_sigma(self) -> float:
        cfg = self.ddpg_cfg
        horizon = self.schedule.e_llc + math.ceil(self.schedule.max_phase3_episodes / 2)
        frac = max(cfg.noise_final_fraction, 1.0 - (1.0 - cfg.noise_final_fraction) * self.progress.llc_episodes / horizon)
        return cfg.noise_sigma * frac

    def current_alpha(self) -> float:
        if self.progress.phase == "phase1":
            return 1.0
        return alpha_schedule(self.progress.alpha_clock, self.schedule.alpha0, self.schedule.lam)

    def run(self, max_episodes: int | None = None, checkpoint_dir: str | Path | None = None) -> "HrtTrainer":
        ran = 0
        while not self.done and (max_episodes is None or ran < max_episodes):
            phase_before = self.progress.phase
            self.run_episode()
            ran += 1
            if checkpoint_dir is not None:
                every = self.schedule.checkpoint_every
                if self.progress.phase != phase_before or (every and self.progress.global_episode % every == 0):
                    self.save_checkpoint(Path(checkpoint_dir) / f"ckpt_{self.progress.global_episode:06d}.hrt")
                    self.save_checkpoint(Path(checkpoint_dir) / "last.hrt")
        return self

    def run_episode(self) -> dict:
        p = self.progress
        if p.total_steps >= self.schedule.total_timesteps:
            p.phase = "done"
        if self.done:
            raise RuntimeError("training already finished")
        if p.phase == "phase1":
            rec = self._hlc_episode(alpha=1.0, llc_active=False)
        elif p.phase == "phase2":
            rec = self._llc_episode()
        else:
            if p.block_index % 2 == 0:
                rec = self._hlc_episode(alpha=self.current_alpha(), llc_active=True)
            else:
                rec = self._llc_episode()
            rec["block_index"] = p.block_index
        self._advance(rec)
        return rec

    def _advance(self, rec: dict) -> None:
        p, s = self.progress, self.schedule
        p.global_episode += 1
        p.phase_episode += 1
        p.total_steps += rec["steps"]
        if p.phase in ("phase2", "phase3"):
            p.alpha_clock += 1
        if p.phase == "phase1" and p.phase_episode >= s.e_hlc:
            p.phase, p.phase_episode = "phase2", 0
        elif p.phase == "phase2" and p.phase_episode >= s.e_llc:
            p.phase, p.phase_episode = "phase3", 0
        elif p.phase == "phase3":
            p.phase3_returns.append(rec["sum_r_l"])
            p.block_done += 1
            if p.block_done >= block_length(s, p.block_index):
                p.block_index += 1
                p.block_done = 0
            if self._converged() or p.phase_episode >= s.max_phase3_episodes:
                p.phase = "done"
        if p.phase == "phase3" and s.max_phase3_episodes == 0:
            p.phase = "done"
        if p.total_steps >= s.total_timesteps:
            p.phase = "done"
        self._log(rec)

    def _converged(self) -> bool:
        w = self.schedule.convergence_window
        r = self.progress.phase3_returns
        if len(r) < 2 * w:
            return False
        prev = float(np.mean(r[-2 * w : -w]))
        cur = float(np.mean(r[-w:]))
        return abs(cur - prev) <= self.schedule.convergence_tol * max(abs(prev), 1e-12)

    def _log(self, rec: dict) -> None:
        self.history.append(rec)
        if self.log_dir is not None:
            self.log_dir.mkdir(parents=True, exist_ok=True)
            with (self.log_dir / f"{rec['phase']}.jsonl").open("a", encoding="utf-8") as fh:
                fh.write(json.dumps(rec) + "\n")
        log.debug("%s ep %d: %s", rec["phase"], rec["episode"], {k: rec[k] for k in ("alpha", "sum_r_l")})

    # -- episodes ----------------------------------------------------------

    def _base_record(self, controller: str) -> dict:
        p = self.progress
        return {"phase": p.phase, "episode": p.global_episode, "controller": controller, "alpha": self.current_alpha()}

    def _hlc_episode(self, alpha: float, llc_active: bool) -> dict:
        rec = self._base_record("hlc")
        env, hlc = self.env, self.hlc
        rng = self.rngs["hlc_sample"]
        zeros = np.zeros(env.n_stocks)
        _, obs = env.reset()
        traj = Trajectory()
        align_sums, rls, rhs = [], [], []
        while True:
            d, _, per_stock, v = hlc.act(obs, rng)
            sizes = (self.llc.greedy(env.llc_observation(d)) + 1.0) / 2.0 if llc_active else zeros
            res = env.step(d, sizes)
            r_h = hlc_reward(res.align_sum, res.r_l, alpha)
            traj.add(obs, d, per_stock, v, r_h, res.done)
            align_sums.append(res.align_sum)
            rls.append(res.r_l)
            rhs.append(r_h)
            if res.done:
                break
            obs = env.hlc_observation()
        traj.last_value = 0.0
        compute_gae(traj, self.ppo_cfg)
        stats = ppo_update(hlc, traj, self.ppo_cfg, self.rngs["ppo_shuffle"])
        rec.update(
            steps=len(traj),
            mean_alignment=float(np.mean(align_sums)) / env.n_stocks,
            sum_r_l=float(np.sum(rls)),
            sum_r_h=float(np.sum(rhs)),
            final_value=env.state.value,
            **stats,
        )
        if llc_active:
            rec.update(align_sum=align_sums, r_l=rls, r_h=rhs)
        return rec

    def _llc_episode(self) -> dict:
        rec = self._base_record("llc")
        env, hlc, llc, cfg = self.env, self.hlc, self.llc, self.ddpg_cfg
        sigma = self._noise_sigma()
        noise_rng, replay_rng = self.rngs["llc_noise"], self.rngs["replay"]
        _, obs_h = env.reset()
        d = hlc.greedy(obs_h)
        s = env.llc_observation(d)
        rls, c_losses, objs = [], [], []
        steps = 0
        while True:
            sizes, a = ddpg_mod.act(llc.actor, s, sigma, noise_rng)
            res = env.step(d, sizes)
            d_next = hlc.greedy(env.hlc_observation())
            s_next = env.llc_observation(d_next)
            llc.buffer.push(s, a, res.r_l, s_next, res.done)
            if llc.buffer.size >= cfg.batch_size:
                st = ddpg_mod.ddpg_update(llc, cfg, replay_rng)
                c_losses.append(st["critic_loss"])
                objs.append(st["actor_objective"])
            rls.append(res.r_l)
            steps += 1
            if res.done:
                break
            d, s = d_next, s_next
        self.progress.llc_episodes += 1
        rec.update(
            steps=steps,
            sum_r_l=float(np.sum(rls)),
            final_value=env.state.value,
            noise_sigma=sigma,
            critic_loss=float(np.mean(c_losses)) if c_losses else None,
            actor_objective=float(np.mean(objs)) if objs else None,
            buffer_fill=llc.buffer.size / llc.buffer.capacity,
        )
        return rec

    # -- checkpoints -------------------------------------------------------

    def state(self) -> tuple[dict, dict]:
        arrays: dict = {}
        meta: dict = {
            "kind": "hrt",
            "env_cfg": asdict(self.env_cfg),
            "ppo_cfg": asdict(self.ppo_cfg),
            "ddpg_cfg": asdict(self.ddpg_cfg),
            "schedule": asdict(self.schedule),
            "window": [self.env.start, self.env.stop],
            "progress": asdict(self.progress),
            "rngs": {k: g.bit_generator.state for k, g in self.rngs.items()},
            "data": data_fingerprint(self.frame, self.signals),
            "tickers": list(self.frame.tickers),
        }
        pack_hlc(self.hlc, arrays, meta)
        pack_llc(self.llc, arrays, meta)
        return arrays, meta

    def save_checkpoint(self, path: str | Path) -> None:
        arrays, meta = self.state()
        write_checkpoint(path, arrays, meta)

    @classmethod
    def load_checkpoint(
        cls, path: str | Path, frame: MarketFrame, signals: SignalPanel, log_dir: str | Path | None = None
    ) -> "HrtTrainer":
        arrays, meta = read_checkpoint(path)
        if meta.get("kind") != "hrt":
            raise ValidationError(f"{path} is not an HRT training checkpoint")
        if meta["data"] != data_fingerprint(frame, signals):
            raise ValidationError("checkpoint was trained on different market data")
        start, stop = meta["window"]
        tr = cls(
            frame,
            signals,
            _from_dict(EnvConfig, meta["env_cfg"]),
            _from_dict(PpoConfig, meta["ppo_cfg"]),
            _from_dict(DdpgConfig, meta["ddpg_cfg"]),
            _from_dict(TrainSchedule, meta["schedule"]),
            start,
            stop,
            log_dir,
            _init=False,
        )
        tr.progress = Progress(**meta["progress"])
        tr.hlc = unpack_hlc(arrays, meta)
        tr.llc = unpack_llc(arrays, meta)
        tr.rngs = {}
        for k, st in meta["rngs"].items():
            g = np.random.default_rng()
            g.bit_generator.state = st
            tr.rngs[k] = g
        return tr


# ---------------------------------------------------------------------------
# flat baselines


def flat_observation(env: TradingEnv, obs_scale: np.ndarray) -> np.ndarray:
    """``[p / p_ref, h / h_max, b / capital, scaled fr, scaled ss]`` for the flat DDPG agent."""
    st = env.state
    return np.concatenate(
        [
            st.prices / env.ref_prices,
            st.holdings / float(env.cfg.h_max),
            [st.cash / env.cfg.initial_capital],
            env.hlc_observation() * obs_scale,
        ]
    )


def signed_to_orders(a: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Read a signed action in ``[-1, 1]`` as (direction, size)."""
    return np.sign(a).astype(np.int64), np.abs(a)


@dataclass
class FlatDdpg:
    agent: DdpgAgent
    obs_scale: np.ndarray


def train_ddpg_only(
    frame: MarketFrame,
    signals: SignalPanel,
    env_cfg: EnvConfig,
    ddpg_cfg: DdpgConfig,
    episodes: int,
    seed: int = 0,
    start: int = 0,
    stop: int | None = None,
    total_timesteps: int | None = None,
) -> tuple[FlatDdpg, list[dict]]:
    """Single DDPG agent choosing signed orders from prices, holdings, cash and signals."""
    env = TradingEnv(frame, signals, env_cfg, start, stop)
    n = env.n_stocks
    ss = np.random.SeedSequence(seed)
    net_seed = int(ss.generate_state(1)[0])
    noise_rng, replay_rng = (np.random.default_rng(s) for s in ss.spawn(2))
    flat = FlatDdpg(DdpgAgent.create(4 * n + 1, n, ddpg_cfg, seed=net_seed + 2), signal_scale(signals, env.stop))
    agent = flat.agent
    history, steps_total = [], 0
    for ep in range(episodes):
        if total_timesteps is not None and steps_total >= total_timesteps:
            break
        frac = max(ddpg_cfg.noise_final_fraction, 1.0 - (1.0 - ddpg_cfg.noise_final_fraction) * ep / max(1, episodes))
        sigma = ddpg_cfg.noise_sigma * frac
        env.reset()
        s = flat_observation(env, flat.obs_scale)
        rls = []
        while True:
            a = np.clip(agent.actor.forward(s) + sigma * noise_rng.standard_normal(n), -1.0, 1.0)
            res = env.step(*signed_to_orders(a))
            s_next = flat_observation(env, flat.obs_scale)
            agent.buffer.push(s, a, res.r_l, s_next, res.done)
            if agent.buffer.size >= ddpg_cfg.batch_size:
                ddpg_mod.ddpg_update(agent, ddpg_cfg, replay_rng)
            rls.append(res.r_l)
            if res.done:
                break
            s = s_next
        steps_total += len(rls)
        history.append({"episode": ep, "sum_r_l": float(np.sum(rls)), "final_value": env.state.value, "noise_sigma": sigma})
    return flat, history


def train_ppo_only(
    frame: MarketFrame,
    signals: SignalPanel,
    env_cfg: EnvConfig,
    ppo_cfg: PpoConfig,
    episodes: int,
    seed: int = 0,
    start: int = 0,
    stop: int | None = None,
    total_timesteps: int | None = None,
) -> tuple[HlcAgent, list[dict]]:
    """PPO directives executed at full size, trained on portfolio reward alone."""
    env = TradingEnv(frame, signals, env_cfg, start, stop)
    n = env.n_stocks
    ss = np.random.SeedSequence(seed)
    net_seed = int(ss.generate_state(1)[0])
    sample_rng, shuffle_rng = (np.random.default_rng(s) for s in ss.spawn(2))
    agent = HlcAgent.create(n, ppo_cfg, seed=net_seed, obs_scale=signal_scale(signals, env.stop))
    ones = np.ones(n)
    history, steps_total = [], 0
    for ep in range(episodes):
        if total_timesteps is not None and steps_total >= total_timesteps:
            break
        _, obs = env.reset()
        traj = Trajectory()
        while True:
            d, _, per_stock, v = agent.act(obs, sample_rng)
            res = env.step(d, ones)
            traj.add(obs, d, per_stock, v, res.r_l, res.done)
            if res.done:
                break
            obs = env.hlc_observation()
        compute_gae(traj, ppo_cfg)
        stats = ppo_update(agent, traj, ppo_cfg, shuffle_rng)
        steps_total += len(traj)
        history.append({"episode": ep, "sum_r_l": float(np.sum(traj.rewards)), "final_value": env.state.value, **stats})
    return agent, history


def save_baseline(path: str | Path, kind: str, agent, tickers, window) -> None:
    arrays: dict = {}
    meta: dict = {"kind": kind, "tickers": list(tickers), "window": list(window)}
    if kind == "ppo_only":
        pack_hlc(agent, arrays, meta)
    elif kind == "ddpg_only":
        pack_llc(agent.agent, arrays, meta, with_buffer=False)
        arrays["llc.obs_scale"] = agent.obs_scale
    else:
        raise ValidationError(f"unknown baseline kind {kind!r}")
    write_checkpoint(path, arrays, meta)


def load_agents(path: str | Path) -> dict:
    """Read any checkpoint into ``{"kind", "hlc"?, "llc"?, "flat"?, "tickers", "window"}``."""
    arrays, meta = read_checkpoint(path)
    kind = meta.get("kind")
    out = {"kind": kind, "tickers": meta.get("tickers"), "window": meta.get("window")}
    if kind == "hrt":
        out["hlc"] = unpack_hlc(arrays, meta)
        out["llc"] = unpack_llc(arrays, meta)
    elif kind == "ppo_only":
        out["hlc"] = unpack_hlc(arrays, meta)
    elif kind == "ddpg_only":
        out["flat"] = FlatDdpg(unpack_llc(arrays, meta), arrays["llc.obs_scale"].copy())
    else:
        raise ValidationError(f"{path}: unknown checkpoint kind {kind!r}")
    return out
