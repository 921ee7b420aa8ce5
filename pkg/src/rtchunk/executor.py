"""Tick-level simulation of synchronous and asynchronous chunk execution.

Episodes in a batch run in lockstep: the inference schedule depends only on
(H, s, d), so every episode launches and switches chunks on the same ticks.
Asynchrony is modelled with a pending-chunk slot and an arrival tick.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from . import envkit as ek
from . import flowpolicy as fp
from .guidance import GuidanceConfig, OverlapTarget, guided_sample
from .trainer import Checkpoint, ConfigError


class Strategy(str, enum.Enum):
    SYNC = "sync"
    NAIVE_ASYNC = "naive_async"
    INFERENCE_RTC = "inference_rtc"
    TRAINING_RTC = "training_rtc"

    @property
    def needs_conditioned(self) -> bool:
        return self is Strategy.TRAINING_RTC


@dataclass(frozen=True)
class DelayConfig:
    H: int
    s: int
    d: int

    def __post_init__(self):
        if not 1 <= self.s <= self.H:
            raise fp.DomainError(f"execution horizon s={self.s} outside [1, H={self.H}]")
        if not 0 <= self.d <= self.H - self.s:
            raise fp.DomainError(f"delay d={self.d} violates 0 <= d <= H - s = {self.H - self.s}")


def extract_prefix(prev_chunk: np.ndarray, offset: int, d: int) -> np.ndarray:
    """Rows [offset, offset + d) of the previous chunk as rows [0, d) of an H-row buffer."""
    H = prev_chunk.shape[-2]
    if offset < 0 or d < 0 or offset + d > H:
        raise fp.DomainError(f"prefix rows [{offset}, {offset + d}) out of range for H={H}")
    buf = np.zeros_like(prev_chunk)
    buf[..., :d, :] = prev_chunk[..., offset : offset + d, :]
    return buf


def build_overlap_target(prev_chunk: np.ndarray, offset: int, d: int, s: int, H: int) -> OverlapTarget:
    """Rows [0, H - s) hold previous-chunk rows [offset, offset + H - s).

    In steady state offset == s; the first switch of an episode uses the
    row the first chunk had reached at launch time.
    """
    if s == H and d != 0:
        raise fp.DomainError("s == H leaves no overlap")
    if offset < 0 or offset > s:
        raise fp.DomainError(f"offset {offset} outside [0, s={s}]")
    y = np.zeros_like(prev_chunk)
    y[..., : H - s, :] = prev_chunk[..., offset : offset + H - s, :]
    return OverlapTarget(y=y, d=d, s=s)


@dataclass
class RolloutRecord:
    positions: np.ndarray  # (length + 1, 2)
    actions: np.ndarray  # (length, 2), executed (clipped) actions
    switch_ticks: list[int]
    success: bool
    status: int
    length: int
    max_jump: float


@dataclass
class BatchRollout:
    positions: np.ndarray  # (B, T + 1, 2)
    actions: np.ndarray  # (B, T, 2)
    lengths: np.ndarray  # (B,)
    status: np.ndarray  # (B,)
    switch_ticks: list[int]
    source_obs_tick: np.ndarray  # (T,) tick of the observation behind each executed action
    chunks: int = 0
    fwd_passes: int = 0  # counted on chunks after the first of an episode
    vjp_passes: int = 0

    @property
    def success(self) -> np.ndarray:
        return self.status == ek.SUCCESS

    def record(self, i: int) -> RolloutRecord:
        n = int(self.lengths[i])
        acts = self.actions[i, :n]
        switches = [t for t in self.switch_ticks if t < n]
        jumps = [np.linalg.norm(acts[t] - acts[t - 1]) for t in switches if t > 0]
        return RolloutRecord(
            positions=self.positions[i, : n + 1],
            actions=acts,
            switch_ticks=switches,
            success=bool(self.status[i] == ek.SUCCESS),
            status=int(self.status[i]),
            length=n,
            max_jump=float(max(jumps, default=0.0)),
        )


class LearnedPolicy:
    """A checkpoint wrapped for execution; chunks live in normalised action space."""

    def __init__(self, ckpt: Checkpoint, num_steps: int = 10, guidance: GuidanceConfig | None = None, env_cfg=None):
        self.ckpt = ckpt
        self.num_steps = num_steps
        self.guidance = guidance or GuidanceConfig(num_steps=num_steps)
        self.env_cfg = env_cfg or ek.EnvConfig()
        self.horizon = ckpt.descriptor.horizon

    @property
    def conditioning(self) -> bool:
        return self.ckpt.conditioning

    def propose(self, strategy, state, prev, offset, dcfg, rng, counter):
        obs = self.ckpt.normalize_obs(ek.observe(state, self.env_cfg))
        params = self.ckpt.params
        if prev is None or strategy in (Strategy.SYNC, Strategy.NAIVE_ASYNC):
            return fp.sample(params, obs, self.num_steps, rng, counter)
        if strategy is Strategy.TRAINING_RTC:
            prefix = extract_prefix(prev, offset, dcfg.d)
            return fp.sample_with_prefix(params, obs, prefix, dcfg.d, self.num_steps, rng, counter)
        target = build_overlap_target(prev, offset, dcfg.d, dcfg.s, dcfg.H)
        return guided_sample(params, obs, target, self.guidance, rng, counter)

    def to_env(self, chunk):
        return self.ckpt.denormalize_actions(chunk)


class ExpertPolicy:
    """Scripted expert as a chunk source: simulates the expert H ticks ahead.

    Ignores prefixes and noise, so it is only meaningful for sanity checks.
    """

    conditioning = None

    def __init__(self, style: ek.ExpertStyle, horizon: int, env_cfg=None):
        self.style = style
        self.horizon = horizon
        self.env_cfg = env_cfg or ek.EnvConfig()

    def subset(self, idx) -> "ExpertPolicy":
        style = ek.ExpertStyle(side=self.style.side[idx], speed=self.style.speed[idx])
        return ExpertPolicy(style, self.horizon, self.env_cfg)

    def propose(self, strategy, state, prev, offset, dcfg, rng, counter):
        acts = []
        s = state
        for _ in range(self.horizon):
            a = ek.expert_action(s, self.style, self.env_cfg)
            acts.append(a)
            s = ek.step(s, a, self.env_cfg)
        return np.stack(acts, axis=-2)

    def to_env(self, chunk):
        return chunk


def check_compatible(strategy: Strategy, policy) -> None:
    cond = getattr(policy, "conditioning", None)
    if cond is None:
        return
    if strategy.needs_conditioned and not cond:
        raise ConfigError(f"{strategy.value} needs a prefix-conditioned checkpoint")
    if not strategy.needs_conditioned and cond:
        raise ConfigError(f"{strategy.value} needs an unconditioned checkpoint")


def run_episodes(
    strategy: Strategy | str,
    policy,
    env_cfg: ek.EnvConfig,
    dcfg: DelayConfig,
    n: int,
    seed,
    strict: bool = True,
) -> BatchRollout:
    """Roll out `n` episodes in lockstep.

    `seed` (int or SeedSequence) is split into an environment stream (initial
    states) and a sampling stream (flow noise), so strategies sharing a seed
    see the same episodes and the same noise draws.
    """
    strategy = Strategy(strategy)
    if strict:
        check_compatible(strategy, policy)
    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    # derived explicitly: SeedSequence.spawn is stateful and would differ between calls
    env_ss, noise_ss = (np.random.SeedSequence(ss.entropy, spawn_key=(*ss.spawn_key, k)) for k in (0, 1))
    env_rng, rng = np.random.default_rng(env_ss), np.random.default_rng(noise_ss)
    H, s, d = dcfg.H, dcfg.s, dcfg.d
    if policy.horizon != H:
        raise ConfigError(f"policy horizon {policy.horizon} != H={H}")

    state = ek.reset(env_rng, n, env_cfg)
    T = env_cfg.max_ticks
    positions = np.zeros((n, T + 1, 2))
    actions = np.zeros((n, T, 2))
    positions[:, 0] = state.pos
    src_tick = np.full(T, -1, dtype=np.int64)
    counter = fp.OpCounter()

    def propose(prev, offset):
        # finished episodes are frozen; only live ones are sent to the policy
        idx = np.flatnonzero(~state.done)
        sub_prev = None if prev is None else prev[idx]
        out = np.zeros((n, H, ek.ACTION_DIM)) if prev is None else prev.copy()
        pol = policy.subset(idx) if hasattr(policy, "subset") else policy
        out[idx] = pol.propose(strategy, state.take(idx), sub_prev, offset, dcfg, rng, counter)
        return out

    cur = propose(None, 0)
    cur_obs_tick = 0
    row = 0
    switches = [0]
    chunks = 0
    steady = fp.OpCounter()
    pending = None  # (chunk, arrival_tick, obs_tick)
    sync = strategy is Strategy.SYNC
    next_launch = s if sync else s - d
    held = np.zeros((n, 2))

    t = 0
    while t < T and not state.done.all():
        while True:
            if pending is not None and pending[1] == t:
                cur, cur_obs_tick = pending[0], pending[2]
                row = 0 if sync else d
                pending = None
                switches.append(t)
                next_launch = t + s if sync else t + s - d
                continue
            if pending is None and t == next_launch:
                before = (counter.forward_passes, counter.vjp_passes)
                new = propose(cur, row)
                steady.forward_passes += counter.forward_passes - before[0]
                steady.vjp_passes += counter.vjp_passes - before[1]
                chunks += 1
                pending = (new, t + d, t)
                continue
            break
        if pending is not None and sync:
            a = held
        else:
            a = np.clip(policy.to_env(cur[..., row, :]), -1.0, 1.0)
            row += 1
        src_tick[t] = cur_obs_tick
        live = ~state.done
        actions[live, t] = a[live]
        held = a
        state = ek.step(state, a, env_cfg)
        positions[:, t + 1] = state.pos
        t += 1

    return BatchRollout(
        positions=positions,
        actions=actions,
        lengths=state.tick.copy(),
        status=state.status.copy(),
        switch_ticks=switches,
        source_obs_tick=src_tick,
        chunks=chunks,
        fwd_passes=steady.forward_passes,
        vjp_passes=steady.vjp_passes,
    )


def run_episode(strategy, policy, env_cfg, dcfg, seed, strict: bool = True) -> RolloutRecord:
    return run_episodes(strategy, policy, env_cfg, dcfg, 1, seed, strict).record(0)
