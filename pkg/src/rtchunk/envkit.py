"""Dynamic 2D pursuit task, scripted bimodal expert and demonstration datasets.

The agent is a damped double integrator that must touch a target sliding along
the right edge of the arena while a hazard patrols the middle. The expert goes
around the hazard on a side fixed per episode, so demonstrations are bimodal.

All functions are vectorised over a leading batch axis.
"""

from __future__ import annotations

import dataclasses
import io
import json
import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

RUNNING, SUCCESS, HIT_HAZARD, TIMEOUT = 0, 1, 2, 3

OBS_DIM = 13
ACTION_DIM = 2


class DatasetError(RuntimeError):
    pass


class FormatError(ValueError):
    pass


@dataclass(frozen=True)
class EnvConfig:
    damping: float = 0.9
    accel: float = 0.008
    max_ticks: int = 150
    r_goal: float = 0.1
    r_hazard: float = 0.15
    start_x: float = -0.8
    start_y_range: float = 0.25
    target_x: float = 0.75
    target_amp: float = 0.45
    target_period: float = 100.0
    hazard_x: float = 0.0
    hazard_amp: float = 0.3
    hazard_period: float = 90.0


@dataclass(frozen=True)
class ExpertStyle:
    """Per-episode expert parameters: `side` is +1 (pass left of the hazard) or -1."""

    side: np.ndarray
    speed: np.ndarray


@dataclass(frozen=True)
class EnvState:
    pos: np.ndarray  # (..., 2)
    vel: np.ndarray  # (..., 2)
    target_phase: np.ndarray  # (...,)
    hazard_phase: np.ndarray  # (...,)
    tick: np.ndarray  # (...,) int
    status: np.ndarray  # (...,) int, RUNNING/SUCCESS/HIT_HAZARD/TIMEOUT

    @property
    def done(self) -> np.ndarray:
        return self.status != RUNNING

    def take(self, idx) -> "EnvState":
        return EnvState(*(getattr(self, f.name)[idx] for f in dataclasses.fields(self)))


def target_pos(phase: np.ndarray, cfg: EnvConfig) -> np.ndarray:
    phase = np.asarray(phase, dtype=np.float64)
    return np.stack([np.full_like(phase, cfg.target_x), cfg.target_amp * np.sin(phase)], axis=-1)


def hazard_pos(phase: np.ndarray, cfg: EnvConfig) -> np.ndarray:
    phase = np.asarray(phase, dtype=np.float64)
    return np.stack([np.full_like(phase, cfg.hazard_x), cfg.hazard_amp * np.sin(phase)], axis=-1)


def reset(rng: np.random.Generator, n: int, cfg: EnvConfig = EnvConfig()) -> EnvState:
    y0 = rng.uniform(-cfg.start_y_range, cfg.start_y_range, size=n)
    pos = np.stack([np.full(n, cfg.start_x), y0], axis=-1)
    return EnvState(
        pos=pos,
        vel=np.zeros((n, 2)),
        target_phase=rng.uniform(0.0, 2 * np.pi, size=n),
        hazard_phase=rng.uniform(0.0, 2 * np.pi, size=n),
        tick=np.zeros(n, dtype=np.int64),
        status=np.zeros(n, dtype=np.int64),
    )


def _classify(pos, target_phase, hazard_phase, tick, cfg):
    to_target = np.linalg.norm(pos - target_pos(target_phase, cfg), axis=-1)
    to_hazard = np.linalg.norm(pos - hazard_pos(hazard_phase, cfg), axis=-1)
    status = np.where(to_hazard < cfg.r_hazard, HIT_HAZARD, RUNNING)
    status = np.where((status == RUNNING) & (to_target < cfg.r_goal), SUCCESS, status)
    status = np.where((status == RUNNING) & (tick >= cfg.max_ticks), TIMEOUT, status)
    return status


def success_predicate(pos, target_phase, cfg: EnvConfig = EnvConfig()) -> np.ndarray:
    return np.linalg.norm(pos - target_pos(target_phase, cfg), axis=-1) < cfg.r_goal


def step(state: EnvState, action: np.ndarray, cfg: EnvConfig = EnvConfig()) -> EnvState:
    """Advance one tick. Finished episodes are returned unchanged."""
    a = np.clip(np.nan_to_num(np.asarray(action, dtype=np.float64)), -1.0, 1.0)
    live = ~state.done
    vel = cfg.damping * state.vel + cfg.accel * a
    pos = state.pos + vel
    hit_wall = np.abs(pos) > 1.0
    pos = np.clip(pos, -1.0, 1.0)
    vel = np.where(hit_wall, 0.0, vel)
    tp = state.target_phase + 2 * np.pi / cfg.target_period
    hp = state.hazard_phase + 2 * np.pi / cfg.hazard_period
    tick = state.tick + 1
    status = _classify(pos, tp, hp, tick, cfg)
    keep = live[..., None]
    return EnvState(
        pos=np.where(keep, pos, state.pos),
        vel=np.where(keep, vel, state.vel),
        target_phase=np.where(live, tp, state.target_phase),
        hazard_phase=np.where(live, hp, state.hazard_phase),
        tick=np.where(live, tick, state.tick),
        status=np.where(live, status, state.status),
    )


def observe(state: EnvState, cfg: EnvConfig = EnvConfig()) -> np.ndarray:
    """Observation features, shape (..., OBS_DIM)."""
    tp, hp = state.target_phase, state.hazard_phase
    return np.concatenate(
        [
            state.pos,
            state.vel / (cfg.accel / (1 - cfg.damping)),
            target_pos(tp, cfg),
            np.stack([np.sin(tp), np.cos(tp)], axis=-1),
            hazard_pos(hp, cfg),
            np.stack([np.sin(hp), np.cos(hp)], axis=-1),
            (state.tick / cfg.max_ticks)[..., None],
        ],
        axis=-1,
    )


def _normalize(v, eps=1e-12):
    return v / np.maximum(np.linalg.norm(v, axis=-1, keepdims=True), eps)


def expert_action(
    state: EnvState,
    style: ExpertStyle,
    cfg: EnvConfig = EnvConfig(),
    clearance: float = 0.32,
    trigger: float = 0.7,
    hazard_lead: float = 10.0,
) -> np.ndarray:
    """Waypoint expert: head for where the target will be, skirting the hazard on `style.side`."""
    p, v = state.pos, state.vel
    vmax = cfg.accel / (1 - cfg.damping) * style.speed
    dist_t = np.linalg.norm(target_pos(state.target_phase, cfg) - p, axis=-1)
    lead = np.clip(dist_t / np.maximum(vmax, 1e-9), 0.0, 30.0)
    goal = target_pos(state.target_phase + lead * 2 * np.pi / cfg.target_period, cfg)
    u = _normalize(goal - p)
    perp = np.stack([-u[..., 1], u[..., 0]], axis=-1)

    dist_h_now = np.linalg.norm(hazard_pos(state.hazard_phase, cfg) - p, axis=-1)
    lead_h = np.clip(dist_h_now / np.maximum(vmax, 1e-9), 0.0, hazard_lead)
    rel = hazard_pos(state.hazard_phase + lead_h * 2 * np.pi / cfg.hazard_period, cfg) - p
    ahead = np.sum(rel * u, axis=-1)
    lateral = np.sum(rel * perp, axis=-1)
    dist_h = np.linalg.norm(rel, axis=-1)
    blocking = (ahead > 0) & (np.abs(lateral) < clearance) & (dist_h < trigger)
    side = style.side.astype(np.float64)
    waypoint = p + rel + (side * clearance)[..., None] * perp
    heading = np.where(blocking[..., None], _normalize(waypoint - p), u)

    v_des = vmax[..., None] * heading
    a = (v_des - cfg.damping * v) / cfg.accel
    return a / np.maximum(np.max(np.abs(a), axis=-1, keepdims=True), 1.0)


def sample_style(rng: np.random.Generator, n: int) -> ExpertStyle:
    return ExpertStyle(
        side=rng.choice(np.array([-1, 1]), size=n),
        speed=rng.uniform(0.85, 1.0, size=n),
    )


def mirror_state(state: EnvState) -> EnvState:
    """Reflect y -> -y (target and hazard paths are sinusoids, so phase -> phase + pi)."""
    flip = np.array([1.0, -1.0])
    return dataclasses.replace(
        state,
        pos=state.pos * flip,
        vel=state.vel * flip,
        target_phase=state.target_phase + np.pi,
        hazard_phase=state.hazard_phase + np.pi,
    )


def rollout_expert(
    rng: np.random.Generator,
    n: int,
    cfg: EnvConfig = EnvConfig(),
    obs_delay: int = 0,
):
    """Closed-loop expert rollouts. With `obs_delay` > 0 the expert acts on a stale state.

    Returns (states, actions, final_state) where states[k] is the state before tick k.
    """
    state = reset(rng, n, cfg)
    style = sample_style(rng, n)
    history = [state]
    actions = []
    for _ in range(cfg.max_ticks):
        seen = history[max(len(history) - 1 - obs_delay, 0)]
        a = expert_action(seen, style, cfg)
        actions.append(a)
        state = step(state, a, cfg)
        history.append(state)
        if state.done.all():
            break
    return history, np.stack(actions, axis=1), state


@dataclass
class Dataset:
    """Overlapping expert chunks. `obs` (N, OBS_DIM), `chunks` (N, H, ACTION_DIM) in env units."""

    obs: np.ndarray
    chunks: np.ndarray
    episode: np.ndarray
    tick: np.ndarray
    action_mean: np.ndarray
    action_std: np.ndarray
    obs_mean: np.ndarray
    obs_std: np.ndarray
    meta: dict = field(default_factory=dict)

    @property
    def horizon(self) -> int:
        return self.chunks.shape[1]

    def __len__(self) -> int:
        return self.obs.shape[0]

    def normalized(self) -> tuple[np.ndarray, np.ndarray]:
        return (
            (self.obs - self.obs_mean) / self.obs_std,
            (self.chunks - self.action_mean) / self.action_std,
        )


def gen_dataset(n_episodes: int, H: int, seed: int, cfg: EnvConfig = EnvConfig()) -> Dataset:
    if n_episodes < 1:
        raise ValueError("n_episodes must be >= 1")
    rng = np.random.default_rng(seed)
    history, actions, final = rollout_expert(rng, n_episodes, cfg)
    keep = np.flatnonzero(final.status == SUCCESS)
    if keep.size == 0:
        raise DatasetError(f"all {n_episodes} expert episodes failed")

    obs_rows, chunk_rows, ep_rows, tick_rows = [], [], [], []
    for e in keep:
        length = int(final.tick[e])
        acts = actions[e, :length]
        padded = np.concatenate([acts, np.repeat(acts[-1:], H - 1, axis=0)], axis=0)
        for t in range(length):
            obs_rows.append(observe(history[t].take(e), cfg))
            chunk_rows.append(padded[t : t + H])
            ep_rows.append(e)
            tick_rows.append(t)
    chunks = np.stack(chunk_rows)
    obs = np.stack(obs_rows)
    flat = chunks.reshape(-1, chunks.shape[-1])
    obs_std = obs.std(axis=0)
    return Dataset(
        obs=obs,
        chunks=chunks,
        episode=np.asarray(ep_rows, dtype=np.int64),
        tick=np.asarray(tick_rows, dtype=np.int64),
        action_mean=flat.mean(axis=0),
        action_std=flat.std(axis=0),
        obs_mean=obs.mean(axis=0),
        obs_std=np.where(obs_std > 1e-8, obs_std, 1.0),
        meta={
            "n_episodes": n_episodes,
            "n_success": int(keep.size),
            "seed": seed,
            "env": dataclasses.asdict(cfg),
        },
    )


# Dataset file layout (all integers little-endian):
#   magic b"RTCDATA\0" | u32 version | u32 header_len | header (UTF-8 JSON)
#   | N*(OBS_DIM + H*ACTION_DIM) float64 records | i64 episode[N] | i64 tick[N] | u32 crc32
# The JSON header holds H, dims, N, normalisation stats and generation metadata.
DATA_MAGIC = b"RTCDATA\0"
DATA_VERSION = 1


def save_dataset(ds: Dataset, path) -> None:
    header = {
        "H": ds.horizon,
        "obs_dim": ds.obs.shape[1],
        "action_dim": ds.chunks.shape[2],
        "n": len(ds),
        "action_mean": ds.action_mean.tolist(),
        "action_std": ds.action_std.tolist(),
        "obs_mean": ds.obs_mean.tolist(),
        "obs_std": ds.obs_std.tolist(),
        "meta": ds.meta,
    }
    hbytes = json.dumps(header, sort_keys=True).encode()
    buf = io.BytesIO()
    buf.write(DATA_MAGIC)
    buf.write(struct.pack("<II", DATA_VERSION, len(hbytes)))
    buf.write(hbytes)
    records = np.concatenate([ds.obs, ds.chunks.reshape(len(ds), -1)], axis=1)
    buf.write(records.astype("<f8").tobytes())
    buf.write(ds.episode.astype("<i8").tobytes())
    buf.write(ds.tick.astype("<i8").tobytes())
    body = buf.getvalue()
    with open(path, "wb") as f:
        f.write(body + struct.pack("<I", zlib.crc32(body)))


def load_dataset(path) -> Dataset:
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < 20 or raw[:8] != DATA_MAGIC:
        raise FormatError("not a dataset file")
    body, (crc,) = raw[:-4], struct.unpack("<I", raw[-4:])
    if zlib.crc32(body) != crc:
        raise FormatError("dataset checksum mismatch (truncated or corrupt)")
    version, hlen = struct.unpack("<II", body[8:16])
    if version != DATA_VERSION:
        raise FormatError(f"unsupported dataset version {version}")
    header = json.loads(body[16 : 16 + hlen])
    n, H, od, ad = header["n"], header["H"], header["obs_dim"], header["action_dim"]
    off = 16 + hlen
    width = od + H * ad
    expected = off + 8 * n * (width + 2)
    if len(body) != expected:
        raise FormatError("dataset payload size mismatch")
    records = np.frombuffer(body, dtype="<f8", count=n * width, offset=off).reshape(n, width)
    off += 8 * n * width
    episode = np.frombuffer(body, dtype="<i8", count=n, offset=off)
    tick = np.frombuffer(body, dtype="<i8", count=n, offset=off + 8 * n)
    return Dataset(
        obs=records[:, :od].astype(np.float64),
        chunks=records[:, od:].reshape(n, H, ad).astype(np.float64),
        episode=episode.astype(np.int64),
        tick=tick.astype(np.int64),
        action_mean=np.asarray(header["action_mean"]),
        action_std=np.asarray(header["action_std"]),
        obs_mean=np.asarray(header["obs_mean"]),
        obs_std=np.asarray(header["obs_std"]),
        meta=header["meta"],
    )
