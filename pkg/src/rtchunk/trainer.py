"""Training loop, delay distributions and checkpoint persistence."""

from __future__ import annotations

import io
import json
import logging
import math
import struct
import zlib
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import flowpolicy as fp
from .envkit import Dataset
from .ndcore import NumericError

log = logging.getLogger(__name__)


class ConfigError(ValueError):
    pass


class FormatError(ValueError):
    pass


@dataclass(frozen=True)
class DelayDistribution:
    """Distribution over integer delays. ``kind`` is "uniform" or "geometric"."""

    kind: str
    d_max: int
    base: float = 0.5

    @classmethod
    def uniform_int(cls, high: int) -> "DelayDistribution":
        """Uniform over {0, ..., high - 1}."""
        if high < 1:
            raise ValueError("high must be >= 1")
        return cls("uniform", high - 1)

    @classmethod
    def geometric(cls, d_max: int, base: float = 0.5) -> "DelayDistribution":
        """P(d) proportional to base**d over {0, ..., d_max}."""
        if not 0.0 < base < 1.0:
            raise ValueError("base must lie in (0, 1)")
        return cls("geometric", d_max, base)

    @property
    def support(self) -> np.ndarray:
        return np.arange(self.d_max + 1)

    @property
    def probs(self) -> np.ndarray:
        if self.kind == "uniform":
            return np.full(self.d_max + 1, 1.0 / (self.d_max + 1))
        if self.kind == "geometric":
            w = self.base ** self.support.astype(np.float64)
            return w / w.sum()
        raise ConfigError(f"unknown delay distribution kind {self.kind!r}")

    def to_dict(self) -> dict:
        return asdict(self)


def sample_delay(dist: DelayDistribution, rng: np.random.Generator, size=None):
    if dist.kind == "uniform":
        return rng.integers(0, dist.d_max + 1, size=size)
    return rng.choice(dist.support, size=size, p=dist.probs)


@dataclass
class TrainConfig:
    epochs: int = 32
    batch_size: int = 256
    lr: float = 1e-3
    lr_min: float = 1e-5
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    grad_clip: float = 1.0
    seed: int = 0
    width: int = 128
    depth: int = 3
    time_dim: int = 16
    token_mixing: bool = True
    conditioning: bool = False
    delay: DelayDistribution | None = None
    # cosine schedule length; defaults to `epochs`. Resumed runs keep the parent's.
    schedule_epochs: int | None = None

    def __post_init__(self):
        if self.conditioning and self.delay is None:
            raise ConfigError("conditioning requires a delay distribution")

    @classmethod
    def from_mapping(cls, m: dict) -> "TrainConfig":
        m = dict(m)
        delay = m.pop("delay", None)
        if isinstance(delay, dict):
            delay = DelayDistribution(**delay)
        unknown = set(m) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(delay=delay, **m)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["delay"] = self.delay.to_dict() if self.delay else None
        return d


@dataclass
class Checkpoint:
    params: fp.PolicyParams
    obs_mean: np.ndarray
    obs_std: np.ndarray
    action_mean: np.ndarray
    action_std: np.ndarray
    conditioning: bool
    meta: dict = field(default_factory=dict)
    # Adam moments, kept so a run can resume bit-exactly
    opt_m: dict[str, np.ndarray] | None = None
    opt_v: dict[str, np.ndarray] | None = None

    @property
    def descriptor(self) -> fp.Descriptor:
        return self.params.descriptor

    def normalize_obs(self, obs: np.ndarray) -> np.ndarray:
        return (obs - self.obs_mean) / self.obs_std

    def normalize_actions(self, a: np.ndarray) -> np.ndarray:
        return (a - self.action_mean) / self.action_std

    def denormalize_actions(self, a: np.ndarray) -> np.ndarray:
        return a * self.action_std + self.action_mean


def lr_at(cfg: TrainConfig, step: int, total_steps: int) -> float:
    frac = min(step / max(total_steps, 1), 1.0)
    return cfg.lr_min + 0.5 * (cfg.lr - cfg.lr_min) * (1.0 + math.cos(math.pi * frac))


def _epoch_rngs(seed: int, epoch: int):
    shuffle, noise, delay = np.random.SeedSequence([seed, epoch]).spawn(3)
    return np.random.default_rng(shuffle), np.random.default_rng(noise), np.random.default_rng(delay)


def train(cfg: TrainConfig, dataset: Dataset, warm_start: Checkpoint | None = None):
    """Train a checkpoint. Returns (checkpoint, per-epoch mean loss list).

    With `warm_start`, weights, optimizer moments, step count and schedule are
    inherited and training continues from the parent's epoch count.
    """
    if len(dataset) == 0:
        raise ConfigError("empty dataset")
    obs, chunks = dataset.normalized()
    H = dataset.horizon
    desc = fp.Descriptor(
        obs_dim=obs.shape[1],
        action_dim=chunks.shape[2],
        horizon=H,
        width=cfg.width,
        depth=cfg.depth,
        time_dim=cfg.time_dim,
        token_mixing=cfg.token_mixing,
    )
    n = len(dataset)
    steps_per_epoch = math.ceil(n / cfg.batch_size)

    if warm_start is not None:
        if warm_start.descriptor != desc:
            raise ConfigError(f"warm start architecture {warm_start.descriptor} != {desc}")
        params = warm_start.params.copy()
        m = {k: v.copy() for k, v in (warm_start.opt_m or {}).items()} or {k: np.zeros_like(v) for k, v in params.weights.items()}
        v = {k: x.copy() for k, x in (warm_start.opt_v or {}).items()} or {k: np.zeros_like(x) for k, x in params.weights.items()}
        start_epoch = int(warm_start.meta.get("epochs_seen", 0))
        step = int(warm_start.meta.get("adam_step", 0))
        schedule_epochs = cfg.schedule_epochs or int(warm_start.meta.get("schedule_epochs", start_epoch + cfg.epochs))
    else:
        params = fp.init_params(desc, np.random.default_rng(cfg.seed))
        m = {k: np.zeros_like(x) for k, x in params.weights.items()}
        v = {k: np.zeros_like(x) for k, x in params.weights.items()}
        start_epoch, step = 0, 0
        schedule_epochs = cfg.schedule_epochs or cfg.epochs
    total_steps = schedule_epochs * steps_per_epoch

    curve = []
    for epoch in range(start_epoch, start_epoch + cfg.epochs):
        shuffle_rng, noise_rng, delay_rng = _epoch_rngs(cfg.seed, epoch)
        order = shuffle_rng.permutation(n)
        total = 0.0
        for b in range(steps_per_epoch):
            idx = order[b * cfg.batch_size : (b + 1) * cfg.batch_size]
            d = sample_delay(cfg.delay, delay_rng, size=idx.size) if cfg.conditioning else 0
            loss, grads = fp.prefix_loss_and_grad(params, obs[idx], chunks[idx], d, noise_rng)
            if not math.isfinite(loss):
                raise NumericError(f"non-finite loss at epoch {epoch}, batch {b}")
            gnorm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
            scale = min(1.0, cfg.grad_clip / (gnorm + 1e-12)) if cfg.grad_clip else 1.0
            step += 1
            lr = lr_at(cfg, step - 1, total_steps)
            bc1 = 1.0 - cfg.beta1**step
            bc2 = 1.0 - cfg.beta2**step
            for k, g in grads.items():
                g = g * scale
                m[k] = cfg.beta1 * m[k] + (1.0 - cfg.beta1) * g
                v[k] = cfg.beta2 * v[k] + (1.0 - cfg.beta2) * g * g
                params.weights[k] = params.weights[k] - lr * (m[k] / bc1) / (np.sqrt(v[k] / bc2) + cfg.adam_eps)
            total += loss
        curve.append(total / steps_per_epoch)
        log.info("epoch %d loss %.5f", epoch, curve[-1])

    parent_meta = dict(warm_start.meta) if warm_start is not None else {}
    meta = {
        "epochs_seen": start_epoch + cfg.epochs,
        "adam_step": step,
        "schedule_epochs": schedule_epochs,
        "seed": cfg.seed,
        "optimizer": "adam+cosine",
        "train_config": cfg.to_dict(),
        "loss_curve": parent_meta.get("loss_curve", []) + curve,
        "parent_conditioning": warm_start.conditioning if warm_start is not None else None,
    }
    ckpt = Checkpoint(
        params=params,
        obs_mean=dataset.obs_mean.copy(),
        obs_std=dataset.obs_std.copy(),
        action_mean=dataset.action_mean.copy(),
        action_std=dataset.action_std.copy(),
        conditioning=cfg.conditioning,
        meta=meta,
        opt_m=m,
        opt_v=v,
    )
    return ckpt, curve


def eval_loss(ckpt: Checkpoint, dataset: Dataset, d=0, seed: int = 1234, n: int = 2048) -> float:
    """Loss on a fixed, seeded subset of the dataset (normalised space)."""
    rng = np.random.default_rng(seed)
    idx = rng.choice(len(dataset), size=min(n, len(dataset)), replace=False)
    obs, chunks = dataset.normalized()
    return fp.prefix_loss(ckpt.params, obs[idx], chunks[idx], d, rng)


def matched_compute(cfg: TrainConfig, dataset: Dataset, fork_epoch: int, delay: DelayDistribution):
    """Matched-compute pair: one shared run up to `fork_epoch`, then two branches.

    Returns (unconditioned, conditioned) checkpoints that both saw
    ``cfg.epochs`` epochs in total.
    """
    base_cfg = replace(cfg, epochs=fork_epoch, schedule_epochs=cfg.epochs, conditioning=False, delay=None)
    trunk, _ = train(base_cfg, dataset)
    rest = cfg.epochs - fork_epoch
    plain, _ = train(replace(base_cfg, epochs=rest), dataset, warm_start=trunk)
    cond, _ = train(replace(base_cfg, epochs=rest, conditioning=True, delay=delay), dataset, warm_start=trunk)
    return plain, cond


# Checkpoint file layout (little-endian):
#   magic b"RTCCKPT\0" | u32 version
#   | u32 n | descriptor block: n bytes UTF-8 JSON {descriptor, conditioning, meta}
#   | stats block: 4 x (u32 len | len float64) for obs_mean, obs_std, action_mean, action_std
#   | u32 count | count x weight block (u16 name_len | name | u8 ndim | ndim x u32 | float64 data)
#   | u32 crc32 of everything before it
# Weight names are written sorted; optimizer moments use the prefixes "opt.m/" and "opt.v/".
CKPT_MAGIC = b"RTCCKPT\0"
CKPT_VERSION = 1


def _write_array(buf, a):
    buf.write(struct.pack("<I", a.size))
    buf.write(np.ascontiguousarray(a, dtype="<f8").tobytes())


def save(ckpt: Checkpoint, path) -> None:
    head = {
        "descriptor": ckpt.descriptor.to_dict(),
        "conditioning": ckpt.conditioning,
        "meta": ckpt.meta,
    }
    hb = json.dumps(head, sort_keys=True).encode()
    buf = io.BytesIO()
    buf.write(CKPT_MAGIC)
    buf.write(struct.pack("<II", CKPT_VERSION, len(hb)))
    buf.write(hb)
    for a in (ckpt.obs_mean, ckpt.obs_std, ckpt.action_mean, ckpt.action_std):
        _write_array(buf, np.asarray(a, dtype=np.float64))
    blocks = dict(ckpt.params.weights)
    for k, a in (ckpt.opt_m or {}).items():
        blocks["opt.m/" + k] = a
    for k, a in (ckpt.opt_v or {}).items():
        blocks["opt.v/" + k] = a
    buf.write(struct.pack("<I", len(blocks)))
    for name in sorted(blocks):
        a = np.asarray(blocks[name], dtype=np.float64)
        nb = name.encode()
        buf.write(struct.pack("<H", len(nb)))
        buf.write(nb)
        buf.write(struct.pack("<B", a.ndim))
        buf.write(struct.pack(f"<{a.ndim}I", *a.shape))
        buf.write(np.ascontiguousarray(a, dtype="<f8").tobytes())
    body = buf.getvalue()
    with open(path, "wb") as f:
        f.write(body + struct.pack("<I", zlib.crc32(body)))


class _Reader:
    def __init__(self, data: bytes, pos: int):
        self.data, self.pos = data, pos

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise FormatError("checkpoint truncated")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def floats(self, count: int) -> np.ndarray:
        return np.frombuffer(self.take(8 * count), dtype="<f8").astype(np.float64)


def load(path) -> Checkpoint:
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < 20 or raw[:8] != CKPT_MAGIC:
        raise FormatError("not a checkpoint file")
    body, (crc,) = raw[:-4], struct.unpack("<I", raw[-4:])
    if zlib.crc32(body) != crc:
        raise FormatError("checkpoint checksum mismatch (truncated or corrupt)")
    r = _Reader(body, 8)
    version, hlen = r.unpack("<II")
    if version != CKPT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    head = json.loads(r.take(hlen))
    stats = [r.floats(r.unpack("<I")[0]) for _ in range(4)]
    (count,) = r.unpack("<I")
    weights, opt_m, opt_v = {}, {}, {}
    for _ in range(count):
        (nlen,) = r.unpack("<H")
        name = r.take(nlen).decode()
        (ndim,) = r.unpack("<B")
        shape = r.unpack(f"<{ndim}I") if ndim else ()
        a = r.floats(int(np.prod(shape, dtype=np.int64))).reshape(shape)
        if name.startswith("opt.m/"):
            opt_m[name[6:]] = a
        elif name.startswith("opt.v/"):
            opt_v[name[6:]] = a
        else:
            weights[name] = a
    if r.pos != len(body):
        raise FormatError("trailing bytes in checkpoint")
    desc = fp.Descriptor(**head["descriptor"])
    return Checkpoint(
        params=fp.PolicyParams(desc, weights),
        obs_mean=stats[0],
        obs_std=stats[1],
        action_mean=stats[2],
        action_std=stats[3],
        conditioning=bool(head["conditioning"]),
        meta=head["meta"],
        opt_m=opt_m or None,
        opt_v=opt_v or None,
    )
