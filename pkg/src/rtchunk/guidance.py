"""Inference-time inpainting: hard prefix overwrite plus a soft-masked
pseudoinverse-style correction computed with one vector-Jacobian product per
denoising step."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ndcore as nd
from .flowpolicy import DomainError, OpCounter, model_shape, model_velocity
from .ndcore import NumericError


@dataclass(frozen=True)
class GuidanceConfig:
    beta: float = 1.0
    decay_c: float = 0.5
    gamma_max: float = 5.0
    num_steps: int = 10

    def __post_init__(self):
        if self.beta < 0:
            raise DomainError("beta must be >= 0")
        if not 0.0 < self.decay_c < 1.0:
            raise DomainError("decay_c must lie in (0, 1)")
        if self.gamma_max <= 0:
            raise DomainError("gamma_max must be > 0")
        if self.num_steps < 1:
            raise DomainError("num_steps must be >= 1")


@dataclass
class OverlapTarget:
    """Previous-chunk actions aligned to the new chunk: rows [0, H - s) are valid."""

    y: np.ndarray  # (H, A) or (B, H, A)
    d: int
    s: int

    def __post_init__(self):
        H = self.y.shape[-2]
        if not (1 <= self.s <= H and 0 <= self.d <= H - self.s):
            raise DomainError(f"need 1 <= s <= H and 0 <= d <= H - s (H={H}, s={self.s}, d={self.d})")


def soft_mask_weights(H: int, d: int, s: int, decay_c: float) -> np.ndarray:
    """1 on the prefix, decay_c**(i - d + 1) on the rest of the overlap, 0 beyond it."""
    if not (0 <= d <= H - s <= H):
        raise DomainError(f"need 0 <= d <= H - s <= H (H={H}, s={s}, d={d})")
    i = np.arange(H)
    w = np.where(i < d, 1.0, decay_c ** (i - d + 1.0))
    return np.where(i < H - s, w, 0.0)


def guided_sample(
    model,
    obs,
    target: OverlapTarget,
    cfg: GuidanceConfig,
    rng: np.random.Generator,
    counter: OpCounter | None = None,
) -> np.ndarray:
    """Euler sampling steered towards `target.y` on the overlap.

    Each step: overwrite prefix rows, evaluate v and the one-step estimate
    x1 = x + (1 - t) v, pull back W * (y - x1) through x -> x1, add
    min(1 - t, gamma_max) * beta times that to v, take the Euler step and
    overwrite the prefix again.
    """
    single = np.ndim(obs) == 1
    obs = np.atleast_2d(np.asarray(obs, dtype=np.float64))
    B = obs.shape[0]
    H, A = model_shape(model)
    y = np.broadcast_to(np.asarray(target.y, dtype=np.float64).reshape(-1, H, A), (B, H, A))
    W = soft_mask_weights(H, target.d, target.s, cfg.decay_c)[None, :, None]
    pmask = (np.arange(H) < target.d)[None, :, None]

    x = rng.standard_normal((B, H, A))
    time = 0.0
    dt = 1.0 / cfg.num_steps
    for k in range(cfg.num_steps):
        x = np.where(pmask, y, x)
        tau = np.full((B, H), time)
        remaining = 1.0 - time

        def one_step_estimate(xt):
            v_t = model_velocity(model, obs, xt, tau)
            return xt + v_t * remaining, v_t

        tape = nd.Tape()
        xt = tape.leaf(x)
        try:
            x1, v_t = one_step_estimate(xt)
        except NumericError as exc:
            raise NumericError(f"guided step {k}: {exc}") from exc
        v = v_t.data
        err = W * (y - x1.data)
        with np.errstate(over="ignore", invalid="ignore"):
            adj = tape.backward(x1, err)
        pulled = adj[xt.index] if adj[xt.index] is not None else np.zeros_like(x)
        if not np.isfinite(pulled).all():
            raise NumericError(f"non-finite vector-Jacobian product at guided step {k}")
        if counter is not None:
            counter.forward_passes += 1
            counter.vjp_passes += 1
        gamma = min(1.0 - time, cfg.gamma_max)
        v = v + (gamma * cfg.beta) * pulled
        x = x + dt * v
        x = np.where(pmask, y, x)
        if not np.isfinite(x).all():
            raise NumericError(f"non-finite guided state at step {k}")
        time = time + dt
    return x[0] if single else x
