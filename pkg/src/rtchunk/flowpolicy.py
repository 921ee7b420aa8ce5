"""Flow-matching action-chunk policy with per-token flow times.

The velocity field sees every action token together with its own flow time,
so a chunk can mix clean prefix tokens (time 1) with noisy postfix tokens.
All public functions accept either a single example or a leading batch axis.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import ndcore as nd
from .ndcore import NumericError, Tensor

LOSS_EPS = 1e-8


class DomainError(ValueError):
    pass


@dataclass(frozen=True)
class Descriptor:
    obs_dim: int
    action_dim: int
    horizon: int
    width: int = 128
    depth: int = 3
    time_dim: int = 16
    token_mixing: bool = True
    activation: str = "silu"

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class PolicyParams:
    descriptor: Descriptor
    weights: dict[str, np.ndarray] = field(default_factory=dict)

    def n_params(self) -> int:
        return int(sum(w.size for w in self.weights.values()))

    def copy(self) -> "PolicyParams":
        return PolicyParams(self.descriptor, {k: v.copy() for k, v in self.weights.items()})


@dataclass
class OpCounter:
    """Network evaluations issued by a sampler (one batched call counts once)."""

    forward_passes: int = 0
    vjp_passes: int = 0


def _token_in_dim(desc: Descriptor) -> int:
    return desc.action_dim + desc.time_dim + desc.horizon + desc.obs_dim


def init_params(desc: Descriptor, rng: np.random.Generator) -> PolicyParams:
    W, H = desc.width, desc.horizon

    def dense(fan_in, fan_out, scale=1.0):
        return rng.normal(0.0, scale / np.sqrt(fan_in), size=(fan_in, fan_out))

    w = {"in.w": dense(_token_in_dim(desc), W), "in.b": np.zeros(W)}
    for l in range(desc.depth):
        if desc.token_mixing:
            w[f"mix{l}.a"] = dense(H, H).T.copy()
            w[f"mix{l}.b"] = dense(H, H, 0.5).T.copy()
        w[f"mlp{l}.w1"] = dense(W, W)
        w[f"mlp{l}.b1"] = np.zeros(W)
        w[f"mlp{l}.w2"] = dense(W, W, 0.5)
        w[f"mlp{l}.b2"] = np.zeros(W)
    w["out.w"] = dense(W, desc.action_dim, 0.1)
    w["out.b"] = np.zeros(desc.action_dim)
    return PolicyParams(desc, w)


def time_embedding(tau: np.ndarray, dim: int) -> np.ndarray:
    """Sinusoidal features of flow time, shape tau.shape + (dim,)."""
    half = dim // 2
    freqs = np.pi * np.exp(np.linspace(0.0, np.log(100.0), half))
    ang = tau[..., None] * freqs
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=-1)


def _check_tau(tau: np.ndarray) -> None:
    if np.any(tau < 0.0) or np.any(tau > 1.0):
        raise DomainError("flow time outside [0, 1]")


def velocity(params: PolicyParams, obs: np.ndarray, x, tau: np.ndarray, weights=None) -> Tensor:
    """Batched velocity field. obs (B, O), x (B, H, A) array or Tensor, tau (B, H).

    `weights` overrides params.weights (used to trace gradients w.r.t. parameters).
    """
    desc = params.descriptor
    w = params.weights if weights is None else weights
    B, H = tau.shape
    act = lambda z: nd.act(z, desc.activation)  # noqa: E731

    const = np.concatenate(
        [
            time_embedding(tau, desc.time_dim),
            np.broadcast_to(np.eye(H), (B, H, H)),
            np.broadcast_to(obs[:, None, :], (B, H, obs.shape[-1])),
        ],
        axis=-1,
    )
    h = nd.affine(nd.concat([x, const], axis=-1), w["in.w"], w["in.b"])
    for l in range(desc.depth):
        if desc.token_mixing:
            h = h + nd.matmul(w[f"mix{l}.b"], act(nd.matmul(w[f"mix{l}.a"], h)))
        inner = act(nd.affine(h, w[f"mlp{l}.w1"], w[f"mlp{l}.b1"]))
        h = h + nd.affine(inner, w[f"mlp{l}.w2"], w[f"mlp{l}.b2"])
    return nd.affine(act(h), w["out.w"], w["out.b"])


def _batched(obs, x, tau):
    single = np.ndim(obs) == 1
    if single:
        obs = np.asarray(obs)[None]
        x = np.asarray(x)[None] if not isinstance(x, Tensor) else x
        tau = np.asarray(tau)[None]
    return single, np.asarray(obs, dtype=np.float64), x, np.asarray(tau, dtype=np.float64)


def interpolate(chunk: np.ndarray, eps: np.ndarray, tau: np.ndarray) -> np.ndarray:
    """x = tau * chunk + (1 - tau) * eps, row by row."""
    tau = np.asarray(tau, dtype=np.float64)
    _check_tau(tau)
    if chunk.shape != eps.shape or chunk.shape[:-1] != tau.shape:
        raise DomainError(f"shape mismatch: chunk {chunk.shape}, eps {eps.shape}, tau {tau.shape}")
    t = tau[..., None]
    return t * chunk + (1.0 - t) * eps


def forward(params: PolicyParams, obs, x, tau) -> np.ndarray:
    """Velocity prediction as a plain array of shape (H, action_dim) or (B, H, action_dim)."""
    single, obs, x, tau = _batched(obs, x, tau)
    _check_tau(tau)
    try:
        v = velocity(params, obs, x, tau).data
    except NumericError as exc:
        raise NumericError(f"forward produced a non-finite value: {exc}") from exc
    return v[0] if single else v


# --- losses -------------------------------------------------------------------


def _delay_vector(d, B: int, H: int) -> np.ndarray:
    d = np.broadcast_to(np.asarray(d, dtype=np.int64), (B,))
    if np.any(d < 0) or np.any(d > H):
        raise DomainError(f"delay must lie in [0, {H}]")
    return d


def prefix_mask(d, B: int, H: int) -> np.ndarray:
    return np.arange(H)[None, :] < _delay_vector(d, B, H)[:, None]


def draw_flow_noise(rng: np.random.Generator, chunk_shape: tuple) -> tuple[np.ndarray, np.ndarray]:
    """Noise then one shared flow time per sample (this draw order is part of the contract)."""
    eps = rng.standard_normal(chunk_shape)
    tau = rng.uniform(0.0, 1.0, size=chunk_shape[0])
    return eps, tau


def flow_inputs(chunk: np.ndarray, d, eps: np.ndarray, tau: np.ndarray):
    """Noisy model input, per-token times, regression target and postfix mask."""
    B, H, _ = chunk.shape
    pmask = prefix_mask(d, B, H)
    tok_tau = np.where(pmask, 1.0, tau[:, None])
    x_tau = tok_tau[..., None] * chunk + (1.0 - tok_tau[..., None]) * eps
    target = chunk - eps
    return x_tau, tok_tau, target, ~pmask


def postfix_mse(pred, target: np.ndarray, postfix: np.ndarray) -> Tensor:
    """Squared error summed over postfix rows / (postfix element count + 1e-8)."""
    m = np.broadcast_to(postfix[..., None], target.shape).astype(np.float64)
    diff = pred - target
    return nd.reduce_sum(diff * diff * m) * (1.0 / (m.sum() + LOSS_EPS))


def _loss_closure(params, obs, chunk, d, eps, tau):
    x_tau, tok_tau, target, postfix = flow_inputs(chunk, d, eps, tau)

    def f(weights):
        pred = velocity(params, obs, x_tau, tok_tau, weights=weights)
        return postfix_mse(pred, target, postfix)

    return f


def _as_batch(obs, chunk):
    obs = np.asarray(obs, dtype=np.float64)
    chunk = np.asarray(chunk, dtype=np.float64)
    if chunk.ndim == 2:
        obs, chunk = obs[None], chunk[None]
    return obs, chunk


def prefix_loss_and_grad(params: PolicyParams, obs, chunk, d, rng: np.random.Generator):
    """Prefix-conditioned loss and its gradient w.r.t. every weight."""
    obs, chunk = _as_batch(obs, chunk)
    _delay_vector(d, chunk.shape[0], chunk.shape[1])
    eps, tau = draw_flow_noise(rng, chunk.shape)
    return nd.value_and_grad(_loss_closure(params, obs, chunk, d, eps, tau), params.weights)


def prefix_loss(params: PolicyParams, obs, chunk, d, rng: np.random.Generator) -> float:
    """Loss with the first `d` rows given as clean, time-1 tokens and masked out of the error."""
    obs, chunk = _as_batch(obs, chunk)
    _delay_vector(d, chunk.shape[0], chunk.shape[1])
    eps, tau = draw_flow_noise(rng, chunk.shape)
    return float(_loss_closure(params, obs, chunk, d, eps, tau)(params.weights).data)


def fm_loss(params: PolicyParams, obs, chunk, rng: np.random.Generator) -> float:
    return prefix_loss(params, obs, chunk, 0, rng)


def fm_loss_and_grad(params: PolicyParams, obs, chunk, rng: np.random.Generator):
    return prefix_loss_and_grad(params, obs, chunk, 0, rng)


# --- samplers -----------------------------------------------------------------


def model_velocity(model, obs: np.ndarray, x, tau: np.ndarray) -> Tensor:
    """Evaluate either a PolicyParams network or any callable ``(obs, x, tau) -> Tensor``."""
    if isinstance(model, PolicyParams):
        return velocity(model, obs, x, tau)
    return model(obs, x, tau)


def model_shape(model) -> tuple[int, int]:
    if isinstance(model, PolicyParams):
        return model.descriptor.horizon, model.descriptor.action_dim
    return model.horizon, model.action_dim


def _euler(model, obs, prefix, d, num_steps, rng, counter):
    if num_steps < 1:
        raise DomainError("num_steps must be >= 1")
    single = np.ndim(obs) == 1
    obs = np.atleast_2d(np.asarray(obs, dtype=np.float64))
    B = obs.shape[0]
    H, A = model_shape(model)
    x = rng.standard_normal((B, H, A))
    pmask = prefix_mask(d, B, H)
    if prefix is None:
        prefix = np.zeros((B, H, A))
    prefix = np.asarray(prefix, dtype=np.float64).reshape(B, H, A)
    m3 = pmask[..., None]
    time = 0.0
    dt = 1.0 / num_steps
    for k in range(num_steps):
        x = np.where(m3, prefix, x)
        tau = np.where(pmask, 1.0, time)
        try:
            v = model_velocity(model, obs, x, tau).data
        except NumericError as exc:
            raise NumericError(f"sampler step {k}: {exc}") from exc
        if counter is not None:
            counter.forward_passes += 1
        x = x + dt * v
        if not np.isfinite(x).all():
            raise NumericError(f"non-finite sampler state at step {k}")
        time = time + dt
    x = np.where(m3, prefix, x)
    return x[0] if single else x


def sample(model, obs, num_steps: int, rng: np.random.Generator, counter: OpCounter | None = None) -> np.ndarray:
    """Plain Euler integration of the velocity field from noise (time 0) to data (time 1)."""
    return _euler(model, obs, None, 0, num_steps, rng, counter)


def sample_with_prefix(
    model,
    obs,
    prefix: np.ndarray,
    d,
    num_steps: int,
    rng: np.random.Generator,
    counter: OpCounter | None = None,
) -> np.ndarray:
    """Euler sampling with rows ``[0, d)`` pinned to `prefix` at flow time 1.

    `prefix` is an H-row buffer; rows at or beyond `d` are ignored.
    """
    H, _ = model_shape(model)
    if np.any(np.asarray(d) < 0) or np.any(np.asarray(d) > H):
        raise DomainError(f"delay must lie in [0, {H}]")
    return _euler(model, obs, prefix, d, num_steps, rng, counter)
