import numpy as np
import pytest

from rtchunk import flowpolicy as fp
from rtchunk import ndcore as nd
from rtchunk.guidance import GuidanceConfig, OverlapTarget, guided_sample, soft_mask_weights


class AffineModel:
    """v(x, t) = a - x for a single action dimension; a is fixed per token."""

    action_dim = 1

    def __init__(self, a):
        self.a = np.asarray(a, dtype=np.float64).reshape(-1, 1)
        self.horizon = self.a.shape[0]

    def __call__(self, obs, x, tau):
        x = x if isinstance(x, nd.Tensor) else nd.constant(x)
        return x * -1.0 + np.broadcast_to(self.a, x.shape).copy()


def dense_guided_oracle(a, y, x0, d, s, cfg):
    """Each guided Euler step is affine in x: build it as an (H+1)x(H+1) matrix and compose."""
    H = len(a)
    W = soft_mask_weights(H, d, s, cfg.decay_c)
    P = np.diag((np.arange(H) < d).astype(float))
    I = np.eye(H)

    def homog(M, c):
        T = np.eye(H + 1)
        T[:H, :H], T[:H, H] = M, c
        return T

    overwrite = homog(I - P, P @ y)
    total = np.eye(H + 1)
    dt = 1.0 / cfg.num_steps
    t = 0.0
    for _ in range(cfg.num_steps):
        g = min(1.0 - t, cfg.gamma_max) * cfg.beta
        # x1 = t x + (1 - t) a, so the pullback of W(y - x1) is t W (y - x1)
        M = I + dt * (-I + g * t * np.diag(W) @ (-t * I))
        c = dt * (a + g * t * W * (y - (1.0 - t) * a))
        total = overwrite @ homog(M, c) @ overwrite @ total
        t += dt
    return (total @ np.append(x0, 1.0))[:H]


def test_soft_mask_pure_hard_mask_when_overlap_equals_prefix():
    np.testing.assert_array_equal(soft_mask_weights(8, 3, 5, 0.7), [1, 1, 1, 0, 0, 0, 0, 0])


def test_soft_mask_decay_from_zero_delay():
    c = 0.6
    np.testing.assert_allclose(soft_mask_weights(8, 0, 4, c), [c, c**2, c**3, c**4, 0, 0, 0, 0], rtol=1e-15)


@pytest.mark.parametrize("H,d,s", [(8, 2, 3), (8, 0, 1), (5, 4, 1), (6, 1, 6 - 1)])
def test_soft_mask_is_bounded_and_non_increasing(H, d, s):
    w = soft_mask_weights(H, d, s, 0.5)
    assert np.all((w >= 0) & (w <= 1))
    assert np.all(np.diff(w) <= 0)


def test_soft_mask_rejects_bad_delay():
    with pytest.raises(fp.DomainError):
        soft_mask_weights(8, 5, 4, 0.5)


def test_config_and_target_validation():
    with pytest.raises(fp.DomainError):
        GuidanceConfig(decay_c=1.0)
    with pytest.raises(fp.DomainError):
        GuidanceConfig(beta=-1.0)
    with pytest.raises(fp.DomainError):
        OverlapTarget(y=np.zeros((8, 2)), d=5, s=4)


@pytest.mark.parametrize("beta,d,s", [(1.0, 0, 4), (1.0, 2, 3), (3.0, 3, 2), (0.5, 1, 7)])
def test_affine_model_matches_dense_oracle(beta, d, s):
    rng = np.random.default_rng(int(beta * 10) + d)
    H = 8
    a, y = rng.normal(size=H), rng.normal(size=H)
    cfg = GuidanceConfig(beta=beta, decay_c=0.6, num_steps=12)
    model = AffineModel(a)
    got = guided_sample(model, np.zeros(1), OverlapTarget(y=y[:, None], d=d, s=s), cfg, np.random.default_rng(5))
    x0 = np.random.default_rng(5).standard_normal((1, H, 1))[0, :, 0]
    want = dense_guided_oracle(a, y, x0, d, s, cfg)
    assert np.max(np.abs(got[:, 0] - want)) < 1e-6


def test_guidance_pulls_affine_sample_towards_target():
    a, y = np.zeros(8), np.full(8, 2.0)
    model = AffineModel(a)
    target = OverlapTarget(y[:, None], 0, 4)
    free = guided_sample(model, np.zeros(1), target, GuidanceConfig(beta=0.0), np.random.default_rng(6))
    pulled = guided_sample(model, np.zeros(1), target, GuidanceConfig(beta=2.0), np.random.default_rng(6))
    assert np.all(np.abs(pulled[:4, 0] - 2.0) < np.abs(free[:4, 0] - 2.0))


def small_policy():
    desc = fp.Descriptor(3, 2, 8, width=8, depth=2, time_dim=4)
    return fp.init_params(desc, np.random.default_rng(0))


def test_zero_beta_zero_delay_is_plain_sampling():
    p = small_policy()
    obs = np.random.default_rng(1).normal(size=(4, 3))
    y = np.random.default_rng(2).normal(size=(4, 8, 2))
    a = guided_sample(p, obs, OverlapTarget(y, 0, 3), GuidanceConfig(beta=0.0, num_steps=6), np.random.default_rng(3))
    b = fp.sample(p, obs, 6, np.random.default_rng(3))
    assert a.tobytes() == b.tobytes()


def test_prefix_rows_are_returned_verbatim_for_every_delay():
    p = small_policy()
    rng = np.random.default_rng(4)
    for s in range(1, 9):
        for d in range(0, 8 - s + 1):
            y = rng.normal(size=(3, 8, 2)) * 4
            out = guided_sample(p, rng.normal(size=(3, 3)), OverlapTarget(y, d, s), GuidanceConfig(beta=2.0, num_steps=3), rng)
            assert out[:, :d].tobytes() == y[:, :d].tobytes()


def test_each_step_costs_one_forward_and_one_vjp():
    p = small_policy()
    c = fp.OpCounter()
    guided_sample(p, np.zeros(3), OverlapTarget(np.zeros((8, 2)), 2, 3), GuidanceConfig(num_steps=7), np.random.default_rng(0), c)
    assert (c.forward_passes, c.vjp_passes) == (7, 7)


def test_single_observation_returns_single_chunk():
    p = small_policy()
    out = guided_sample(p, np.zeros(3), OverlapTarget(np.zeros((8, 2)), 1, 2), GuidanceConfig(num_steps=2), np.random.default_rng(0))
    assert out.shape == (8, 2)


class ExplodingModel:
    horizon, action_dim = 8, 1

    def __call__(self, obs, x, tau):
        x = x if isinstance(x, nd.Tensor) else nd.constant(x)
        return x * 1e200


def test_non_finite_guided_state_is_reported():
    target = OverlapTarget(np.ones((8, 1)), 0, 4)
    with pytest.raises(nd.NumericError, match="step"):
        guided_sample(ExplodingModel(), np.zeros(1), target, GuidanceConfig(beta=1.0), np.random.default_rng(0))
