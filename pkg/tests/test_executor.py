import numpy as np
import pytest

from rtchunk import envkit as ek
from rtchunk import flowpolicy as fp
from rtchunk.executor import (
    DelayConfig,
    ExpertPolicy,
    LearnedPolicy,
    Strategy,
    build_overlap_target,
    extract_prefix,
    run_episode,
    run_episodes,
)
from rtchunk.guidance import GuidanceConfig
from rtchunk.trainer import Checkpoint, ConfigError

# a long, hazard-free episode so schedule properties can be read off every tick
QUIET = ek.EnvConfig(max_ticks=60, hazard_amp=0.0, hazard_x=5.0, r_goal=0.0)


class TickTagPolicy:
    """Chunk row i encodes (launch tick, i) so executed actions reveal their origin."""

    conditioning = None
    horizon = 8

    def propose(self, strategy, state, prev, offset, dcfg, rng, counter):
        n = state.pos.shape[0]
        chunk = np.zeros((n, self.horizon, 2))
        chunk[..., 0] = state.tick[:, None] / 1000.0
        chunk[..., 1] = np.arange(self.horizon) / 1000.0
        if prev is not None and strategy is Strategy.TRAINING_RTC:
            chunk[:, : dcfg.d] = extract_prefix(prev, offset, dcfg.d)[:, : dcfg.d]
        return chunk

    def to_env(self, chunk):
        return chunk


def decode(actions):
    return np.rint(actions[:, 0] * 1000).astype(int), np.rint(actions[:, 1] * 1000).astype(int)


def tiny_ckpt(conditioning=False, seed=0):
    desc = fp.Descriptor(ek.OBS_DIM, 2, 8, width=8, depth=2, time_dim=4)
    return Checkpoint(
        params=fp.init_params(desc, np.random.default_rng(seed)),
        obs_mean=np.zeros(ek.OBS_DIM),
        obs_std=np.ones(ek.OBS_DIM),
        action_mean=np.zeros(2),
        action_std=np.full(2, 0.5),
        conditioning=conditioning,
    )


def test_extract_prefix_rows():
    prev = np.arange(16.0).reshape(8, 2)
    buf = extract_prefix(prev, 3, 2)
    np.testing.assert_array_equal(buf[:2], prev[3:5])
    np.testing.assert_array_equal(buf[2:], 0.0)


def test_overlap_target_rows_and_prefix_agree():
    prev = np.random.default_rng(0).normal(size=(8, 2))
    tgt = build_overlap_target(prev, 3, 2, 3, 8)
    np.testing.assert_array_equal(tgt.y[:5], prev[3:8])
    np.testing.assert_array_equal(tgt.y[:2], extract_prefix(prev, 3, 2)[:2])


@pytest.mark.parametrize("H,s,d", [(8, 4, 5), (8, 0, 0), (8, 9, 0), (8, 1, -1)])
def test_invalid_delay_configs_rejected(H, s, d):
    with pytest.raises(fp.DomainError):
        DelayConfig(H, s, d)


@pytest.mark.parametrize("d", [1, 2, 3, 4])
def test_async_switches_are_spaced_by_s_and_causal(d):
    s = max(d, 1)
    r = run_episodes(Strategy.NAIVE_ASYNC, TickTagPolicy(), QUIET, DelayConfig(8, s, d), 4, seed=1)
    assert np.all(np.diff(r.switch_ticks) == s)
    rec = r.record(0)
    src, row = decode(rec.actions)
    for t in range(s, rec.length):
        assert src[t] <= t - d
        assert r.source_obs_tick[t] <= t - d
    # after the first switch every chunk starts executing at row d
    for t in rec.switch_ticks[1:]:
        assert row[t] == d


def test_first_chunk_runs_from_row_zero_without_delay():
    r = run_episodes(Strategy.NAIVE_ASYNC, TickTagPolicy(), QUIET, DelayConfig(8, 4, 4), 1, seed=2)
    src, row = decode(r.actions[0])
    np.testing.assert_array_equal(src[:4], 0)
    np.testing.assert_array_equal(row[:4], [0, 1, 2, 3])
    # the second chunk was launched at tick 0 and starts at row d
    np.testing.assert_array_equal(src[4:8], 0)
    np.testing.assert_array_equal(row[4:8], [4, 5, 6, 7])


def test_sync_holds_last_action_while_waiting():
    d, s = 3, 2
    r = run_episodes(Strategy.SYNC, TickTagPolicy(), QUIET, DelayConfig(8, s, d), 1, seed=3)
    a = r.actions[0]
    src, row = decode(a)
    np.testing.assert_array_equal(row[:2], [0, 1])
    # ticks 2..4 repeat the last executed action, then the fresh chunk starts at row 0
    for t in range(2, 5):
        np.testing.assert_array_equal(a[t], a[1])
    assert row[5] == 0 and src[5] == 2
    assert r.switch_ticks[:3] == [0, 5, 10]


@pytest.mark.parametrize("d,s", [(1, 1), (2, 3), (3, 3), (4, 4)])
def test_training_rtc_prefix_is_what_ran_during_inference(d, s):
    class Recorder(TickTagPolicy):
        def propose(self, *args):
            out = super().propose(*args)
            self.chunks.append(out[0].copy())
            return out

    pol = Recorder()
    pol.chunks = []
    r = run_episodes(Strategy.TRAINING_RTC, pol, QUIET, DelayConfig(8, s, d), 1, seed=4)
    # chunk k arrives at switch_ticks[k]; its prefix spans the d ticks before that switch
    for k, t in enumerate(r.switch_ticks[1:], start=1):
        np.testing.assert_array_equal(pol.chunks[k][:d], r.actions[0, t - d : t])


def test_learned_training_rtc_switch_actions_are_copied():
    class Recorder(LearnedPolicy):
        def propose(self, *args):
            out = super().propose(*args)
            self.chunks.append(out.copy())
            return out

    pol = Recorder(tiny_ckpt(conditioning=True), num_steps=3, env_cfg=QUIET)
    pol.chunks = []
    d, s = 2, 3
    r = run_episodes(Strategy.TRAINING_RTC, pol, QUIET, DelayConfig(8, s, d), 2, seed=5)
    # chunk k+1 was sampled with chunk k's rows [offset, offset + d) pinned
    for k in range(1, len(pol.chunks) - 1):
        prev, new = pol.chunks[k], pol.chunks[k + 1]
        assert new[:, :d].tobytes() == prev[:, s : s + d].tobytes()
    assert r.vjp_passes == 0


def test_zero_delay_strategies_execute_identical_trajectories():
    ck = tiny_ckpt(seed=6)
    dcfg = DelayConfig(8, 1, 0)
    pol = LearnedPolicy(ck, num_steps=3, guidance=GuidanceConfig(beta=0.0, num_steps=3))
    runs = [run_episodes(st, pol, ek.EnvConfig(), dcfg, 16, seed=7, strict=False) for st in
            (Strategy.NAIVE_ASYNC, Strategy.INFERENCE_RTC, Strategy.TRAINING_RTC)]
    for other in runs[1:]:
        assert other.actions.tobytes() == runs[0].actions.tobytes()
        np.testing.assert_array_equal(other.status, runs[0].status)


def test_checkpoint_family_is_enforced():
    dcfg = DelayConfig(8, 2, 2)
    with pytest.raises(ConfigError):
        run_episodes(Strategy.TRAINING_RTC, LearnedPolicy(tiny_ckpt(False)), QUIET, dcfg, 1, seed=0)
    with pytest.raises(ConfigError):
        run_episodes(Strategy.NAIVE_ASYNC, LearnedPolicy(tiny_ckpt(True)), QUIET, dcfg, 1, seed=0)


def test_horizon_mismatch_rejected():
    with pytest.raises(ConfigError):
        run_episodes(Strategy.SYNC, TickTagPolicy(), QUIET, DelayConfig(6, 1, 0), 1, seed=0)


def test_rollouts_are_reproducible():
    pol = LearnedPolicy(tiny_ckpt(), num_steps=2)
    a = run_episodes(Strategy.INFERENCE_RTC, pol, QUIET, DelayConfig(8, 2, 2), 3, seed=8)
    b = run_episodes(Strategy.INFERENCE_RTC, pol, QUIET, DelayConfig(8, 2, 2), 3, seed=8)
    assert a.actions.tobytes() == b.actions.tobytes()
    assert a.vjp_passes == a.fwd_passes and a.fwd_passes > 0


def test_single_episode_record():
    rec = run_episode(Strategy.NAIVE_ASYNC, TickTagPolicy(), QUIET, DelayConfig(8, 2, 1), seed=9)
    assert rec.length == QUIET.max_ticks and rec.status == ek.TIMEOUT
    assert rec.positions.shape == (rec.length + 1, 2)


def test_chunked_expert_reproduces_closed_loop_expert(monkeypatch):
    # sync at d=0, s=1 re-plans from the current state every tick, which is the closed-loop expert
    n = 256
    *_, closed = ek.rollout_expert(np.random.default_rng(0), n)
    rng = np.random.default_rng(0)
    start = ek.reset(rng, n)
    style = ek.sample_style(rng, n)
    monkeypatch.setattr(ek, "reset", lambda rng, n, cfg=None: start)
    r = run_episodes(Strategy.SYNC, ExpertPolicy(style, 8), ek.EnvConfig(), DelayConfig(8, 1, 0), n, seed=0)
    np.testing.assert_array_equal(r.status, closed.status)
    assert r.success.mean() >= 0.95
