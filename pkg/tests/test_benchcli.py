import json
import subprocess
import sys

import mpmath
import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from rtchunk import benchcli as bc
from rtchunk import envkit as ek
from rtchunk import flowpolicy as fp
from rtchunk import trainer as tr
from rtchunk.executor import RolloutRecord
from rtchunk.guidance import GuidanceConfig

mpmath.mp.dps = 50


def wilson_mp(k, n, z=1.96):
    k, n, z = mpmath.mpf(k), mpmath.mpf(n), mpmath.mpf(z)
    p = k / n
    denom = 1 + z**2 / n
    center = (p + z**2 / (2 * n)) / denom
    half = z * mpmath.sqrt(p * (1 - p) / n + z**2 / (4 * n**2)) / denom
    return max(mpmath.mpf(0), center - half), min(mpmath.mpf(1), center + half)


def test_wilson_known_case_against_high_precision():
    lo, hi = bc.wilson_interval(1900, 2048)
    mlo, mhi = wilson_mp(1900, 2048)
    assert abs(lo - float(mlo)) < 1e-12 and abs(hi - float(mhi)) < 1e-12


def test_wilson_random_pairs_against_high_precision():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        n = int(rng.integers(1, 5000))
        k = int(rng.integers(0, n + 1))
        lo, hi = bc.wilson_interval(k, n)
        mlo, mhi = wilson_mp(k, n)
        assert abs(lo - float(mlo)) < 1e-12 and abs(hi - float(mhi)) < 1e-12


@pytest.mark.parametrize("n", [1, 2, 17, 512, 2048])
def test_wilson_boundaries(n):
    assert bc.wilson_interval(0, n)[0] == 0.0
    assert bc.wilson_interval(n, n)[1] == 1.0


@given(st.integers(1, 10_000).flatmap(lambda n: st.tuples(st.integers(0, n), st.just(n))))
def test_wilson_contains_point_estimate(kn):
    k, n = kn
    lo, hi = bc.wilson_interval(k, n)
    assert 0.0 <= lo <= k / n <= hi <= 1.0


@pytest.mark.parametrize("k,n,z", [(-1, 5, 1.96), (6, 5, 1.96), (0, 0, 1.96), (1, 2, 0.0)])
def test_wilson_domain_errors(k, n, z):
    with pytest.raises(ValueError):
        bc.wilson_interval(k, n, z)


def _record(actions, switches):
    n = len(actions)
    return RolloutRecord(np.zeros((n + 1, 2)), np.asarray(actions, float), switches, True, ek.SUCCESS, n, 0.0)


def test_continuity_constant_actions_have_no_jumps():
    m = bc.continuity_metric(_record(np.ones((10, 2)), [0, 3, 6, 9]))
    assert m["max_jump"] == 0.0 and m["mean_jump_at_switch"] == 0.0 and m["mean_jump_within_chunk"] == 0.0


def test_continuity_separates_switch_and_within_jumps():
    acts = np.zeros((6, 2))
    acts[3:] = [3.0, 4.0]  # one jump of length 5 into tick 3
    m = bc.continuity_metric(_record(acts, [0, 3]))
    assert m["mean_jump_at_switch"] == 5.0 and m["max_jump"] == 5.0
    assert m["mean_jump_within_chunk"] == 0.0


def test_sweep_spec_rejects_all_bad_cells_up_front():
    spec = bc.SweepSpec(delays=[0, 6, 7], s_rule="3", n_rollouts=1)
    with pytest.raises(bc.SweepError, match=r"d=6.*d=7"):
        spec.validate()


def tiny_ckpt(conditioning, seed):
    desc = fp.Descriptor(ek.OBS_DIM, 2, 8, width=8, depth=1, time_dim=4)
    return tr.Checkpoint(
        params=fp.init_params(desc, np.random.default_rng(seed)),
        obs_mean=np.zeros(ek.OBS_DIM),
        obs_std=np.ones(ek.OBS_DIM),
        action_mean=np.zeros(2),
        action_std=np.full(2, 0.6),
        conditioning=conditioning,
    )


SHORT_ENV = ek.EnvConfig(max_ticks=40)


@pytest.fixture(scope="module")
def ckpts():
    return {"unconditioned": tiny_ckpt(False, 0), "conditioned": tiny_ckpt(True, 1)}


def small_spec(**kw):
    base = dict(delays=[0, 2], n_rollouts=24, shard_size=10, num_steps=2, seed_base=5)
    base.update(kw)
    return bc.SweepSpec(**base)


def test_sweep_structure_and_byte_identical_rerun(ckpts, tmp_path):
    a = bc.sweep(small_spec(), ckpts, SHORT_ENV, out_dir=tmp_path / "a")
    bc.sweep(small_spec(), ckpts, SHORT_ENV, out_dir=tmp_path / "b")
    text = (tmp_path / "a" / "sweep.csv").read_text()
    assert text == (tmp_path / "b" / "sweep.csv").read_text()
    rows = bc.read_csv_text(text)
    assert len(rows) == 4 * 2 == len(a)
    assert list(rows[0]) == bc.CSV_COLUMNS
    for r in rows:
        assert r["successes"] <= r["n"] == 24
        assert r["wilson_lo"] <= r["rate"] <= r["wilson_hi"]
    costs = {(r["strategy"], r["d"]): r["vjp_passes"] for r in rows}
    assert costs[("inference_rtc", 2)] == 2 and costs[("training_rtc", 2)] == 0
    assert (tmp_path / "a" / "sweep.svg").read_text().startswith("<svg")


def test_parallel_sweep_matches_serial(ckpts):
    serial = bc.results_to_csv(bc.sweep(small_spec(), ckpts, SHORT_ENV))
    parallel = bc.results_to_csv(bc.sweep(small_spec(), ckpts, SHORT_ENV, workers=2))
    assert serial == parallel


def test_zero_delay_async_strategies_agree_with_shared_checkpoint(ckpts):
    shared = {"unconditioned": ckpts["unconditioned"], "conditioned": ckpts["unconditioned"]}
    spec = small_spec(delays=[0], strategies=["naive_async", "inference_rtc", "training_rtc"],
                      guidance=GuidanceConfig(beta=0.0))
    res = bc.sweep(spec, shared, SHORT_ENV, strict=False)
    assert len({r.successes for r in res}) == 1
    assert len({r.mean_ticks for r in res}) == 1


def test_sweep_enforces_checkpoint_families(ckpts):
    swapped = {"unconditioned": ckpts["conditioned"], "conditioned": ckpts["unconditioned"]}
    with pytest.raises(tr.ConfigError):
        bc.sweep(small_spec(), swapped, SHORT_ENV)


def test_plot_from_csv(ckpts, tmp_path):
    bc.sweep(small_spec(strategies=["sync"]), ckpts, SHORT_ENV, out_dir=tmp_path)
    svg = tmp_path / "out.svg"
    bc.main(["plot", "--csv", str(tmp_path / "sweep.csv"), "--out", str(svg)])
    text = svg.read_text()
    assert text.count("<polygon") == 1 and "sync" in text


def test_cli_end_to_end(tmp_path, monkeypatch, capsys):
    monkeypatch.setenv(bc.OUT_DIR_ENV, str(tmp_path))
    bc.main(["gen-data", "--episodes", "6", "--seed", "1"])
    info = json.loads(capsys.readouterr().out)
    assert info["path"] == str(tmp_path / "dataset.bin")
    cfg = tmp_path / "train.toml"
    cfg.write_text("[train]\nepochs = 1\nwidth = 8\ndepth = 1\ntime_dim = 4\nbatch_size = 64\n")
    bc.main(["train", "--data", info["path"], "--config", str(cfg)])
    plain = json.loads(capsys.readouterr().out)["path"]
    bc.main(["train", "--data", info["path"], "--config", str(cfg), "--conditioning", "--delay-kind", "uniform",
             "--delay-max", "2", "--warm-start", plain, "--epochs", "1"])
    cond = json.loads(capsys.readouterr().out)["path"]
    assert tr.load(cond).meta["epochs_seen"] == 2
    bc.main(["eval", "--ckpt", cond, "--strategy", "training_rtc", "--delay", "1", "--n", "4", "--num-steps", "2"])
    ev = json.loads(capsys.readouterr().out)
    assert ev["n"] == 4 and ev["s"] == 1
    bc.main(["sweep", "--unconditioned", plain, "--conditioned", cond, "--delays", "0,1", "--n", "4", "--num-steps", "2"])
    out = capsys.readouterr().out
    assert out.splitlines()[0] == ",".join(bc.CSV_COLUMNS)
    assert (tmp_path / "sweep.csv").read_text() == out


def test_cli_rejects_invalid_sweep(tmp_path):
    proc = subprocess.run(
        [sys.executable, "-m", "rtchunk.benchcli", "sweep", "--unconditioned", "missing.ckpt", "--delays", "5", "--s-rule", "4"],
        capture_output=True, text=True, cwd=tmp_path,
    )
    assert proc.returncode == 2
    assert "d=5" in proc.stderr
