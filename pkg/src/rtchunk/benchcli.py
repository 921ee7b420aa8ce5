"""Benchmark harness: Wilson intervals, continuity metrics, delay sweeps, CSV/SVG output and the CLI."""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import math
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import envkit as ek
from . import trainer as tr
from .executor import BatchRollout, DelayConfig, LearnedPolicy, RolloutRecord, Strategy, check_compatible, run_episodes
from .guidance import GuidanceConfig

log = logging.getLogger(__name__)

OUT_DIR_ENV = "RTC_OUT_DIR"
CSV_COLUMNS = [
    "strategy",
    "d",
    "s",
    "n",
    "successes",
    "rate",
    "wilson_lo",
    "wilson_hi",
    "mean_ticks",
    "sem_ticks",
    "mean_switch_jump",
    "mean_within_jump",
    "fwd_passes",
    "vjp_passes",
    "seed_base",
]
ALL_STRATEGIES = [s.value for s in Strategy]


class SweepError(ValueError):
    pass


def wilson_interval(successes: int, n: int, z: float = 1.96) -> tuple[float, float]:
    """Wilson score interval for a binomial proportion, clipped to [0, 1]."""
    if n < 1 or not 0 <= successes <= n or z <= 0:
        raise ValueError(f"invalid Wilson inputs successes={successes}, n={n}, z={z}")
    p = successes / n
    z2 = z * z
    denom = 1.0 + z2 / n
    center = (p + z2 / (2 * n)) / denom
    half = z * math.sqrt(p * (1.0 - p) / n + z2 / (4.0 * n * n)) / denom
    lo = 0.0 if successes == 0 else max(0.0, center - half)
    hi = 1.0 if successes == n else min(1.0, center + half)
    return lo, hi


def _jumps(actions: np.ndarray, length: int, switch_ticks) -> tuple[np.ndarray, np.ndarray]:
    if length < 2:
        return np.zeros(0), np.zeros(0)
    j = np.linalg.norm(np.diff(actions[:length], axis=0), axis=-1)  # j[t-1] is the jump into tick t
    is_switch = np.zeros(length - 1, dtype=bool)
    for t in switch_ticks:
        if 0 < t < length:
            is_switch[t - 1] = True
    return j[is_switch], j[~is_switch]


def continuity_metric(record: RolloutRecord) -> dict:
    """Action jumps (L2 between consecutive executed actions), split by chunk switches."""
    sw, within = _jumps(record.actions, record.length, record.switch_ticks)
    return {
        "max_jump": float(sw.max()) if sw.size else 0.0,
        "mean_jump_at_switch": float(sw.mean()) if sw.size else float("nan"),
        "mean_jump_within_chunk": float(within.mean()) if within.size else float("nan"),
    }


def pooled_jumps(rollout: BatchRollout) -> tuple[np.ndarray, np.ndarray]:
    sw, within = [], []
    for i in range(rollout.actions.shape[0]):
        a, b = _jumps(rollout.actions[i], int(rollout.lengths[i]), rollout.switch_ticks)
        sw.append(a)
        within.append(b)
    return np.concatenate(sw), np.concatenate(within)


@dataclass
class SweepSpec:
    delays: list[int] = field(default_factory=lambda: [0, 1, 2, 3, 4])
    strategies: list[str] = field(default_factory=lambda: list(ALL_STRATEGIES))
    n_rollouts: int = 512
    s_rule: str = "max1"  # "max1" -> s = max(d, 1); otherwise an integer fixed s
    H: int = 8
    num_steps: int = 10
    seed_base: int = 0
    shard_size: int = 128
    guidance: GuidanceConfig = field(default_factory=GuidanceConfig)

    def s_for(self, d: int) -> int:
        return max(d, 1) if self.s_rule == "max1" else int(self.s_rule)

    def cells(self):
        return [(Strategy(st), d) for st in self.strategies for d in self.delays]

    def validate(self) -> None:
        bad = [(d, self.s_for(d)) for d in self.delays if not 0 <= d <= self.H - self.s_for(d) or self.s_for(d) < 1]
        if bad:
            raise SweepError("cells violate d <= H - s: " + ", ".join(f"(d={d}, s={s})" for d, s in bad))


@dataclass
class CellResult:
    strategy: str
    d: int
    s: int
    n: int
    successes: int
    rate: float
    wilson_lo: float
    wilson_hi: float
    mean_ticks: float
    sem_ticks: float
    mean_switch_jump: float
    mean_within_jump: float
    fwd_passes: float
    vjp_passes: float
    seed_base: int

    def row(self) -> list[str]:
        return [_fmt(getattr(self, c)) for c in CSV_COLUMNS]


def _fmt(x) -> str:
    if isinstance(x, float):
        return "nan" if math.isnan(x) else f"{x:.10g}"
    return str(x)


def shard_seed(seed_base: int, d: int, shard: int) -> np.random.SeedSequence:
    # independent of strategy so every strategy sees the same episodes and noise
    return np.random.SeedSequence([seed_base, d, shard])


def _run_shard(args):
    strategy, policy, env_cfg, dcfg, n, seed, strict = args
    r = run_episodes(strategy, policy, env_cfg, dcfg, n, seed, strict=strict)
    sw, within = pooled_jumps(r)
    return {
        "success": r.success,
        "lengths": r.lengths,
        "switch_jumps": sw,
        "within_jumps": within,
        "chunks": r.chunks,
        "fwd": r.fwd_passes,
        "vjp": r.vjp_passes,
    }


def _policy_for(strategy: Strategy, checkpoints: dict, spec: SweepSpec, env_cfg) -> LearnedPolicy:
    ckpt = checkpoints.get(strategy.value)
    if ckpt is None:
        ckpt = checkpoints["conditioned" if strategy.needs_conditioned else "unconditioned"]
    return LearnedPolicy(ckpt, spec.num_steps, replace(spec.guidance, num_steps=spec.num_steps), env_cfg)


def sweep(
    spec: SweepSpec,
    checkpoints: dict,
    env_cfg: ek.EnvConfig = ek.EnvConfig(),
    out_dir=None,
    workers: int = 1,
    strict: bool = True,
) -> list[CellResult]:
    """Run every (strategy, delay) cell; optionally write sweep.csv and sweep.svg to `out_dir`.

    `checkpoints` maps "unconditioned"/"conditioned" (or a strategy name) to a
    Checkpoint. With `strict`, checkpoint families are validated per strategy
    before any rollout.
    """
    spec.validate()
    policies = {st: _policy_for(st, checkpoints, spec, env_cfg) for st in {c[0] for c in spec.cells()}}
    if strict:
        for st, pol in policies.items():
            check_compatible(st, pol)

    n_shards = math.ceil(spec.n_rollouts / spec.shard_size)
    tasks, keys = [], []
    for st, d in spec.cells():
        dcfg = DelayConfig(spec.H, spec.s_for(d), d)
        for k in range(n_shards):
            n = min(spec.shard_size, spec.n_rollouts - k * spec.shard_size)
            tasks.append((st, policies[st], env_cfg, dcfg, n, shard_seed(spec.seed_base, d, k), strict))
            keys.append((st, d))

    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            outs = list(pool.map(_run_shard, tasks))
    else:
        outs = [_run_shard(t) for t in tasks]

    results = []
    for st, d in spec.cells():
        parts = [o for o, key in zip(outs, keys) if key == (st, d)]
        succ = np.concatenate([p["success"] for p in parts])
        lengths = np.concatenate([p["lengths"] for p in parts]).astype(np.float64)
        sw = np.concatenate([p["switch_jumps"] for p in parts])
        within = np.concatenate([p["within_jumps"] for p in parts])
        chunks = sum(p["chunks"] for p in parts)
        n = succ.size
        k = int(succ.sum())
        lo, hi = wilson_interval(k, n)
        results.append(
            CellResult(
                strategy=st.value,
                d=d,
                s=spec.s_for(d),
                n=n,
                successes=k,
                rate=k / n,
                wilson_lo=lo,
                wilson_hi=hi,
                mean_ticks=float(lengths.mean()),
                sem_ticks=float(lengths.std(ddof=1) / math.sqrt(n)) if n > 1 else 0.0,
                mean_switch_jump=float(sw.mean()) if sw.size else float("nan"),
                mean_within_jump=float(within.mean()) if within.size else float("nan"),
                fwd_passes=sum(p["fwd"] for p in parts) / chunks if chunks else 0.0,
                vjp_passes=sum(p["vjp"] for p in parts) / chunks if chunks else 0.0,
                seed_base=spec.seed_base,
            )
        )

    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        text = results_to_csv(results)
        (out / "sweep.csv").write_text(text)
        (out / "sweep.svg").write_text(render_svg(read_csv_text(text)))
    return results


def results_to_csv(results: list[CellResult]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for r in results:
        w.writerow(r.row())
    return buf.getvalue()


def read_csv_text(text: str) -> list[dict]:
    rows = list(csv.DictReader(io.StringIO(text)))
    for r in rows:
        for c in CSV_COLUMNS:
            if c == "strategy":
                continue
            r[c] = int(r[c]) if c in ("d", "s", "n", "successes", "seed_base") else float(r[c])
    return rows


_COLORS = {
    "sync": "#7f7f7f",
    "naive_async": "#d62728",
    "inference_rtc": "#1f77b4",
    "training_rtc": "#2ca02c",
}


def render_svg(rows: list[dict], width: int = 560, height: int = 380) -> str:
    """Solve rate vs delay with shaded Wilson intervals, as a standalone SVG document."""
    left, right, top, bottom = 60, 150, 20, 50
    pw, ph = width - left - right, height - top - bottom
    delays = sorted({r["d"] for r in rows}) or [0]
    dmin, dmax = delays[0], delays[-1]
    span = max(dmax - dmin, 1)

    def X(d):
        return left + pw * (d - dmin) / span

    def Y(p):
        return top + ph * (1.0 - p)

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">',
        f'<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>',
        f'<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="black"/>',
    ]
    for k in range(6):
        p = k / 5
        out.append(f'<line x1="{left - 4}" y1="{Y(p):.2f}" x2="{left}" y2="{Y(p):.2f}" stroke="black"/>')
        out.append(f'<text x="{left - 8}" y="{Y(p) + 4:.2f}" font-size="11" text-anchor="end">{p:.1f}</text>')
    for d in delays:
        out.append(f'<text x="{X(d):.2f}" y="{top + ph + 16}" font-size="11" text-anchor="middle">{d}</text>')
    out.append(f'<text x="{left + pw / 2:.2f}" y="{height - 12}" font-size="12" text-anchor="middle">inference delay d</text>')
    out.append(
        f'<text x="16" y="{top + ph / 2:.2f}" font-size="12" text-anchor="middle" '
        f'transform="rotate(-90 16 {top + ph / 2:.2f})">solve rate</text>'
    )
    strategies = list(dict.fromkeys(r["strategy"] for r in rows))
    for i, st in enumerate(strategies):
        pts = sorted((r for r in rows if r["strategy"] == st), key=lambda r: r["d"])
        color = _COLORS.get(st, "#9467bd")
        band = [(X(r["d"]), Y(r["wilson_hi"])) for r in pts] + [(X(r["d"]), Y(r["wilson_lo"])) for r in reversed(pts)]
        out.append(
            '<polygon points="' + " ".join(f"{x:.2f},{y:.2f}" for x, y in band) + f'" fill="{color}" fill-opacity="0.2" stroke="none"/>'
        )
        out.append(
            '<polyline points="' + " ".join(f"{X(r['d']):.2f},{Y(r['rate']):.2f}" for r in pts) + f'" fill="none" stroke="{color}" stroke-width="2"/>'
        )
        ly = top + 14 + 18 * i
        out.append(f'<line x1="{left + pw + 12}" y1="{ly}" x2="{left + pw + 32}" y2="{ly}" stroke="{color}" stroke-width="2"/>')
        out.append(f'<text x="{left + pw + 38}" y="{ly + 4}" font-size="11">{st}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


# --- CLI ----------------------------------------------------------------------


def _out_dir(arg) -> Path:
    p = Path(arg or os.environ.get(OUT_DIR_ENV, "rtc_out"))
    p.mkdir(parents=True, exist_ok=True)
    return p


def _int_list(text: str) -> list[int]:
    return [int(x) for x in text.split(",") if x.strip()]


def _load_config_file(path) -> dict:
    text = Path(path).read_text()
    if str(path).endswith(".json"):
        return json.loads(text)
    import tomli

    return tomli.loads(text)


def _train_config(args) -> tr.TrainConfig:
    base = _load_config_file(args.config).get("train", {}) if args.config else {}
    cli = {
        "epochs": args.epochs,
        "batch_size": args.batch_size,
        "lr": args.lr,
        "seed": args.seed,
        "width": args.width,
        "depth": args.depth,
        "schedule_epochs": args.schedule_epochs,
    }
    merged = {**base, **{k: v for k, v in cli.items() if v is not None}}
    if args.conditioning:
        merged["conditioning"] = True
    if args.delay_kind:
        merged["delay"] = {"kind": args.delay_kind, "d_max": args.delay_max, "base": args.delay_base}
    return tr.TrainConfig.from_mapping(merged)


def cmd_gen_data(args):
    out = _out_dir(args.out_dir)
    ds = ek.gen_dataset(args.episodes, args.horizon, args.seed)
    path = Path(args.out) if args.out else out / "dataset.bin"
    ek.save_dataset(ds, path)
    print(json.dumps({"path": str(path), "chunks": len(ds), **{k: ds.meta[k] for k in ("n_episodes", "n_success")}}))


def cmd_train(args):
    out = _out_dir(args.out_dir)
    cfg = _train_config(args)
    ds = ek.load_dataset(args.data)
    warm = tr.load(args.warm_start) if args.warm_start else None
    ckpt, curve = tr.train(cfg, ds, warm_start=warm)
    path = Path(args.out) if args.out else out / ("conditioned.ckpt" if cfg.conditioning else "unconditioned.ckpt")
    tr.save(ckpt, path)
    print(json.dumps({"path": str(path), "loss_curve": curve}))


def cmd_eval(args):
    ckpt = tr.load(args.ckpt)
    s = args.s if args.s is not None else max(args.delay, 1)
    dcfg = DelayConfig(ckpt.descriptor.horizon, s, args.delay)
    pol = LearnedPolicy(ckpt, args.num_steps, GuidanceConfig(beta=args.beta, num_steps=args.num_steps))
    r = run_episodes(args.strategy, pol, ek.EnvConfig(), dcfg, args.n, args.seed)
    k = int(r.success.sum())
    lo, hi = wilson_interval(k, args.n)
    sw, within = pooled_jumps(r)
    print(
        json.dumps(
            {
                "strategy": args.strategy,
                "d": args.delay,
                "s": s,
                "successes": k,
                "n": args.n,
                "rate": k / args.n,
                "wilson": [lo, hi],
                "mean_switch_jump": float(sw.mean()) if sw.size else None,
                "mean_within_jump": float(within.mean()) if within.size else None,
            }
        )
    )


def cmd_sweep(args):
    out = _out_dir(args.out_dir)
    spec = SweepSpec(
        delays=_int_list(args.delays),
        strategies=args.strategies.split(","),
        n_rollouts=args.n,
        s_rule=args.s_rule,
        H=args.horizon,
        num_steps=args.num_steps,
        seed_base=args.seed,
        guidance=GuidanceConfig(beta=args.beta, decay_c=args.decay_c, gamma_max=args.gamma_max, num_steps=args.num_steps),
    )
    spec.validate()
    ckpts = {"unconditioned": tr.load(args.unconditioned)}
    ckpts["conditioned"] = tr.load(args.conditioned) if args.conditioned else ckpts["unconditioned"]
    results = sweep(spec, ckpts, out_dir=out, workers=args.workers, strict=not args.shared_checkpoint)
    sys.stdout.write(results_to_csv(results))


def cmd_plot(args):
    text = Path(args.csv).read_text()
    out = Path(args.out) if args.out else Path(args.csv).with_suffix(".svg")
    out.write_text(render_svg(read_csv_text(text)))
    print(str(out))


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="rtchunk", description="Real-time action chunking benchmark")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="cmd", required=True)

    g = sub.add_parser("gen-data", help="generate expert demonstrations")
    g.add_argument("--episodes", type=int, default=1000)
    g.add_argument("--horizon", type=int, default=8)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out")
    g.add_argument("--out-dir")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train a checkpoint")
    t.add_argument("--data", required=True)
    t.add_argument("--config", help="TOML or JSON file with a [train] table")
    t.add_argument("--epochs", type=int)
    t.add_argument("--schedule-epochs", type=int)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--seed", type=int)
    t.add_argument("--width", type=int)
    t.add_argument("--depth", type=int)
    t.add_argument("--conditioning", action="store_true")
    t.add_argument("--delay-kind", choices=["uniform", "geometric"])
    t.add_argument("--delay-max", type=int, default=4)
    t.add_argument("--delay-base", type=float, default=0.5)
    t.add_argument("--warm-start")
    t.add_argument("--out")
    t.add_argument("--out-dir")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate one strategy at one delay")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--strategy", choices=ALL_STRATEGIES, required=True)
    e.add_argument("--delay", type=int, default=0)
    e.add_argument("--s", type=int)
    e.add_argument("--n", type=int, default=512)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--num-steps", type=int, default=10)
    e.add_argument("--beta", type=float, default=1.0)
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("sweep", help="delay sweep across strategies")
    s.add_argument("--unconditioned", required=True)
    s.add_argument("--conditioned")
    s.add_argument("--delays", default="0,1,2,3,4")
    s.add_argument("--strategies", default=",".join(ALL_STRATEGIES))
    s.add_argument("--n", type=int, default=512)
    s.add_argument("--s-rule", default="max1")
    s.add_argument("--horizon", type=int, default=8)
    s.add_argument("--num-steps", type=int, default=10)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--beta", type=float, default=1.0)
    s.add_argument("--decay-c", type=float, default=0.5)
    s.add_argument("--gamma-max", type=float, default=5.0)
    s.add_argument("--workers", type=int, default=1)
    s.add_argument("--shared-checkpoint", action="store_true", help="skip checkpoint-family validation")
    s.add_argument("--out-dir")
    s.set_defaults(func=cmd_sweep)

    pl = sub.add_parser("plot", help="render sweep.svg from a sweep CSV")
    pl.add_argument("--csv", required=True)
    pl.add_argument("--out")
    pl.set_defaults(func=cmd_plot)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING)
    try:
        args.func(args)
    except (SweepError, tr.ConfigError, tr.FormatError, ek.FormatError, ek.DatasetError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
