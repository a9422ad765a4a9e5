"""Command-line entry point: verify-exact, pretrain, adapt, eval, render.

Flags override config-file fields, which override defaults. A run writes
its artifacts under ``<out>/<run_id>/`` together with a manifest recording
the config hash; an existing manifest is refused without ``--force``.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Optional

import numpy as np

from . import config as cfgmod
from .adaptation import (AdaptResult, DenoiserPair, TrainingDiverged, adapt,
                         oracle_denoise_mse)
from .config import RunConfig, config_hash, write_manifest, write_metrics_csv
from .env import DistractorEnv, frame_path, write_ppm
from .exact import run_verification
from .policy import PolicySpec, act, evaluate
from .world_model import WorldModel, pretrain

PRETRAIN_COLUMNS = ["step", "j_o", "j_kl", "j_rew", "total", "holdout_recon_mse"]
ADAPT_COLUMNS = ["iteration", "loss_sc", "loss_n", "loss_rew", "loss_total",
                 "eval_return_mean", "oracle_denoise_mse", "blind_step_rate"]
EVAL_COLUMNS = ["phase", "episodes", "mean_return", "std_return", "blind_step_rate"]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="scma",
        description="Exact theory checks and denoiser adaptation on the distractor gridworld")
    sub = parser.add_subparsers(dest="mode", required=True)
    for mode in cfgmod.MODES:
        p = sub.add_parser(mode)
        p.add_argument("--config", type=str, default=None, help="JSON config file")
        p.add_argument("--run-id", type=str, default=None)
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--seeds", type=str, default=None,
                       help="comma-separated seeds; fans out one process per seed")
        p.add_argument("--preset", type=str, default=None, choices=cfgmod.PRESETS)
        p.add_argument("--out", type=str, default=None,
                       help="output root (or env SCMA_OUT_DIR)")
        p.add_argument("--force", action="store_true",
                       help="allow overwriting an existing run directory")
        p.add_argument("--set", dest="overrides", action="append", default=[],
                       metavar="KEY=VALUE", help="dotted config override")
        if mode == "adapt":
            p.add_argument("--world-model", type=str, default=None,
                           help="pretrained world-model checkpoint")
        if mode in ("eval", "render"):
            p.add_argument("--denoiser", type=str, default=None,
                           help="denoiser checkpoint")
        if mode == "render":
            p.add_argument("--frames", type=int, default=None)
        if mode == "eval":
            p.add_argument("--episodes", type=int, default=None)
        if mode == "verify-exact":
            p.add_argument("--report", type=str, default=None,
                           help="also write the JSON report to this path")
            p.add_argument("--max-n", type=int, default=4,
                           help="largest alphabet for the solution-set grid")
            p.add_argument("--corrupt-formula", action="store_true",
                           help=argparse.SUPPRESS)  # negative-control hook
    return parser


def build_config(args: argparse.Namespace) -> RunConfig:
    cfg = RunConfig(mode=args.mode)
    if args.preset:
        cfg = cfgmod.apply_preset(cfg, args.preset)
    if args.config:
        data = cfgmod.load_config_file(args.config)
        base = cfg.to_dict()
        _deep_update(base, data)
        base["mode"] = args.mode
        cfg = RunConfig.from_dict(base)
        if args.preset:
            cfg = cfgmod.apply_preset(cfg, args.preset)
    if args.overrides:
        cfg = cfgmod.apply_overrides(cfg, args.overrides)
    if args.run_id is not None:
        cfg.run_id = args.run_id
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    else:
        cfg = cfg.with_seed(cfg.seed)
    if getattr(args, "world_model", None):
        cfg.world_model_path = args.world_model
    if getattr(args, "denoiser", None):
        cfg.denoiser_path = args.denoiser
    if getattr(args, "frames", None) is not None:
        cfg.render_frames = args.frames
    if getattr(args, "episodes", None) is not None:
        cfg.eval_episodes = args.episodes
    if args.out:
        cfg.out_root = args.out
    elif os.environ.get("SCMA_OUT_DIR"):
        cfg.out_root = os.environ["SCMA_OUT_DIR"]
    return cfg


def _deep_update(base: dict, new: dict) -> None:
    for key, value in new.items():
        if isinstance(value, dict) and isinstance(base.get(key), dict):
            _deep_update(base[key], value)
        else:
            base[key] = value


def _run_dir(cfg: RunConfig, force: bool) -> Path:
    run_dir = Path(cfg.out_root) / cfg.run_id
    manifest = run_dir / "manifest.json"
    if manifest.exists() and not force:
        raise FileExistsError(
            f"run directory {run_dir} already holds a manifest; pass --force to overwrite")
    run_dir.mkdir(parents=True, exist_ok=True)
    return run_dir


# ---------------------------------------------------------------------------
# commands

def cmd_verify_exact(cfg: RunConfig, args) -> int:
    started = time.time()
    ns = tuple(range(2, args.max_n + 1))
    report = run_verification(solution_ns=ns,
                              corrupt_formula=getattr(args, "corrupt_formula", False))
    run_dir = _run_dir(cfg, args.force)
    report_path = run_dir / "verify_exact_report.json"
    report_path.write_text(json.dumps(report, indent=2) + "\n")
    if args.report:
        Path(args.report).parent.mkdir(parents=True, exist_ok=True)
        Path(args.report).write_text(json.dumps(report, indent=2) + "\n")
    write_manifest(run_dir, cfg, [cfg.seed], time.time() - started,
                   [report_path.name])
    solution_fails = [e for e in report["solution_instances"] if not e["pass"]]
    counting_fails = [e for e in report["counting_instances"] if not e["pass"]]
    print(f"solution-set instances: {len(report['solution_instances'])}, "
          f"failures: {len(solution_fails)}")
    print(f"counting instances: {len(report['counting_instances'])}, "
          f"failures: {len(counting_fails)}")
    print(f"reward demo: marginal={report['reward_demo']['marginal_count']} "
          f"with_rewards={report['reward_demo']['with_rewards_count']} "
          f"pass={report['reward_demo']['pass']}")
    if not report["pass"]:
        for entry in (solution_fails + counting_fails)[:5]:
            print("FAILED:", json.dumps(entry))
        print("verify-exact: FAIL")
        return 1
    print("verify-exact: PASS")
    return 0


def cmd_pretrain(cfg: RunConfig, args) -> int:
    started = time.time()
    run_dir = _run_dir(cfg, args.force)
    try:
        result = pretrain(cfg.env, cfg.world_model)
    except TrainingDiverged as err:
        print(f"pretraining diverged: {err}", file=sys.stderr)
        return 1
    ckpt = run_dir / "world_model.ckpt"
    result.model.save(ckpt)
    csv_path = write_metrics_csv(run_dir / "pretrain_metrics.csv",
                                 result.metrics, PRETRAIN_COLUMNS)
    write_manifest(run_dir, cfg, [cfg.seed], time.time() - started,
                   [ckpt.name, csv_path.name])
    print(f"pretrained: {result.gradient_steps} steps, "
          f"holdout reconstruction MSE {result.holdout_mse:.5f}")
    return 0


def _resolve_world_model(cfg: RunConfig) -> Path:
    if cfg.world_model_path:
        path = Path(cfg.world_model_path)
    else:
        path = Path(cfg.out_root) / cfg.run_id / "world_model.ckpt"
    if not path.exists():
        raise FileNotFoundError(
            f"world-model checkpoint not found at the expected path {path}; "
            f"run `scma pretrain` first or pass --world-model")
    return path


def _resolve_denoiser(cfg: RunConfig) -> Optional[Path]:
    if cfg.denoiser_path:
        path = Path(cfg.denoiser_path)
        if not path.exists():
            raise FileNotFoundError(f"denoiser checkpoint not found at {path}")
        return path
    return None


def cmd_adapt(cfg: RunConfig, args) -> int:
    started = time.time()
    run_dir = _run_dir(cfg, args.force)
    wm = WorldModel.load(_resolve_world_model(cfg))
    world = DistractorEnv(cfg.env, cfg.noise)
    eval_env = DistractorEnv(cfg.env, cfg.noise)   # evaluation-phase oracle env
    collect_spec = PolicySpec("epsilon_greedy", epsilon=cfg.adapt.collect_epsilon,
                              seed=cfg.adapt.seed)

    def on_iteration(iteration: int, pair: DenoiserPair, row: dict) -> None:
        if cfg.eval_every and (iteration + 1) % cfg.eval_every == 0:
            stats = evaluate(cfg.policy, cfg.env, cfg.noise,
                             denoiser=pair.denoise_frames,
                             episodes=max(2, cfg.eval_episodes // 4),
                             seed=cfg.seed)
            row["eval_return_mean"] = stats.mean_return
            row["oracle_denoise_mse"] = oracle_denoise_mse(
                pair.denoise_frames, eval_env, frames=32, seed=cfg.seed)

    try:
        result = adapt(cfg.adapt, wm, world, collect_spec, on_iteration=on_iteration)
    except TrainingDiverged as err:
        if err.last_good is not None:
            print(f"adaptation diverged; last-good parameters kept: {err}",
                  file=sys.stderr)
        else:
            print(f"adaptation diverged: {err}", file=sys.stderr)
        return 1
    ckpt = run_dir / "denoiser.ckpt"
    result.pair.save(ckpt)
    csv_path = write_metrics_csv(run_dir / "adapt_metrics.csv",
                                 result.metrics, ADAPT_COLUMNS)
    write_manifest(run_dir, cfg, [cfg.adapt.seed], time.time() - started,
                   [ckpt.name, csv_path.name])
    print(f"adapted: wm checksum unchanged={result.wm_checksum_before == result.wm_checksum_after}, "
          f"policy unchanged={result.policy_hash_before == result.policy_hash_after}, "
          f"oracle calls during adapt={result.pair_render_calls_during_adapt}")
    return 0


def cmd_eval(cfg: RunConfig, args) -> int:
    started = time.time()
    run_dir = _run_dir(cfg, args.force)
    den_path = _resolve_denoiser(cfg)
    denoiser = None
    phase = "eval"
    if den_path is not None:
        denoiser = DenoiserPair.load(den_path).denoise_frames
        phase = "eval+denoiser"
    stats = evaluate(cfg.policy, cfg.env, cfg.noise, denoiser=denoiser,
                     episodes=cfg.eval_episodes, seed=cfg.seed)
    row = {
        "phase": phase,
        "episodes": stats.episodes,
        "mean_return": stats.mean_return,
        "std_return": stats.std_return,
        "blind_step_rate": stats.blind_step_rate,
    }
    csv_path = cfgmod.append_metrics_csv(run_dir / "eval_metrics.csv", row, EVAL_COLUMNS)
    write_manifest(run_dir, cfg, [cfg.seed], time.time() - started, [csv_path.name])
    print(f"{phase}: mean_return={stats.mean_return:.4f} std={stats.std_return:.4f} "
          f"blind_step_rate={stats.blind_step_rate:.4f}")
    return 0


def cmd_render(cfg: RunConfig, args) -> int:
    started = time.time()
    run_dir = _run_dir(cfg, args.force)
    den_path = _resolve_denoiser(cfg)
    if den_path is None:
        raise FileNotFoundError(
            "render requires a denoiser checkpoint; pass --denoiser")
    pair = DenoiserPair.load(den_path)
    world = DistractorEnv(cfg.env, cfg.noise)
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0x4e4d]))
    world.reset(cfg.seed)
    written = []
    for k in range(cfg.render_frames):
        clean, cluttered = world.render_pair()
        denoised = pair.denoise_frames(cluttered.pixels)
        for track, pixels in (("clean", clean.pixels),
                              ("cluttered", cluttered.pixels),
                              ("denoised", denoised)):
            path = frame_path(run_dir / "frames", cfg.run_id, track, k)
            write_ppm(path, pixels)
            written.append(str(path.relative_to(run_dir)))
        action = act(cfg.policy, denoised, cfg.env, rng)
        _, _, done = world.step(action)
        if done:
            world.reset(int(rng.integers(2**31)))
    write_manifest(run_dir, cfg, [cfg.seed], time.time() - started, written)
    print(f"rendered {cfg.render_frames} frame triptychs under {run_dir / 'frames'}")
    return 0


# ---------------------------------------------------------------------------
# seed fan-out

def _run_single(payload: tuple) -> int:
    argv, seed = payload
    argv = [a for a in argv if not a.startswith("--seeds")]
    if "--seeds" in argv:
        i = argv.index("--seeds")
        del argv[i:i + 2]
    argv += ["--seed", str(seed)]
    # suffix the run id so parallel runs do not collide
    if "--run-id" in argv:
        i = argv.index("--run-id")
        argv[i + 1] = f"{argv[i + 1]}-s{seed}"
    else:
        argv += ["--run-id", f"run-s{seed}"]
    return main(argv)


def _fan_out(argv: list[str], seeds: list[int]) -> int:
    with ProcessPoolExecutor(max_workers=min(len(seeds), os.cpu_count() or 1)) as pool:
        codes = list(pool.map(_run_single, [(argv, s) for s in seeds]))
    return max(codes)


def main(argv: Optional[list[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.seeds:
        seeds = [int(s) for s in args.seeds.split(",") if s.strip()]
        return _fan_out(argv, seeds)
    cfg = build_config(args)
    try:
        if args.mode == "verify-exact":
            return cmd_verify_exact(cfg, args)
        if args.mode == "pretrain":
            return cmd_pretrain(cfg, args)
        if args.mode == "adapt":
            return cmd_adapt(cfg, args)
        if args.mode == "eval":
            return cmd_eval(cfg, args)
        if args.mode == "render":
            return cmd_render(cfg, args)
    except FileExistsError as err:
        print(str(err), file=sys.stderr)
        return 2
    except FileNotFoundError as err:
        print(str(err), file=sys.stderr)
        return 2
    raise AssertionError(f"unhandled mode {args.mode}")


if __name__ == "__main__":
    sys.exit(main())
