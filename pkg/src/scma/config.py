"""Run configuration: nested sections, presets, JSON round-trip, hashing.

Precedence when assembling a run: defaults, then preset, then config
file, then command-line overrides. The SHA-256 of the canonical JSON form
identifies a run; identical hashes must reproduce identical metrics.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import subprocess
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Optional, Union

from .adaptation import AdaptConfig
from .env import EnvConfig, NoiseSpec
from .policy import PolicySpec
from .world_model import WorldModelConfig

MODES = ("verify-exact", "pretrain", "adapt", "eval", "render")
PRESETS = ("desk", "paper")

# values recorded from the source system's configuration table
PAPER_PRESET = {
    "world_model": {
        "batch_size": 55,
        "collect_interval": 100,
        "model_lr": 1e-3,
        "adam_epsilon": 1e-7,
        "belief_size": 200,
        "embedding_size": 1024,
        "hidden_size": 200,
        "grad_clip_norm": 100.0,
        "buffer_capacity": 1_000_000,
    },
    "adapt": {
        "batch_size": 55,
        "collect_interval": 100,
        "denoise_lr": 1e-4,
        "adam_epsilon": 1e-7,
        "grad_clip_norm": 100.0,
        "buffer_capacity": 1_000_000,
    },
    "env": {
        "episode_length": 1000,
    },
}


@dataclass
class RunConfig:
    mode: str = "verify-exact"
    run_id: str = "run"
    seed: int = 0
    preset: str = "desk"
    out_root: str = "runs"
    env: EnvConfig = field(default_factory=EnvConfig)
    noise: NoiseSpec = field(default_factory=NoiseSpec)
    world_model: WorldModelConfig = field(default_factory=WorldModelConfig)
    adapt: AdaptConfig = field(default_factory=AdaptConfig)
    policy: PolicySpec = field(default_factory=PolicySpec)
    world_model_path: Optional[str] = None
    denoiser_path: Optional[str] = None
    eval_episodes: int = 20
    eval_every: int = 5
    render_frames: int = 8

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}; choose from {MODES}")
        if self.preset not in PRESETS:
            raise ValueError(f"unknown preset {self.preset!r}; choose from {PRESETS}")

    def with_seed(self, seed: int) -> "RunConfig":
        cfg = replace(self, seed=seed)
        cfg.world_model = replace(cfg.world_model, seed=seed)
        cfg.adapt = replace(cfg.adapt, seed=seed)
        return cfg

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        data = dict(data)
        sections = {
            "env": EnvConfig, "noise": NoiseSpec, "world_model": WorldModelConfig,
            "adapt": AdaptConfig, "policy": PolicySpec,
        }
        kwargs: dict[str, Any] = {}
        for key, value in data.items():
            if key in sections:
                sub = dict(value)
                if key in ("env", "noise"):  # tuples arrive as lists from JSON
                    for tup_key in ("goal", "occlusion_rect"):
                        if tup_key in sub and isinstance(sub[tup_key], list):
                            sub[tup_key] = tuple(sub[tup_key])
                kwargs[key] = sections[key](**sub)
            else:
                kwargs[key] = value
        return cls(**kwargs)


def apply_preset(cfg: RunConfig, preset: str) -> RunConfig:
    if preset == "desk":
        return replace(cfg, preset="desk")
    if preset != "paper":
        raise ValueError(f"unknown preset {preset!r}")
    cfg = replace(cfg, preset="paper")
    for section, updates in PAPER_PRESET.items():
        current = getattr(cfg, section)
        setattr(cfg, section, replace(current, **updates))
    return cfg


def apply_overrides(cfg: RunConfig, pairs: list[str]) -> RunConfig:
    """Apply dotted key=value overrides, e.g. ``noise.variant=occlusion``."""
    data = cfg.to_dict()
    for pair in pairs:
        if "=" not in pair:
            raise ValueError(f"override {pair!r} is not of the form key=value")
        key, raw = pair.split("=", 1)
        parts = key.split(".")
        node = data
        for part in parts[:-1]:
            if part not in node:
                raise KeyError(f"unknown config section {part!r} in {key!r}")
            node = node[part]
        leaf = parts[-1]
        if leaf not in node:
            raise KeyError(f"unknown config field {key!r}")
        node[leaf] = _parse_value(raw, node[leaf])
    return RunConfig.from_dict(data)


def _parse_value(raw: str, current: Any) -> Any:
    if isinstance(current, bool):
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"cannot parse {raw!r} as a boolean")
    if isinstance(current, int) and not isinstance(current, bool):
        return int(raw)
    if isinstance(current, float):
        return float(raw)
    if isinstance(current, (tuple, list)):
        return tuple(json.loads(raw))
    if current is None:
        return raw
    return type(current)(raw)


def load_config_file(path: Union[str, Path]) -> dict:
    with open(path) as fh:
        return json.load(fh)


def config_hash(cfg: RunConfig) -> str:
    payload = json.dumps(cfg.to_dict(), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()


def git_describe() -> str:
    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty"],
            capture_output=True, text=True, timeout=10, check=False)
        return out.stdout.strip() or "unknown"
    except (OSError, subprocess.SubprocessError):
        return "unknown"


def write_manifest(run_dir: Union[str, Path], cfg: RunConfig, seeds: list[int],
                   wall_time_s: float, artifacts: list[str]) -> Path:
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    manifest = {
        "run_id": cfg.run_id,
        "mode": cfg.mode,
        "config": cfg.to_dict(),
        "config_hash": config_hash(cfg),
        "seeds": seeds,
        "git_describe": git_describe(),
        "wall_time_s": wall_time_s,
        "artifacts": artifacts,
    }
    path = run_dir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def _format_cell(value: Any) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_metrics_csv(path: Union[str, Path], rows: list[dict],
                      columns: list[str]) -> Path:
    """Deterministic CSV: fixed column order, repr-formatted floats."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(columns)
        for row in rows:
            writer.writerow([_format_cell(row.get(col, "")) for col in columns])
    return path


def append_metrics_csv(path: Union[str, Path], row: dict, columns: list[str]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    new = not path.exists()
    with open(path, "a", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        if new:
            writer.writerow(columns)
        writer.writerow([_format_cell(row.get(col, "")) for col in columns])
    return path
