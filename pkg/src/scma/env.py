"""Deterministic pixel gridworld with configurable visual distractors.

The agent (reserved pure red) walks an 8x8 grid toward a goal cell
(reserved pure green) on a black background. Clean frames pass through a
noise function before the training-facing interface sees them; paired
clean frames are reachable only through the counted ``render_pair``
oracle, which keeps adaptation honest about never seeing supervision.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Union

import numpy as np

AGENT_COLOR = np.array([1.0, 0.0, 0.0])
GOAL_COLOR = np.array([0.0, 1.0, 0.0])
BACKGROUND_COLOR = np.array([0.0, 0.0, 0.0])

ACTION_UP, ACTION_DOWN, ACTION_LEFT, ACTION_RIGHT, ACTION_STAY = range(5)
NUM_ACTIONS = 5

GOAL_REWARD = 1.0
STEP_PENALTY = -0.01

NOISE_VARIANTS = ("none", "color_permutation", "fixed_background",
                  "occlusion", "lighting_bias", "video_background")
STRICT_VARIANTS = ("color_permutation", "fixed_background", "lighting_bias")


@dataclass(frozen=True)
class EnvConfig:
    grid_width: int = 8
    grid_height: int = 8
    obs_size: int = 16
    episode_length: int = 100
    goal: tuple = (7, 7)          # (x, y) grid cell
    discount: float = 0.99        # recorded; unused by adaptation

    def __post_init__(self):
        if self.grid_width <= 0 or self.grid_height <= 0:
            raise ValueError("grid dimensions must be positive")
        if self.obs_size % self.grid_width != 0 or self.obs_size % self.grid_height != 0:
            raise ValueError(
                f"obs_size {self.obs_size} must be divisible by the grid "
                f"({self.grid_width}x{self.grid_height}) for integer cell rendering")
        gx, gy = self.goal
        if not (0 <= gx < self.grid_width and 0 <= gy < self.grid_height):
            raise ValueError(f"goal {self.goal} outside the grid")
        if not (0.0 < self.discount <= 1.0):
            raise ValueError("discount must lie in (0, 1]")

    @property
    def cell_px(self) -> int:
        return self.obs_size // self.grid_width


@dataclass(frozen=True)
class EnvState:
    agent: tuple                  # (x, y) grid cell
    step_index: int
    distractor_phase: int


@dataclass(frozen=True)
class Observation:
    pixels: np.ndarray            # (obs_size, obs_size, 3) floats in [0, 1]
    kind: str                     # "clean" | "cluttered"

    def __post_init__(self):
        self.pixels.setflags(write=False)


@dataclass(frozen=True)
class NoiseSpec:
    variant: str = "none"
    color_seed: int = 0           # drives the invertible channel transform
    texture_seed: int = 0         # drives fixed/video background patterns
    occlusion_rect: tuple = (0, 0, 8, 8)   # (row, col, height, width) in pixels
    bias: float = 0.2
    pattern_speed: float = 1.0

    def __post_init__(self):
        if self.variant not in NOISE_VARIANTS:
            raise ValueError(f"unknown noise variant {self.variant!r}; "
                             f"choose one of {NOISE_VARIANTS}")


# ---------------------------------------------------------------------------
# core simulator

def render_clean(config: EnvConfig, state: EnvState) -> Observation:
    px = np.zeros((config.obs_size, config.obs_size, 3))
    c = config.cell_px

    def fill(cell, color):
        x, y = cell
        px[y * c:(y + 1) * c, x * c:(x + 1) * c, :] = color

    fill(config.goal, GOAL_COLOR)
    fill(state.agent, AGENT_COLOR)   # agent draws over the goal on arrival
    return Observation(px, "clean")


def reset(config: EnvConfig, seed: int) -> tuple[EnvState, Observation]:
    """Place the agent uniformly at random on any non-goal cell."""
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x5e5e7]))
    cells = [(x, y)
             for x in range(config.grid_width)
             for y in range(config.grid_height)
             if (x, y) != tuple(config.goal)]
    agent = cells[int(rng.integers(len(cells)))]
    state = EnvState(agent=agent, step_index=0, distractor_phase=0)
    return state, render_clean(config, state)


_MOVES = {
    ACTION_UP: (0, -1),
    ACTION_DOWN: (0, 1),
    ACTION_LEFT: (-1, 0),
    ACTION_RIGHT: (1, 0),
    ACTION_STAY: (0, 0),
}


def step(config: EnvConfig, state: EnvState, action: int
         ) -> tuple[EnvState, Observation, float, bool]:
    """One transition; walls clamp, goal pays +1 and terminates."""
    if action not in _MOVES:
        raise ValueError(f"action {action} outside {{0..{NUM_ACTIONS - 1}}}")
    dx, dy = _MOVES[action]
    x = min(max(state.agent[0] + dx, 0), config.grid_width - 1)
    y = min(max(state.agent[1] + dy, 0), config.grid_height - 1)
    nxt = EnvState(agent=(x, y), step_index=state.step_index + 1,
                   distractor_phase=state.distractor_phase + 1)
    on_goal = (x, y) == tuple(config.goal)
    reward = GOAL_REWARD if on_goal else STEP_PENALTY
    done = on_goal or nxt.step_index >= config.episode_length
    return nxt, render_clean(config, nxt), reward, done


# ---------------------------------------------------------------------------
# noise functions

def color_transform(spec: NoiseSpec) -> tuple[np.ndarray, np.ndarray]:
    """Invertible affine channel map (M, b) with outputs inside (0, 1).

    Rows of M have absolute sums <= 0.45 and b = 0.5, so inputs in [0, 1]
    land in [0.05, 0.95] and the clamp never activates; the determinant is
    kept away from zero by retrying the seed.
    """
    cyc = np.array([[0.0, 1.0, 0.0],
                    [0.0, 0.0, 1.0],
                    [1.0, 0.0, 0.0]])
    seed = int(spec.color_seed)
    while True:
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0xc0108]))
        m = 0.3 * cyc + rng.uniform(-0.05, 0.05, size=(3, 3))
        if abs(np.linalg.det(m)) > 0.01:
            return m, np.full(3, 0.5)
        seed += 1


def inverse_color_denoiser(spec: NoiseSpec):
    """Oracle denoiser: exact inverse of the affine channel transform."""
    m, b = color_transform(spec)
    minv = np.linalg.inv(m)

    def denoise(pixels: np.ndarray) -> np.ndarray:
        return np.clip((pixels - b) @ minv.T, 0.0, 1.0)

    return denoise


def _background_mask(pixels: np.ndarray) -> np.ndarray:
    return (pixels == BACKGROUND_COLOR).all(axis=-1)


def _fixed_texture(spec: NoiseSpec, size: int) -> np.ndarray:
    # blocky texture in [0.1, 0.7]: never hits a reserved pure color
    rng = np.random.default_rng(np.random.SeedSequence([int(spec.texture_seed), 0x7e47]))
    cells = (size + 3) // 4
    low = rng.uniform(0.1, 0.7, size=(cells, cells, 3))
    return np.repeat(np.repeat(low, 4, axis=0), 4, axis=1)[:size, :size, :]


def _video_texture(spec: NoiseSpec, size: int, phase: int) -> np.ndarray:
    # sinusoidal plasma in [0.15, 0.5], advancing with the phase counter
    rng = np.random.default_rng(np.random.SeedSequence([int(spec.texture_seed), 0x71de0]))
    freq = rng.uniform(1.0, 3.0, size=(3, 2))
    shift = rng.uniform(0.0, 2.0 * math.pi, size=3)
    drift = rng.uniform(0.3, 0.7, size=3)
    ii, jj = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
    out = np.empty((size, size, 3))
    for ch in range(3):
        angle = (2.0 * math.pi * (freq[ch, 0] * ii + freq[ch, 1] * jj) / size
                 + shift[ch] + spec.pattern_speed * drift[ch] * phase)
        out[:, :, ch] = 0.15 + 0.35 * 0.5 * (1.0 + np.sin(angle))
    return out


def apply_noise(obs: Observation, spec: NoiseSpec, phase: int) -> Observation:
    """Corrupt a clean frame; deterministic in (pixels, spec, phase).

    Only video_background consults the phase; the strict variants are
    functions of the clean frame alone.
    """
    if obs.kind != "clean":
        raise ValueError("apply_noise expects a clean observation")
    px = obs.pixels
    if spec.variant == "none":
        out = px.copy()
    elif spec.variant == "color_permutation":
        m, b = color_transform(spec)
        out = np.clip(px @ m.T + b, 0.0, 1.0)
    elif spec.variant == "fixed_background":
        out = px.copy()
        mask = _background_mask(px)
        out[mask] = _fixed_texture(spec, px.shape[0])[mask]
    elif spec.variant == "occlusion":
        out = px.copy()
        r, c, h, w = spec.occlusion_rect
        out[r:r + h, c:c + w, :] = 0.5
    elif spec.variant == "lighting_bias":
        out = np.clip(px + spec.bias, 0.0, 1.0)
    elif spec.variant == "video_background":
        out = px.copy()
        mask = _background_mask(px)
        out[mask] = _video_texture(spec, px.shape[0], phase)[mask]
    else:  # pragma: no cover - NoiseSpec validates the variant
        raise ValueError(f"unknown noise variant {spec.variant!r}")
    return Observation(out, "cluttered")


def render_pair(config: EnvConfig, state: EnvState, spec: NoiseSpec
                ) -> tuple[Observation, Observation]:
    """Paired (clean, cluttered) frames; evaluation-only oracle."""
    clean = render_clean(config, state)
    return clean, apply_noise(clean, spec, state.distractor_phase)


# ---------------------------------------------------------------------------
# training-facing wrapper

class DistractorEnv:
    """Episode interface that only ever exposes cluttered observations.

    ``render_pair`` is the sole route to clean frames and bumps a call
    counter so training-time isolation can be asserted.
    """

    def __init__(self, config: EnvConfig, noise: NoiseSpec):
        self.config = config
        self.noise = noise
        self.state: Optional[EnvState] = None
        self.pair_render_count = 0

    def reset(self, seed: int) -> Observation:
        self.state, clean = reset(self.config, seed)
        return apply_noise(clean, self.noise, self.state.distractor_phase)

    def step(self, action: int) -> tuple[Observation, float, bool]:
        if self.state is None:
            raise RuntimeError("step before reset")
        self.state, clean, reward, done = step(self.config, self.state, action)
        return apply_noise(clean, self.noise, self.state.distractor_phase), reward, done

    def render_pair(self) -> tuple[Observation, Observation]:
        if self.state is None:
            raise RuntimeError("render_pair before reset")
        self.pair_render_count += 1
        return render_pair(self.config, self.state, self.noise)


# ---------------------------------------------------------------------------
# trajectories and frame dumps

@dataclass
class Trajectory:
    """Aligned (observation, action, reward) sequences.

    ``rewards[t]`` is the reward received on arriving at ``observations[t]``
    (zero for the first frame); ``actions[t]`` is the action taken after
    seeing it, with a trailing stay placeholder on the terminal frame.
    """

    observations: list
    actions: list
    rewards: list
    clean_observations: Optional[list] = None

    def __post_init__(self):
        if not (len(self.observations) == len(self.actions) == len(self.rewards)):
            raise ValueError(
                f"misaligned trajectory: {len(self.observations)} observations, "
                f"{len(self.actions)} actions, {len(self.rewards)} rewards")
        if (self.clean_observations is not None
                and len(self.clean_observations) != len(self.observations)):
            raise ValueError("paired clean observations misaligned")

    def __len__(self) -> int:
        return len(self.observations)


def write_ppm(path: Union[str, Path], pixels: np.ndarray) -> None:
    """Binary 8-bit P6 image."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arr = np.clip(np.rint(np.asarray(pixels) * 255.0), 0, 255).astype(np.uint8)
    h, w, _ = arr.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(arr.tobytes())


def read_ppm(path: Union[str, Path]) -> np.ndarray:
    raw = Path(path).read_bytes()
    parts = raw.split(b"\n", 3)
    if parts[0] != b"P6":
        raise ValueError(f"{path}: not a binary PPM")
    w, h = (int(v) for v in parts[1].split())
    data = np.frombuffer(parts[3], dtype=np.uint8, count=w * h * 3)
    return data.reshape(h, w, 3).astype(np.float64) / 255.0


def frame_path(root: Union[str, Path], run_id: str, track: str, step_index: int) -> Path:
    return Path(root) / run_id / track / f"{step_index:06d}.ppm"
