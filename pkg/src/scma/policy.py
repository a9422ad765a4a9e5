"""Scripted policies acting on pixels, and the episode evaluator.

The greedy policy reads agent and goal positions straight from the
reserved colors in the frame it is given, so the quality of a denoiser's
output directly determines behavior. When either marker cannot be found
the policy falls back to a random action and counts a blind step.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from . import env as envmod
from .env import (ACTION_DOWN, ACTION_LEFT, ACTION_RIGHT, ACTION_STAY,
                  ACTION_UP, NUM_ACTIONS, DistractorEnv, EnvConfig, NoiseSpec)

POLICY_VARIANTS = ("scripted_greedy", "epsilon_greedy", "random")

# minimum dominance of a cell's mean color for a marker to count as found
DETECTION_THRESHOLD = 0.25


@dataclass(frozen=True)
class PolicySpec:
    variant: str = "scripted_greedy"
    epsilon: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.variant not in POLICY_VARIANTS:
            raise ValueError(f"unknown policy variant {self.variant!r}")
        if not (0.0 <= self.epsilon <= 1.0):
            raise ValueError(f"epsilon must lie in [0, 1], got {self.epsilon}")


def policy_hash(spec: PolicySpec) -> str:
    payload = json.dumps(
        {"variant": spec.variant, "epsilon": spec.epsilon, "seed": spec.seed},
        sort_keys=True)
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()


def _cell_means(pixels: np.ndarray, grid_w: int, grid_h: int) -> np.ndarray:
    s = pixels.shape[0]
    c = s // grid_w
    return pixels.reshape(grid_h, c, grid_w, c, 3).mean(axis=(1, 3))


def decode_positions(pixels: np.ndarray, grid_w: int, grid_h: int
                     ) -> tuple[Optional[tuple], Optional[tuple]]:
    """Locate (agent, goal) grid cells by reserved-color dominance."""
    means = _cell_means(pixels, grid_w, grid_h)
    agent_score = means[:, :, 0] - means[:, :, 1] - means[:, :, 2]
    goal_score = means[:, :, 1] - means[:, :, 0] - means[:, :, 2]

    def best(score):
        idx = np.unravel_index(int(score.argmax()), score.shape)
        if score[idx] < DETECTION_THRESHOLD:
            return None
        return (int(idx[1]), int(idx[0]))  # (x, y)

    return best(agent_score), best(goal_score)


def greedy_action(agent: tuple, goal: tuple) -> int:
    """Step toward the goal, horizontal moves before vertical."""
    ax, ay = agent
    gx, gy = goal
    if (ax, ay) == (gx, gy):
        return ACTION_STAY
    if gx > ax:
        return ACTION_RIGHT
    if gx < ax:
        return ACTION_LEFT
    if gy > ay:
        return ACTION_DOWN
    return ACTION_UP


class BlindStepCounter:
    def __init__(self):
        self.blind = 0
        self.total = 0

    @property
    def rate(self) -> float:
        return self.blind / self.total if self.total else 0.0


def act(spec: PolicySpec, pixels: np.ndarray, config: EnvConfig,
        rng: np.random.Generator, counter: Optional[BlindStepCounter] = None) -> int:
    if counter is not None:
        counter.total += 1
    if spec.variant == "random":
        return int(rng.integers(NUM_ACTIONS))
    if spec.variant == "epsilon_greedy" and rng.random() < spec.epsilon:
        return int(rng.integers(NUM_ACTIONS))
    agent, goal = decode_positions(pixels, config.grid_width, config.grid_height)
    if agent is None or goal is None:
        if counter is not None:
            counter.blind += 1
        return int(rng.integers(NUM_ACTIONS))
    return greedy_action(agent, goal)


Denoiser = Callable[[np.ndarray], np.ndarray]


@dataclass(frozen=True)
class EvalStats:
    mean_return: float
    std_return: float
    blind_step_rate: float
    episodes: int
    returns: tuple


def episode_seed(base_seed: int, episode: int) -> int:
    # stable per-episode stream so with/without-denoiser runs share episodes
    return int(np.random.SeedSequence([int(base_seed), int(episode), 0xe9a1]).generate_state(1)[0])


def evaluate(spec: PolicySpec, config: EnvConfig, noise: NoiseSpec,
             denoiser: Optional[Denoiser] = None, episodes: int = 20,
             seed: int = 0) -> EvalStats:
    """Run seeded episodes; the policy sees denoised frames when a denoiser is given."""
    if episodes < 1:
        raise ValueError("episodes must be >= 1")
    returns = []
    counter = BlindStepCounter()
    for ep in range(episodes):
        ep_seed = episode_seed(seed, ep)
        world = DistractorEnv(config, noise)
        obs = world.reset(ep_seed)
        rng = np.random.default_rng(np.random.SeedSequence([ep_seed, 0xac7]))
        total = 0.0
        done = False
        while not done:
            pixels = denoiser(obs.pixels) if denoiser is not None else obs.pixels
            action = act(spec, pixels, config, rng, counter)
            obs, reward, done = world.step(action)
            total += reward
        returns.append(total)
    arr = np.array(returns)
    return EvalStats(
        mean_return=float(arr.mean()),
        std_return=float(arr.std()),
        blind_step_rate=counter.rate,
        episodes=episodes,
        returns=tuple(float(r) for r in returns),
    )
