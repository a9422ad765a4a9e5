"""Denoiser adaptation against a frozen world model.

A pair of image-to-image networks is trained on cluttered experience
only: the denoiser maps cluttered frames toward the clean manifold the
world model was trained on, and the noisy model maps them back so the
denoiser cannot drift to clean-looking but irrelevant frames. The
combined objective is the sum of the self-consistency, noisy
reconstruction and reward prediction terms; there is deliberately no
posterior-vs-prior KL term in it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from . import autodiff as ad
from . import nn
from .autodiff import Tensor
from .checkpoint import load_arrays, save_arrays
from .env import ACTION_STAY, DistractorEnv, write_ppm
from .optim import Adam
from .policy import BlindStepCounter, PolicySpec, act

# the complete adaptation objective; structural: no KL term exists here
ADAPTATION_LOSS_NAMES = ("sc", "n", "rew")

DENOISER_ARCHS = ("generic", "mask_bias")


class ContractViolation(RuntimeError):
    """A caller broke a precondition (e.g. adapting an unfrozen model)."""


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, last_good: Optional[dict] = None):
        super().__init__(message)
        self.last_good = last_good


class DenoiserDiverged(TrainingDiverged):
    """Non-finite denoiser output; carries the dumped input frame path."""

    def __init__(self, message: str, frame_path: Optional[Path] = None):
        super().__init__(message)
        self.frame_path = frame_path


# ---------------------------------------------------------------------------
# denoiser architectures

class GenericImageNet:
    """Three stride-1 conv levels plus an input skip, sigmoid output."""

    def __init__(self, rng: np.random.Generator, width: int = 16, channels: int = 3):
        self.c1 = nn.Conv2d(rng, channels, width, 3, activation=ad.relu)
        self.c2 = nn.Conv2d(rng, width, width, 3, activation=ad.relu)
        self.c3 = nn.Conv2d(rng, width, width, 3, activation=ad.relu)
        self.out = nn.Conv2d(rng, width + channels, channels, 3)

    def __call__(self, x: Tensor) -> Tensor:
        h = self.c3(self.c2(self.c1(x)))
        return ad.sigmoid(self.out(ad.concat([h, x], axis=3)))

    def named_params(self, prefix: str) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for tag, layer in (("c1", self.c1), ("c2", self.c2),
                           ("c3", self.c3), ("out", self.out)):
            out.update(layer.named_params(f"{prefix}/{tag}"))
        return out


def clamp01(x: Tensor) -> Tensor:
    return ad.sub(1.0, ad.relu(ad.sub(1.0, ad.relu(x))))


class MaskBiasNet:
    """Pixel mask times input plus a per-pixel brightness offset.

    The mask head is squashed to [0, 1] per channel; the bias head is a
    single unbounded channel shared across channels; the composition is
    clamped back to [0, 1].
    """

    def __init__(self, rng: np.random.Generator, width: int = 16, channels: int = 3):
        self.mask_c1 = nn.Conv2d(rng, channels, width, 3, activation=ad.relu)
        self.mask_c2 = nn.Conv2d(rng, width, channels, 3)
        self.bias_c1 = nn.Conv2d(rng, channels, width, 3, activation=ad.relu)
        self.bias_c2 = nn.Conv2d(rng, width, 1, 3)
        self.channels = channels

    def mask(self, x: Tensor) -> Tensor:
        return ad.sigmoid(self.mask_c2(self.mask_c1(x)))

    def bias(self, x: Tensor) -> Tensor:
        return self.bias_c2(self.bias_c1(x))

    def __call__(self, x: Tensor) -> Tensor:
        b = self.bias(x)
        wide = ad.concat([b] * self.channels, axis=3)
        return clamp01(ad.add(ad.mul(self.mask(x), x), wide))

    def named_params(self, prefix: str) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for tag, layer in (("mask_c1", self.mask_c1), ("mask_c2", self.mask_c2),
                           ("bias_c1", self.bias_c1), ("bias_c2", self.bias_c2)):
            out.update(layer.named_params(f"{prefix}/{tag}"))
        return out


def _build_net(arch: str, rng: np.random.Generator, width: int):
    if arch == "generic":
        return GenericImageNet(rng, width=width)
    if arch == "mask_bias":
        return MaskBiasNet(rng, width=width)
    raise ValueError(f"unknown denoiser architecture {arch!r}; choose from {DENOISER_ARCHS}")


class DenoiserPair:
    """The learnable denoising model and its paired noisy model."""

    def __init__(self, arch: str = "generic", width: int = 16, seed: int = 0):
        self.arch = arch
        self.width = width
        rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0xde0]))
        self.m_de = _build_net(arch, rng, width)
        self.m_n = _build_net(arch, rng, width)
        self.dump_dir: Optional[Path] = None

    def named_params(self) -> dict[str, Tensor]:
        out = self.m_de.named_params("m_de")
        out.update(self.m_n.named_params("m_n"))
        return out

    def parameters(self) -> list[Tensor]:
        return [t for _, t in sorted(self.named_params().items())]

    def checksum(self) -> str:
        return nn.params_checksum(self.named_params())

    def _forward(self, net, x: Tensor) -> Tensor:
        try:
            return net(x)
        except ad.NonFiniteError as err:
            path = None
            if self.dump_dir is not None:
                path = Path(self.dump_dir) / "diverged_input.ppm"
                frame = x.data[0] if x.data.ndim == 4 else x.data
                write_ppm(path, frame)
            raise DenoiserDiverged(f"non-finite denoiser output: {err}", path) from err

    def denoise(self, x: Tensor) -> Tensor:
        return self._forward(self.m_de, x)

    def noisy(self, x: Tensor) -> Tensor:
        return self._forward(self.m_n, x)

    def denoise_frames(self, pixels: np.ndarray) -> np.ndarray:
        """Inference on raw frames; accepts (h, w, c) or (n, h, w, c)."""
        single = pixels.ndim == 3
        batch = pixels[None] if single else pixels
        with ad.no_grad():
            out = self.denoise(ad.constant(batch)).data
        return out[0] if single else out

    def as_policy_denoiser(self) -> Callable[[np.ndarray], np.ndarray]:
        return self.denoise_frames

    def save(self, path) -> None:
        arrays = {name: t.data for name, t in self.named_params().items()}
        arrays["meta/arch"] = np.array([float(DENOISER_ARCHS.index(self.arch))])
        arrays["meta/width"] = np.array([float(self.width)])
        save_arrays(path, arrays)

    @classmethod
    def load(cls, path) -> "DenoiserPair":
        arrays = load_arrays(path)
        arch = DENOISER_ARCHS[int(arrays.pop("meta/arch")[0])]
        width = int(arrays.pop("meta/width")[0])
        pair = cls(arch=arch, width=width, seed=0)
        nn.load_named_params(pair.named_params(), arrays)
        return pair


# ---------------------------------------------------------------------------
# replay buffer

class ReplayBuffer:
    """Ring of episodes holding cluttered steps only.

    Sampled chunks never cross episode boundaries; when an episode is
    shorter than the requested chunk length the whole batch contracts to
    the shortest selected episode so chunks stay equal-length.
    """

    def __init__(self, capacity_steps: int = 10_000):
        self.capacity = int(capacity_steps)
        self._episodes: list[dict] = []
        self._open: Optional[dict] = None

    @property
    def total_steps(self) -> int:
        n = sum(len(ep["act"]) for ep in self._episodes)
        if self._open is not None:
            n += len(self._open["act"])
        return n

    @property
    def num_episodes(self) -> int:
        return len(self._episodes) + (1 if self._open else 0)

    def episodes(self) -> list[dict]:
        """Closed episodes, oldest first."""
        return list(self._episodes)

    def begin_episode(self) -> None:
        if self._open is not None:
            self.end_episode()
        self._open = {"obs": [], "act": [], "rew": []}

    def add(self, obs_pixels: np.ndarray, action: int, reward: float) -> None:
        if self._open is None:
            raise RuntimeError("add before begin_episode")
        self._open["obs"].append(np.asarray(obs_pixels, dtype=np.float64))
        self._open["act"].append(int(action))
        self._open["rew"].append(float(reward))

    def end_episode(self) -> None:
        if self._open is None:
            return
        if self._open["act"]:
            ep = {
                "obs": np.stack(self._open["obs"]),
                "act": np.array(self._open["act"], dtype=np.int64),
                "rew": np.array(self._open["rew"], dtype=np.float64),
            }
            self._episodes.append(ep)
        self._open = None
        while (len(self._episodes) > 1
               and sum(len(e["act"]) for e in self._episodes) > self.capacity):
            self._episodes.pop(0)

    def sample_chunks(self, rng: np.random.Generator, batch_size: int,
                      chunk_length: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Time-major batch (obs (T,B,h,w,c), actions (T,B), rewards (T,B))."""
        if not self._episodes:
            raise RuntimeError("cannot sample from an empty buffer")
        lengths = np.array([len(e["act"]) for e in self._episodes], dtype=np.float64)
        probs = lengths / lengths.sum()
        picks = rng.choice(len(self._episodes), size=batch_size, p=probs)
        t = int(min(chunk_length, min(len(self._episodes[i]["act"]) for i in picks)))
        obs, acts, rews = [], [], []
        for i in picks:
            ep = self._episodes[i]
            start = int(rng.integers(0, len(ep["act"]) - t + 1))
            obs.append(ep["obs"][start:start + t])
            acts.append(ep["act"][start:start + t])
            rews.append(ep["rew"][start:start + t])
        return (np.stack(obs, axis=1), np.stack(acts, axis=1), np.stack(rews, axis=1))


# ---------------------------------------------------------------------------
# adaptation losses

def _flatten_chunk(obs: np.ndarray) -> Tensor:
    t, b = obs.shape[:2]
    return ad.constant(obs.reshape(t * b, *obs.shape[2:]))


def _require_frozen(wm) -> None:
    if not wm.frozen:
        raise ContractViolation("the world model must be frozen during adaptation")


def loss_sc(pair: DenoiserPair, wm, obs: np.ndarray, actions: np.ndarray,
            rng: np.random.Generator, state_samples: int = 1) -> Tensor:
    """Denoised frames scored against their own filtered reconstruction."""
    _require_frozen(wm)
    t, b = actions.shape
    den = pair.denoise(_flatten_chunk(obs))
    total = None
    for _ in range(state_samples):
        res = wm.observe(den, actions, rng)
        dec = wm.decode_obs(res.features)
        nll = ad.gaussian_nll(den, dec, 1.0)
        total = nll if total is None else ad.add(total, nll)
    return ad.mul(total, 1.0 / (b * state_samples))


def loss_n(pair: DenoiserPair, obs: np.ndarray) -> Tensor:
    """Cluttered frames scored against the round trip m_n(m_de(o))."""
    t, b = obs.shape[:2]
    x = _flatten_chunk(obs)
    rec = pair.noisy(pair.denoise(x))
    return ad.mul(ad.gaussian_nll(x, rec, 1.0), 1.0 / b)


def loss_rew(pair: DenoiserPair, wm, obs: np.ndarray, actions: np.ndarray,
             rewards: np.ndarray, rng: np.random.Generator,
             state_samples: int = 1) -> Tensor:
    """True rewards scored against the head driven by denoised filtering."""
    _require_frozen(wm)
    if rewards is None:
        raise ContractViolation("reward loss enabled but the chunk has no rewards")
    t, b = actions.shape
    den = pair.denoise(_flatten_chunk(obs))
    target = ad.constant(rewards.reshape(t * b, 1))
    total = None
    for _ in range(state_samples):
        res = wm.observe(den, actions, rng)
        pred = wm.predict_reward(res.features)
        nll = ad.gaussian_nll(target, pred, 1.0)
        total = nll if total is None else ad.add(total, nll)
    return ad.mul(total, 1.0 / (b * state_samples))


def combined_losses(pair: DenoiserPair, wm, obs: np.ndarray, actions: np.ndarray,
                    rewards: Optional[np.ndarray], rng: np.random.Generator,
                    use_sc: bool = True, use_n: bool = True, use_rew: bool = True,
                    state_samples: int = 1) -> dict[str, Tensor]:
    """All enabled terms off one denoise/filter pass; returns per-term tensors.

    Matches the standalone loss functions exactly when driven by the same
    random stream (one filter pass consumes one stream draw per step).
    """
    if not (use_sc or use_n or use_rew):
        raise ContractViolation("at least one adaptation loss must be enabled")
    t, b = actions.shape
    x = _flatten_chunk(obs)
    den = pair.denoise(x)
    out: dict[str, Tensor] = {}
    if use_sc or use_rew:
        _require_frozen(wm)
        sc_total = None
        rew_total = None
        target = (ad.constant(rewards.reshape(t * b, 1))
                  if use_rew and rewards is not None else None)
        if use_rew and target is None:
            raise ContractViolation("reward loss enabled but the chunk has no rewards")
        for _ in range(state_samples):
            res = wm.observe(den, actions, rng)
            if use_sc:
                nll = ad.gaussian_nll(den, wm.decode_obs(res.features), 1.0)
                sc_total = nll if sc_total is None else ad.add(sc_total, nll)
            if use_rew:
                nll = ad.gaussian_nll(target, wm.predict_reward(res.features), 1.0)
                rew_total = nll if rew_total is None else ad.add(rew_total, nll)
        if use_sc:
            out["sc"] = ad.mul(sc_total, 1.0 / (b * state_samples))
        if use_rew:
            out["rew"] = ad.mul(rew_total, 1.0 / (b * state_samples))
    if use_n:
        rec = pair.noisy(den)
        out["n"] = ad.mul(ad.gaussian_nll(x, rec, 1.0), 1.0 / b)
    total = None
    for name in ADAPTATION_LOSS_NAMES:
        if name in out:
            total = out[name] if total is None else ad.add(total, out[name])
    out["total"] = total
    return out


# ---------------------------------------------------------------------------
# the adaptation loop

@dataclass
class AdaptConfig:
    denoise_lr: float = 1e-4
    adam_epsilon: float = 1e-7
    grad_clip_norm: float = 100.0
    batch_size: int = 16
    chunk_length: int = 20
    collect_interval: int = 50     # environment steps gathered per iteration
    update_steps: int = 25         # gradient steps per iteration
    iterations: int = 40
    warmup_episodes: int = 5
    buffer_capacity: int = 10_000
    use_sc: bool = True
    use_n: bool = True
    use_rew: bool = True
    state_samples: int = 1
    collect_epsilon: float = 0.3
    denoiser_arch: str = "generic"
    denoiser_width: int = 16
    divergence_threshold: float = 1e6
    seed: int = 0

    def __post_init__(self):
        if not (self.use_sc or self.use_n or self.use_rew):
            raise ValueError("at least one adaptation loss must be enabled")
        if self.denoiser_arch not in DENOISER_ARCHS:
            raise ValueError(f"unknown denoiser architecture {self.denoiser_arch!r}")


@dataclass
class AdaptResult:
    pair: DenoiserPair
    metrics: list
    wm_checksum_before: str
    wm_checksum_after: str
    policy_hash_before: str
    policy_hash_after: str
    pair_render_calls_during_adapt: int


class Rollout:
    """Episode cursor that lets collection phases split an episode.

    Stores (cluttered observation, action, reward-on-arrival) per frame;
    the terminal frame carries a stay placeholder action.
    """

    def __init__(self, world: DistractorEnv, buffer: ReplayBuffer, seed_iter):
        self.world = world
        self.buffer = buffer
        self.seed_iter = seed_iter
        self.current = None
        self.pending_reward = 0.0
        self.done = True

    def step(self, denoise_frames, spec: PolicySpec, rng: np.random.Generator,
             counter: BlindStepCounter) -> bool:
        if self.done:
            self.current = self.world.reset(next(self.seed_iter))
            self.pending_reward = 0.0
            self.buffer.begin_episode()
            self.done = False
        pixels = denoise_frames(self.current.pixels)
        action = act(spec, pixels, self.world.config, rng, counter)
        self.buffer.add(self.current.pixels, action, self.pending_reward)
        nxt, reward, finished = self.world.step(action)
        self.current = nxt
        self.pending_reward = reward
        if finished:
            self.buffer.add(nxt.pixels, ACTION_STAY, reward)
            self.buffer.end_episode()
            self.done = True
        return finished


def _collect(rollout: Rollout, pair: DenoiserPair, spec: PolicySpec,
             rng: np.random.Generator, counter: BlindStepCounter,
             steps: Optional[int] = None, episodes: Optional[int] = None) -> None:
    if (steps is None) == (episodes is None):
        raise ValueError("specify exactly one of steps or episodes")
    taken = 0
    finished = 0
    while (steps is not None and taken < steps) or (episodes is not None and finished < episodes):
        if rollout.step(pair.denoise_frames, spec, rng, counter):
            finished += 1
        taken += 1


def adapt(cfg: AdaptConfig, wm, world: DistractorEnv,
          collect_spec: Optional[PolicySpec] = None,
          on_iteration: Optional[Callable] = None) -> AdaptResult:
    """Alternate gradient updates on buffered chunks with fresh collection.

    The clean-frame oracle is never touched here: the pair-render counter
    is asserted unchanged at the end. Evaluation belongs to the caller's
    ``on_iteration`` hook, which runs between iterations.
    """
    _require_frozen(wm)
    if collect_spec is None:
        collect_spec = PolicySpec("epsilon_greedy", epsilon=cfg.collect_epsilon,
                                  seed=cfg.seed)
    wm_before = wm.checksum()
    from .policy import policy_hash
    pol_before = policy_hash(collect_spec)
    pair_calls_before = world.pair_render_count

    root = np.random.SeedSequence([int(cfg.seed), 0xada])
    init_ss, collect_ss, sample_ss, reparam_ss, seeds_ss = root.spawn(5)
    pair = DenoiserPair(cfg.denoiser_arch, cfg.denoiser_width,
                        seed=int(init_ss.generate_state(1)[0]))
    collect_rng = np.random.default_rng(collect_ss)
    sample_rng = np.random.default_rng(sample_ss)
    reparam_rng = np.random.default_rng(reparam_ss)
    seed_stream = iter(int(s) for s in
                       np.random.default_rng(seeds_ss).integers(0, 2**63 - 1, size=1_000_000))

    buffer = ReplayBuffer(cfg.buffer_capacity)
    counter = BlindStepCounter()
    rollout = Rollout(world, buffer, seed_stream)
    _collect(rollout, pair, collect_spec, collect_rng, counter,
             episodes=cfg.warmup_episodes)

    opt = Adam(pair.parameters(), lr=cfg.denoise_lr, eps=cfg.adam_epsilon,
               grad_clip_norm=cfg.grad_clip_norm)
    metrics: list[dict] = []
    snapshot = {name: t.data.copy() for name, t in pair.named_params().items()}

    for iteration in range(cfg.iterations):
        sums = {name: 0.0 for name in ADAPTATION_LOSS_NAMES}
        total_sum = 0.0
        for _ in range(cfg.update_steps):
            obs, acts, rews = buffer.sample_chunks(sample_rng, cfg.batch_size,
                                                   cfg.chunk_length)
            try:
                losses = combined_losses(pair, wm, obs, acts, rews, reparam_rng,
                                         use_sc=cfg.use_sc, use_n=cfg.use_n,
                                         use_rew=cfg.use_rew,
                                         state_samples=cfg.state_samples)
                total = losses["total"]
                value = total.item()
                if not math.isfinite(value) or value > cfg.divergence_threshold:
                    raise TrainingDiverged(
                        f"adaptation loss {value} exceeded {cfg.divergence_threshold}",
                        last_good=snapshot)
                ad.backward(total)
                opt.step()
            except ad.NonFiniteError as err:
                raise TrainingDiverged(f"non-finite adaptation step: {err}",
                                       last_good=snapshot) from err
            finally:
                ad.clear_tape()
            for name in ADAPTATION_LOSS_NAMES:
                if name in losses:
                    sums[name] += losses[name].item()
            total_sum += value
        snapshot = {name: t.data.copy() for name, t in pair.named_params().items()}

        iter_counter = BlindStepCounter()
        _collect(rollout, pair, collect_spec, collect_rng, iter_counter,
                 steps=cfg.collect_interval)
        counter.blind += iter_counter.blind
        counter.total += iter_counter.total

        row = {
            "iteration": iteration,
            "loss_sc": sums["sc"] / cfg.update_steps if cfg.use_sc else float("nan"),
            "loss_n": sums["n"] / cfg.update_steps if cfg.use_n else float("nan"),
            "loss_rew": sums["rew"] / cfg.update_steps if cfg.use_rew else float("nan"),
            "loss_total": total_sum / cfg.update_steps,
            "eval_return_mean": float("nan"),
            "oracle_denoise_mse": float("nan"),
            "blind_step_rate": iter_counter.rate,
        }
        metrics.append(row)
        if on_iteration is not None:
            on_iteration(iteration, pair, row)

    pair_calls_after = world.pair_render_count
    delta = pair_calls_after - pair_calls_before
    if delta != 0:
        raise ContractViolation(
            f"render_pair was called {delta} times on the adaptation path")
    result = AdaptResult(
        pair=pair,
        metrics=metrics,
        wm_checksum_before=wm_before,
        wm_checksum_after=wm.checksum(),
        policy_hash_before=pol_before,
        policy_hash_after=policy_hash(collect_spec),
        pair_render_calls_during_adapt=delta,
    )
    return result


# ---------------------------------------------------------------------------
# evaluation-phase helpers (clean-frame oracle allowed here)

def oracle_denoise_mse(denoiser: Callable[[np.ndarray], np.ndarray],
                       world: DistractorEnv, frames: int = 64, seed: int = 0,
                       policy: Optional[PolicySpec] = None) -> float:
    """Mean per-pixel squared error of denoised frames against clean pairs."""
    if policy is None:
        policy = PolicySpec("random", seed=seed)
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x0e50]))
    errors = []
    world.reset(seed)
    for _ in range(frames):
        clean, cluttered = world.render_pair()
        den = denoiser(cluttered.pixels)
        errors.append(float(np.mean((den - clean.pixels) ** 2)))
        action = act(policy, cluttered.pixels, world.config, rng)
        _, _, done = world.step(action)
        if done:
            world.reset(int(rng.integers(2**31)))
    return float(np.mean(errors))
