"""Latent sequence model over pixel observations, trained on clean episodes.

A gated recurrent belief carries history; a small stochastic code is
inferred per step from the belief alone (prior) or from the belief plus
the frame embedding (posterior). Decoder and reward heads read the
concatenated (belief, code) features. Training maximizes reconstruction
and reward likelihood while keeping posterior and prior close, with a
free-nats floor on the divergence. Once frozen, the model only ever
serves as a fixed density estimate for adaptation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Optional, Union

import numpy as np

from . import autodiff as ad
from . import nn
from .adaptation import ReplayBuffer, Rollout, TrainingDiverged
from .autodiff import Tensor
from .checkpoint import load_arrays, save_arrays
from .env import NUM_ACTIONS, DistractorEnv, EnvConfig, NoiseSpec
from .optim import Adam
from .policy import BlindStepCounter, PolicySpec


@dataclass
class WorldModelConfig:
    obs_size: int = 16
    channels: int = 3
    action_dim: int = NUM_ACTIONS
    belief_size: int = 32
    stoch_size: int = 8
    embedding_size: int = 64
    hidden_size: int = 64
    conv_channels: int = 8
    min_std: float = 1e-4
    free_nats: float = 3.0
    kl_scale: float = 1.0
    model_lr: float = 1e-3
    adam_epsilon: float = 1e-7
    grad_clip_norm: float = 100.0
    batch_size: int = 16
    chunk_length: int = 20
    collect_interval: int = 50    # gradient steps per collected episode
    iterations: int = 60
    warmup_episodes: int = 10
    holdout_episodes: int = 5
    collect_epsilon: float = 0.7
    stop_mse: float = 0.004
    divergence_threshold: float = 1e6
    buffer_capacity: int = 10_000
    seed: int = 0

    def __post_init__(self):
        if self.obs_size % 2 != 0:
            raise ValueError("obs_size must be even (2x2 mean pooling)")


@dataclass
class RSSMState:
    """Belief plus stochastic code for one step of a batch."""

    belief: Tensor            # (B, belief_size)
    mean: Tensor              # (B, stoch_size)
    std: Tensor               # (B, stoch_size)
    sample: Tensor            # (B, stoch_size)


@dataclass
class ObserveResult:
    """Posterior filter pass over a chunk, time-major concatenated."""

    beliefs: Tensor           # (T*B, belief)
    post_mean: Tensor         # (T*B, stoch)
    post_std: Tensor
    prior_mean: Tensor
    prior_std: Tensor
    samples: Tensor           # (T*B, stoch)
    features: Tensor          # (T*B, belief + stoch)
    steps: list               # per-step (posterior RSSMState, prior (mean, std))


class WorldModel:
    def __init__(self, cfg: WorldModelConfig, seed: int = 0):
        self.cfg = cfg
        self.frozen = False
        rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x3d]))
        c = cfg.conv_channels
        pooled = (cfg.obs_size // 2) ** 2 * c
        feat = cfg.belief_size + cfg.stoch_size
        pix = cfg.obs_size * cfg.obs_size * cfg.channels

        self.enc_conv = nn.Conv2d(rng, cfg.channels, c, 3, activation=ad.relu)
        self.enc_dense = nn.Dense(rng, pooled, cfg.embedding_size, activation=ad.elu)
        self.rnn_in = nn.Dense(rng, cfg.stoch_size + cfg.action_dim,
                               cfg.hidden_size, activation=ad.elu)
        self.cell = nn.GRUCell(rng, cfg.hidden_size, cfg.belief_size)
        self.prior_hidden = nn.Dense(rng, cfg.belief_size, cfg.hidden_size,
                                     activation=ad.elu)
        self.prior_out = nn.Dense(rng, cfg.hidden_size, 2 * cfg.stoch_size)
        self.post_hidden = nn.Dense(rng, cfg.belief_size + cfg.embedding_size,
                                    cfg.hidden_size, activation=ad.elu)
        self.post_out = nn.Dense(rng, cfg.hidden_size, 2 * cfg.stoch_size)
        self.dec_hidden = nn.Dense(rng, feat, cfg.hidden_size, activation=ad.elu)
        self.dec_out = nn.Dense(rng, cfg.hidden_size, pix)
        self.rew_hidden = nn.Dense(rng, feat, cfg.hidden_size, activation=ad.elu)
        self.rew_out = nn.Dense(rng, cfg.hidden_size, 1)

        self._layers = {
            "enc_conv": self.enc_conv, "enc_dense": self.enc_dense,
            "rnn_in": self.rnn_in, "cell": self.cell,
            "prior_hidden": self.prior_hidden, "prior_out": self.prior_out,
            "post_hidden": self.post_hidden, "post_out": self.post_out,
            "dec_hidden": self.dec_hidden, "dec_out": self.dec_out,
            "rew_hidden": self.rew_hidden, "rew_out": self.rew_out,
        }

    # -- parameters ---------------------------------------------------------

    def named_params(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for name, layer in self._layers.items():
            out.update(layer.named_params(name))
        return out

    def parameters(self) -> list[Tensor]:
        return [t for _, t in sorted(self.named_params().items())]

    def checksum(self) -> str:
        return nn.params_checksum(self.named_params())

    def freeze(self) -> None:
        for p in self.parameters():
            p.requires_grad = False
        self.frozen = True

    def save(self, path) -> None:
        cfg = self.cfg
        arrays = {name: t.data for name, t in self.named_params().items()}
        arrays["meta/dims"] = np.array([
            cfg.obs_size, cfg.channels, cfg.action_dim, cfg.belief_size,
            cfg.stoch_size, cfg.embedding_size, cfg.hidden_size,
            cfg.conv_channels], dtype=np.float64)
        arrays["meta/min_std"] = np.array([cfg.min_std])
        arrays["meta/free_nats"] = np.array([cfg.free_nats])
        arrays["meta/kl_scale"] = np.array([cfg.kl_scale])
        arrays["meta/frozen"] = np.array([1.0 if self.frozen else 0.0])
        save_arrays(path, arrays)

    @classmethod
    def load(cls, path, cfg: Optional[WorldModelConfig] = None) -> "WorldModel":
        arrays = load_arrays(path)
        dims = [int(v) for v in arrays.pop("meta/dims")]
        base = cfg if cfg is not None else WorldModelConfig()
        base = replace(
            base, obs_size=dims[0], channels=dims[1], action_dim=dims[2],
            belief_size=dims[3], stoch_size=dims[4], embedding_size=dims[5],
            hidden_size=dims[6], conv_channels=dims[7],
            min_std=float(arrays.pop("meta/min_std")[0]),
            free_nats=float(arrays.pop("meta/free_nats")[0]),
            kl_scale=float(arrays.pop("meta/kl_scale")[0]))
        frozen = bool(arrays.pop("meta/frozen")[0])
        model = cls(base, seed=0)
        nn.load_named_params(model.named_params(), arrays)
        if frozen:
            model.freeze()
        return model

    # -- network pieces ------------------------------------------------------

    def encode(self, obs: Tensor) -> Tensor:
        """(N, S, S, C) frames to (N, embedding) codes."""
        n, s, _, c = obs.shape
        h = self.enc_conv(obs)
        cc = self.cfg.conv_channels
        h = ad.reshape(h, (n, s // 2, 2, s // 2, 2, cc))
        h = ad.mean(h, axis=(2, 4))
        h = ad.reshape(h, (n, (s // 2) * (s // 2) * cc))
        return self.enc_dense(h)

    def _dist(self, raw: Tensor) -> tuple[Tensor, Tensor]:
        z = self.cfg.stoch_size
        mean_part = ad.slice_(raw, 1, 0, z)
        std_part = ad.slice_(raw, 1, z, 2 * z)
        std = ad.add(ad.softplus(std_part), self.cfg.min_std)
        return mean_part, std

    def decode_obs(self, features: Tensor) -> Tensor:
        n = features.shape[0]
        s, c = self.cfg.obs_size, self.cfg.channels
        flat = ad.sigmoid(self.dec_out(self.dec_hidden(features)))
        return ad.reshape(flat, (n, s, s, c))

    def predict_reward(self, features: Tensor) -> Tensor:
        return self.rew_out(self.rew_hidden(features))

    # -- filtering -----------------------------------------------------------

    def observe(self, obs: Union[Tensor, np.ndarray], actions: np.ndarray,
                rng: Optional[np.random.Generator], sample: bool = True
                ) -> ObserveResult:
        """Filter a chunk: posterior states per step plus prior statistics.

        ``obs`` is time-major, either an (T*B, S, S, C) tensor (gradients
        flow through it) or a raw (T, B, S, S, C) array. ``actions[t]`` is
        the action taken after frame t; the first step is conditioned on a
        zero action and zero initial state.
        """
        t_len, batch = actions.shape
        if isinstance(obs, np.ndarray):
            obs = ad.constant(obs.reshape(t_len * batch, *obs.shape[2:]))
        if obs.shape[0] != t_len * batch:
            raise ad.ShapeError(
                f"observe: {obs.shape[0]} frames for {t_len}x{batch} chunk")
        if sample and rng is None:
            raise ValueError("sampling requires a random generator")

        cfg = self.cfg
        embeddings = self.encode(obs)
        eye = np.eye(cfg.action_dim)
        belief = ad.constant(np.zeros((batch, cfg.belief_size)))
        code = ad.constant(np.zeros((batch, cfg.stoch_size)))

        steps = []
        beliefs, post_means, post_stds = [], [], []
        prior_means, prior_stds, samples = [], [], []
        for t in range(t_len):
            if t == 0:
                action = ad.constant(np.zeros((batch, cfg.action_dim)))
            else:
                action = ad.constant(eye[actions[t - 1]])
            x = self.rnn_in(ad.concat([code, action], axis=1))
            belief = self.cell(belief, x)
            prior_mean, prior_std = self._dist(self.prior_out(self.prior_hidden(belief)))
            emb_t = ad.slice_(embeddings, 0, t * batch, (t + 1) * batch)
            post_mean, post_std = self._dist(
                self.post_out(self.post_hidden(ad.concat([belief, emb_t], axis=1))))
            if sample:
                eps = ad.constant(rng.standard_normal((batch, cfg.stoch_size)))
                code = ad.add(post_mean, ad.mul(post_std, eps))
            else:
                code = post_mean
            steps.append((RSSMState(belief, post_mean, post_std, code),
                          (prior_mean, prior_std)))
            beliefs.append(belief)
            post_means.append(post_mean)
            post_stds.append(post_std)
            prior_means.append(prior_mean)
            prior_stds.append(prior_std)
            samples.append(code)

        cat = lambda xs: ad.concat(xs, axis=0) if len(xs) > 1 else xs[0]
        beliefs_cat = cat(beliefs)
        samples_cat = cat(samples)
        return ObserveResult(
            beliefs=beliefs_cat,
            post_mean=cat(post_means),
            post_std=cat(post_stds),
            prior_mean=cat(prior_means),
            prior_std=cat(prior_stds),
            samples=samples_cat,
            features=ad.concat([beliefs_cat, samples_cat], axis=1),
            steps=steps,
        )

    # -- objectives -----------------------------------------------------------

    def elbo_loss(self, obs: np.ndarray, actions: np.ndarray, rewards: np.ndarray,
                  rng: np.random.Generator) -> dict[str, Tensor]:
        """Reconstruction, divergence and reward terms over a chunk batch.

        Components are per-sequence (summed over time, pixels and code
        dimensions, averaged over the batch); minimizing the total
        maximizes the bound.
        """
        t_len, batch = actions.shape
        obs_flat = ad.constant(obs.reshape(t_len * batch, *obs.shape[2:]))
        component = "filter"
        try:
            res = self.observe(obs_flat, actions, rng)
            component = "j_o"
            j_o = ad.mul(ad.gaussian_nll(obs_flat, self.decode_obs(res.features), 1.0),
                         1.0 / batch)
            component = "j_rew"
            target = ad.constant(rewards.reshape(t_len * batch, 1))
            j_rew = ad.mul(ad.gaussian_nll(target, self.predict_reward(res.features), 1.0),
                           1.0 / batch)
            component = "j_kl"
            kl = ad.gaussian_kl(res.post_mean, res.post_std,
                                res.prior_mean, res.prior_std)
            per_step = ad.sum_(kl, axis=1)
            j_kl = ad.mul(ad.sum_(ad.clamp_min(per_step, self.cfg.free_nats)),
                          1.0 / batch)
            component = "total"
            total = ad.add(ad.add(j_o, j_rew), ad.mul(j_kl, self.cfg.kl_scale))
        except ad.NonFiniteError as err:
            raise TrainingDiverged(f"non-finite value in {component}: {err}") from err
        return {"total": total, "j_o": j_o, "j_kl": j_kl, "j_rew": j_rew}

    def holdout_recon_mse(self, episodes: list) -> float:
        """Per-pixel MSE of posterior-mean reconstructions on held-out data."""
        errors = []
        with ad.no_grad():
            for ep in episodes:
                obs, acts = ep["obs"], ep["act"]
                t_len = len(acts)
                chunk_obs = obs[:, None]            # (T, 1, S, S, C)
                chunk_act = acts[:, None]
                res = self.observe(chunk_obs, chunk_act, None, sample=False)
                dec = self.decode_obs(res.features)
                target = obs.reshape(t_len, *obs.shape[1:])
                errors.append(float(np.mean(
                    (dec.data.reshape(target.shape) - target) ** 2)))
        return float(np.mean(errors))


# ---------------------------------------------------------------------------
# pretraining loop

@dataclass
class PretrainResult:
    model: WorldModel
    metrics: list
    holdout_mse: float
    gradient_steps: int


def collect_clean_episodes(env_cfg: EnvConfig, spec: PolicySpec, episodes: int,
                           seed: int) -> list[dict]:
    """Roll seeded clean episodes; returns per-episode obs/act/rew arrays."""
    world = DistractorEnv(env_cfg, NoiseSpec("none"))
    buffer = ReplayBuffer(capacity_steps=10**9)
    seed_rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0xc0]))
    seeds = iter(int(s) for s in seed_rng.integers(0, 2**63 - 1, size=episodes * 4))
    rollout = Rollout(world, buffer, seeds)
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0xc1]))
    counter = BlindStepCounter()
    finished = 0
    while finished < episodes:
        if rollout.step(lambda p: p, spec, rng, counter):
            finished += 1
    return buffer.episodes()


def pretrain(env_cfg: EnvConfig, cfg: WorldModelConfig) -> PretrainResult:
    """Alternate clean-episode collection with gradient steps on chunks.

    Stops early once the held-out reconstruction error beats
    ``cfg.stop_mse``; aborts on divergence.
    """
    root = np.random.SeedSequence([int(cfg.seed), 0x93e])
    init_ss, collect_ss, sample_ss, reparam_ss, hold_ss, seeds_ss = root.spawn(6)

    collect_spec = PolicySpec("epsilon_greedy", epsilon=cfg.collect_epsilon,
                              seed=cfg.seed)
    holdout = collect_clean_episodes(env_cfg, collect_spec, cfg.holdout_episodes,
                                     int(hold_ss.generate_state(1)[0]))

    world = DistractorEnv(env_cfg, NoiseSpec("none"))
    buffer = ReplayBuffer(cfg.buffer_capacity)
    seed_stream = iter(int(s) for s in
                       np.random.default_rng(seeds_ss).integers(0, 2**63 - 1,
                                                                size=1_000_000))
    rollout = Rollout(world, buffer, seed_stream)
    collect_rng = np.random.default_rng(collect_ss)
    sample_rng = np.random.default_rng(sample_ss)
    reparam_rng = np.random.default_rng(reparam_ss)
    counter = BlindStepCounter()

    finished = 0
    while finished < cfg.warmup_episodes:
        if rollout.step(lambda p: p, collect_spec, collect_rng, counter):
            finished += 1

    wm = WorldModel(cfg, seed=int(init_ss.generate_state(1)[0]))
    opt = Adam(wm.parameters(), lr=cfg.model_lr, eps=cfg.adam_epsilon,
               grad_clip_norm=cfg.grad_clip_norm)

    metrics: list[dict] = []
    step_count = 0
    holdout_mse = math.inf
    for iteration in range(cfg.iterations):
        finished = 0
        while finished < 1:
            if rollout.step(lambda p: p, collect_spec, collect_rng, counter):
                finished += 1
        sums = {"j_o": 0.0, "j_kl": 0.0, "j_rew": 0.0, "total": 0.0}
        for _ in range(cfg.collect_interval):
            obs, acts, rews = buffer.sample_chunks(sample_rng, cfg.batch_size,
                                                   cfg.chunk_length)
            try:
                losses = wm.elbo_loss(obs, acts, rews, reparam_rng)
                value = losses["total"].item()
                if not math.isfinite(value) or value > cfg.divergence_threshold:
                    raise TrainingDiverged(
                        f"pretraining loss {value} exceeded {cfg.divergence_threshold}")
                ad.backward(losses["total"])
                opt.step()
            finally:
                ad.clear_tape()
            step_count += 1
            for key in ("j_o", "j_kl", "j_rew", "total"):
                sums[key] += losses[key].item()
        holdout_mse = wm.holdout_recon_mse(holdout)
        metrics.append({
            "step": step_count,
            "j_o": sums["j_o"] / cfg.collect_interval,
            "j_kl": sums["j_kl"] / cfg.collect_interval,
            "j_rew": sums["j_rew"] / cfg.collect_interval,
            "total": sums["total"] / cfg.collect_interval,
            "holdout_recon_mse": holdout_mse,
        })
        if holdout_mse <= cfg.stop_mse:
            break

    wm.freeze()
    return PretrainResult(model=wm, metrics=metrics, holdout_mse=holdout_mse,
                          gradient_steps=step_count)
