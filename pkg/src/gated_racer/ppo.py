"""PPO with a clipped surrogate, GAE and the racing reward, trainable from a
random actor or from an imitation-learning checkpoint."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np

from .artifacts import write_csv
from .errors import ConfigError, TrainingError
from .policy import (Adam, Mlp, MlpPolicy, adam_update, entropy, gaussian_log_prob,
                     load_policy)
from .sim import NoiseConfig, RacingEnv, SimConfig

log = logging.getLogger(__name__)

CURVE_HEADER = ["env_steps", "mean_episode_reward", "mean_episode_length"]


@dataclass(frozen=True)
class RewardConfig:
    steer_coeff: float = 0.02
    crash_penalty: float = 0.5
    lateral_coeff: float = 0.02
    lateral_deadband: float = 0.1
    survival_bonus: float = 0.02
    steer_mode: str = "abs"  # or "literal": only positive steering is penalized

    def __post_init__(self):
        for name in ("steer_coeff", "crash_penalty", "lateral_coeff", "lateral_deadband", "survival_bonus"):
            if getattr(self, name) < 0:
                raise ConfigError(f"reward {name} must be >= 0")
        if self.steer_mode not in ("abs", "literal"):
            raise ConfigError(f"steer_mode must be 'abs' or 'literal', got {self.steer_mode!r}")


def reward(omega: float, crashed: bool, lateral: float, cfg: RewardConfig = RewardConfig()) -> float:
    """Per-step reward: steering penalty plus one of crash / lateral / survival."""
    w = abs(omega) if cfg.steer_mode == "abs" else max(0.0, omega)
    r = -cfg.steer_coeff * min(1.0, w)
    if crashed:
        return r + -cfg.crash_penalty
    if lateral > cfg.lateral_deadband:
        return r + -cfg.lateral_coeff * lateral
    return r + cfg.survival_bonus


@dataclass(frozen=True)
class PpoConfig:
    total_steps: int = 20000
    horizon: int = 512
    minibatch: int = 64
    epochs: int = 4
    clip: float = 0.2
    gamma: float = 0.99
    lam: float = 0.95
    value_coeff: float = 0.5
    entropy_coeff: float = 0.003
    lr: float = 3e-4
    hidden_dim: int = 256
    init_log_std: float = math.log(0.3)
    bootstrap_labels: int = 3000
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.clip < 1:
            raise ConfigError(f"clip must be in (0, 1), got {self.clip}")
        if not 0 < self.gamma <= 1:
            raise ConfigError(f"gamma must be in (0, 1], got {self.gamma}")
        if not 0 <= self.lam <= 1:
            raise ConfigError(f"lam must be in [0, 1], got {self.lam}")
        if self.total_steps < 0 or self.horizon < 1 or self.minibatch < 1 or self.epochs < 0:
            raise ConfigError("steps, horizon, minibatch and epochs must be positive")


class ValueNet(Mlp):
    """Critic with the actor's hidden shape and a scalar output."""

    def __init__(self, input_dim: int, hidden_dim: int = 256, rng=None):
        super().__init__(input_dim, hidden_dim, 1, rng, out_gain=1.0)

    def value(self, obs) -> np.ndarray:
        return self(obs)[..., 0]


def compute_gae(rewards, values, dones, gamma: float, lam: float):
    """Advantages and returns for one rollout.

    ``values`` has one more entry than ``rewards``: the last is the value of
    the state after the final step (ignored if that step is terminal).
    """
    rewards = np.asarray(rewards, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    dones = np.asarray(dones, dtype=bool)
    n = len(rewards)
    if rewards.ndim != 1 or dones.shape != (n,) or values.shape != (n + 1,):
        raise ValueError(f"shape mismatch: rewards {rewards.shape}, values {values.shape}, dones {dones.shape}")
    adv = np.zeros(n)
    last = 0.0
    for t in range(n - 1, -1, -1):
        live = 0.0 if dones[t] else 1.0
        delta = rewards[t] + gamma * values[t + 1] * live - values[t]
        last = delta + gamma * lam * live * last
        adv[t] = last
    return adv, adv + values[:-1]


def normalize_advantages(adv: np.ndarray) -> np.ndarray:
    std = adv.std()
    return (adv - adv.mean()) / (std + 1e-8)


@dataclass
class RolloutBuffer:
    obs: np.ndarray
    actions: np.ndarray  # normalized, squashed
    log_probs: np.ndarray
    advantages: np.ndarray
    returns: np.ndarray

    def __len__(self):
        return len(self.obs)


def surrogate_loss_grad(policy: MlpPolicy, value_net: ValueNet, obs, actions, old_logp, adv, returns,
                        cfg: PpoConfig):
    """Loss to minimize, ``-(clipped surrogate) + c_v (V - R)^2 - c_e H``,
    averaged over the batch, and gradients for actor and critic."""
    n = len(obs)
    logp, dlogp_draw, dlogp_dls, cache = gaussian_log_prob(policy, obs, actions, with_grad=True)
    ratio = np.exp(logp - old_logp)
    clipped = np.clip(ratio, 1.0 - cfg.clip, 1.0 + cfg.clip)
    unclipped_obj = ratio * adv
    clipped_obj = clipped * adv
    surr = np.minimum(unclipped_obj, clipped_obj)
    # d surr / d logp: ratio * A where the unclipped branch is active, else 0
    active = unclipped_obj <= clipped_obj
    g = np.where(active, ratio * adv, 0.0)

    v, vcache = value_net.raw(obs)
    v = v[:, 0]
    verr = v - returns
    ent = entropy(policy)
    loss = -float(np.mean(surr)) + cfg.value_coeff * float(np.mean(verr * verr)) - cfg.entropy_coeff * ent

    d_raw = -(g / n)[:, None] * dlogp_draw
    pgrads = policy.backward(cache, d_raw)
    pgrads["log_std"] = -np.sum((g / n)[:, None] * dlogp_dls, axis=0) - cfg.entropy_coeff
    vgrads = value_net.backward(vcache, (2.0 * cfg.value_coeff / n * verr)[:, None])
    stats = {
        "policy_loss": -float(np.mean(surr)),
        "value_loss": float(np.mean(verr * verr)),
        "entropy": ent,
        "clip_fraction": float(np.mean(np.abs(ratio - 1.0) > cfg.clip)),
    }
    return loss, pgrads, vgrads, stats


def ppo_update(policy: MlpPolicy, value_net: ValueNet, buf: RolloutBuffer, cfg: PpoConfig,
               rng: np.random.Generator, popt: Adam, vopt: Adam) -> dict:
    """Epochs of minibatch Adam on the clipped objective, in place.
    Advantages are normalized over the whole buffer first."""
    adv = normalize_advantages(buf.advantages)
    n = len(buf)
    stats = {}
    for epoch in range(cfg.epochs):
        perm = rng.permutation(n)
        for k, start in enumerate(range(0, n, cfg.minibatch)):
            idx = perm[start:start + cfg.minibatch]
            loss, pg, vg, stats = surrogate_loss_grad(policy, value_net, buf.obs[idx], buf.actions[idx],
                                                      buf.log_probs[idx], adv[idx], buf.returns[idx], cfg)
            if not math.isfinite(loss):
                raise TrainingError(f"non-finite PPO loss in epoch {epoch}, minibatch {k} "
                                    f"(samples {idx[:8].tolist()}...)")
            adam_update(policy, pg, popt)
            vopt.step(value_net.params, vg)
    return stats


@dataclass
class RewardPoint:
    env_steps: int
    mean_episode_reward: float
    mean_episode_length: float


@dataclass
class PpoResult:
    policy: MlpPolicy
    value_net: ValueNet
    curve: list
    config: dict


def sample_action(policy: MlpPolicy, x: np.ndarray, rng: np.random.Generator):
    raw = policy(x)
    u = raw + np.exp(policy.log_std) * rng.standard_normal(2)
    return np.tanh(u)


def train_ppo(track, cfg: PpoConfig = PpoConfig(), init: Optional[MlpPolicy] = None,
              reward_cfg: RewardConfig = RewardConfig(), sim_cfg: SimConfig = SimConfig(),
              max_episode_time: Optional[float] = None, noise: Optional[NoiseConfig] = None) -> PpoResult:
    """PPO on ``track``.  ``init`` is a shape-compatible actor (for example an
    IL policy); its weights are copied and its log_std is reset.  The critic
    always starts fresh.

    Episodes end on crash (terminal), lap completion or the time cap; the
    latter two are truncations whose last reward is bootstrapped with the
    critic.  The curve has one point per rollout window: the mean reward and
    length of the episodes that finished in it, carried forward when none
    did (before the first finished episode, the running episode is used).
    """
    rng = np.random.default_rng([cfg.seed, 31337])
    if init is None:
        policy = MlpPolicy.for_sim(sim_cfg, cfg.hidden_dim, cfg.seed)
    else:
        if init.input_dim != sim_cfg.n_beams or init.output_dim != 2:
            raise ConfigError(f"bootstrap policy has input {init.input_dim}, expected {sim_cfg.n_beams}")
        policy = init.copy()
    policy.log_std = np.full(2, cfg.init_log_std)
    policy.clamp_log_std()
    value_net = ValueNet(sim_cfg.n_beams, cfg.hidden_dim, np.random.default_rng([cfg.seed, 4242]))
    popt, vopt = Adam(cfg.lr), Adam(cfg.lr)
    max_time = sim_cfg.max_time if max_episode_time is None else max_episode_time

    env = RacingEnv(track, sim_cfg, noise, [cfg.seed, 3])
    obs = env.reset()
    x = obs.scan / sim_cfg.max_range
    ep_ret, ep_len = 0.0, 0
    curve = []
    last_point = None
    steps = 0
    while steps < cfg.total_steps:
        n = min(cfg.horizon, cfg.total_steps - steps)
        b_obs = np.zeros((n, sim_cfg.n_beams))
        b_act = np.zeros((n, 2))
        rewards = np.zeros(n)
        dones = np.zeros(n, dtype=bool)
        finished = []
        for t in range(n):
            a = sample_action(policy, x, rng)
            b_obs[t] = x
            b_act[t] = a
            action = policy.to_action(a)
            out = env.step(action)
            r = reward(action.steer, out.crashed, out.lateral_error, reward_cfg)
            ep_ret += r
            ep_len += 1
            x = out.observation.scan / sim_cfg.max_range
            truncated = not out.crashed and (out.lap_completed or env.time >= max_time - 1e-9)
            if truncated:
                r += cfg.gamma * float(value_net.value(x))
            rewards[t] = r
            if out.crashed or truncated:
                dones[t] = True
                finished.append((ep_ret, ep_len))
                ep_ret, ep_len = 0.0, 0
                x = env.reset().scan / sim_cfg.max_range
        steps += n
        values = np.append(value_net.value(b_obs), value_net.value(x))
        adv, ret = compute_gae(rewards, values, dones, cfg.gamma, cfg.lam)
        old_logp = gaussian_log_prob(policy, b_obs, b_act)
        stats = ppo_update(policy, value_net, RolloutBuffer(b_obs, b_act, old_logp, adv, ret), cfg, rng,
                           popt, vopt)
        if finished:
            last_point = (float(np.mean([f[0] for f in finished])), float(np.mean([f[1] for f in finished])))
        point = last_point if last_point is not None else (ep_ret, float(ep_len))
        curve.append(RewardPoint(steps, point[0], point[1]))
        log.debug("ppo %d steps: reward %.3f len %.1f %s", steps, point[0], point[1], stats)
    conf = {"ppo": asdict(cfg), "reward": asdict(reward_cfg), "bootstrapped": init is not None}
    return PpoResult(policy, value_net, curve, conf)


def train_ppo_from_checkpoint(track, checkpoint, cfg: PpoConfig = PpoConfig(), **kw) -> PpoResult:
    return train_ppo(track, cfg, load_policy(checkpoint), **kw)


def write_reward_curve(curve, path, comments=()):
    rows = [[p.env_steps, repr(p.mean_episode_reward), repr(p.mean_episode_length)] for p in curve]
    return write_csv(path, CURVE_HEADER, rows, comments)
