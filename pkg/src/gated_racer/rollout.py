"""Deterministic evaluation rollouts."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .expert import ExpertConfig, PurePursuitExpert
from .sim import NoiseConfig, RacingEnv


@dataclass
class EvalResult:
    distance: float
    lap_completed: bool
    elapsed: Optional[float]
    crashed: bool
    time: float
    policy_actions: np.ndarray = field(repr=False)  # (n, 2) steer, speed
    expert_actions: np.ndarray = field(repr=False)
    trajectory: np.ndarray = field(repr=False)  # (n + 1, 4) x, y, theta, v

    @property
    def action_trace(self):
        return list(zip(map(tuple, self.policy_actions), map(tuple, self.expert_actions)))


def evaluate_policy(env: RacingEnv, policy, max_time: Optional[float] = None,
                    noise: Optional[NoiseConfig] = None, expert_cfg: ExpertConfig = ExpertConfig(),
                    noise_seed: int = 0, stop_at_lap: bool = False) -> EvalResult:
    """Roll ``policy`` from the start pose until it crashes or ``max_time``
    runs out (or at the first lap with ``stop_at_lap``).  ``distance`` covers
    the whole rollout; ``elapsed`` is the first lap's time.  The expert is
    queried passively on every visited state.

    ``policy`` is anything with ``act(observation) -> Action``.  With
    ``noise`` the policy sees uniformly perturbed scans; the expert never
    reads the scan.
    """
    if noise is not None:
        env = RacingEnv(env.track, env.cfg, noise, noise_seed)
    max_time = env.cfg.max_time if max_time is None else max_time
    expert = PurePursuitExpert(env.track, expert_cfg, env.cfg)
    obs = env.reset()
    pol, exp, traj = [], [], [env.state.as_array()]
    lap = False
    elapsed = None
    crashed = False
    while env.time < max_time - 1e-9:
        a = policy.act(obs).clamped(env.cfg)
        e = expert.act(obs)
        pol.append((a.steer, a.speed))
        exp.append((e.steer, e.speed))
        out = env.step(a)
        traj.append(out.state.as_array())
        obs = out.observation
        if out.crashed:
            crashed = True
            break
        if out.lap_completed and not lap:
            lap, elapsed = True, env.time
            if stop_at_lap:
                break
    return EvalResult(env.distance, lap, elapsed, crashed, env.time,
                      np.array(pol).reshape(-1, 2), np.array(exp).reshape(-1, 2), np.array(traj))
