"""Benchmark routines shared by the CLI presets and the acceptance suite.

Every job is seeded on its own, so results do not depend on how many worker
processes run them or in which order they finish.
"""

from __future__ import annotations

import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .errors import ConfigError
from .expert import ExpertConfig, GateConfig, PurePursuitExpert
from .il import TrainConfig, train
from .metrics import EvalReport
from .policy import MlpPolicy
from .ppo import PpoConfig, RewardConfig, train_ppo
from .rollout import evaluate_policy
from .sim import NoiseConfig, RacingEnv, SimConfig
from .tracks import TrackGenConfig, generate_track

THREADS_ENV = "GATED_RACER_THREADS"


def worker_count(n_jobs: int) -> int:
    raw = os.environ.get(THREADS_ENV)
    if raw is None or raw == "":
        cap = os.cpu_count() or 1
    else:
        try:
            cap = int(raw)
        except ValueError:
            raise ConfigError(f"{THREADS_ENV} must be a positive integer, got {raw!r}") from None
        if cap < 1:
            raise ConfigError(f"{THREADS_ENV} must be a positive integer, got {raw!r}")
    return max(1, min(cap, n_jobs))


def run_jobs(fn, jobs):
    """``[fn(j) for j in jobs]``, fanned out over worker processes when allowed."""
    jobs = list(jobs)
    n = worker_count(len(jobs))
    if n <= 1:
        return [fn(j) for j in jobs]
    with ProcessPoolExecutor(n) as ex:
        return list(ex.map(fn, jobs))


@dataclass
class IlRun:
    algorithm: str
    seed: int
    policy: MlpPolicy
    curve: list
    intervention_log: list
    labels_used: int
    config: dict = field(default_factory=dict)

    @property
    def final(self):
        return self.curve[-1]


@dataclass(frozen=True)
class IlJob:
    algorithm: str
    seed: int
    track: object
    expert: ExpertConfig
    train: TrainConfig
    gate: GateConfig = GateConfig()
    sim: SimConfig = SimConfig()
    noise: Optional[NoiseConfig] = None


def _il_job(job: IlJob) -> IlRun:
    cfg = replace(job.train, seed=job.seed)
    r = train(job.algorithm, job.track, job.expert, cfg=cfg, gate=job.gate, sim_cfg=job.sim,
              noise=job.noise)
    return IlRun(job.algorithm, job.seed, r.policy, r.curve, r.intervention_log,
                 r.budget.expert_labels_used, r.config)


def il_sweep(track, algorithms, seeds, budget: int, profile: str = "normal",
             train_cfg: TrainConfig = TrainConfig(), gate: GateConfig = GateConfig(),
             sim_cfg: SimConfig = SimConfig(), noise: Optional[NoiseConfig] = None) -> list:
    """Train every (algorithm, seed) pair; returns ``IlRun`` objects in
    algorithm-major order."""
    expert = ExpertConfig(speed_profile=profile)
    tc = replace(train_cfg, budget=budget)
    jobs = [IlJob(a, s, track, expert, tc, gate, sim_cfg, noise) for a in algorithms for s in seeds]
    return run_jobs(_il_job, jobs)


@dataclass
class PpoRun:
    label: str
    seed: int
    policy: MlpPolicy
    curve: list
    config: dict = field(default_factory=dict)

    @property
    def final_reward(self) -> float:
        return self.curve[-1].mean_episode_reward if self.curve else float("nan")


@dataclass(frozen=True)
class PpoJob:
    label: str
    seed: int
    track: object
    ppo: PpoConfig
    init: Optional[MlpPolicy] = None
    reward: RewardConfig = RewardConfig()
    sim: SimConfig = SimConfig()
    noise: Optional[NoiseConfig] = None


def _ppo_job(job: PpoJob) -> PpoRun:
    r = train_ppo(job.track, replace(job.ppo, seed=job.seed), job.init, job.reward, job.sim,
                  noise=job.noise)
    return PpoRun(job.label, job.seed, r.policy, r.curve, r.config)


def ppo_sweep(track, seeds, inits: dict, ppo_cfg: PpoConfig = PpoConfig(),
              reward_cfg: RewardConfig = RewardConfig(), sim_cfg: SimConfig = SimConfig(),
              noise: Optional[NoiseConfig] = None) -> list:
    """``inits`` maps a curve label to ``None`` (scratch) or to a per-seed dict
    of initial actors."""
    jobs = []
    for label, init in inits.items():
        for s in seeds:
            actor = None if init is None else init[s]
            jobs.append(PpoJob(label, s, track, ppo_cfg, actor, reward_cfg, sim_cfg, noise))
    return run_jobs(_ppo_job, jobs)


def bootstrap_study(track, seeds, il_runs=None, il_budget: int = 3000, ppo_cfg: PpoConfig = PpoConfig(),
                    algorithms=("bc", "dagger", "hg-dagger", "eil"), **kw) -> list:
    """Scratch PPO plus PPO bootstrapped from each IL algorithm at ``il_budget``
    labels.  Pass ``il_runs`` to reuse already trained IL policies."""
    if il_runs is None:
        il_runs = il_sweep(track, algorithms, seeds, il_budget)
    inits = {"scratch": None}
    for a in algorithms:
        inits[f"ppo+{a}"] = {r.seed: r.policy for r in il_runs if r.algorithm == a}
    return ppo_sweep(track, seeds, inits, ppo_cfg, **kw)


def steps_to_reach(curve, threshold: float) -> Optional[int]:
    for p in curve:
        if p.mean_episode_reward >= threshold:
            return p.env_steps
    return None


def unseen_tracks(seeds, cfg: TrackGenConfig = TrackGenConfig()) -> list:
    return run_jobs(_gen_job, [(s, cfg) for s in seeds])


def _gen_job(args):
    seed, cfg = args
    return generate_track(seed, cfg)


@dataclass(frozen=True)
class EvalJob:
    label: str
    seed: int
    policy: object
    track: object
    noise: Optional[NoiseConfig] = None
    max_time: Optional[float] = None
    sim: SimConfig = SimConfig()


def _eval_job(job: EvalJob):
    env = RacingEnv(job.track, job.sim)
    res = evaluate_policy(env, job.policy, job.max_time, job.noise, noise_seed=job.seed)
    return EvalReport.from_result(job.label, job.track.name, job.seed, res), res


def evaluate_many(jobs) -> list:
    """``(EvalReport, EvalResult)`` per job."""
    return run_jobs(_eval_job, jobs)


def generalization_study(policies, tracks, noise: Optional[NoiseConfig] = None) -> list:
    """``policies`` is a list of ``(label, seed, policy)``; every one is run on
    every track.  Returns EvalReports."""
    jobs = [EvalJob(label, seed, pol, tr, noise) for label, seed, pol in policies for tr in tracks]
    return [rep for rep, _ in evaluate_many(jobs)]


def expert_report(track, profile: str = "normal", sim_cfg: SimConfig = SimConfig()) -> EvalReport:
    """The expert evaluated like any learned policy (its distance to itself is 0)."""
    cfg = ExpertConfig(speed_profile=profile)
    res = evaluate_policy(RacingEnv(track, sim_cfg), PurePursuitExpert(track, cfg, sim_cfg), expert_cfg=cfg)
    return EvalReport.from_result(f"expert-{profile}", track.name, 0, res)


def median_by(reports, key, value):
    """Median of ``value(report)`` grouped by ``key(report)``."""
    groups = {}
    for r in reports:
        groups.setdefault(key(r), []).append(value(r))
    return {k: float(np.median(v)) for k, v in groups.items()}
