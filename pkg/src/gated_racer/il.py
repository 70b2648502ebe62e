"""Imitation learning: BC, DAgger, HG-DAgger and EIL.

All four share one schedule.  A warm start fits the policy on the first
``warm_start`` expert labels; each later iteration collects ``iter_steps``
control steps, aggregates the data and refits from the warm-start weights.
The budget counts expert-explicit labels only.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field
from enum import Enum
from pathlib import Path
from typing import Optional

import numpy as np

from .artifacts import write_csv
from .errors import ConfigError, ExpertCrashError
from .expert import ExpertConfig, GateConfig, PurePursuitExpert, gate_decision
from .policy import Adam, MlpPolicy, adam_update, mse_loss_grad
from .rollout import evaluate_policy
from .sim import NoiseConfig, RacingEnv, SimConfig

log = logging.getLogger(__name__)

ALGORITHMS = ("bc", "dagger", "hg-dagger", "eil")


class Provenance(str, Enum):
    EXPERT = "expert"
    GOOD = "implicit_good"
    BAD = "implicit_bad"


@dataclass
class TrainConfig:
    budget: int = 20000
    warm_start: int = 500
    iter_steps: int = 1000
    max_iters: int = 60
    epochs: int = 50
    batch_size: int = 64
    lr: float = 1e-3
    hidden_dim: int = 256
    lambda_good: float = 0.5
    lambda_bad: float = 0.5
    eval_max_time: float = 60.0
    eval_every: int = 1
    seed: int = 0


@dataclass
class IlBudget:
    expert_labels_max: int = 20000
    warm_start_labels: int = 500
    expert_labels_used: int = 0

    @property
    def remaining(self) -> int:
        return self.expert_labels_max - self.expert_labels_used

    def spend(self, n: int = 1):
        if self.expert_labels_used + n > self.expert_labels_max:
            raise RuntimeError("expert label budget exceeded")
        self.expert_labels_used += n


class Dataset:
    """Append-only store of (normalized scan, normalized action, provenance)."""

    def __init__(self, obs_dim: int):
        self.obs_dim = obs_dim
        self._obs = {p: [] for p in Provenance}
        self._act = {p: [] for p in Provenance}
        self.order = []  # (provenance, index) in insertion order

    def add(self, obs, action, provenance: Provenance):
        self.order.append((provenance, len(self._obs[provenance])))
        self._obs[provenance].append(np.asarray(obs, dtype=np.float64))
        self._act[provenance].append(np.asarray(action, dtype=np.float64))

    def count(self, provenance: Provenance) -> int:
        return len(self._obs[provenance])

    def __len__(self):
        return len(self.order)

    def arrays(self, provenance: Provenance):
        n = self.count(provenance)
        if n == 0:
            return np.zeros((0, self.obs_dim)), np.zeros((0, 2))
        return np.array(self._obs[provenance]), np.array(self._act[provenance])

    def to_csv(self, path):
        path = Path(path)
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["provenance"] + [f"obs_{i}" for i in range(self.obs_dim)] + ["steer", "speed"])
            for prov, i in self.order:
                w.writerow([prov.value] + [repr(float(v)) for v in self._obs[prov][i]]
                           + [repr(float(v)) for v in self._act[prov][i]])

    @classmethod
    def from_csv(cls, path) -> "Dataset":
        with open(path, newline="") as f:
            reader = csv.reader(f)
            header = next(reader)
            ds = cls(len(header) - 3)
            for row in reader:
                vals = np.array(row[1:], dtype=np.float64)
                ds.add(vals[:-2], vals[-2:], Provenance(row[0]))
        return ds


@dataclass
class CurvePoint:
    expert_labels: int
    distance_m: float
    lap: bool
    elapsed_s: Optional[float]


@dataclass
class IterationLog:
    iteration: int
    steps: int
    interventions: int  # trigger events
    expert_steps: int  # steps under expert control
    crashes: int

    @property
    def intervention_fraction(self) -> float:
        return self.expert_steps / self.steps if self.steps else 0.0


@dataclass
class IlResult:
    algorithm: str
    policy: MlpPolicy
    curve: list
    intervention_log: list
    dataset: Dataset
    budget: IlBudget
    config: dict = field(default_factory=dict)


# --------------------------------------------------------------------------
# losses and fitting


def _gate_scales(policy: MlpPolicy, gate: GateConfig):
    """Per-dimension factors turning a normalized action difference into
    gate-threshold units: (steer, speed)."""
    def inv(g):
        if math.isinf(g):
            return 0.0
        return 1.0 / max(g, 1e-12)
    return np.array([policy.steer_max * inv(gate.gamma_omega), 0.5 * policy.v_max * inv(gate.gamma_v)])


def _hinge_terms(a, target, scales, good: bool):
    """Per-sample hinge and its derivative w.r.t. the normalized action."""
    scaled = (a - target) * scales
    mag = np.abs(scaled)
    k = np.argmax(mag, axis=1)
    rows = np.arange(len(a))
    d = mag[rows, k]
    if good:
        slack = np.maximum(0.0, d - 1.0)
        dd = 2.0 * slack
    else:
        slack = np.maximum(0.0, 1.0 - d)
        dd = -2.0 * slack
    grad = np.zeros_like(a)
    grad[rows, k] = dd * np.sign(scaled[rows, k]) * scales[k]
    return slack * slack, grad


def eil_loss_grad(policy: MlpPolicy, gate: GateConfig, expert_batch, good_batch=None, bad_batch=None,
                  lambda_good: float = 0.5, lambda_bad: float = 0.5):
    """MSE on expert labels plus squared hinges on the implicit streams.

    ``hinge_good`` penalizes drifting more than one gate threshold (inf-norm
    over gate-scaled differences) away from an accepted novice action;
    ``hinge_bad`` penalizes staying within one threshold of an action that
    triggered an intervention.  Batches are ``(obs, normalized actions)``.
    """
    if expert_batch is not None and len(expert_batch[0]):
        loss, grads = mse_loss_grad(policy, *expert_batch)
    else:
        loss, grads = 0.0, {k: np.zeros_like(v) for k, v in policy.params.items()}
    scales = _gate_scales(policy, gate)
    for batch, lam, good in ((good_batch, lambda_good, True), (bad_batch, lambda_bad, False)):
        if batch is None or lam == 0.0 or len(batch[0]) == 0:
            continue
        obs, target = np.atleast_2d(batch[0]), np.atleast_2d(batch[1])
        raw, cache = policy.raw(obs)
        a = np.tanh(raw)
        h, dh = _hinge_terms(a, target, scales, good)
        n = len(obs)
        loss += lam * float(np.mean(h))
        g = policy.backward(cache, lam / n * dh * (1.0 - a * a))
        for k, v in g.items():
            grads[k] += v
    return loss, grads


def fit(policy: MlpPolicy, data: Dataset, cfg: TrainConfig, rng: np.random.Generator,
        gate: Optional[GateConfig] = None) -> float:
    """In-place minibatch Adam on the aggregated dataset; returns the last
    epoch's mean loss.  Epochs run over the expert-labeled samples; with a
    gate and non-zero lambdas each step also draws implicit minibatches."""
    ex_obs, ex_act = data.arrays(Provenance.EXPERT)
    use_good = gate is not None and cfg.lambda_good > 0 and data.count(Provenance.GOOD) > 0
    use_bad = gate is not None and cfg.lambda_bad > 0 and data.count(Provenance.BAD) > 0
    if use_good:
        g_obs, g_act = data.arrays(Provenance.GOOD)
    if use_bad:
        b_obs, b_act = data.arrays(Provenance.BAD)
    n = len(ex_obs)
    if n == 0:
        return 0.0
    opt = Adam(cfg.lr)
    bs = cfg.batch_size
    last = 0.0
    for _ in range(cfg.epochs):
        perm = rng.permutation(n)
        total = 0.0
        for start in range(0, n, bs):
            idx = perm[start:start + bs]
            if gate is None:
                loss, grads = mse_loss_grad(policy, ex_obs[idx], ex_act[idx])
            else:
                gb = bb = None
                if use_good:
                    j = rng.integers(0, len(g_obs), bs)
                    gb = (g_obs[j], g_act[j])
                if use_bad:
                    j = rng.integers(0, len(b_obs), bs)
                    bb = (b_obs[j], b_act[j])
                loss, grads = eil_loss_grad(policy, gate, (ex_obs[idx], ex_act[idx]), gb, bb,
                                            cfg.lambda_good, cfg.lambda_bad)
            adam_update(policy, grads, opt)
            total += loss * len(idx)
        last = total / n
    return last


# --------------------------------------------------------------------------
# trainers


class _Trainer:
    def __init__(self, algorithm: str, track, expert_cfg: ExpertConfig, cfg: TrainConfig,
                 gate: Optional[GateConfig] = None, sim_cfg: SimConfig = SimConfig(),
                 noise: Optional[NoiseConfig] = None):
        if algorithm not in ALGORITHMS:
            raise ConfigError(f"unknown algorithm {algorithm!r}")
        if algorithm != "bc" and cfg.budget < cfg.warm_start:
            raise ConfigError(f"budget {cfg.budget} is smaller than the warm start ({cfg.warm_start})")
        self.algorithm = algorithm
        self.track = track
        self.cfg = cfg
        self.gate = gate if gate is not None else GateConfig()
        self.sim_cfg = sim_cfg
        self.noise = noise
        self.expert_cfg = expert_cfg
        self.expert = PurePursuitExpert(track, expert_cfg, sim_cfg)
        self.budget = IlBudget(cfg.budget, cfg.warm_start)
        self.data = Dataset(sim_cfg.n_beams)
        self.curve = []
        self.log = []
        self.initial = MlpPolicy.for_sim(sim_cfg, cfg.hidden_dim, cfg.seed)
        self.policy = self.initial.copy()
        self.warm = None
        self.n_fits = 0

    def _obs(self, observation):
        return observation.scan / self.sim_cfg.max_range

    def _refit(self, start: MlpPolicy):
        rng = np.random.default_rng([self.cfg.seed, 7919, self.n_fits])
        self.n_fits += 1
        policy = start.copy()
        use_gate = self.gate if self.algorithm == "eil" else None
        loss = fit(policy, self.data, self.cfg, rng, use_gate)
        log.debug("%s fit %d on %d samples: loss %.5f", self.algorithm, self.n_fits,
                  len(self.data), loss)
        self.policy = policy

    def _evaluate(self, force: bool = False):
        if not force and self.cfg.eval_every > 1 and len(self.curve) % self.cfg.eval_every:
            return
        env = RacingEnv(self.track, self.sim_cfg)
        res = evaluate_policy(env, self.policy, self.cfg.eval_max_time, expert_cfg=self.expert_cfg)
        self.curve.append(CurvePoint(self.budget.expert_labels_used, res.distance, res.lap_completed,
                                     res.elapsed))

    def _collect_expert(self, env: RacingEnv, n: int):
        obs = env.observation
        for _ in range(n):
            a = self.expert.act(obs)
            self.data.add(self._obs(obs), self.policy.to_normalized(a), Provenance.EXPERT)
            self.budget.spend()
            out = env.step(a)
            if out.crashed:
                raise ExpertCrashError(
                    f"expert crashed at t={env.time:.2f}s pose=({out.state.x:.2f}, {out.state.y:.2f}) "
                    f"on map {self.track.name!r}; check the speed profile and lookahead")
            obs = out.observation

    def warm_start(self, env: RacingEnv):
        n = min(self.cfg.warm_start, self.budget.remaining)
        if n > 0:
            self._collect_expert(env, n)
            self._refit(self.initial)
        self.warm = self.policy.copy()
        self._evaluate(force=True)

    def _train_env(self, stream: int) -> RacingEnv:
        # scan noise (if any) only perturbs what the learner sees while training
        return RacingEnv(self.track, self.sim_cfg, self.noise, [self.cfg.seed, stream])

    def run(self) -> IlResult:
        env = self._train_env(1)
        self.warm_start(env)
        if self.algorithm == "bc":
            it = 0
            while self.budget.remaining > 0:
                it += 1
                self._collect_expert(env, min(self.cfg.iter_steps, self.budget.remaining))
                self._refit(self.warm)
                self._evaluate(force=self.budget.remaining == 0)
        else:
            self._interactive(self._train_env(2))
        return IlResult(self.algorithm, self.policy, self.curve, self.log, self.data, self.budget,
                        {"train": asdict(self.cfg), "gate": asdict(self.gate),
                         "expert": asdict(self.expert_cfg)})

    def _interactive(self, env: RacingEnv):
        gated = self.algorithm in ("hg-dagger", "eil")
        record_implicit = self.algorithm == "eil"
        max_time = self.sim_cfg.max_time
        obs = env.observation
        intervening, hold = False, 0
        for it in range(1, self.cfg.max_iters + 1):
            if self.budget.remaining <= 0:
                break
            steps = triggers = expert_steps = crashes = 0
            new_labels = 0
            novice = self.policy
            while steps < self.cfg.iter_steps and self.budget.remaining > 0:
                a_n = novice.act(obs).clamped(self.sim_cfg)
                a_e = self.expert.act(obs)
                x = self._obs(obs)
                if not gated:
                    self.data.add(x, novice.to_normalized(a_e), Provenance.EXPERT)
                    self.budget.spend()
                    new_labels += 1
                    execute = a_n
                else:
                    now, hold = gate_decision(a_n, a_e, self.gate, intervening, hold)
                    if now and not intervening:
                        triggers += 1
                        if record_implicit:
                            self.data.add(x, novice.to_normalized(a_n), Provenance.BAD)
                    if now:
                        self.data.add(x, novice.to_normalized(a_e), Provenance.EXPERT)
                        self.budget.spend()
                        new_labels += 1
                        expert_steps += 1
                        execute = a_e
                    else:
                        if record_implicit:
                            self.data.add(x, novice.to_normalized(a_n), Provenance.GOOD)
                        execute = a_n
                    intervening = now
                out = env.step(execute)
                steps += 1
                obs = out.observation
                if out.crashed or env.time >= max_time - 1e-9:
                    crashes += out.crashed
                    obs = env.reset()
                    intervening, hold = False, 0
            self.log.append(IterationLog(it, steps, triggers, expert_steps if gated else steps, crashes))
            if new_labels > 0:
                self._refit(self.warm)
            self._evaluate(force=self.budget.remaining <= 0)


def train_bc(track, expert_cfg: ExpertConfig = ExpertConfig(), cfg: TrainConfig = TrainConfig(),
             sim_cfg: SimConfig = SimConfig(), noise: Optional[NoiseConfig] = None) -> IlResult:
    """Behavior cloning: the expert drives, every visited state is labeled."""
    if cfg.budget <= 0:
        t = _Trainer("bc", track, expert_cfg, cfg, sim_cfg=sim_cfg)
        return IlResult("bc", t.initial.copy(), [], [], t.data, t.budget)
    return _Trainer("bc", track, expert_cfg, cfg, sim_cfg=sim_cfg, noise=noise).run()


def train_dagger(track, expert_cfg: ExpertConfig = ExpertConfig(), cfg: TrainConfig = TrainConfig(),
                 sim_cfg: SimConfig = SimConfig(), noise: Optional[NoiseConfig] = None) -> IlResult:
    """DAgger with the novice always in control after the warm start."""
    return _Trainer("dagger", track, expert_cfg, cfg, sim_cfg=sim_cfg, noise=noise).run()


def train_hg_dagger(track, expert_cfg: ExpertConfig = ExpertConfig(), gate: GateConfig = GateConfig(),
                    cfg: TrainConfig = TrainConfig(), sim_cfg: SimConfig = SimConfig(),
                    noise: Optional[NoiseConfig] = None) -> IlResult:
    return _Trainer("hg-dagger", track, expert_cfg, cfg, gate, sim_cfg, noise).run()


def train_eil(track, expert_cfg: ExpertConfig = ExpertConfig(), gate: GateConfig = GateConfig(),
              cfg: TrainConfig = TrainConfig(), sim_cfg: SimConfig = SimConfig(),
              noise: Optional[NoiseConfig] = None) -> IlResult:
    return _Trainer("eil", track, expert_cfg, cfg, gate, sim_cfg, noise).run()


def train(algorithm: str, track, expert_cfg: ExpertConfig = ExpertConfig(),
          gate: GateConfig = GateConfig(), cfg: TrainConfig = TrainConfig(),
          sim_cfg: SimConfig = SimConfig(), noise: Optional[NoiseConfig] = None) -> IlResult:
    if algorithm == "bc":
        return train_bc(track, expert_cfg, cfg, sim_cfg, noise)
    if algorithm == "dagger":
        return train_dagger(track, expert_cfg, cfg, sim_cfg, noise)
    if algorithm == "hg-dagger":
        return train_hg_dagger(track, expert_cfg, gate, cfg, sim_cfg, noise)
    if algorithm == "eil":
        return train_eil(track, expert_cfg, gate, cfg, sim_cfg, noise)
    raise ConfigError(f"unknown algorithm {algorithm!r}")


CURVE_HEADER = ["expert_labels", "distance_m", "lap", "elapsed_s"]


def curve_rows(curve):
    return [[p.expert_labels, f"{p.distance_m:.6f}", int(p.lap),
             "" if p.elapsed_s is None else f"{p.elapsed_s:.2f}"] for p in curve]


def write_curve(curve, path, comments=()):
    return write_csv(path, CURVE_HEADER, curve_rows(curve), comments)


def write_intervention_log(entries, path, comments=()):
    rows = [[e.iteration, e.steps, e.interventions, e.expert_steps, e.crashes,
             f"{e.intervention_fraction:.6f}"] for e in entries]
    return write_csv(path, ["iteration", "steps", "interventions", "expert_steps", "crashes",
                            "intervention_fraction"], rows, comments)
