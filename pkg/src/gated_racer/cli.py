"""Command line front end: ``gated-racer <command> [options]``.

Commands: train-il, train-rl, evaluate, benchmark, gen-track.  Every run
writes into ``--out`` a ``manifest.json`` describing the resolved config and
the artifacts it produced; CSVs carry the same config as ``#`` comment lines.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
import traceback
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Optional

import numpy as np
import yaml

from . import experiments as ex
from .artifacts import atomic_write_text, config_comments, write_csv
from .errors import ConfigError, GatedRacerError
from .expert import PROFILE_SPEEDS, ExpertConfig, GateConfig, PurePursuitExpert
from .il import ALGORITHMS, CURVE_HEADER, TrainConfig, curve_rows, write_intervention_log
from .maps import TrackMap
from .metrics import write_results
from .plots import line_plot, trajectory_plot
from .policy import load_checkpoint, save_policy
from .ppo import PpoConfig, RewardConfig, train_ppo, write_reward_curve
from .sim import NoiseConfig, SimConfig
from .tracks import TrackGenConfig, generate_track, load_training_map

log = logging.getLogger("gated_racer")

PRESETS = ("laptimes", "efficiency", "bootstrap", "generalization")
EXIT_CONFIG = 2
EXIT_FAILURE = 1


@dataclass
class ExperimentConfig:
    maps: list = field(default_factory=list)  # empty: bundled training map
    algorithm: str = "eil"
    bootstrap: Optional[str] = None
    profile: str = "normal"
    budget: int = 20000
    steps: int = 20000
    seeds: list = field(default_factory=lambda: [0])
    noise: dict = field(default_factory=lambda: {"alpha": -0.2, "beta": 0.2, "enabled": False})
    gate: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)
    ppo: dict = field(default_factory=dict)
    reward: dict = field(default_factory=dict)
    sim: dict = field(default_factory=dict)
    trackgen: dict = field(default_factory=dict)
    preset: str = "laptimes"
    algorithms: list = field(default_factory=lambda: list(ALGORITHMS))
    unseen_tracks: int = 3

    # -- typed views -----------------------------------------------------

    def gate_config(self) -> GateConfig:
        return _build("gate", GateConfig, self.gate)

    def train_config(self) -> TrainConfig:
        return _build("train", TrainConfig, {**self.train, "budget": self.budget})

    def ppo_config(self) -> PpoConfig:
        return _build("ppo", PpoConfig, {**self.ppo, "total_steps": self.steps})

    def reward_config(self) -> RewardConfig:
        return _build("reward", RewardConfig, self.reward)

    def sim_config(self) -> SimConfig:
        return _build("sim", SimConfig, self.sim)

    def trackgen_config(self) -> TrackGenConfig:
        return _build("trackgen", TrackGenConfig, self.trackgen)

    def noise_config(self) -> Optional[NoiseConfig]:
        # validated even when disabled so a bad block never sits unnoticed
        nc = _build("noise", NoiseConfig, {k: v for k, v in self.noise.items() if k != "enabled"})
        return nc if self.noise.get("enabled", False) else None

    def expert_config(self) -> ExpertConfig:
        return ExpertConfig(speed_profile=self.profile)

    def to_dict(self) -> dict:
        return asdict(self)


def _build(name, cls, values: dict):
    known = {f.name for f in fields(cls)}
    for k in values:
        if k not in known:
            raise ConfigError(f"config field '{name}.{k}': unknown field (expected one of {sorted(known)})")
    try:
        return cls(**values)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"config field '{name}': {e}") from None


def _check_int(name, v, minimum=0):
    if isinstance(v, bool) or not isinstance(v, int) or v < minimum:
        raise ConfigError(f"config field '{name}': expected an integer >= {minimum}, got {v!r}")


def validate(cfg: ExperimentConfig, command: str) -> ExperimentConfig:
    if cfg.algorithm not in ALGORITHMS + ("ppo",):
        raise ConfigError(f"config field 'algorithm': unknown algorithm {cfg.algorithm!r}")
    if cfg.profile not in PROFILE_SPEEDS:
        raise ConfigError(f"config field 'profile': must be one of {sorted(PROFILE_SPEEDS)}")
    if cfg.bootstrap is not None:
        if command != "train-rl":
            raise ConfigError("config field 'bootstrap': only valid with PPO (train-rl)")
        if not Path(cfg.bootstrap).is_file():
            raise ConfigError(f"config field 'bootstrap': file not found: {cfg.bootstrap}")
    for m in cfg.maps:
        if not Path(m).is_file():
            raise ConfigError(f"config field 'maps': file not found: {m}")
    _check_int("budget", cfg.budget)
    _check_int("steps", cfg.steps)
    _check_int("unseen_tracks", cfg.unseen_tracks, 1)
    if not isinstance(cfg.seeds, list) or not cfg.seeds:
        raise ConfigError("config field 'seeds': expected a non-empty list of integers")
    for s in cfg.seeds:
        _check_int("seeds", s)
    if cfg.preset not in PRESETS:
        raise ConfigError(f"config field 'preset': must be one of {PRESETS}")
    for a in cfg.algorithms:
        if a not in ALGORITHMS:
            raise ConfigError(f"config field 'algorithms': unknown algorithm {a!r}")
    if not isinstance(cfg.noise, dict):
        raise ConfigError("config field 'noise': expected a mapping with alpha, beta, enabled")
    # build every typed view once so bad values fail before any work starts
    cfg.gate_config(), cfg.train_config(), cfg.ppo_config(), cfg.reward_config()
    cfg.sim_config(), cfg.trackgen_config(), cfg.noise_config()
    return cfg


def load_config(path) -> dict:
    try:
        with open(path) as f:
            data = yaml.safe_load(f) or {}
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except yaml.YAMLError as e:
        raise ConfigError(f"config file {path} is not valid YAML: {e}") from None
    if not isinstance(data, dict):
        raise ConfigError(f"config file {path}: top level must be a mapping")
    return data


def resolve(args) -> ExperimentConfig:
    data = load_config(args.config) if getattr(args, "config", None) else {}
    known = {f.name for f in fields(ExperimentConfig)}
    for k in data:
        if k not in known:
            raise ConfigError(f"config field '{k}': unknown field")
    if "noise" in data and isinstance(data["noise"], dict):
        data["noise"] = {**ExperimentConfig().noise, **data["noise"]}
    cfg = ExperimentConfig(**data)
    if getattr(args, "seed", None) is not None:
        cfg.seeds = [args.seed]
    if getattr(args, "algo", None):
        cfg.algorithm = args.algo
    if getattr(args, "bootstrap", None):
        cfg.bootstrap = args.bootstrap
    if getattr(args, "noise", False):
        cfg.noise = {**cfg.noise, "enabled": True}
    for attr in ("profile", "budget", "steps", "preset"):
        v = getattr(args, attr, None)
        if v is not None:
            setattr(cfg, attr, v)
    if getattr(args, "map", None):
        cfg.maps = list(args.map)
    if getattr(args, "algorithms", None):
        cfg.algorithms = args.algorithms.split(",")
    return validate(cfg, args.command)


def config_hash(command: str, cfg: ExperimentConfig, extra: Optional[dict] = None) -> str:
    blob = json.dumps({"command": command, "config": cfg.to_dict(), "extra": extra or {}},
                      sort_keys=True, default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def load_maps(cfg: ExperimentConfig) -> list:
    if not cfg.maps:
        return [load_training_map()]
    return [TrackMap.load(m) for m in cfg.maps]


# --------------------------------------------------------------------------
# run bookkeeping


class Run:
    """Output directory, artifact list and manifest for one command."""

    def __init__(self, out, command: str, cfg: ExperimentConfig, extra: Optional[dict] = None):
        self.out = Path(out)
        self.out.mkdir(parents=True, exist_ok=True)
        self.command = command
        self.cfg = cfg
        self.extra = extra or {}
        self.hash = config_hash(command, cfg, self.extra)
        self.artifacts = []

    @property
    def manifest_path(self) -> Path:
        return self.out / "manifest.json"

    def already_complete(self) -> bool:
        try:
            m = json.loads(self.manifest_path.read_text())
        except (OSError, ValueError):
            return False
        return m.get("status") == "complete" and m.get("config_hash") == self.hash

    def comments(self, seed=None):
        extra = [f"{k}: {v}" for k, v in sorted(self.extra.items())]
        if seed is None:
            # artifacts spanning every seed of the run list them all
            extra.append(f"seeds: {self.cfg.seeds}")
        return [f"command: {self.command}"] + extra + config_comments(self.cfg.to_dict(), seed)

    def path(self, name: str) -> Path:
        p = self.out / name
        self.artifacts.append(name)
        return p

    def manifest(self, status: str, error: Optional[str] = None, detail: Optional[str] = None):
        m = {"status": status, "command": self.command, "config_hash": self.hash,
             "config": self.cfg.to_dict(), "artifacts": sorted(set(self.artifacts))}
        m.update(self.extra)
        if error:
            m["error"] = error
            m["traceback"] = detail
        atomic_write_text(self.manifest_path, json.dumps(m, indent=2, sort_keys=True, default=str) + "\n")


def _desc(run: Run, seed=None) -> str:
    return "; ".join(run.comments(seed))


# --------------------------------------------------------------------------
# commands


def cmd_train_il(run: Run):
    cfg = run.cfg
    if cfg.algorithm not in ALGORITHMS:
        raise ConfigError(f"config field 'algorithm': train-il needs one of {ALGORITHMS}")
    track = load_maps(cfg)[0]
    runs = ex.il_sweep(track, [cfg.algorithm], cfg.seeds, cfg.budget, cfg.profile, cfg.train_config(),
                       cfg.gate_config(), cfg.sim_config())
    reports, series, trajs = [], {}, {}
    for r in runs:
        tag = f"{r.algorithm}_s{r.seed}"
        com = run.comments(r.seed)
        save_policy(r.policy, run.path(f"{tag}.json"),
                    meta={"algorithm": r.algorithm, "seed": r.seed, "labels_used": r.labels_used,
                          "config": cfg.to_dict(), "train": r.config})
        write_csv(run.path(f"{tag}_curve.csv"), CURVE_HEADER, curve_rows(r.curve), com)
        if r.intervention_log:
            write_intervention_log(r.intervention_log, run.path(f"{tag}_interventions.csv"), com)
        rep, res = ex.evaluate_many([ex.EvalJob(r.algorithm, r.seed, r.policy, track, cfg.noise_config(),
                                                sim=cfg.sim_config())])[0]
        reports.append(rep)
        series[tag] = ([p.expert_labels for p in r.curve], [p.distance_m for p in r.curve])
        trajs[tag] = res.trajectory
    write_results(reports, run.path("results.csv"), run.comments())
    line_plot(series, run.path("curve.svg"), f"{cfg.algorithm}: distance vs expert labels",
              "expert labels", "distance (m)", _desc(run))
    trajectory_plot(track, trajs, run.path("trajectory.svg"), f"{cfg.algorithm} on {track.name}", _desc(run))
    return reports


def cmd_train_rl(run: Run):
    cfg = run.cfg
    track = load_maps(cfg)[0]
    init = None
    if cfg.bootstrap:
        init = load_checkpoint(cfg.bootstrap)[0]
    reports, series, trajs = [], {}, {}
    for seed in cfg.seeds:
        res = train_ppo(track, replace(cfg.ppo_config(), seed=seed), init, cfg.reward_config(),
                        cfg.sim_config())
        label = "ppo+bootstrap" if init is not None else "ppo"
        tag = f"ppo_s{seed}"
        save_policy(res.policy, run.path(f"{tag}.json"), res.value_net,
                    meta={"algorithm": "ppo", "seed": seed, "bootstrap": cfg.bootstrap,
                          "config": cfg.to_dict(), "ppo": res.config})
        write_reward_curve(res.curve, run.path(f"{tag}_reward_curve.csv"), run.comments(seed))
        rep, ev = ex.evaluate_many([ex.EvalJob(label, seed, res.policy, track, cfg.noise_config(),
                                               sim=cfg.sim_config())])[0]
        reports.append(rep)
        series[tag] = ([p.env_steps for p in res.curve], [p.mean_episode_reward for p in res.curve])
        trajs[tag] = ev.trajectory
    write_results(reports, run.path("results.csv"), run.comments())
    line_plot(series, run.path("reward_curve.svg"), "PPO: mean episode reward", "environment steps",
              "mean episode reward", _desc(run))
    trajectory_plot(track, trajs, run.path("trajectory.svg"), f"PPO on {track.name}", _desc(run))
    return reports


class _ExpertPolicy:
    """Adapter so the expert can be evaluated like a learned policy."""

    def __init__(self, cfg: ExpertConfig, sim_cfg: SimConfig):
        self.cfg = cfg
        self.sim_cfg = sim_cfg
        self.track = None

    def bind(self, track):
        p = _ExpertPolicy(self.cfg, self.sim_cfg)
        p.track = track
        p._impl = PurePursuitExpert(track, self.cfg, self.sim_cfg)
        return p

    def act(self, obs):
        return self._impl.act(obs)


def cmd_evaluate(run: Run, policy_path: str):
    cfg = run.cfg
    tracks = load_maps(cfg)
    sim_cfg = cfg.sim_config()
    if policy_path == "expert":
        base = _ExpertPolicy(cfg.expert_config(), sim_cfg)
        label = f"expert-{cfg.profile}"
    else:
        if not Path(policy_path).is_file():
            raise ConfigError(f"--policy: file not found: {policy_path}")
        base = load_checkpoint(policy_path)[0]
        label = Path(policy_path).stem
    jobs = []
    for tr in tracks:
        pol = base.bind(tr) if isinstance(base, _ExpertPolicy) else base
        for seed in cfg.seeds:
            jobs.append(ex.EvalJob(label, seed, pol, tr, cfg.noise_config(), sim=sim_cfg))
    out = ex.evaluate_many(jobs)
    write_results([rep for rep, _ in out], run.path("results.csv"), run.comments())
    for i, tr in enumerate(tracks):
        trajs = {f"{rep.policy} s{rep.seed}": res.trajectory for rep, res in out if rep.map == tr.name}
        trajectory_plot(tr, trajs, run.path(f"trajectory_{i}_{tr.name}.svg"), f"{label} on {tr.name}",
                        _desc(run))
    return [rep for rep, _ in out]


def _curves_plot(run, runs, name, title):
    series = {}
    for label in dict.fromkeys(r.label for r in runs):
        curves = [r.curve for r in runs if r.label == label]
        n = min(len(c) for c in curves)
        xs = [p.env_steps for p in curves[0][:n]]
        ys = np.median([[p.mean_episode_reward for p in c[:n]] for c in curves], axis=0)
        series[label] = (xs, list(ys))
    line_plot(series, run.path(name), title, "environment steps", "median mean episode reward", _desc(run))


def cmd_benchmark(run: Run):
    cfg = run.cfg
    track = load_maps(cfg)[0]
    tc, gate, sim_cfg, noise = cfg.train_config(), cfg.gate_config(), cfg.sim_config(), cfg.noise_config()
    com = run.comments()
    if cfg.preset in ("laptimes", "efficiency"):
        runs = ex.il_sweep(track, cfg.algorithms, cfg.seeds, cfg.budget, cfg.profile, tc, gate, sim_cfg)
        rows = [[r.algorithm, r.seed] + row for r in runs for row in curve_rows(r.curve)]
        write_csv(run.path("curves.csv"), ["algorithm", "seed"] + CURVE_HEADER, rows, com)
        jobs = [ex.EvalJob(r.algorithm, r.seed, r.policy, track, noise, sim=sim_cfg) for r in runs]
        reports = [rep for rep, _ in ex.evaluate_many(jobs)]
        reports.append(ex.expert_report(track, cfg.profile, sim_cfg))
        write_results(reports, run.path("results.csv"), com)
        series = {}
        for a in cfg.algorithms:
            curves = [r.curve for r in runs if r.algorithm == a]
            series[a] = ([p.expert_labels for p in curves[0]], [p.distance_m for p in curves[0]])
        line_plot(series, run.path("curves.svg"), f"distance vs expert labels ({cfg.profile}, seed {cfg.seeds[0]})",
                  "expert labels", "distance (m)", _desc(run))
        return reports
    if cfg.preset == "bootstrap":
        il_runs = ex.il_sweep(track, cfg.algorithms, cfg.seeds, cfg.ppo_config().bootstrap_labels, cfg.profile,
                              tc, gate, sim_cfg)
        runs = ex.bootstrap_study(track, cfg.seeds, il_runs, ppo_cfg=cfg.ppo_config(), algorithms=cfg.algorithms,
                                  reward_cfg=cfg.reward_config(), sim_cfg=sim_cfg)
        rows = [[r.label, r.seed, p.env_steps, repr(p.mean_episode_reward), repr(p.mean_episode_length)]
                for r in runs for p in r.curve]
        write_csv(run.path("curves.csv"), ["curve", "seed", "env_steps", "mean_episode_reward",
                                           "mean_episode_length"], rows, com)
        _curves_plot(run, runs, "curves.svg", "PPO from scratch vs IL bootstraps")
        reports = [rep for rep, _ in ex.evaluate_many(
            [ex.EvalJob(r.label, r.seed, r.policy, track, noise, sim=sim_cfg) for r in runs])]
        write_results(reports, run.path("results.csv"), com)
        return reports
    # generalization
    gen_cfg = cfg.trackgen_config()
    unseen = ex.unseen_tracks([1000 + i for i in range(cfg.unseen_tracks)], gen_cfg)
    il_runs = ex.il_sweep(track, cfg.algorithms, cfg.seeds, cfg.ppo_config().bootstrap_labels, cfg.profile,
                          tc, gate, sim_cfg)
    ppo_runs = ex.bootstrap_study(track, cfg.seeds, il_runs, ppo_cfg=cfg.ppo_config(), algorithms=cfg.algorithms,
                                  reward_cfg=cfg.reward_config(), sim_cfg=sim_cfg)
    policies = [(r.algorithm, r.seed, r.policy) for r in il_runs] + [(r.label, r.seed, r.policy) for r in ppo_runs]
    reports = ex.generalization_study(policies, unseen, noise)
    write_results(reports, run.path("results.csv"), com)
    return reports


def cmd_gen_track(run: Run):
    cfg = run.cfg
    gen_cfg = cfg.trackgen_config()
    tracks = []
    for seed in cfg.seeds:
        tr = generate_track(seed, gen_cfg)
        stem = run.out / tr.name
        tr.save(stem)
        run.artifacts += [f"{tr.name}.pgm", f"{tr.name}.yaml", f"{tr.name}.csv"]
        trajectory_plot(tr, {}, run.path(f"{tr.name}.svg"), tr.name, _desc(run, seed))
        tracks.append(tr)
    return tracks


# --------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML experiment config")
    common.add_argument("--seed", type=int, help="run a single seed (overrides config seeds)")
    common.add_argument("--out", default="runs/latest", help="output directory (default: %(default)s)")
    common.add_argument("--noise", action="store_true",
                        help="evaluate with uniform LiDAR noise (config alpha/beta); training stays noise-free")
    common.add_argument("--resume", action="store_true", help="skip if --out already holds this finished run")
    common.add_argument("--map", action="append", help="map yaml (repeatable; default: bundled map)")
    common.add_argument("--profile", choices=sorted(PROFILE_SPEEDS), help="expert speed profile")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="gated-racer", description="Imitation and reinforcement learning "
                                "benchmarks on a 2D LiDAR racing simulator.")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("train-il", parents=[common], help="train one IL algorithm")
    s.add_argument("--algo", choices=ALGORITHMS)
    s.add_argument("--budget", type=int, help="expert label budget")

    s = sub.add_parser("train-rl", parents=[common], help="train PPO, optionally bootstrapped")
    s.add_argument("--bootstrap", help="IL checkpoint to initialize the actor")
    s.add_argument("--steps", type=int, help="environment steps")
    s.add_argument("--algo", choices=["ppo"])

    s = sub.add_parser("evaluate", parents=[common], help="evaluate a checkpoint (or 'expert')")
    s.add_argument("--policy", required=True, help="checkpoint path or 'expert'")

    s = sub.add_parser("benchmark", parents=[common], help="run a preset experiment")
    s.add_argument("--preset", choices=PRESETS)
    s.add_argument("--algorithms", help="comma-separated IL algorithms")
    s.add_argument("--budget", type=int, help="expert label budget")
    s.add_argument("--steps", type=int, help="PPO environment steps")

    sub.add_parser("gen-track", parents=[common], help="generate unseen tracks (one per seed)")
    return p


COMMANDS = {
    "train-il": cmd_train_il,
    "train-rl": cmd_train_rl,
    "benchmark": cmd_benchmark,
    "gen-track": cmd_gen_track,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve(args)
        extra = {"policy": args.policy} if args.command == "evaluate" else None
        run = Run(args.out, args.command, cfg, extra)
    except (ConfigError, GatedRacerError) as e:
        print(f"gated-racer: error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    if args.resume and run.already_complete():
        print(f"{run.out}: already complete, nothing to do")
        return 0
    try:
        if args.command == "evaluate":
            cmd_evaluate(run, args.policy)
        else:
            COMMANDS[args.command](run)
    except ConfigError as e:
        run.manifest("failed", str(e), traceback.format_exc())
        print(f"gated-racer: error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as e:  # noqa: BLE001 - any failure still leaves a manifest behind
        run.manifest("failed", f"{type(e).__name__}: {e}", traceback.format_exc())
        print(f"gated-racer: run failed: {type(e).__name__}: {e} (see {run.manifest_path})", file=sys.stderr)
        return EXIT_FAILURE
    run.manifest("complete")
    print(f"wrote {len(set(run.artifacts))} artifacts to {run.out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
