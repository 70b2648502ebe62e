"""Pure pursuit expert and the action-difference intervention gate."""

from __future__ import annotations

import math
from dataclasses import dataclass

from .errors import ConfigError
from .sim import Action, RacingEnv, SimConfig, VehicleState, _point_at, _project, wrap_angle

# Target speeds (m/s) calibrated on the bundled training map so the expert's
# lap-average speed lands on 4.79 / 6.39 / 8.24 m/s.
PROFILE_SPEEDS = {"slow": 5.113, "normal": 6.82, "fast": 8.793}


@dataclass(frozen=True)
class ExpertConfig:
    lookahead: float = 1.2
    speed_profile: str = "normal"
    wheelbase: float = 0.33
    slowdown: float = 0.5  # c_slow
    speed_lookahead: bool = False
    lookahead_gain: float = 0.25  # s, used when speed_lookahead is on
    target_speed: float | None = None  # overrides the profile table

    def __post_init__(self):
        if self.lookahead <= 0:
            raise ConfigError(f"lookahead must be positive, got {self.lookahead}")
        if self.target_speed is None and self.speed_profile not in PROFILE_SPEEDS:
            raise ConfigError(f"unknown speed profile {self.speed_profile!r}")

    @property
    def profile_speed(self) -> float:
        if self.target_speed is not None:
            return self.target_speed
        return PROFILE_SPEEDS[self.speed_profile]


@dataclass(frozen=True)
class GateConfig:
    gamma_v: float = 1.0
    gamma_omega: float = 0.1
    release_hold: int = 10

    def __post_init__(self):
        if not (self.gamma_v >= 0 and self.gamma_omega >= 0):
            raise ConfigError("gate thresholds must be non-negative")
        if self.release_hold < 1:
            raise ConfigError("release_hold must be >= 1")


def pursuit_steer(alpha: float, wheelbase: float, lookahead: float) -> float:
    """Unclamped pure pursuit steering for heading error ``alpha``."""
    return math.atan(2.0 * wheelbase * math.sin(alpha) / lookahead)


def pure_pursuit(pose: VehicleState, track, cfg: ExpertConfig = ExpertConfig(),
                 sim_cfg: SimConfig = SimConfig()) -> Action:
    xs = track.centerline[:, 0]
    ys = track.centerline[:, 1]
    if len(xs) < 3 or track.track_length <= 0:
        raise ConfigError("degenerate centerline")
    lookahead = cfg.lookahead
    if cfg.speed_lookahead:
        lookahead = max(cfg.lookahead_gain * pose.v, 0.5 * cfg.lookahead)
    _, s, _ = _project(pose.x, pose.y, xs, ys, track.arclength)
    gx, gy = _point_at(s + lookahead, xs, ys, track.arclength)
    alpha = wrap_angle(math.atan2(gy - pose.y, gx - pose.x) - pose.theta)
    steer = pursuit_steer(alpha, cfg.wheelbase, lookahead)
    steer = min(max(steer, -sim_cfg.steer_max), sim_cfg.steer_max)
    speed = cfg.profile_speed * (1.0 - cfg.slowdown * abs(steer) / sim_cfg.steer_max)
    return Action(steer, min(max(speed, 0.0), sim_cfg.v_max))


class PurePursuitExpert:
    """Policy wrapper: reads the pose from the observation."""

    def __init__(self, track, cfg: ExpertConfig = ExpertConfig(), sim_cfg: SimConfig = SimConfig()):
        self.track = track
        self.cfg = cfg
        self.sim_cfg = sim_cfg

    def act(self, obs) -> Action:
        return pure_pursuit(obs.pose, self.track, self.cfg, self.sim_cfg)

    def __call__(self, obs) -> Action:
        return self.act(obs)


def gate_trigger(a_novice: Action, a_expert: Action, cfg: GateConfig) -> bool:
    return (abs(a_novice.speed - a_expert.speed) > cfg.gamma_v
            or abs(a_novice.steer - a_expert.steer) > cfg.gamma_omega)


def gate_decision(a_novice: Action, a_expert: Action, cfg: GateConfig,
                  currently_intervening: bool, hold_counter: int = 0):
    """Returns ``(intervene, hold_counter)``.

    A trigger (either action difference strictly above its threshold) starts
    an intervention; an ongoing one ends after ``release_hold`` consecutive
    non-trigger steps.  ``hold_counter`` counts those calm steps.
    """
    trigger = gate_trigger(a_novice, a_expert, cfg)
    if not currently_intervening:
        return trigger, 0
    if trigger:
        return True, 0
    hold_counter += 1
    if hold_counter >= cfg.release_hold:
        return False, 0
    return True, hold_counter


def run_expert(track, cfg: ExpertConfig = ExpertConfig(), sim_cfg: SimConfig = SimConfig(),
               laps: int = 1, max_time: float | None = None):
    """Drive the expert until ``laps`` laps, a crash or the time cap.

    Returns ``(laps_completed, crashed, lap_times, distance)``.
    """
    env = RacingEnv(track, sim_cfg)
    obs = env.observation
    max_time = max_time if max_time is not None else laps * 120.0
    lap_times = []
    while env.time < max_time:
        out = env.step(pure_pursuit(obs.pose, track, cfg, sim_cfg))
        obs = out.observation
        if out.crashed:
            return len(lap_times), True, lap_times, env.distance
        if out.lap_completed:
            lap_times.append(env.time)
            if len(lap_times) >= laps:
                break
    return len(lap_times), False, lap_times, env.distance


def expert_lap_check(track, cfg: ExpertConfig = ExpertConfig(), sim_cfg: SimConfig = SimConfig(),
                     laps: int = 1) -> bool:
    done, crashed, _, _ = run_expert(track, cfg, sim_cfg, laps)
    return done >= laps and not crashed


def calibrate_profile_speed(track, target_avg: float, laps: int = 3, sim_cfg: SimConfig = SimConfig(),
                            lookahead: float = 1.2, tol: float = 1e-3) -> float:
    """Bisect the profile target speed so the expert's average speed over
    ``laps`` laps from a standing start matches ``target_avg``."""
    lo, hi = target_avg, sim_cfg.v_max
    for _ in range(40):
        mid = 0.5 * (lo + hi)
        done, crashed, times, dist = run_expert(track, ExpertConfig(lookahead, target_speed=mid),
                                                sim_cfg, laps)
        if crashed or done < laps:
            hi = mid
            continue
        avg = dist / times[-1]
        if abs(avg - target_avg) < tol:
            return mid
        if avg < target_avg:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)
