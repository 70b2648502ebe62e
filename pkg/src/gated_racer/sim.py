"""Deterministic 2D racing simulator.

Kinematic bicycle dynamics with a first-order speed lag, grid LiDAR
raycasting, footprint collision checks and centerline bookkeeping
(lateral error, arclength progress, lap detection).  The inner loops are
numba kernels; the public functions below wrap them with validation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
from numba import njit

from .errors import EpisodeTerminatedError, InvalidStateError, OutOfMapError

TWO_PI = 2.0 * math.pi


@dataclass(frozen=True)
class SimConfig:
    wheelbase: float = 0.33
    speed_gain: float = 5.0  # first-order lag k_a, 1/s
    steer_max: float = 0.41
    v_max: float = 10.0
    car_length: float = 0.5
    car_width: float = 0.3
    dt: float = 0.01
    control_every: int = 5
    n_beams: int = 108
    fov: float = 4.712
    max_range: float = 30.0
    max_time: float = 60.0
    lap_fraction: float = 0.99

    @property
    def control_dt(self) -> float:
        return self.dt * self.control_every


@dataclass(frozen=True, slots=True)
class VehicleState:
    x: float
    y: float
    theta: float
    v: float = 0.0

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.theta, self.v])


@dataclass(frozen=True, slots=True)
class Action:
    steer: float
    speed: float

    def __post_init__(self):
        if not (math.isfinite(self.steer) and math.isfinite(self.speed)):
            raise InvalidStateError(f"non-finite action {self.steer!r}, {self.speed!r}")

    def clamped(self, cfg: SimConfig) -> "Action":
        return Action(
            min(max(self.steer, -cfg.steer_max), cfg.steer_max),
            min(max(self.speed, 0.0), cfg.v_max),
        )

    def normalized(self, cfg: SimConfig) -> np.ndarray:
        """Map to the [-1, 1]^2 box used by the policy head."""
        return np.array([self.steer / cfg.steer_max, 2.0 * self.speed / cfg.v_max - 1.0])

    @classmethod
    def from_normalized(cls, a, cfg: SimConfig) -> "Action":
        return cls(float(a[0]) * cfg.steer_max, (float(a[1]) + 1.0) * 0.5 * cfg.v_max)


@dataclass(frozen=True)
class NoiseConfig:
    alpha: float = -0.2
    beta: float = 0.2

    def __post_init__(self):
        if not self.alpha <= self.beta:
            raise ValueError(f"noise bounds out of order: alpha={self.alpha} > beta={self.beta}")


@dataclass
class Observation:
    scan: np.ndarray
    pose: VehicleState


@dataclass
class StepOutcome:
    state: VehicleState
    observation: Observation
    crashed: bool
    lateral_error: float
    progress_s: float
    lap_completed: bool
    distance_delta: float


# --------------------------------------------------------------------------
# numba kernels


@njit(cache=True)
def wrap_angle(a):
    """Wrap to (-pi, pi]."""
    if -math.pi < a <= math.pi:
        return a  # skip the modulo so in-range angles do not pick up rounding
    return math.pi - (math.pi - a) % (2.0 * math.pi)


@njit(cache=True)
def _advance(x, y, th, v, steer, speed_cmd, dt, wheelbase, gain):
    nx = x + v * math.cos(th) * dt
    ny = y + v * math.sin(th) * dt
    nth = wrap_angle(th + v / wheelbase * math.tan(steer) * dt)
    nv = v + gain * (speed_cmd - v) * dt
    if nv < 0.0:
        nv = 0.0
    return nx, ny, nth, nv


@njit(cache=True)
def _footprint_hits(grid, ox, oy, res, x, y, th, length, width):
    hl = 0.5 * length
    hw = 0.5 * width
    c = math.cos(th)
    s = math.sin(th)
    ex = abs(c) * hl + abs(s) * hw
    ey = abs(s) * hl + abs(c) * hw
    rows, cols = grid.shape
    i0 = int(math.floor((x - ex - ox) / res))
    i1 = int(math.floor((x + ex - ox) / res))
    j0 = int(math.floor((y - ey - oy) / res))
    j1 = int(math.floor((y + ey - oy) / res))
    half = 0.5 * res
    r_proj = half * (abs(c) + abs(s))
    for j in range(j0, j1 + 1):
        cy = oy + (j + 0.5) * res
        if not (y - ey < cy + half and y + ey > cy - half):
            continue
        for i in range(i0, i1 + 1):
            cx = ox + (i + 0.5) * res
            if not (x - ex < cx + half and x + ex > cx - half):
                continue
            # separating axes along the car body
            du = (cx - x) * c + (cy - y) * s
            if abs(du) >= hl + r_proj:
                continue
            dw = -(cx - x) * s + (cy - y) * c
            if abs(dw) >= hw + r_proj:
                continue
            if i < 0 or j < 0 or i >= cols or j >= rows:
                return True
            if grid[j, i]:
                return True
    return False


@njit(cache=True)
def _cast_ray(grid, ox, oy, res, x, y, angle, max_range):
    rows, cols = grid.shape
    gx = (x - ox) / res
    gy = (y - oy) / res
    i = int(math.floor(gx))
    j = int(math.floor(gy))
    if i < 0 or j < 0 or i >= cols or j >= rows or grid[j, i]:
        return 0.0
    dx = math.cos(angle)
    dy = math.sin(angle)
    if dx > 0.0:
        step_i = 1
        t_max_x = (i + 1 - gx) * res / dx
        t_dx = res / dx
    elif dx < 0.0:
        step_i = -1
        t_max_x = (gx - i) * res / -dx
        t_dx = res / -dx
    else:
        step_i = 0
        t_max_x = np.inf
        t_dx = np.inf
    if dy > 0.0:
        step_j = 1
        t_max_y = (j + 1 - gy) * res / dy
        t_dy = res / dy
    elif dy < 0.0:
        step_j = -1
        t_max_y = (gy - j) * res / -dy
        t_dy = res / -dy
    else:
        step_j = 0
        t_max_y = np.inf
        t_dy = np.inf
    while True:
        if t_max_x < t_max_y:
            t = t_max_x
            t_max_x += t_dx
            i += step_i
        else:
            t = t_max_y
            t_max_y += t_dy
            j += step_j
        if t >= max_range:
            return max_range
        if i < 0 or j < 0 or i >= cols or j >= rows:
            return t
        if grid[j, i]:
            return t


@njit(cache=True)
def _scan(grid, ox, oy, res, x, y, th, n_beams, fov, max_range):
    out = np.empty(n_beams)
    for k in range(n_beams):
        ang = th + fov * (k / (n_beams - 1) - 0.5)
        out[k] = _cast_ray(grid, ox, oy, res, x, y, ang, max_range)
    return out


@njit(cache=True)
def _project(px, py, xs, ys, s_cum):
    """Nearest point on the closed polyline: (distance, arclength, segment)."""
    n = xs.shape[0]
    best = np.inf
    best_s = 0.0
    best_k = 0
    for k in range(n):
        k2 = k + 1
        if k2 == n:
            k2 = 0
        ax = xs[k]
        ay = ys[k]
        ex = xs[k2] - ax
        ey = ys[k2] - ay
        l2 = ex * ex + ey * ey
        t = ((px - ax) * ex + (py - ay) * ey) / l2
        if t < 0.0:
            t = 0.0
        elif t > 1.0:
            t = 1.0
        qx = ax + t * ex - px
        qy = ay + t * ey - py
        d2 = qx * qx + qy * qy
        if d2 < best:
            best = d2
            best_s = s_cum[k] + t * (s_cum[k + 1] - s_cum[k])
            best_k = k
    length = s_cum[n]
    if best_s >= length:
        best_s -= length
    return math.sqrt(best), best_s, best_k


@njit(cache=True)
def _point_at(s, xs, ys, s_cum):
    n = xs.shape[0]
    length = s_cum[n]
    s = s % length
    k = np.searchsorted(s_cum, s, side="right") - 1
    if k >= n:
        k = n - 1
    k2 = k + 1
    if k2 == n:
        k2 = 0
    t = (s - s_cum[k]) / (s_cum[k + 1] - s_cum[k])
    return xs[k] + t * (xs[k2] - xs[k]), ys[k] + t * (ys[k2] - ys[k])


@njit(cache=True)
def _control_step(grid, ox, oy, res, x, y, th, v, steer, speed_cmd, dt, substeps,
                  wheelbase, gain, length, width):
    crashed = False
    for _ in range(substeps):
        x, y, th, v = _advance(x, y, th, v, steer, speed_cmd, dt, wheelbase, gain)
        if _footprint_hits(grid, ox, oy, res, x, y, th, length, width):
            crashed = True
            break
    return x, y, th, v, crashed


# --------------------------------------------------------------------------
# public operations


def _check_finite(*vals):
    for v in vals:
        if not math.isfinite(v):
            raise InvalidStateError(f"non-finite value {v!r}")


def step(state: VehicleState, action: Action, dt: float, cfg: SimConfig = SimConfig()) -> VehicleState:
    """One explicit kinematic-bicycle update of length ``dt``."""
    _check_finite(state.x, state.y, state.theta, state.v, action.steer, action.speed, dt)
    if dt <= 0:
        raise InvalidStateError(f"dt must be positive, got {dt}")
    if abs(action.steer) > cfg.steer_max or not 0.0 <= action.speed <= cfg.v_max:
        raise InvalidStateError(f"action out of bounds: {action}")
    x, y, th, v = _advance(state.x, state.y, state.theta, state.v,
                           action.steer, action.speed, dt, cfg.wheelbase, cfg.speed_gain)
    return VehicleState(x, y, th, v)


def lidar_scan(state: VehicleState, track, n_beams: int = 108, fov: float = 4.712,
               max_range: float = 30.0) -> np.ndarray:
    if n_beams < 2 or not 0 < fov <= TWO_PI:
        raise ValueError(f"bad scan geometry n_beams={n_beams} fov={fov}")
    if not track.contains(state.x, state.y):
        raise OutOfMapError(f"({state.x:.3f}, {state.y:.3f}) is outside the map")
    return _scan(track.grid, track.origin[0], track.origin[1], track.resolution,
                 state.x, state.y, state.theta, n_beams, fov, max_range)


def add_scan_noise(scan: np.ndarray, cfg: NoiseConfig, rng: np.random.Generator,
                   max_range: float = 30.0) -> np.ndarray:
    noise = rng.uniform(cfg.alpha, cfg.beta, size=np.shape(scan))
    return np.clip(np.asarray(scan) + noise, 0.0, max_range)


def lateral_error(state: VehicleState, track) -> float:
    d, _, _ = _project(state.x, state.y, track.centerline[:, 0], track.centerline[:, 1], track.arclength)
    return d


def check_collision(state: VehicleState, track, cfg: SimConfig = SimConfig()) -> bool:
    return bool(_footprint_hits(track.grid, track.origin[0], track.origin[1], track.resolution,
                                state.x, state.y, state.theta, cfg.car_length, cfg.car_width))


def track_progress(state: VehicleState, track, prev_s: float, net_progress: float = 0.0,
                   lap_fraction: float = 0.99):
    """Arclength position and lap detection.

    ``net_progress`` is the signed forward progress accumulated since the
    episode start (or the last lap).  Returns ``(s, lap_completed,
    net_progress')``; the accumulator is reduced by one track length when a
    lap is counted.
    """
    length = track.track_length
    _, s, _ = _project(state.x, state.y, track.centerline[:, 0], track.centerline[:, 1], track.arclength)
    ds = (s - prev_s + 0.5 * length) % length - 0.5 * length
    net = net_progress + ds
    crossed = ds > 0 and s < prev_s
    lap = bool(crossed and net >= lap_fraction * length)
    if lap:
        net -= length
    return s, lap, net


class RacingEnv:
    """Sequential single-car environment stepping at the control rate."""

    def __init__(self, track, cfg: SimConfig = SimConfig(), noise: Optional[NoiseConfig] = None,
                 noise_seed: int = 0):
        self.track = track
        self.cfg = cfg
        self.noise = noise
        self.rng = np.random.default_rng(noise_seed)
        self.reset()

    def reset(self, state: Optional[VehicleState] = None) -> Observation:
        if state is None:
            sx, sy, sth = self.track.start_pose
            state = VehicleState(sx, sy, sth, 0.0)
        self.state = state
        self.time = 0.0
        self.steps = 0
        self.distance = 0.0
        self.laps = 0
        self.crashed = False
        _, self.s, _ = _project(state.x, state.y, self.track.centerline[:, 0],
                                self.track.centerline[:, 1], self.track.arclength)
        self.net_progress = 0.0
        self.observation = self._observe()
        return self.observation

    def _observe(self) -> Observation:
        st = self.state
        scan = lidar_scan(st, self.track, self.cfg.n_beams, self.cfg.fov, self.cfg.max_range)
        if self.noise is not None:
            scan = add_scan_noise(scan, self.noise, self.rng, self.cfg.max_range)
        return Observation(scan, st)

    def step(self, action: Action) -> StepOutcome:
        if self.crashed:
            raise EpisodeTerminatedError("step() called after a crash; reset the environment")
        cfg = self.cfg
        a = action.clamped(cfg)
        st = self.state
        tr = self.track
        x, y, th, v, crashed = _control_step(
            tr.grid, tr.origin[0], tr.origin[1], tr.resolution,
            st.x, st.y, st.theta, st.v, a.steer, a.speed, cfg.dt, cfg.control_every,
            cfg.wheelbase, cfg.speed_gain, cfg.car_length, cfg.car_width)
        _check_finite(x, y, th, v)
        self.state = VehicleState(x, y, th, v)
        delta = math.hypot(x - st.x, y - st.y)
        self.distance += delta
        self.steps += 1
        self.time = self.steps * cfg.control_dt
        self.crashed = crashed
        e_l, _, _ = _project(x, y, tr.centerline[:, 0], tr.centerline[:, 1], tr.arclength)
        self.s, lap, self.net_progress = track_progress(self.state, tr, self.s, self.net_progress,
                                                        cfg.lap_fraction)
        self.laps += lap
        if tr.contains(x, y):
            self.observation = self._observe()
        else:
            self.observation = Observation(np.zeros(cfg.n_beams), self.state)
        return StepOutcome(self.state, self.observation, crashed, e_l, self.s, lap, delta)
