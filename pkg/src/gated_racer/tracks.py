"""Closed-loop track construction: the bundled training map and random
unseen tracks for generalization runs."""

from __future__ import annotations

import math
from dataclasses import dataclass
from importlib import resources

import numpy as np
from scipy.interpolate import CubicSpline
from scipy.spatial import cKDTree

from .errors import TrackGenerationError
from .maps import TrackMap, cumulative_arclength

# Bundled training loop as drawing commands: ("S", length) is a straight,
# ("L" | "R", radius, degrees) an arc.  Starts at the origin heading +x.  A
# ladder of four hairpins, a chicane and two sweepers, about 158 m long.
TRAIN_LAYOUT = [
    ("S", 21.5), ("L", 1.3, 180), ("S", 18), ("R", 1.5, 180), ("S", 18), ("L", 1.2, 180),
    ("S", 18), ("R", 1.6, 180), ("S", 14), ("L", 2.5, 90), ("S", 3), ("L", 2.5, 90),
    ("S", 5.5), ("R", 3, 30), ("L", 3, 60), ("R", 3, 30), ("S", 6), ("L", 2.5, 90),
    ("S", 14.2), ("L", 2.5, 90),
]
TRAIN_HALF_WIDTH = 0.5


def layout_points(layout, step: float = 0.5) -> np.ndarray:
    """Polyline for a list of straight/arc commands.  The closing point (back
    at the start) is not repeated."""
    x = y = h = 0.0
    pts = [(x, y)]
    for cmd in layout:
        kind = cmd[0]
        if kind == "S":
            n = max(1, int(round(cmd[1] / step)))
            for _ in range(n):
                x += cmd[1] / n * math.cos(h)
                y += cmd[1] / n * math.sin(h)
                pts.append((x, y))
        elif kind in ("L", "R"):
            radius = cmd[1]
            turn = math.radians(cmd[2]) * (1.0 if kind == "L" else -1.0)
            side = 1.0 if turn > 0 else -1.0
            cx, cy = x - side * radius * math.sin(h), y + side * radius * math.cos(h)
            n = max(2, int(round(abs(turn) * radius / step)))
            for _ in range(n):
                h += turn / n
                x, y = cx + side * radius * math.sin(h), cy - side * radius * math.cos(h)
                pts.append((x, y))
        else:
            raise ValueError(f"unknown layout command {cmd!r}")
    pts = np.array(pts)
    if np.hypot(*(pts[-1] - pts[0])) > 1e-6:
        raise ValueError(f"layout does not close: ends at {pts[-1]}")
    return pts[:-1]


def closed_spline(control_points, spacing: float = 0.1) -> np.ndarray:
    """Periodic cubic spline through the control points, resampled at
    near-uniform arclength spacing.  The first returned waypoint is the first
    control point."""
    ctrl = np.asarray(control_points, dtype=np.float64)
    closed = np.vstack([ctrl, ctrl[:1]])
    u = np.concatenate([[0.0], np.cumsum(np.hypot(*np.diff(closed, axis=0).T))])
    spline = CubicSpline(u, closed, bc_type="periodic")
    fine_u = np.linspace(0.0, u[-1], 40 * len(ctrl) * 50, endpoint=False)
    fine = spline(fine_u)
    s = cumulative_arclength(fine)
    n = max(int(round(s[-1] / spacing)), 8)
    target = np.linspace(0.0, s[-1], n, endpoint=False)
    uu = np.interp(target, s, np.concatenate([fine_u, [u[-1]]]))
    return spline(uu)


def curvature(points: np.ndarray) -> np.ndarray:
    """Signed discrete curvature of a closed polyline (circumcircle of triples)."""
    p0 = np.roll(points, 1, axis=0)
    p2 = np.roll(points, -1, axis=0)
    a = np.hypot(*(points - p0).T)
    b = np.hypot(*(p2 - points).T)
    c = np.hypot(*(p2 - p0).T)
    cross = (points[:, 0] - p0[:, 0]) * (p2[:, 1] - p0[:, 1]) - (points[:, 1] - p0[:, 1]) * (p2[:, 0] - p0[:, 0])
    return 2.0 * cross / (a * b * c)


def min_separation_ok(points: np.ndarray, clearance: float) -> bool:
    """True if no two parts of the loop that are far apart along the track come
    closer than ``clearance``; also rules out self-intersection."""
    s = cumulative_arclength(points)
    length = s[-1]
    pairs = cKDTree(points).query_pairs(clearance, output_type="ndarray")
    if len(pairs) == 0:
        return True
    ds = np.abs(s[pairs[:, 0]] - s[pairs[:, 1]])
    ds = np.minimum(ds, length - ds)
    return bool(np.all(ds <= 2.0 * clearance))


def training_track(resolution: float = 0.05) -> TrackMap:
    pts = closed_spline(layout_points(TRAIN_LAYOUT))
    return TrackMap.from_centerline(pts, TRAIN_HALF_WIDTH, resolution, name="train")


def bundled_map_path():
    return resources.files("gated_racer") / "data" / "train.yaml"


def load_training_map() -> TrackMap:
    """The bundled training map (falls back to rebuilding it from control points)."""
    path = bundled_map_path()
    if path.is_file():
        with resources.as_file(path) as p:
            return TrackMap.load(p)
    return training_track()


@dataclass(frozen=True)
class TrackGenConfig:
    n_control: int = 8
    radius: float = 13.0
    radius_jitter: float = 0.35
    angle_jitter: float = 0.35
    half_width: float = TRAIN_HALF_WIDTH
    resolution: float = 0.05
    min_turn_radius: float = 2.5
    wall_clearance: float = 0.6
    max_attempts: int = 25
    check_expert: bool = True


def _candidate(rng: np.random.Generator, cfg: TrackGenConfig) -> np.ndarray:
    n = cfg.n_control
    base = np.arange(n) * 2.0 * math.pi / n
    ang = base + rng.uniform(-cfg.angle_jitter, cfg.angle_jitter, n) * (2.0 * math.pi / n)
    rad = cfg.radius * (1.0 + rng.uniform(-cfg.radius_jitter, cfg.radius_jitter, n))
    ctrl = np.column_stack([rad * np.cos(ang), rad * np.sin(ang)])
    return closed_spline(ctrl)


def generate_track(seed: int, cfg: TrackGenConfig = TrackGenConfig()) -> TrackMap:
    """Random closed track: jittered control points on a circle, periodic spline
    centerline, corridor rasterized at ``half_width``.  Candidates that are too
    tight, self-approaching or not drivable by the normal-speed expert are
    rejected and the next sub-seed is tried."""
    from .expert import ExpertConfig, expert_lap_check

    for attempt in range(cfg.max_attempts):
        rng = np.random.default_rng([seed, attempt])
        pts = _candidate(rng, cfg)
        if np.max(np.abs(curvature(pts))) > 1.0 / cfg.min_turn_radius:
            continue
        if not min_separation_ok(pts, 2.0 * cfg.half_width + cfg.wall_clearance):
            continue
        track = TrackMap.from_centerline(pts, cfg.half_width, cfg.resolution, name=f"gen{seed}")
        if cfg.check_expert and not expert_lap_check(track, ExpertConfig(speed_profile="normal")):
            continue
        return track
    raise TrackGenerationError(f"no drivable track for seed {seed} after {cfg.max_attempts} attempts")
