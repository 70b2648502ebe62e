"""Track maps: occupancy grid + closed centerline, with file I/O.

On disk a map is three files sharing a stem:

* ``<stem>.pgm`` (or ``.png``), 8-bit grayscale, pixel < 128 means occupied.
  Image row 0 is the top of the map (largest y), as in ROS map_server.
* ``<stem>.yaml`` with ``resolution``, ``origin_x``, ``origin_y``,
  ``start_x``, ``start_y``, ``start_theta``, ``half_width``.
* ``<stem>.csv`` with header ``x,y``; the ordered centerline loop.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import yaml
from PIL import Image
from scipy.spatial import cKDTree

from .errors import ConfigError

REQUIRED_KEYS = ("resolution", "origin_x", "origin_y", "start_x", "start_y", "start_theta", "half_width")


def cumulative_arclength(points: np.ndarray) -> np.ndarray:
    """Arclength at each waypoint plus the closing length as the last entry."""
    closed = np.vstack([points, points[:1]])
    seg = np.hypot(*np.diff(closed, axis=0).T)
    return np.concatenate([[0.0], np.cumsum(seg)])


@dataclass
class TrackMap:
    grid: np.ndarray  # bool, grid[row, col], row index grows with y
    origin: tuple
    resolution: float
    centerline: np.ndarray  # (n, 2)
    arclength: np.ndarray  # (n + 1,), arclength[-1] == track_length
    start_pose: tuple
    half_width: float
    name: str = "track"

    def __post_init__(self):
        self.grid = np.ascontiguousarray(self.grid, dtype=np.bool_)
        self.centerline = np.ascontiguousarray(self.centerline, dtype=np.float64)
        self.arclength = np.ascontiguousarray(self.arclength, dtype=np.float64)
        self.origin = (float(self.origin[0]), float(self.origin[1]))
        if len(self.centerline) < 3:
            raise ConfigError("centerline needs at least 3 waypoints")
        if len(self.arclength) != len(self.centerline) + 1 or np.any(np.diff(self.arclength) <= 0):
            raise ConfigError("centerline arclength must be strictly increasing (duplicate waypoints?)")

    @property
    def track_length(self) -> float:
        return float(self.arclength[-1])

    @property
    def extent(self):
        rows, cols = self.grid.shape
        ox, oy = self.origin
        return ox, oy, ox + cols * self.resolution, oy + rows * self.resolution

    def contains(self, x: float, y: float) -> bool:
        x0, y0, x1, y1 = self.extent
        return x0 <= x < x1 and y0 <= y < y1

    def cell_of(self, x: float, y: float):
        return (int(math.floor((y - self.origin[1]) / self.resolution)),
                int(math.floor((x - self.origin[0]) / self.resolution)))

    def occupied(self, x: float, y: float) -> bool:
        if not self.contains(x, y):
            return True
        return bool(self.grid[self.cell_of(x, y)])

    @classmethod
    def from_centerline(cls, points, half_width: float, resolution: float = 0.05,
                        margin: float = 1.0, name: str = "track") -> "TrackMap":
        """Rasterize a corridor of ``half_width`` around a closed centerline.

        Cells whose centers lie farther than ``half_width`` from the
        centerline are walls.  The start pose is the first waypoint, facing
        the second.
        """
        pts = np.asarray(points, dtype=np.float64)
        s = cumulative_arclength(pts)
        dense = resample_closed(pts, s, 0.01)
        lo = pts.min(axis=0) - half_width - margin
        hi = pts.max(axis=0) + half_width + margin
        origin = (math.floor(lo[0] / resolution) * resolution, math.floor(lo[1] / resolution) * resolution)
        cols = int(math.ceil((hi[0] - origin[0]) / resolution))
        rows = int(math.ceil((hi[1] - origin[1]) / resolution))
        xs = origin[0] + (np.arange(cols) + 0.5) * resolution
        ys = origin[1] + (np.arange(rows) + 0.5) * resolution
        gx, gy = np.meshgrid(xs, ys)
        dist, _ = cKDTree(dense).query(np.column_stack([gx.ravel(), gy.ravel()]))
        grid = (dist >= half_width).reshape(rows, cols)
        heading = math.atan2(pts[1, 1] - pts[0, 1], pts[1, 0] - pts[0, 0])
        return cls(grid, origin, resolution, pts, s, (float(pts[0, 0]), float(pts[0, 1]), heading),
                   float(half_width), name)

    def save(self, stem) -> Path:
        stem = Path(stem)
        stem.parent.mkdir(parents=True, exist_ok=True)
        img = np.where(self.grid[::-1], 0, 255).astype(np.uint8)
        Image.fromarray(img, mode="L").save(stem.with_suffix(".pgm"))
        meta = {
            "image": stem.with_suffix(".pgm").name,
            "centerline": stem.with_suffix(".csv").name,
            "resolution": self.resolution,
            "origin_x": self.origin[0],
            "origin_y": self.origin[1],
            "start_x": self.start_pose[0],
            "start_y": self.start_pose[1],
            "start_theta": self.start_pose[2],
            "half_width": self.half_width,
        }
        with open(stem.with_suffix(".yaml"), "w") as f:
            yaml.safe_dump(meta, f, sort_keys=False)
        with open(stem.with_suffix(".csv"), "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["x", "y"])
            for x, y in self.centerline:
                w.writerow([repr(float(x)), repr(float(y))])
        return stem.with_suffix(".yaml")

    @classmethod
    def load(cls, path) -> "TrackMap":
        """Load from the yaml sidecar (or any file sharing its stem)."""
        path = Path(path)
        meta_path = path.with_suffix(".yaml")
        if not meta_path.exists():
            raise ConfigError(f"map metadata not found: {meta_path}")
        with open(meta_path) as f:
            meta = yaml.safe_load(f) or {}
        missing = [k for k in REQUIRED_KEYS if k not in meta]
        if missing:
            raise ConfigError(f"{meta_path}: missing keys {missing}")
        img_path = meta_path.parent / meta.get("image", meta_path.with_suffix(".pgm").name)
        if not img_path.exists():
            img_path = meta_path.with_suffix(".png")
        img = np.asarray(Image.open(img_path).convert("L"))
        grid = (img < 128)[::-1]
        csv_path = meta_path.parent / meta.get("centerline", meta_path.with_suffix(".csv").name)
        with open(csv_path, newline="") as f:
            reader = csv.DictReader(f)
            if reader.fieldnames is None or not {"x", "y"} <= set(reader.fieldnames):
                raise ConfigError(f"{csv_path}: expected header x,y")
            pts = np.array([[float(r["x"]), float(r["y"])] for r in reader])
        track = cls(grid, (meta["origin_x"], meta["origin_y"]), float(meta["resolution"]), pts,
                    cumulative_arclength(pts),
                    (float(meta["start_x"]), float(meta["start_y"]), float(meta["start_theta"])),
                    float(meta["half_width"]), meta_path.stem)
        if track.occupied(track.start_pose[0], track.start_pose[1]):
            raise ConfigError(f"{meta_path}: start pose lies in an occupied cell")
        return track


def resample_closed(points: np.ndarray, s: np.ndarray, spacing: float) -> np.ndarray:
    """Linear resampling of a closed polyline at (roughly) uniform spacing."""
    closed = np.vstack([points, points[:1]])
    n = max(int(math.ceil(s[-1] / spacing)), 3)
    t = np.linspace(0.0, s[-1], n, endpoint=False)
    return np.column_stack([np.interp(t, s, closed[:, 0]), np.interp(t, s, closed[:, 1])])
