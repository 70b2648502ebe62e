"""Action histograms, Bhattacharyya distance and evaluation report rows."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .artifacts import read_csv, write_csv
from .errors import ConfigError

DISJOINT_SENTINEL = 1e6
RESULTS_HEADER = ["policy", "map", "seed", "distance_m", "lap", "elapsed_s", "bhattacharyya"]


@dataclass(frozen=True)
class ActionHistogram:
    """Probability mass over a (steer, speed) grid."""

    mass: np.ndarray  # (bins_steer, bins_speed)
    steer_max: float
    v_max: float

    @property
    def bins(self):
        return self.mass.shape

    @classmethod
    def from_actions(cls, actions, steer_max: float = 0.41, v_max: float = 10.0, bins=(21, 21),
                     smoothing: float = 1e-9) -> "ActionHistogram":
        """Histogram of ``(steer, speed)`` rows.  Values outside the box land in
        the edge bins.  ``smoothing`` is added to every bin before normalizing."""
        actions = np.asarray(actions, dtype=np.float64).reshape(-1, 2)
        counts = np.zeros(bins)
        if len(actions):
            i = _bin_index(actions[:, 0], -steer_max, steer_max, bins[0])
            j = _bin_index(actions[:, 1], 0.0, v_max, bins[1])
            np.add.at(counts, (i, j), 1.0)
        counts += smoothing
        total = counts.sum()
        if total <= 0:
            raise ValueError("empty histogram")
        return cls(counts / total, steer_max, v_max)


def _bin_index(values, lo, hi, n):
    k = np.floor((values - lo) / (hi - lo) * n).astype(np.int64)
    return np.clip(k, 0, n - 1)


def bhattacharyya_coefficient(p, q) -> float:
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    return float(np.sum(np.sqrt(p * q)))


def bhattacharyya_distance(p, q) -> float:
    """``-ln sum sqrt(p q)``; returns ``DISJOINT_SENTINEL`` when the supports
    do not overlap.  Accepts histograms or raw mass arrays of the same shape."""
    if isinstance(p, ActionHistogram) or isinstance(q, ActionHistogram):
        if not (isinstance(p, ActionHistogram) and isinstance(q, ActionHistogram)):
            raise ConfigError("cannot compare a histogram with a raw array")
        if p.bins != q.bins or p.steer_max != q.steer_max or p.v_max != q.v_max:
            raise ConfigError(f"histogram binning differs: {p.bins} vs {q.bins}")
        p, q = p.mass, q.mass
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise ConfigError(f"histogram binning differs: {p.shape} vs {q.shape}")
    if np.array_equal(p, q):
        return 0.0
    bc = bhattacharyya_coefficient(p, q)
    if bc <= 0.0:
        return DISJOINT_SENTINEL
    # rounding can push nearly identical histograms a hair above 1
    return max(0.0, -math.log(bc))


def behavioral_distance(trace, steer_max: float = 0.41, v_max: float = 10.0, bins=(21, 21),
                        smoothing: float = 1e-9) -> float:
    """Distance between the policy's and the expert's action histograms over
    the same visited states.  ``trace`` is a sequence of
    ``((steer, speed), (steer, speed))`` pairs or an ``(n, 2, 2)`` array."""
    arr = np.asarray(trace, dtype=np.float64)
    if arr.size == 0:
        raise ValueError("empty action trace")
    arr = arr.reshape(-1, 2, 2)
    hp = ActionHistogram.from_actions(arr[:, 0], steer_max, v_max, bins, smoothing)
    he = ActionHistogram.from_actions(arr[:, 1], steer_max, v_max, bins, smoothing)
    return bhattacharyya_distance(hp, he)


@dataclass
class EvalReport:
    policy: str
    map: str
    seed: int
    distance_m: float
    lap_completed: bool
    elapsed_s: Optional[float] = None
    bhattacharyya: Optional[float] = None

    def __post_init__(self):
        if self.distance_m < 0:
            raise ValueError("distance must be non-negative")
        if (self.elapsed_s is not None) != bool(self.lap_completed):
            raise ValueError("elapsed_s must be set exactly when the lap was completed")

    @classmethod
    def from_result(cls, policy: str, map_id: str, seed: int, result, with_distance: bool = True):
        bd = None
        if with_distance and len(result.policy_actions):
            bd = behavioral_distance(np.stack([result.policy_actions, result.expert_actions], axis=1))
        return cls(policy, map_id, seed, float(result.distance), bool(result.lap_completed), result.elapsed, bd)

    def row(self):
        return [self.policy, self.map, self.seed, f"{self.distance_m:.6f}", int(self.lap_completed),
                "" if self.elapsed_s is None else f"{self.elapsed_s:.6f}",
                "" if self.bhattacharyya is None else f"{self.bhattacharyya:.9g}"]


def write_results(reports, path, comments=()):
    return write_csv(path, RESULTS_HEADER, [r.row() for r in reports], comments)


def read_results(path):
    return read_csv(path)
