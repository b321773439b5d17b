"""Synthetic trajectory generator with known underlying continuous paths.

Each trajectory follows a smooth quadratic Bezier curve from a random start
point to one of a small set of destination hubs, sampled at equal arc-length
steps matching a drawn speed, then perturbed by Gaussian positional noise.
Because the odd- and even-position records of one trajectory sample the same
underlying curve, search ground truth exists by construction, and hub
destinations give the prediction task learnable structure.

All geometry runs in a local equirectangular meter plane anchored at the
box's south-west corner (the same projection the grid uses).
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from cstte.errors import ConfigError, DataError
from cstte.trajdata import METERS_PER_DEG_LAT, GridSpec, Trajectory

_SEED_HUBS = 20
_SEED_TRAJ = 21

# 2024-01-01T00:00:00Z; synthetic start times are drawn relative to this
EPOCH_BASE_SECONDS = 1_704_067_200

# how far toward the hub an over-distant start point is pulled, as a
# fraction of the reachable path length (keeps some slack for curvature)
_REACHABLE_FRACTION = 0.9

_HUB_MARGIN = 0.05
_HUB_SEPARATION_FRACTION = 0.2
_HUB_MAX_DRAWS = 10_000

_CURVE_FACTOR_LOW = 1.02
_CURVE_FACTOR_HIGH = 1.30

# dense parameter grid used for arc-length computations; the sampled points
# lie on this polyline, whose length never exceeds the true arc length, so
# the speed-derived spacing bound holds exactly
_ARC_GRID = 257
_BISECT_ITERS = 48


@dataclass(frozen=True)
class SynthConfig:
    n_trajectories: int = 2000
    min_lon: float = 116.30
    max_lon: float = 116.42
    min_lat: float = 39.85
    max_lat: float = 39.94
    n_hubs: int = 12
    points_min: int = 20
    points_max: int = 40
    speed_min: float = 250.0
    speed_max: float = 600.0
    interval_seconds: float = 60.0
    noise_sigma_m: float = 20.0
    start_time_span_seconds: int = 604_800
    cell_size_meters: float = 250.0
    seed: int = 42

    def __post_init__(self):
        if self.n_trajectories < 1:
            raise ConfigError(f"n_trajectories must be >= 1, got {self.n_trajectories}")
        if not (self.max_lon > self.min_lon and self.max_lat > self.min_lat):
            raise ConfigError(
                f"bounding box is empty: lon [{self.min_lon}, {self.max_lon}] "
                f"lat [{self.min_lat}, {self.max_lat}]"
            )
        if self.n_hubs < 1:
            raise ConfigError(f"n_hubs must be >= 1, got {self.n_hubs}")
        if not 2 <= self.points_min <= self.points_max:
            raise ConfigError(
                f"points range must satisfy 2 <= min <= max, got "
                f"[{self.points_min}, {self.points_max}]"
            )
        if not 0 < self.speed_min <= self.speed_max:
            raise ConfigError(
                f"speed range must satisfy 0 < min <= max, got "
                f"[{self.speed_min}, {self.speed_max}]"
            )
        if self.interval_seconds <= 0:
            raise ConfigError(f"interval_seconds must be positive, got {self.interval_seconds}")
        if self.noise_sigma_m < 0:
            raise ConfigError(f"noise_sigma_m must be >= 0, got {self.noise_sigma_m}")
        if self.start_time_span_seconds < 0:
            raise ConfigError(
                f"start_time_span_seconds must be >= 0, got {self.start_time_span_seconds}"
            )
        if self.cell_size_meters <= 0:
            raise ConfigError(f"cell_size_meters must be positive, got {self.cell_size_meters}")

    def grid(self) -> GridSpec:
        return GridSpec(
            min_lon=self.min_lon,
            min_lat=self.min_lat,
            max_lon=self.max_lon,
            max_lat=self.max_lat,
            cell_size_meters=self.cell_size_meters,
        )

    def to_dict(self) -> dict:
        return {
            "n_trajectories": self.n_trajectories,
            "min_lon": self.min_lon,
            "max_lon": self.max_lon,
            "min_lat": self.min_lat,
            "max_lat": self.max_lat,
            "n_hubs": self.n_hubs,
            "points_min": self.points_min,
            "points_max": self.points_max,
            "speed_min": self.speed_min,
            "speed_max": self.speed_max,
            "interval_seconds": self.interval_seconds,
            "noise_sigma_m": self.noise_sigma_m,
            "start_time_span_seconds": self.start_time_span_seconds,
            "cell_size_meters": self.cell_size_meters,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        return cls(**d)


@dataclass
class GroundTruth:
    """What the generator knows that the models must rediscover."""

    hubs_lonlat: np.ndarray
    hub_ids: dict[str, int]
    paths: dict[str, np.ndarray]
    speeds_m_per_min: dict[str, float]
    grid: GridSpec = field(repr=False)


def _stream(seed: int, *tags: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), *map(int, tags)]))


class _Plane:
    """Lon/lat <-> local meters, equirectangular at the box mid-latitude."""

    def __init__(self, config: SynthConfig):
        mid_lat = 0.5 * (config.min_lat + config.max_lat)
        self.min_lon = config.min_lon
        self.min_lat = config.min_lat
        self.m_per_deg_lon = METERS_PER_DEG_LAT * math.cos(math.radians(mid_lat))
        self.m_per_deg_lat = METERS_PER_DEG_LAT
        self.width_m = (config.max_lon - config.min_lon) * self.m_per_deg_lon
        self.height_m = (config.max_lat - config.min_lat) * self.m_per_deg_lat

    def to_lonlat(self, xy: np.ndarray) -> np.ndarray:
        xy = np.atleast_2d(xy)
        lon = self.min_lon + xy[:, 0] / self.m_per_deg_lon
        lat = self.min_lat + xy[:, 1] / self.m_per_deg_lat
        return np.column_stack([lon, lat])


def _place_hubs(config: SynthConfig, plane: _Plane, rng: np.random.Generator) -> np.ndarray:
    """Rejection-sample hub positions with a minimum pairwise separation."""
    min_sep = _HUB_SEPARATION_FRACTION * min(plane.width_m, plane.height_m)
    lo_x, hi_x = _HUB_MARGIN * plane.width_m, (1 - _HUB_MARGIN) * plane.width_m
    lo_y, hi_y = _HUB_MARGIN * plane.height_m, (1 - _HUB_MARGIN) * plane.height_m
    hubs: list[np.ndarray] = []
    for _ in range(_HUB_MAX_DRAWS):
        candidate = np.array([rng.uniform(lo_x, hi_x), rng.uniform(lo_y, hi_y)])
        if all(np.linalg.norm(candidate - h) >= min_sep for h in hubs):
            hubs.append(candidate)
            if len(hubs) == config.n_hubs:
                return np.stack(hubs)
    raise ConfigError(
        f"box too small to place {config.n_hubs} hubs at least {min_sep:.0f} m apart"
    )


def _bezier_polyline(p0: np.ndarray, c: np.ndarray, p1: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Dense curve points and cumulative arc length along them."""
    u = np.linspace(0.0, 1.0, _ARC_GRID)
    w0 = (1.0 - u) ** 2
    w1 = 2.0 * u * (1.0 - u)
    w2 = u**2
    pts = w0[:, None] * p0[None, :] + w1[:, None] * c[None, :] + w2[:, None] * p1[None, :]
    seg = np.linalg.norm(np.diff(pts, axis=0), axis=1)
    cum = np.concatenate([[0.0], np.cumsum(seg)])
    return pts, cum


def _control_for_length(
    p0: np.ndarray, p1: np.ndarray, target_length: float, side: float
) -> np.ndarray:
    """Bisect the perpendicular control offset until the arc matches target.

    Arc length grows monotonically with the offset magnitude, from the
    straight-line distance at zero offset.
    """
    midpoint = 0.5 * (p0 + p1)
    chord = p1 - p0
    dist = float(np.linalg.norm(chord))
    if dist == 0.0:
        return midpoint
    perp = np.array([-chord[1], chord[0]]) / dist * side

    def arc(h: float) -> float:
        _, cum = _bezier_polyline(p0, midpoint + h * perp, p1)
        return float(cum[-1])

    if target_length <= dist:
        return midpoint
    hi = dist
    for _ in range(60):
        if arc(hi) >= target_length:
            break
        hi *= 2.0
    lo = 0.0
    for _ in range(_BISECT_ITERS):
        mid = 0.5 * (lo + hi)
        if arc(mid) < target_length:
            lo = mid
        else:
            hi = mid
    return midpoint + hi * perp


def _sample_along(
    p0: np.ndarray, c: np.ndarray, p1: np.ndarray, n_points: int
) -> np.ndarray:
    """Equal-arc-length samples taken on the curve's dense polyline.

    Interpolating on the polyline itself (rather than re-evaluating the
    curve) keeps consecutive samples at most polyline-length/(n-1) apart,
    so the speed-derived spacing bound holds with no discretization slack.
    The endpoints are exactly p0 and p1.
    """
    pts, cum = _bezier_polyline(p0, c, p1)
    total = float(cum[-1])
    if total == 0.0:
        return np.tile(p0, (n_points, 1))
    targets = np.linspace(0.0, total, n_points)
    x = np.interp(targets, cum, pts[:, 0])
    y = np.interp(targets, cum, pts[:, 1])
    return np.column_stack([x, y])


def generate(config: SynthConfig) -> tuple[list[Trajectory], GroundTruth]:
    """Draw the full synthetic dataset plus its generation ground truth."""
    plane = _Plane(config)
    grid = config.grid()
    hubs_xy = _place_hubs(config, plane, _stream(config.seed, _SEED_HUBS))
    id_width = max(6, len(str(config.n_trajectories - 1)))

    trajectories: list[Trajectory] = []
    hub_ids: dict[str, int] = {}
    paths: dict[str, np.ndarray] = {}
    speeds: dict[str, float] = {}
    interval_minutes = config.interval_seconds / 60.0
    for index in range(config.n_trajectories):
        rng = _stream(config.seed, _SEED_TRAJ, index)
        traj_id = f"synth-{index:0{id_width}d}"
        hub_id = int(rng.integers(0, config.n_hubs))
        n_points = int(rng.integers(config.points_min, config.points_max + 1))
        speed = float(rng.uniform(config.speed_min, config.speed_max))
        start = np.array(
            [rng.uniform(0.0, plane.width_m), rng.uniform(0.0, plane.height_m)]
        )
        hub = hubs_xy[hub_id]

        max_length = speed * interval_minutes * (n_points - 1)
        dist = float(np.linalg.norm(start - hub))
        if dist > _REACHABLE_FRACTION * max_length:
            start = hub + (start - hub) * (_REACHABLE_FRACTION * max_length / dist)
            dist = float(np.linalg.norm(start - hub))
        curve_factor = float(rng.uniform(_CURVE_FACTOR_LOW, _CURVE_FACTOR_HIGH))
        target_length = min(curve_factor * dist, max_length)
        side = 1.0 if rng.random() < 0.5 else -1.0

        control = _control_for_length(start, hub, target_length, side)
        xy = _sample_along(start, control, hub, n_points)
        if config.noise_sigma_m > 0:
            xy = xy + rng.normal(0.0, config.noise_sigma_m, size=xy.shape)

        start_time = EPOCH_BASE_SECONDS + (
            int(rng.integers(0, config.start_time_span_seconds + 1))
        )
        t = start_time + config.interval_seconds * np.arange(n_points)
        lonlat = plane.to_lonlat(xy)
        loc = grid.cell_of(lonlat[:, 0], lonlat[:, 1])
        trajectories.append(Trajectory(traj_id, t, lonlat[:, 0], lonlat[:, 1], loc))
        hub_ids[traj_id] = hub_id
        paths[traj_id] = plane.to_lonlat(np.stack([start, control, hub]))
        speeds[traj_id] = speed

    ground_truth = GroundTruth(
        hubs_lonlat=plane.to_lonlat(hubs_xy),
        hub_ids=hub_ids,
        paths=paths,
        speeds_m_per_min=speeds,
        grid=grid,
    )
    return trajectories, ground_truth


# ---------------------------------------------------------------------------
# files
# ---------------------------------------------------------------------------


def _format_time(t: float) -> str:
    return str(int(t)) if float(t).is_integer() else repr(float(t))


def write_dataset_csv(path, trajs: Sequence[Trajectory]) -> None:
    """Standard raw input CSV (no loc_index; preprocessing assigns cells)."""
    path = Path(path)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["traj_id", "timestamp", "lon", "lat"])
        for traj in trajs:
            for i in range(traj.n):
                writer.writerow(
                    [
                        traj.traj_id,
                        _format_time(traj.t[i]),
                        repr(float(traj.lon[i])),
                        repr(float(traj.lat[i])),
                    ]
                )


def write_ground_truth_csv(path, ground_truth: GroundTruth) -> None:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["traj_id", "hub_id"])
        for traj_id in sorted(ground_truth.hub_ids):
            writer.writerow([traj_id, ground_truth.hub_ids[traj_id]])


def read_ground_truth_csv(path) -> dict[str, int]:
    path = Path(path)
    if not path.exists():
        raise DataError(f"ground-truth file not found: {path}")
    out: dict[str, int] = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["traj_id", "hub_id"]:
            raise DataError(f"{path}: expected header traj_id,hub_id")
        for row in reader:
            if len(row) != 2:
                raise DataError(f"{path}: malformed row {row!r}")
            out[row[0]] = int(row[1])
    return out
