"""Trajectory data model and preprocessing pipeline.

CSV in (`traj_id,timestamp,lon,lat[,loc_index]`), then: greedy interval
resampling, minimum-length filtering, grid-cell assignment, chronological
8:1:1 splitting, and time normalization to minutes since the train epoch.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from cstte.errors import ConfigError, DataError

log = logging.getLogger(__name__)

METERS_PER_DEG_LAT = 111320.0

REQUIRED_COLUMNS = ("traj_id", "timestamp", "lon", "lat")
LOC_COLUMN = "loc_index"


@dataclass(frozen=True)
class VisitRecord:
    """One observation: location index, epoch seconds, lon/lat degrees."""

    loc: int
    t: float
    lon: float
    lat: float


class Trajectory:
    """Time-ordered visit sequence for one moving object.

    Stored as parallel arrays. Records are sorted by timestamp on
    construction (stable, so equal timestamps keep input order); a
    trajectory has at least two records.
    """

    __slots__ = ("traj_id", "t", "lon", "lat", "loc")

    def __init__(self, traj_id: str, t, lon, lat, loc=None):
        t = np.asarray(t, dtype=np.float64)
        lon = np.asarray(lon, dtype=np.float64)
        lat = np.asarray(lat, dtype=np.float64)
        n = t.shape[0]
        if n < 2:
            raise DataError(f"trajectory {traj_id!r}: needs at least 2 records, got {n}")
        if lon.shape[0] != n or lat.shape[0] != n:
            raise DataError(f"trajectory {traj_id!r}: ragged column lengths")
        if loc is None:
            loc = np.full(n, -1, dtype=np.int64)
        else:
            loc = np.asarray(loc, dtype=np.int64)
            if loc.shape[0] != n:
                raise DataError(f"trajectory {traj_id!r}: ragged loc_index length")
        order = np.argsort(t, kind="stable")
        self.traj_id = str(traj_id)
        self.t = t[order]
        self.lon = lon[order]
        self.lat = lat[order]
        self.loc = loc[order]

    @property
    def n(self) -> int:
        return self.t.shape[0]

    def take(self, indices) -> "Trajectory":
        """Sub-trajectory at the given ascending positions (id preserved)."""
        idx = np.asarray(indices, dtype=np.int64)
        return Trajectory(
            self.traj_id, self.t[idx], self.lon[idx], self.lat[idx], self.loc[idx]
        )

    def records(self) -> list[VisitRecord]:
        return [
            VisitRecord(int(self.loc[i]), float(self.t[i]), float(self.lon[i]), float(self.lat[i]))
            for i in range(self.n)
        ]

    def __repr__(self) -> str:  # pragma: no cover
        return f"Trajectory({self.traj_id!r}, n={self.n})"


@dataclass(frozen=True)
class GridSpec:
    """Uniform metric grid over a lon/lat box, equirectangular at mid-latitude."""

    min_lon: float
    min_lat: float
    max_lon: float
    max_lat: float
    cell_size_meters: float = 250.0

    def __post_init__(self):
        if not (self.max_lon > self.min_lon and self.max_lat > self.min_lat):
            raise ConfigError(
                f"grid box is empty: lon [{self.min_lon}, {self.max_lon}] "
                f"lat [{self.min_lat}, {self.max_lat}]"
            )
        if self.cell_size_meters <= 0:
            raise ConfigError(f"cell_size_meters must be positive, got {self.cell_size_meters}")
        if self.n_cells > 2**31:
            raise ConfigError(f"grid has {self.n_cells} cells; does not fit 32-bit index")

    @property
    def mid_lat(self) -> float:
        return 0.5 * (self.min_lat + self.max_lat)

    @property
    def meters_per_deg_lon(self) -> float:
        return METERS_PER_DEG_LAT * math.cos(math.radians(self.mid_lat))

    @property
    def n_cols(self) -> int:
        width_m = (self.max_lon - self.min_lon) * self.meters_per_deg_lon
        return int(math.ceil(width_m / self.cell_size_meters))

    @property
    def n_rows(self) -> int:
        height_m = (self.max_lat - self.min_lat) * METERS_PER_DEG_LAT
        return int(math.ceil(height_m / self.cell_size_meters))

    @property
    def n_cells(self) -> int:
        return self.n_rows * self.n_cols

    def cell_of(self, lon, lat) -> np.ndarray:
        """Row-major cell index; out-of-box coordinates clamp to the border."""
        lon = np.asarray(lon, dtype=np.float64)
        lat = np.asarray(lat, dtype=np.float64)
        col = np.floor((lon - self.min_lon) * self.meters_per_deg_lon / self.cell_size_meters)
        row = np.floor((lat - self.min_lat) * METERS_PER_DEG_LAT / self.cell_size_meters)
        col = np.clip(col, 0, self.n_cols - 1).astype(np.int64)
        row = np.clip(row, 0, self.n_rows - 1).astype(np.int64)
        return row * self.n_cols + col

    def to_dict(self) -> dict:
        return {
            "min_lon": self.min_lon,
            "min_lat": self.min_lat,
            "max_lon": self.max_lon,
            "max_lat": self.max_lat,
            "cell_size_meters": self.cell_size_meters,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GridSpec":
        return cls(**d)


@dataclass(frozen=True)
class Normalization:
    """Affine time transform: minutes since the (train-split) epoch."""

    epoch_seconds: float
    seconds_per_unit: float = 60.0

    def apply_values(self, t: np.ndarray) -> np.ndarray:
        return (np.asarray(t, dtype=np.float64) - self.epoch_seconds) / self.seconds_per_unit

    def invert_values(self, t: np.ndarray) -> np.ndarray:
        return np.asarray(t, dtype=np.float64) * self.seconds_per_unit + self.epoch_seconds

    def apply(self, traj: Trajectory) -> Trajectory:
        return Trajectory(traj.traj_id, self.apply_values(traj.t), traj.lon, traj.lat, traj.loc)

    def invert(self, traj: Trajectory) -> Trajectory:
        return Trajectory(traj.traj_id, self.invert_values(traj.t), traj.lon, traj.lat, traj.loc)

    def to_dict(self) -> dict:
        return {"epoch_seconds": self.epoch_seconds, "seconds_per_unit": self.seconds_per_unit}

    @classmethod
    def from_dict(cls, d: dict) -> "Normalization":
        return cls(**d)


@dataclass
class DatasetSplit:
    train: list[Trajectory]
    val: list[Trajectory]
    test: list[Trajectory]

    def all(self) -> list[Trajectory]:
        return self.train + self.val + self.test


@dataclass
class ParseResult:
    trajectories: list[Trajectory]
    rows_total: int
    rows_malformed: int
    groups_dropped_short: int
    has_locations: bool


def _parse_float(text: str) -> float:
    value = float(text)
    if not math.isfinite(value):
        raise ValueError("non-finite")
    return value


def parse_trajectories(path) -> ParseResult:
    """Read a trajectory CSV, counting malformed rows instead of failing.

    Fails hard only on a wrong header or when more than half the data rows
    are malformed.
    """
    path = Path(path)
    if not path.exists():
        raise DataError(f"dataset file not found: {path}")
    groups: dict[str, list[tuple[float, float, float, int]]] = {}
    rows_total = 0
    rows_malformed = 0
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        header = [h.strip() for h in header]
        if tuple(header[:4]) != REQUIRED_COLUMNS or len(header) > 5:
            raise DataError(
                f"{path}: expected header {','.join(REQUIRED_COLUMNS)}[,{LOC_COLUMN}], "
                f"got {','.join(header)}"
            )
        has_locations = len(header) == 5
        if has_locations and header[4] != LOC_COLUMN:
            raise DataError(f"{path}: fifth column must be {LOC_COLUMN}, got {header[4]}")
        n_fields = len(header)
        for row in reader:
            rows_total += 1
            if len(row) != n_fields:
                rows_malformed += 1
                continue
            try:
                traj_id = row[0].strip()
                if not traj_id:
                    raise ValueError("empty id")
                t = _parse_float(row[1])
                lon = _parse_float(row[2])
                lat = _parse_float(row[3])
                loc = int(row[4]) if has_locations else -1
                if has_locations and loc < 0:
                    raise ValueError("negative loc_index")
            except ValueError:
                rows_malformed += 1
                continue
            groups.setdefault(traj_id, []).append((t, lon, lat, loc))
    if rows_total and rows_malformed > 0.5 * rows_total:
        raise DataError(
            f"{path}: {rows_malformed} of {rows_total} rows malformed (more than half)"
        )
    trajectories = []
    groups_dropped_short = 0
    for traj_id in sorted(groups):
        rows = groups[traj_id]
        if len(rows) < 2:
            groups_dropped_short += 1
            continue
        arr = np.array(rows, dtype=np.float64)
        trajectories.append(
            Trajectory(traj_id, arr[:, 0], arr[:, 1], arr[:, 2], arr[:, 3].astype(np.int64))
        )
    return ParseResult(
        trajectories, rows_total, rows_malformed, groups_dropped_short, has_locations
    )


def _greedy_keep_indices(t: np.ndarray, interval_seconds: float) -> list[int]:
    keep = [0]
    last = t[0]
    for i in range(1, t.shape[0]):
        if t[i] >= last + interval_seconds:
            keep.append(i)
            last = t[i]
    return keep


def resample(traj: Trajectory, interval_seconds: float = 60.0) -> Trajectory:
    """Greedy decimation: keep a record iff >= interval after the last kept."""
    if interval_seconds <= 0:
        raise ConfigError(f"resample interval must be positive, got {interval_seconds}")
    keep = _greedy_keep_indices(traj.t, interval_seconds)
    if len(keep) < 2:
        raise DataError(
            f"trajectory {traj.traj_id!r}: fewer than 2 records survive resampling"
        )
    return traj.take(keep)


def filter_min_length(trajs: Iterable[Trajectory], min_length: int = 20) -> list[Trajectory]:
    kept = [traj for traj in trajs if traj.n >= min_length]
    if not kept:
        log.warning("min-length filter (%d) removed every trajectory", min_length)
    return kept


def resample_and_filter(
    trajs: Iterable[Trajectory], interval_seconds: float, min_length: int
) -> tuple[list[Trajectory], int]:
    """Resample each trajectory, dropping those shorter than min_length after."""
    kept: list[Trajectory] = []
    dropped = 0
    floor = max(int(min_length), 2)
    for traj in trajs:
        keep = _greedy_keep_indices(traj.t, interval_seconds)
        if len(keep) < floor:
            dropped += 1
            continue
        kept.append(traj.take(keep))
    if not kept:
        log.warning("resample+min-length left zero trajectories")
    return kept, dropped


def assign_grid_index(trajs: Iterable[Trajectory], grid: GridSpec) -> list[Trajectory]:
    return [
        Trajectory(t.traj_id, t.t, t.lon, t.lat, grid.cell_of(t.lon, t.lat)) for t in trajs
    ]


def chronological_split(
    trajs: Sequence[Trajectory], ratios: Sequence[float] = (0.8, 0.1, 0.1)
) -> DatasetSplit:
    """Order by first timestamp (ties by id) and cut at the ratio boundaries."""
    if len(ratios) != 3 or any(r <= 0 for r in ratios):
        raise ConfigError(f"split ratios must be three positive numbers, got {ratios}")
    n = len(trajs)
    if n < 3:
        raise DataError(f"need at least 3 trajectories to split, got {n}")
    total = float(sum(ratios))
    r0, r1 = ratios[0] / total, ratios[1] / total
    ordered = sorted(trajs, key=lambda tr: (tr.t[0], tr.traj_id))
    cut1 = int(math.floor(r0 * n))
    cut2 = int(math.floor((r0 + r1) * n))
    return DatasetSplit(ordered[:cut1], ordered[cut1:cut2], ordered[cut2:])


def normalize_features(
    trajs: Sequence[Trajectory], epoch_seconds: Optional[float] = None
) -> tuple[Normalization, list[Trajectory]]:
    """Rescale timestamps to minutes since `epoch_seconds`.

    When no epoch is given the earliest first-record timestamp of `trajs`
    is used (the pipeline passes the train split here).
    """
    if epoch_seconds is None:
        if not trajs:
            raise DataError("cannot infer normalization epoch from zero trajectories")
        epoch_seconds = float(min(traj.t[0] for traj in trajs))
    norm = Normalization(epoch_seconds=float(epoch_seconds))
    return norm, [norm.apply(traj) for traj in trajs]


# ---------------------------------------------------------------------------
# processed-dataset files
# ---------------------------------------------------------------------------


@dataclass
class ProcessedDataset:
    split: DatasetSplit
    grid: Optional[GridSpec]
    normalization: Normalization
    n_locations: int
    meta: dict = field(default_factory=dict)


def _format_value(x: float) -> str:
    return repr(int(x)) if float(x).is_integer() and abs(x) < 2**53 else repr(float(x))


def meta_path_for(path) -> Path:
    path = Path(path)
    return path.with_name(path.stem + ".meta.json")


def write_processed(path, dataset: ProcessedDataset) -> None:
    """Write the processed CSV plus its metadata sidecar."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(list(REQUIRED_COLUMNS) + [LOC_COLUMN])
        for traj in dataset.split.all():
            for i in range(traj.n):
                writer.writerow(
                    [
                        traj.traj_id,
                        _format_value(traj.t[i]),
                        repr(float(traj.lon[i])),
                        repr(float(traj.lat[i])),
                        int(traj.loc[i]),
                    ]
                )
    meta = {
        "grid": dataset.grid.to_dict() if dataset.grid is not None else None,
        "normalization": dataset.normalization.to_dict(),
        "split": {
            "train": [t.traj_id for t in dataset.split.train],
            "val": [t.traj_id for t in dataset.split.val],
            "test": [t.traj_id for t in dataset.split.test],
        },
        "n_locations": dataset.n_locations,
    }
    with open(meta_path_for(path), "w") as fh:
        json.dump(meta, fh, indent=1)
        fh.write("\n")


def read_processed(path) -> ProcessedDataset:
    """Load a processed CSV and its sidecar back into split form."""
    path = Path(path)
    meta_path = meta_path_for(path)
    if not meta_path.exists():
        raise DataError(f"metadata sidecar not found: {meta_path}")
    with open(meta_path) as fh:
        meta = json.load(fh)
    result = parse_trajectories(path)
    if not result.has_locations:
        raise DataError(f"{path}: processed dataset must carry a {LOC_COLUMN} column")
    by_id = {t.traj_id: t for t in result.trajectories}
    split_ids = meta["split"]
    missing = [
        i for part in ("train", "val", "test") for i in split_ids[part] if i not in by_id
    ]
    if missing:
        raise DataError(f"{path}: split references missing trajectories, e.g. {missing[0]!r}")
    split = DatasetSplit(
        [by_id[i] for i in split_ids["train"]],
        [by_id[i] for i in split_ids["val"]],
        [by_id[i] for i in split_ids["test"]],
    )
    grid = GridSpec.from_dict(meta["grid"]) if meta.get("grid") else None
    norm = Normalization.from_dict(meta["normalization"])
    n_locations = int(meta["n_locations"])
    for traj in result.trajectories:
        if traj.loc.max() >= n_locations:
            raise DataError(
                f"{path}: trajectory {traj.traj_id!r} has loc_index >= {n_locations}"
            )
    return ProcessedDataset(split, grid, norm, n_locations, meta)
