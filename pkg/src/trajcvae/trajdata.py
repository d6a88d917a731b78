"""Trajectory ingestion, synchronization, normalization and synthetic fleets."""
from __future__ import annotations

import csv
import datetime as dt
import math
from collections import defaultdict
from dataclasses import dataclass, field, replace
from functools import cached_property
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

HOURS = 24
HARBOUR = (-4.28, 47.78)
TRAJ_COLUMNS = ("vessel_id", "date", "hour", "lon", "lat")
PING_COLUMNS = ("vessel_id", "timestamp", "lon", "lat")


class DataError(ValueError):
    """Raised for malformed trajectory or ping input."""


@dataclass(frozen=True)
class RawPing:
    vessel_id: str
    timestamp: dt.datetime
    lon: float
    lat: float

    def __post_init__(self):
        if not -180.0 <= self.lon <= 180.0:
            raise DataError(f"longitude {self.lon} outside [-180, 180]")
        if not -90.0 <= self.lat <= 90.0:
            raise DataError(f"latitude {self.lat} outside [-90, 90]")


@dataclass(frozen=True)
class Trajectory:
    """One vessel-day: an (H, D) matrix of synchronized positions."""

    vessel_id: str
    date: dt.date
    positions: np.ndarray

    def __post_init__(self):
        pos = np.array(self.positions, dtype=np.float64)
        if pos.ndim != 2:
            raise DataError(f"positions must be 2-D (H, D), got shape {pos.shape}")
        if not np.all(np.isfinite(pos)):
            raise DataError(f"non-finite position in trajectory {self.vessel_id} {self.date}")
        pos.flags.writeable = False
        object.__setattr__(self, "positions", pos)

    def is_loop(self, harbour: Sequence[float], eps: float = 0.0) -> bool:
        h = np.asarray(harbour, dtype=np.float64)
        return bool(
            np.linalg.norm(self.positions[0] - h) <= eps and np.linalg.norm(self.positions[-1] - h) <= eps
        )


@dataclass(frozen=True)
class NormStats:
    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        mean = np.array(self.mean, dtype=np.float64)
        std = np.array(self.std, dtype=np.float64)
        if np.any(std <= 0):
            raise DataError(f"normalization std must be strictly positive, got {std}")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "std", std)

    def apply(self, x: np.ndarray) -> np.ndarray:
        return (np.asarray(x) - self.mean) / self.std

    def invert(self, x: np.ndarray) -> np.ndarray:
        return np.asarray(x) * self.std + self.mean


@dataclass(frozen=True)
class FleetDataset:
    """A corpus of vessel-day trajectories with their seasonal covariates.

    ``norm`` is ``None`` for raw data and holds the statistics that were
    applied once :func:`normalize` has run. ``harbour`` is always in raw
    (degree) units.
    """

    trajectories: tuple
    covariates: tuple
    norm: NormStats | None = None
    harbour: np.ndarray = field(default_factory=lambda: np.array(HARBOUR))

    def __post_init__(self):
        trajs = tuple(self.trajectories)
        covs = tuple(np.asarray(c, dtype=np.float64) for c in self.covariates)
        if len(trajs) != len(covs):
            raise DataError(f"{len(trajs)} trajectories but {len(covs)} covariates")
        seen = set()
        for t in trajs:
            key = (t.vessel_id, t.date)
            if key in seen:
                raise DataError(f"duplicate trajectory for vessel {t.vessel_id} on {t.date}")
            seen.add(key)
        if trajs:
            shape = trajs[0].positions.shape
            for t in trajs:
                if t.positions.shape != shape:
                    raise DataError(f"trajectory {t.vessel_id} {t.date} has shape {t.positions.shape}, expected {shape}")
        object.__setattr__(self, "trajectories", trajs)
        object.__setattr__(self, "covariates", covs)
        object.__setattr__(self, "harbour", np.array(self.harbour, dtype=np.float64))

    def __len__(self) -> int:
        return len(self.trajectories)

    @cached_property
    def positions(self) -> np.ndarray:
        """Stacked positions, shape (M, H, D)."""
        arr = np.stack([t.positions for t in self.trajectories]) if self.trajectories else np.zeros((0, HOURS, 2))
        arr.flags.writeable = False
        return arr

    @cached_property
    def covariate_array(self) -> np.ndarray:
        arr = np.stack(self.covariates) if self.covariates else np.zeros((0, 2))
        arr.flags.writeable = False
        return arr

    @property
    def vessel_ids(self) -> list[str]:
        return [t.vessel_id for t in self.trajectories]

    @property
    def dates(self) -> list[dt.date]:
        return [t.date for t in self.trajectories]

    def harbour_in_data_units(self) -> np.ndarray:
        return self.harbour if self.norm is None else self.norm.apply(self.harbour)


# ---------------------------------------------------------------------------
# covariates and synchronization
# ---------------------------------------------------------------------------


def day_of_year(date: dt.date) -> int:
    """Day index in [1, 365]; Feb 29 shares index 59 with Feb 28."""
    j = date.timetuple().tm_yday
    leap = date.year % 4 == 0 and (date.year % 100 != 0 or date.year % 400 == 0)
    if leap and j >= 60:
        j -= 1
    return j


def encode_covariate(date: dt.date | int) -> np.ndarray:
    """(cos, sin) of the annual phase 2*pi*j/365 for a date or a day index j."""
    j = date if isinstance(date, (int, np.integer)) else day_of_year(date)
    phase = 2.0 * math.pi * j / 365.0
    return np.array([math.cos(phase), math.sin(phase)])


def synchronize(pings: Sequence[RawPing], date: dt.date, H: int = HOURS) -> Trajectory:
    """Linearly interpolate pings onto H equally spaced times of ``date``.

    Grid times outside the ping span take the nearest ping's position.
    """
    if len(pings) < 2:
        raise DataError(f"synchronize needs at least 2 pings for {date}, got {len(pings)}")
    vessels = {p.vessel_id for p in pings}
    if len(vessels) != 1:
        raise DataError(f"pings from several vessels passed to synchronize: {sorted(vessels)}")
    t0 = dt.datetime(date.year, date.month, date.day, tzinfo=dt.timezone.utc)
    secs = np.array([(_as_utc(p.timestamp) - t0).total_seconds() for p in pings])
    if np.any(np.diff(secs) <= 0):
        bad = int(np.argmax(np.diff(secs) <= 0)) + 1
        raise DataError(f"ping timestamps not strictly increasing at index {bad} ({pings[bad].timestamp})")
    grid = np.arange(H) * (86400.0 / H)
    lon = np.interp(grid, secs, [p.lon for p in pings])
    lat = np.interp(grid, secs, [p.lat for p in pings])
    return Trajectory(pings[0].vessel_id, date, np.column_stack([lon, lat]))


def _as_utc(ts: dt.datetime) -> dt.datetime:
    if ts.tzinfo is None:
        return ts.replace(tzinfo=dt.timezone.utc)
    return ts.astimezone(dt.timezone.utc)


def synchronize_pings(pings: Iterable[RawPing], H: int = HOURS, harbour=HARBOUR) -> FleetDataset:
    """Group pings by vessel and UTC day and synchronize every day with >= 2 pings.

    A day also sees the pings stamped exactly at the next midnight, so a
    ping at 24:00 closes the previous day.
    """
    by_day: dict[tuple[str, dt.date], list[RawPing]] = defaultdict(list)
    for p in pings:
        ts = _as_utc(p.timestamp)
        by_day[(p.vessel_id, ts.date())].append(p)
        if ts.time() == dt.time(0, 0):
            by_day[(p.vessel_id, ts.date() - dt.timedelta(days=1))].append(p)
    trajs = []
    for (vid, day) in sorted(by_day):
        group = sorted(by_day[(vid, day)], key=lambda p: _as_utc(p.timestamp))
        if len(group) < 2:
            continue
        trajs.append(synchronize(group, day, H))
    return FleetDataset(tuple(trajs), tuple(encode_covariate(t.date) for t in trajs), None, np.asarray(harbour))


# ---------------------------------------------------------------------------
# normalization and features
# ---------------------------------------------------------------------------


def normalize(data: FleetDataset) -> tuple[FleetDataset, NormStats]:
    """Standardize every coordinate with dataset-wide mean and std."""
    if len(data) == 0:
        raise DataError("cannot normalize an empty dataset")
    if data.norm is not None:
        raise DataError("dataset is already normalized")
    flat = data.positions.reshape(-1, data.positions.shape[-1])
    mean = flat.mean(axis=0)
    std = flat.std(axis=0)
    if np.any(std <= 0):
        raise DataError(f"zero variance in coordinate(s) {np.flatnonzero(std <= 0).tolist()}")
    stats = NormStats(mean, std)
    trajs = tuple(replace(t, positions=stats.apply(t.positions)) for t in data.trajectories)
    return replace(data, trajectories=trajs, norm=stats), stats


def apply_norm(data: FleetDataset, stats: NormStats) -> FleetDataset:
    """Normalize raw data with previously fitted statistics."""
    if data.norm is not None:
        raise DataError("dataset is already normalized")
    trajs = tuple(replace(t, positions=stats.apply(t.positions)) for t in data.trajectories)
    return replace(data, trajectories=trajs, norm=stats)


def denormalize(data: FleetDataset) -> FleetDataset:
    if data.norm is None:
        return data
    trajs = tuple(replace(t, positions=data.norm.invert(t.positions)) for t in data.trajectories)
    return replace(data, trajectories=trajs, norm=None)


def traj_features(positions: np.ndarray, harbour: Sequence[float]) -> tuple[float, float]:
    """Maximal distance to the harbour and the heading of the farthest point.

    Units follow the inputs. Ties pick the earliest hour; a trajectory that
    never leaves the harbour has heading 0.
    """
    offsets = np.asarray(positions, dtype=np.float64) - np.asarray(harbour, dtype=np.float64)
    dist = np.sqrt(np.sum(offsets * offsets, axis=1))
    i = int(np.argmax(dist))
    d_max = float(dist[i])
    if d_max == 0.0:
        return 0.0, 0.0
    return d_max, float(math.atan2(offsets[i, 1], offsets[i, 0]))


# ---------------------------------------------------------------------------
# synthetic fleets
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SynthConfig:
    """Planted-behaviour fleet generator settings.

    Distances and ``noise_sd`` are in degrees, directions in radians.
    ``heading_sd`` and ``reach_sd`` (relative) set the day-to-day spread of
    a vessel's trips around its group archetype; ``fishing_prob`` is the
    chance that a vessel fishes on a given calendar day.
    """

    n_vessels: int = 20
    n_days: int = 120
    n_groups: int = 3
    directions: tuple | None = None
    distances: tuple | None = None
    seasonal_amplitude: float = 0.0
    p_stay: float = 0.5
    noise_sd: float = 0.005
    heading_sd: float = 0.15
    reach_sd: float = 0.08
    loop_width: float = 0.3
    fishing_prob: float = 1.0
    start_date: dt.date = dt.date(2015, 1, 1)
    harbour: tuple = HARBOUR
    H: int = HOURS
    seed: int = 0

    def group_directions(self) -> np.ndarray:
        if self.directions is not None:
            return np.asarray(self.directions, dtype=np.float64)
        return np.pi / 2 + 2 * np.pi * np.arange(self.n_groups) / self.n_groups

    def group_distances(self) -> np.ndarray:
        if self.distances is not None:
            return np.asarray(self.distances, dtype=np.float64)
        return 0.35 + 0.15 * np.arange(self.n_groups)

    def validate(self) -> None:
        if self.n_vessels < 1 or self.n_days < 1 or self.n_groups < 1:
            raise ValueError("n_vessels, n_days and n_groups must be positive")
        if self.n_groups > self.n_vessels:
            raise ValueError(f"n_groups={self.n_groups} exceeds n_vessels={self.n_vessels}")
        if not 0.0 <= self.p_stay <= 1.0:
            raise ValueError(f"p_stay={self.p_stay} outside [0, 1]")
        if not 0.0 <= self.fishing_prob <= 1.0:
            raise ValueError(f"fishing_prob={self.fishing_prob} outside [0, 1]")
        for name in ("noise_sd", "heading_sd", "reach_sd"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if len(self.group_directions()) != self.n_groups or len(self.group_distances()) != self.n_groups:
            raise ValueError("directions/distances must have one entry per group")
        if self.H < 3:
            raise ValueError("H must be at least 3")


def loop_path(heading: float, reach: float, width: float, H: int, harbour) -> np.ndarray:
    """Closed oval leaving ``harbour`` along ``heading`` and returning at hour H-1."""
    u = np.arange(H) / (H - 1)
    radial = reach * np.sin(np.pi * u)
    lateral = width * reach * np.sin(2 * np.pi * u)
    # endpoints land exactly on the harbour
    radial[[0, -1]] = 0.0
    lateral[[0, -1]] = 0.0
    c, s = math.cos(heading), math.sin(heading)
    lon = harbour[0] + radial * c - lateral * s
    lat = harbour[1] + radial * s + lateral * c
    return np.column_stack([lon, lat])


def synth_fleet(cfg: SynthConfig) -> tuple[FleetDataset, dict[str, int]]:
    """Generate a fleet with planted groups; returns the dataset and vessel -> group."""
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    directions = cfg.group_directions()
    distances = cfg.group_distances()
    width = len(str(cfg.n_vessels - 1))
    harbour = np.asarray(cfg.harbour, dtype=np.float64)
    labels: dict[str, int] = {}
    trajs, covs = [], []
    for v in range(cfg.n_vessels):
        vid = f"V{v:0{width}d}"
        g = v % cfg.n_groups
        labels[vid] = g
        heading = reach_factor = None
        for day in range(cfg.n_days):
            fishing = rng.random() < cfg.fishing_prob
            stay = rng.random() < cfg.p_stay
            fresh_heading = directions[g] + cfg.heading_sd * rng.standard_normal()
            fresh_reach = 1.0 + cfg.reach_sd * rng.standard_normal()
            noise = cfg.noise_sd * rng.standard_normal((cfg.H - 2, 2))
            if not fishing:
                continue
            if heading is None or not stay:
                heading, reach_factor = fresh_heading, fresh_reach
            date = cfg.start_date + dt.timedelta(days=day)
            j = day_of_year(date)
            reach = distances[g] * reach_factor * (1.0 + cfg.seasonal_amplitude * math.cos(2 * math.pi * j / 365))
            pos = loop_path(heading, reach, cfg.loop_width, cfg.H, harbour)
            pos[1:-1] += noise
            trajs.append(Trajectory(vid, date, pos))
            covs.append(encode_covariate(date))
    return FleetDataset(tuple(trajs), tuple(covs), None, harbour), labels


# ---------------------------------------------------------------------------
# CSV
# ---------------------------------------------------------------------------


def _check_header(header, required, path):
    if header is None:
        raise DataError(f"{path}: empty file")
    missing = [c for c in required if c not in header]
    if missing:
        raise DataError(f"{path}: missing column(s) {', '.join(missing)}")


def export_csv(data: FleetDataset, path) -> None:
    """Write one row per (trajectory, hour) using the trajectory CSV schema."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TRAJ_COLUMNS)
        for t in data.trajectories:
            iso = t.date.isoformat()
            for h, (lon, lat) in enumerate(t.positions):
                w.writerow((t.vessel_id, iso, h, repr(float(lon)), repr(float(lat))))


def ingest_csv(path, H: int = HOURS, harbour=None) -> FleetDataset:
    """Read a trajectory CSV; every vessel-day needs all hours 0..H-1.

    Without an explicit ``harbour`` the mean first position is used.
    """
    path = Path(path)
    rows: dict[tuple[str, dt.date], dict[int, tuple[float, float]]] = defaultdict(dict)
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        _check_header(reader.fieldnames, TRAJ_COLUMNS, path)
        for line, row in enumerate(reader, start=2):
            try:
                vid = row["vessel_id"]
                if not vid:
                    raise ValueError("empty vessel_id")
                day = dt.date.fromisoformat(row["date"])
                hour = int(row["hour"])
                lon, lat = float(row["lon"]), float(row["lat"])
            except (TypeError, ValueError) as exc:
                raise DataError(f"{path}:{line}: malformed row: {exc}") from None
            if not 0 <= hour < H:
                raise DataError(f"{path}:{line}: hour {hour} outside 0..{H - 1}")
            if not (math.isfinite(lon) and math.isfinite(lat)):
                raise DataError(f"{path}:{line}: non-finite position")
            cell = rows[(vid, day)]
            if hour in cell:
                raise DataError(f"{path}:{line}: duplicate hour {hour} for {vid} {day}")
            cell[hour] = (lon, lat)
    trajs = []
    for (vid, day) in sorted(rows):
        cell = rows[(vid, day)]
        if len(cell) != H:
            missing = sorted(set(range(H)) - set(cell))
            raise DataError(f"{path}: {vid} {day} missing hour(s) {missing}")
        trajs.append(Trajectory(vid, day, np.array([cell[h] for h in range(H)])))
    if harbour is None:
        harbour = np.mean([t.positions[0] for t in trajs], axis=0) if trajs else np.array(HARBOUR)
    return FleetDataset(tuple(trajs), tuple(encode_covariate(t.date) for t in trajs), None, np.asarray(harbour))


def read_pings_csv(path) -> list[RawPing]:
    path = Path(path)
    out = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        _check_header(reader.fieldnames, PING_COLUMNS, path)
        for line, row in enumerate(reader, start=2):
            try:
                ts = dt.datetime.fromisoformat(row["timestamp"].replace("Z", "+00:00"))
                out.append(RawPing(row["vessel_id"], _as_utc(ts), float(row["lon"]), float(row["lat"])))
            except (TypeError, ValueError) as exc:
                raise DataError(f"{path}:{line}: malformed row: {exc}") from None
    return out


def export_labels(labels: dict[str, int], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("vessel_id", "group"))
        for vid in sorted(labels):
            w.writerow((vid, labels[vid]))


def read_labels(path) -> dict[str, int]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        _check_header(reader.fieldnames, ("vessel_id", "group"), path)
        return {row["vessel_id"]: int(row["group"]) for row in reader}
