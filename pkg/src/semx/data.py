"""Trajectory ingestion, synthetic traffic, clip segmentation and scenes.

Coordinates are meters: ``x`` lateral (NGSIM ``Local_X``), ``y`` longitudinal
(``Local_Y``). All tracks live on a 10 Hz frame-locked grid, ``t = frame * dt``.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigError, ParseError, SamplingError, SchemaError

DT = 0.1
FEET = 0.3048
NGSIM_COLUMNS = ("Vehicle_ID", "Frame_ID", "Global_Time", "Local_X", "Local_Y")
HISTORY_STEPS = 30
HORIZON_STEPS = 50


@dataclass(frozen=True)
class TrackPoint:
    vehicle_id: int
    t: float
    x: float
    y: float


@dataclass(frozen=True, eq=False)
class Trajectory:
    """One vehicle's contiguous track. ``xy`` has shape (n, 2)."""

    vehicle_id: int
    t: np.ndarray
    xy: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.t, dtype=float)
        xy = np.asarray(self.xy, dtype=float).reshape(-1, 2)
        if len(t) != len(xy):
            raise ValueError("t and xy lengths differ")
        if len(t) < 2:
            raise ValueError(f"track {self.vehicle_id}: need at least 2 points")
        if not np.all(np.isfinite(xy)):
            raise ValueError(f"track {self.vehicle_id}: non-finite coordinates")
        if np.any(np.diff(t) <= 0):
            raise ValueError(f"track {self.vehicle_id}: timestamps not increasing")
        object.__setattr__(self, "t", t)
        object.__setattr__(self, "xy", xy)

    def __len__(self):
        return len(self.t)

    @property
    def points(self) -> list[TrackPoint]:
        return [TrackPoint(self.vehicle_id, float(t), float(p[0]), float(p[1]))
                for t, p in zip(self.t, self.xy)]

    def is_uniform(self, dt: float = DT, tol: float = 1e-6) -> bool:
        return bool(np.all(np.abs(np.diff(self.t) - dt) <= tol))

    def __eq__(self, other):
        if not isinstance(other, Trajectory):
            return NotImplemented
        return (self.vehicle_id == other.vehicle_id
                and np.array_equal(self.t, other.t)
                and np.array_equal(self.xy, other.xy))


@dataclass(frozen=True, eq=False)
class Clip:
    """30-step observed history plus 50-step ground-truth future."""

    vehicle_id: int
    scene_id: int
    hist_t: np.ndarray
    hist_xy: np.ndarray
    fut_t: np.ndarray
    fut_xy: np.ndarray

    def __post_init__(self):
        if len(self.hist_t) != HISTORY_STEPS or len(self.fut_t) != HORIZON_STEPS:
            raise ValueError("clip must hold 30 history and 50 future points")

    @property
    def clip_id(self) -> str:
        return f"{self.scene_id}:{self.vehicle_id}"

    @property
    def history(self) -> list[TrackPoint]:
        return [TrackPoint(self.vehicle_id, float(t), float(p[0]), float(p[1]))
                for t, p in zip(self.hist_t, self.hist_xy)]

    @property
    def future(self) -> list[TrackPoint]:
        return [TrackPoint(self.vehicle_id, float(t), float(p[0]), float(p[1]))
                for t, p in zip(self.fut_t, self.fut_xy)]


@dataclass(frozen=True, eq=False)
class Scene:
    scene_id: int
    clips: tuple
    index: dict = field(init=False, repr=False)

    def __post_init__(self):
        clips = tuple(sorted(self.clips, key=lambda c: c.vehicle_id))
        if not clips:
            raise ValueError("scene needs at least one clip")
        ref = clips[0]
        for c in clips[1:]:
            if not (np.array_equal(c.hist_t, ref.hist_t) and np.array_equal(c.fut_t, ref.fut_t)):
                raise ValueError(f"scene {self.scene_id}: clips on different time grids")
        object.__setattr__(self, "clips", clips)
        object.__setattr__(self, "index", {c.vehicle_id: c for c in clips})

    def __len__(self):
        return len(self.clips)

    @property
    def vehicle_ids(self) -> list[int]:
        return [c.vehicle_id for c in self.clips]


# --------------------------------------------------------------------------- NGSIM CSV

def parse_ngsim(path, unit_mode: str = "feet", dt: float = DT) -> list[Trajectory]:
    """Read an NGSIM-format CSV into per-vehicle tracks.

    Rows may come in any order. Missing frames split a vehicle into several
    tracks; single-sample fragments are dropped.
    """
    if unit_mode not in ("feet", "meters"):
        raise ConfigError(f"unit_mode must be 'feet' or 'meters', got {unit_mode!r}")
    scale = FEET if unit_mode == "feet" else 1.0
    path = Path(path)
    text = path.read_text()
    if not text.strip():
        return []
    rows: dict[int, list[tuple[int, float, float]]] = {}
    reader = csv.DictReader(text.splitlines())
    header = [h.strip() for h in (reader.fieldnames or [])]
    for col in NGSIM_COLUMNS:
        if col not in header:
            raise SchemaError(f"missing column {col!r} in {path}")
    reader.fieldnames = header
    for lineno, row in enumerate(reader, start=2):
        try:
            vid = int(float(row["Vehicle_ID"]))
            frame = int(float(row["Frame_ID"]))
            float(row["Global_Time"])
            x = float(row["Local_X"]) * scale
            y = float(row["Local_Y"]) * scale
        except (TypeError, ValueError) as exc:
            raise ParseError(f"{path}: row {lineno}: non-numeric cell ({exc})") from None
        if not (math.isfinite(x) and math.isfinite(y)):
            raise ParseError(f"{path}: row {lineno}: non-finite coordinate")
        rows.setdefault(vid, []).append((frame, x, y))

    tracks = []
    for vid in sorted(rows):
        pts = sorted(rows[vid])
        frames = np.array([p[0] for p in pts])
        if np.any(np.diff(frames) == 0):
            dup = int(frames[np.flatnonzero(np.diff(frames) == 0)[0]])
            raise ParseError(f"{path}: vehicle {vid} has duplicate frame {dup}")
        xy = np.array([(p[1], p[2]) for p in pts])
        breaks = np.flatnonzero(np.diff(frames) > 1) + 1
        for seg_f, seg_xy in zip(np.split(frames, breaks), np.split(xy, breaks)):
            if len(seg_f) >= 2:
                tracks.append(Trajectory(vid, seg_f * dt, seg_xy))
    return tracks


def write_ngsim(tracks: Iterable[Trajectory], path, unit_mode: str = "meters", dt: float = DT):
    """Write tracks in the NGSIM column layout (inverse of :func:`parse_ngsim`)."""
    scale = 1.0 / FEET if unit_mode == "feet" else 1.0
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(NGSIM_COLUMNS)
        for tr in tracks:
            for t, (x, y) in zip(tr.t, tr.xy):
                frame = int(round(t / dt))
                w.writerow([tr.vehicle_id, frame, frame * 100, repr(float(x * scale)), repr(float(y * scale))])


# --------------------------------------------------------------------------- clips & scenes

def segment_clips(tracks: Sequence[Trajectory], history_s: float = 3.0, horizon_s: float = 5.0,
                  stride: int = 10, dt: float = DT, align: str = "track") -> list[Clip]:
    """Slide fixed history/horizon windows over every track.

    ``align="track"`` starts windows at each track's first sample;
    ``align="global"`` only at frames divisible by ``stride`` so that
    vehicles observed over the same interval land in the same scene.
    """
    n_hist = int(round(history_s / dt))
    n_fut = int(round(horizon_s / dt))
    if n_hist != HISTORY_STEPS or n_fut != HORIZON_STEPS:
        raise ConfigError("clips are fixed at 3 s history and 5 s horizon at 10 Hz")
    if stride < 1:
        raise ConfigError("stride must be >= 1")
    if align not in ("track", "global"):
        raise ConfigError(f"unknown align mode {align!r}")
    bad = [tr.vehicle_id for tr in tracks if not tr.is_uniform(dt)]
    if bad:
        raise SamplingError(f"non-uniform sampling in tracks {sorted(set(bad))}", bad)

    n_win = n_hist + n_fut
    clips = []
    for tr in tracks:
        frames = np.rint(tr.t / dt).astype(int)
        if align == "global":
            starts = [i for i in range(len(tr) - n_win + 1) if frames[i] % stride == 0]
        else:
            starts = range(0, len(tr) - n_win + 1, stride)
        for i in starts:
            h, f = slice(i, i + n_hist), slice(i + n_hist, i + n_win)
            clips.append(Clip(tr.vehicle_id, int(frames[i]), tr.t[h].copy(), tr.xy[h].copy(),
                              tr.t[f].copy(), tr.xy[f].copy()))
    return clips


def build_scenes(clips: Iterable[Clip]) -> list[Scene]:
    """Group clips sharing a window start frame into scenes, ordered by id."""
    groups: dict[int, list[Clip]] = {}
    for c in clips:
        groups.setdefault(c.scene_id, []).append(c)
    return [Scene(sid, tuple(groups[sid])) for sid in sorted(groups)]


def neighbors(scene: Scene, vehicle_id: int, radius_m: float = 50.0) -> list[int]:
    if vehicle_id not in scene.index:
        raise KeyError(f"vehicle {vehicle_id} not in scene {scene.scene_id}")
    p = scene.index[vehicle_id].hist_xy[-1]
    out = []
    for c in scene.clips:
        if c.vehicle_id == vehicle_id:
            continue
        if math.hypot(*(c.hist_xy[-1] - p)) <= radius_m:
            out.append(c.vehicle_id)
    return sorted(out)


# --------------------------------------------------------------------------- synthetic traffic

@dataclass
class SynthConfig:
    """Freeway scenes of co-moving vehicles; one scene per block of frames."""

    n_scenes: int = 1
    n_vehicles: int = 10
    duration_s: float = 8.0
    n_lanes: int = 3
    lane_width: float = 3.7
    speed_range: tuple = (26.0, 32.0)
    spacing_range: tuple = (25.0, 45.0)
    maneuver_mix: dict = field(default_factory=lambda: {"cv": 0.5, "accel": 0.3, "lane_change": 0.2})
    accel_range: tuple = (-1.5, 1.5)
    lane_change_duration_s: float = 4.0
    congestion_prob: float = 0.0
    congested_speed_range: tuple = (8.0, 16.0)
    congested_mix: dict = field(default_factory=lambda: {"slowdown": 0.7, "cv": 0.2, "lane_change": 0.1})
    slowdown_decel: tuple = (1.5, 3.0)
    slowdown_ratio: tuple = (0.3, 0.6)
    noise_std: float = 0.0
    dt: float = DT

    def validate(self):
        if self.n_scenes < 1 or self.n_vehicles < 1:
            raise ConfigError("n_scenes and n_vehicles must be positive")
        if self.duration_s <= 0:
            raise ConfigError("duration_s must be positive")
        if self.n_lanes < 1 or self.lane_width <= 0:
            raise ConfigError("lane geometry must be positive")
        if self.noise_std < 0:
            raise ConfigError("noise_std must be non-negative")
        for mix in (self.maneuver_mix, self.congested_mix):
            unknown = set(mix) - set(MANEUVERS)
            if unknown:
                raise ConfigError(f"unknown maneuvers {sorted(unknown)}")
            if sum(mix.values()) <= 0:
                raise ConfigError("maneuver mix weights must sum to a positive value")


MANEUVERS = ("cv", "accel", "lane_change", "slowdown")


def quintic_blend(u):
    """Smooth 0 -> 1 step with zero velocity/acceleration at both ends."""
    u = np.clip(u, 0.0, 1.0)
    return u ** 3 * (10 - 15 * u + 6 * u ** 2)


def _accel_progress(t, v0, a):
    """Distance covered under constant acceleration with a stop at zero speed."""
    if a >= 0:
        return v0 * t + 0.5 * a * t ** 2
    t_stop = v0 / -a
    tc = np.minimum(t, t_stop)
    return v0 * tc + 0.5 * a * tc ** 2


def _slowdown_progress(t, v0, t_b, b, v_end):
    t_ramp = (v0 - v_end) / b
    t1 = np.clip(t - t_b, 0.0, t_ramp)
    t2 = np.maximum(t - t_b - t_ramp, 0.0)
    return v0 * np.minimum(t, t_b) + v0 * t1 - 0.5 * b * t1 ** 2 + v_end * t2


def synth_generate(config: SynthConfig, seed: int = 0) -> list[Trajectory]:
    """Kinematically exact synthetic tracks on the 10 Hz grid.

    Scene ``k`` occupies frames ``[k*F, (k+1)*F)`` with ``F`` frames per scene,
    and its vehicles get ids ``k*1000 + i``.
    """
    config.validate()
    rng = np.random.default_rng(seed)
    rate = int(round(1.0 / config.dt))
    n = int(round(config.duration_s * rate))
    if n < 2:
        raise ConfigError("duration must cover at least two samples")
    tau = np.arange(n) / rate
    tracks = []
    for k in range(config.n_scenes):
        congested = rng.random() < config.congestion_prob
        mix = config.congested_mix if congested else config.maneuver_mix
        names = sorted(mix)
        probs = np.array([mix[m] for m in names], dtype=float)
        probs /= probs.sum()
        lo, hi = config.congested_speed_range if congested else config.speed_range
        lane_front = np.zeros(config.n_lanes)
        for i in range(config.n_vehicles):
            lane = int(rng.integers(config.n_lanes))
            lane_front[lane] += rng.uniform(*config.spacing_range)
            y0 = float(lane_front[lane])
            v0 = float(rng.uniform(lo, hi))
            maneuver = names[int(rng.choice(len(names), p=probs))]
            x = np.full(n, (lane + 0.5) * config.lane_width)
            if maneuver == "accel":
                y = y0 + _accel_progress(tau, v0, float(rng.uniform(*config.accel_range)))
            elif maneuver == "slowdown":
                t_b = float(rng.uniform(0.5, 2.5))
                b = float(rng.uniform(*config.slowdown_decel))
                v_end = v0 * float(rng.uniform(*config.slowdown_ratio))
                y = y0 + _slowdown_progress(tau, v0, t_b, b, v_end)
            else:
                y = y0 + v0 * tau
            if maneuver == "lane_change":
                dirs = [d for d in (-1, 1) if 0 <= lane + d < config.n_lanes]
                if dirs:
                    d = dirs[int(rng.integers(len(dirs)))]
                    dur = min(config.lane_change_duration_s, config.duration_s)
                    t0 = float(rng.uniform(0.0, config.duration_s - dur)) if config.duration_s > dur else 0.0
                    x = x + d * config.lane_width * quintic_blend((tau - t0) / dur)
            xy = np.column_stack([x, y])
            if config.noise_std > 0:
                xy = xy + rng.normal(0.0, config.noise_std, xy.shape)
            frames = k * n + np.arange(n)
            tracks.append(Trajectory(k * 1000 + i, frames * config.dt, xy))
    return tracks


def synth_scenes(config: SynthConfig, seed: int = 0, stride: int | None = None) -> list[Scene]:
    """Synthetic tracks segmented into one scene per generated block."""
    tracks = synth_generate(config, seed)
    n = int(round(config.duration_s / config.dt))
    clips = segment_clips(tracks, stride=stride or n, dt=config.dt)
    return build_scenes(clips)
