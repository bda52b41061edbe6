"""Feature-extraction agent: schema-driven, fixed-width feature vectors.

Raw features are physical quantities (m, m/s, m/s^2). Each schema entry maps
its raw range ``[min, max]`` linearly onto ``[-1, 1]``; absent slots (fewer
vehicles than the schema capacity) are encoded as 0.
"""

from __future__ import annotations

import json
import logging
import math
import threading
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import HISTORY_STEPS, Clip, Scene, Trajectory
from .errors import ConfigError, SchemaError

log = logging.getLogger(__name__)

FEATURE_WIDTH = 384
LANE_HALF_WIDTH = 1.85
LATERAL_SHIFT_THRESHOLD = 1.0
DECEL_THRESHOLD = -0.5
NO_LEADER_HEADWAY = 200.0
MIN_MOVING_SPEED = 0.1


class _Counter:
    def __init__(self):
        self._lock = threading.Lock()
        self.value = 0

    def add(self, n):
        with self._lock:
            self.value += n

    def reset(self):
        with self._lock:
            self.value = 0


clamp_counter = _Counter()


@dataclass(frozen=True)
class FeatureEntry:
    name: str
    extractor: str
    min: float
    max: float
    size: int = 1


@dataclass(frozen=True)
class FeatureSchema:
    version: str
    kind: str
    entries: tuple
    capacity: int = 0
    notes: str = ""
    _offsets: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        names = [e.name for e in self.entries]
        if len(set(names)) != len(names):
            raise SchemaError("feature names must be unique")
        for e in self.entries:
            if not e.max > e.min:
                raise SchemaError(f"feature {e.name}: max must exceed min")
        offsets, pos = {}, 0
        for e in self.entries:
            offsets[e.name] = (pos, pos + e.size)
            pos += e.size
        object.__setattr__(self, "_offsets", offsets)

    @property
    def width(self) -> int:
        return sum(e.size for e in self.entries)

    def entry(self, name):
        for e in self.entries:
            if e.name == name:
                return e
        raise KeyError(name)

    def slice(self, name) -> slice:
        return slice(*self._offsets[name])

    def to_dict(self):
        return {
            "version": self.version,
            "kind": self.kind,
            "capacity": self.capacity,
            "notes": self.notes,
            "entries": [{"name": e.name, "extractor": e.extractor, "min": e.min, "max": e.max,
                         "size": e.size} for e in self.entries],
        }

    def to_json(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))

    @classmethod
    def from_dict(cls, d):
        entries = tuple(FeatureEntry(e["name"], e["extractor"], float(e["min"]), float(e["max"]),
                                     int(e.get("size", 1))) for e in d["entries"])
        return cls(d["version"], d["kind"], entries, int(d.get("capacity", 0)), d.get("notes", ""))

    @classmethod
    def from_json(cls, path):
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass(frozen=True, eq=False)
class FeatureVector:
    values: np.ndarray
    schema: FeatureSchema
    clamped: int = 0

    @property
    def schema_version(self):
        return self.schema.version

    def normalized(self, name):
        v = self.values[self.schema.slice(name)]
        return float(v[0]) if len(v) == 1 else v.copy()

    def value(self, name):
        """Entry ``name`` mapped back to physical units."""
        e = self.schema.entry(name)
        v = denormalize(self.values[self.schema.slice(name)], e.min, e.max)
        return float(v[0]) if e.size == 1 else v

    def has(self, name):
        return name in self.schema._offsets


def normalize(v, lo, hi):
    return 2.0 * (np.asarray(v, dtype=float) - lo) / (hi - lo) - 1.0


def denormalize(z, lo, hi):
    return lo + (np.asarray(z, dtype=float) + 1.0) * 0.5 * (hi - lo)


# --------------------------------------------------------------------------- default schemas

SPEED = (0.0, 40.0)
ACCEL = (-10.0, 10.0)
VLAT = (-5.0, 5.0)
VLON = (-40.0, 40.0)

VEHICLE_SLOT_FIELDS = (
    ("present", -1.0, 1.0),  # absent slots encode as 0 and decode to 0
    ("rel_x", -30.0, 30.0),
    ("rel_y", -400.0, 400.0),
    ("speed_mean", *SPEED),
    ("speed_last", *SPEED),
    ("speed_std", 0.0, 20.0),
    ("accel_mean", *ACCEL),
    ("accel_last", *ACCEL),
    ("vx_mean", *VLAT),
    ("vy_mean", *VLON),
    ("heading_change", 0.0, 2 * math.pi),
    ("lateral_shift", -8.0, 8.0),
    ("headway", 0.0, NO_LEADER_HEADWAY),
)

SCENE_FIELDS = (
    ("n_vehicles", 0.0, 64.0),
    ("speed_mean", *SPEED),
    ("speed_std", 0.0, 20.0),
    ("speed_min", *SPEED),
    ("speed_max", *SPEED),
    ("accel_mean", *ACCEL),
    ("accel_std", 0.0, 10.0),
    ("accel_min", *ACCEL),
    ("accel_max", *ACCEL),
    ("decel_fraction", 0.0, 1.0),
    ("density", 0.0, 300.0),
    ("headway_mean", 0.0, NO_LEADER_HEADWAY),
    ("headway_min", 0.0, NO_LEADER_HEADWAY),
    ("lane_change_rate", 0.0, 1.0),
    ("lateral_speed_mean", 0.0, 5.0),
    ("speed_trend", -20.0, 20.0),
)

VEHICLE_FIELDS = (
    ("speed_mean", *SPEED),
    ("speed_last", *SPEED),
    ("speed_std", 0.0, 20.0),
    ("speed_min", *SPEED),
    ("speed_max", *SPEED),
    ("accel_mean", *ACCEL),
    ("accel_last", *ACCEL),
    ("accel_std", 0.0, 10.0),
    ("accel_min", *ACCEL),
    ("vx_mean", *VLAT),
    ("vy_mean", *VLON),
    ("heading_change", 0.0, 2 * math.pi),
    ("lateral_shift", -8.0, 8.0),
    ("disp_y", -150.0, 150.0),
)

VEHICLE_SERIES = (
    ("speed_series", *SPEED),
    ("accel_series", *ACCEL),
    ("vx_series", *VLAT),
    ("vy_series", *VLON),
)


def default_scene_schema(capacity: int = 26) -> FeatureSchema:
    entries = [FeatureEntry(n, f"scene.{n}", lo, hi) for n, lo, hi in SCENE_FIELDS]
    entries.append(FeatureEntry("speed_profile", "scene.speed_profile", *SPEED, size=HISTORY_STEPS))
    for n, lo, hi in VEHICLE_SLOT_FIELDS:
        entries.append(FeatureEntry(f"veh_{n}", f"slot.{n}", lo, hi, size=capacity))
    used = sum(e.size for e in entries)
    if used < FEATURE_WIDTH:
        entries.append(FeatureEntry("reserved", "const.zero", -1.0, 1.0, size=FEATURE_WIDTH - used))
    return FeatureSchema("scene-v1", "scene", tuple(entries), capacity,
                         notes="flow features (density, headways) are an interpretation of 'traffic-flow aspects'")


def default_vehicle_schema() -> FeatureSchema:
    entries = [FeatureEntry(n, f"vehicle.{n}", lo, hi) for n, lo, hi in VEHICLE_FIELDS]
    for n, lo, hi in VEHICLE_SERIES:
        entries.append(FeatureEntry(n, f"vehicle.{n}", lo, hi, size=HISTORY_STEPS))
    used = sum(e.size for e in entries)
    entries.append(FeatureEntry("reserved", "const.zero", -1.0, 1.0, size=FEATURE_WIDTH - used))
    return FeatureSchema("vehicle-v1", "vehicle", tuple(entries))


# --------------------------------------------------------------------------- kinematics

def _sample_period(t):
    t = np.asarray(t, dtype=float)
    return (t[-1] - t[0]) / (len(t) - 1)


def velocity(t, xy):
    """Central differences, second-order one-sided at the endpoints."""
    return np.gradient(np.asarray(xy, dtype=float), _sample_period(t), axis=0, edge_order=2)


def second_difference(t, xy):
    xy = np.asarray(xy, dtype=float)
    dt = _sample_period(t)
    a = np.empty_like(xy)
    a[1:-1] = (xy[2:] - 2 * xy[1:-1] + xy[:-2]) / dt ** 2
    a[0], a[-1] = a[1], a[-2]
    return a


def tangential(v, a):
    speed = np.linalg.norm(v, axis=1)
    out = np.zeros(len(v))
    moving = speed > 1e-12
    out[moving] = np.einsum("ij,ij->i", v[moving], a[moving]) / speed[moving]
    return out


def heading_change(v):
    speed = np.linalg.norm(v, axis=1)
    moving = speed > MIN_MOVING_SPEED
    if moving.sum() < 2:
        return 0.0
    theta = np.arctan2(v[moving, 0], v[moving, 1])
    d = np.diff(theta)
    d = (d + np.pi) % (2 * np.pi) - np.pi
    return float(np.abs(d).sum())


def vehicle_raw_features(t, xy) -> dict:
    """Unnormalized per-vehicle features of one history window."""
    t = np.asarray(t, dtype=float)
    xy = np.asarray(xy, dtype=float)
    if len(t) < 3:
        raise ValueError("need at least 3 samples")
    v = velocity(t, xy)
    acc = tangential(v, second_difference(t, xy))
    speed = np.linalg.norm(v, axis=1)
    return {
        "speed_series": speed,
        "accel_series": acc,
        "vx_series": v[:, 0].copy(),
        "vy_series": v[:, 1].copy(),
        "speed_mean": float(speed.mean()),
        "speed_last": float(speed[-1]),
        "speed_std": float(speed.std()),
        "speed_min": float(speed.min()),
        "speed_max": float(speed.max()),
        "accel_mean": float(acc.mean()),
        "accel_last": float(acc[-1]),
        "accel_std": float(acc.std()),
        "accel_min": float(acc.min()),
        "vx_mean": float(v[:, 0].mean()),
        "vy_mean": float(v[:, 1].mean()),
        "heading_change": heading_change(v),
        "lateral_shift": float(xy[-1, 0] - xy[0, 0]),
        "disp_y": float(xy[-1, 1] - xy[0, 1]),
    }


def _headways(last_xy):
    n = len(last_xy)
    out = np.full(n, NO_LEADER_HEADWAY)
    for i in range(n):
        dx = np.abs(last_xy[:, 0] - last_xy[i, 0])
        dy = last_xy[:, 1] - last_xy[i, 1]
        ahead = (dx < LANE_HALF_WIDTH) & (dy > 0)
        if ahead.any():
            out[i] = min(float(dy[ahead].min()), NO_LEADER_HEADWAY)
    return out


def scene_raw_features(scene: Scene) -> tuple[dict, list[dict]]:
    """Scene aggregates and the per-vehicle slot features (ordered by vehicle id)."""
    per = [vehicle_raw_features(c.hist_t, c.hist_xy) for c in scene.clips]
    last = np.array([c.hist_xy[-1] for c in scene.clips])
    centroid = last.mean(axis=0)
    hw = _headways(last)
    for d, p, h in zip(per, last, hw):
        d["present"] = 1.0
        d["rel_x"] = float(p[0] - centroid[0])
        d["rel_y"] = float(p[1] - centroid[1])
        d["headway"] = float(h)
    sm = np.array([d["speed_mean"] for d in per])
    am = np.array([d["accel_mean"] for d in per])
    n = len(per)
    extent = float(last[:, 1].max() - last[:, 1].min())
    agg = {
        "n_vehicles": float(n),
        "speed_mean": float(sm.mean()),
        "speed_std": float(sm.std()),
        "speed_min": float(sm.min()),
        "speed_max": float(sm.max()),
        "accel_mean": float(am.mean()),
        "accel_std": float(am.std()),
        "accel_min": float(am.min()),
        "accel_max": float(am.max()),
        "decel_fraction": float(np.mean(am < DECEL_THRESHOLD)),
        "density": 1000.0 * n / (extent + 50.0),
        "headway_mean": float(hw.mean()),
        "headway_min": float(hw.min()),
        "lane_change_rate": float(np.mean([abs(d["lateral_shift"]) > LATERAL_SHIFT_THRESHOLD for d in per])),
        "lateral_speed_mean": float(np.mean([np.abs(d["vx_series"]).mean() for d in per])),
        "speed_trend": float(np.mean([d["speed_series"][-10:].mean() - d["speed_series"][:10].mean()
                                      for d in per])),
        "speed_profile": np.mean([d["speed_series"] for d in per], axis=0),
    }
    return agg, per


# --------------------------------------------------------------------------- vectorization

def _encode(schema: FeatureSchema, lookup) -> FeatureVector:
    out = np.zeros(schema.width)
    clamped = 0
    for e in schema.entries:
        raw = np.atleast_1d(np.asarray(lookup(e), dtype=float))
        if raw.shape != (e.size,):
            raise SchemaError(f"feature {e.name}: extractor produced {raw.shape}, schema says ({e.size},)")
        z = np.zeros(e.size)
        live = ~np.isnan(raw)
        z[live] = normalize(raw[live], e.min, e.max)
        over = live & ((z < -1.0) | (z > 1.0))
        if over.any():
            clamped += int(over.sum())
            z = np.clip(z, -1.0, 1.0)
        out[schema.slice(e.name)] = z
    if clamped:
        clamp_counter.add(clamped)
        log.warning("clamped %d feature values outside schema range (%s)", clamped, schema.version)
    return FeatureVector(out, schema, clamped)


def _check_width(schema, width):
    if schema.width != width:
        raise ConfigError(f"schema {schema.version} has width {schema.width}, codec expects {width}")


def extract_scene_features(scene: Scene, schema: FeatureSchema | None = None,
                           width: int = FEATURE_WIDTH) -> FeatureVector:
    schema = schema or default_scene_schema()
    _check_width(schema, width)
    if len(scene) == 0:
        raise ValueError("empty scene")
    agg, per = scene_raw_features(scene)

    def lookup(e):
        src, _, name = e.extractor.partition(".")
        if src == "scene":
            return agg[name]
        if src == "slot":
            vals = np.full(e.size, np.nan)
            k = min(len(per), e.size)
            vals[:k] = [per[i][name] for i in range(k)]
            return vals
        if src == "const":
            return np.full(e.size, np.nan)
        raise SchemaError(f"extractor {e.extractor!r} not valid for scene schemas")

    return _encode(schema, lookup)


def extract_vehicle_features(clip: Clip, schema: FeatureSchema | None = None,
                             width: int = FEATURE_WIDTH) -> FeatureVector:
    schema = schema or default_vehicle_schema()
    _check_width(schema, width)
    raw = vehicle_raw_features(clip.hist_t, clip.hist_xy)

    def lookup(e):
        src, _, name = e.extractor.partition(".")
        if src == "vehicle":
            return raw[name]
        if src == "const":
            return np.full(e.size, np.nan)
        raise SchemaError(f"extractor {e.extractor!r} not valid for vehicle schemas")

    return _encode(schema, lookup)


def feature_vector(values, schema: FeatureSchema) -> FeatureVector:
    """Wrap an already-normalized vector (e.g. decoder output)."""
    values = np.clip(np.asarray(values, dtype=float), -1.0, 1.0)
    if values.shape != (schema.width,):
        raise SchemaError(f"expected {schema.width} values, got {values.shape}")
    return FeatureVector(values, schema)


# --------------------------------------------------------------------------- naive oracle

def feature_oracle(trajectory: Trajectory) -> dict:
    """Per-vehicle features by direct definition, with plain loops."""
    t = [float(v) for v in trajectory.t]
    pts = [(float(a), float(b)) for a, b in trajectory.xy]
    n = len(pts)
    dt = (t[-1] - t[0]) / (n - 1)
    vel = []
    for i in range(n):
        if i == 0:
            g = [(-3 * pts[0][k] + 4 * pts[1][k] - pts[2][k]) / (2 * dt) for k in (0, 1)]
        elif i == n - 1:
            g = [(3 * pts[-1][k] - 4 * pts[-2][k] + pts[-3][k]) / (2 * dt) for k in (0, 1)]
        else:
            g = [(pts[i + 1][k] - pts[i - 1][k]) / (2 * dt) for k in (0, 1)]
        vel.append(g)
    acc2 = []
    for i in range(n):
        j = min(max(i, 1), n - 2)
        acc2.append([(pts[j + 1][k] - 2 * pts[j][k] + pts[j - 1][k]) / dt ** 2 for k in (0, 1)])
    speed = [math.sqrt(v[0] ** 2 + v[1] ** 2) for v in vel]
    acc = []
    for v, a, s in zip(vel, acc2, speed):
        acc.append((v[0] * a[0] + v[1] * a[1]) / s if s > 1e-12 else 0.0)

    def mean(xs):
        return sum(xs) / len(xs)

    def std(xs):
        m = mean(xs)
        return math.sqrt(sum((x - m) ** 2 for x in xs) / len(xs))

    heading = 0.0
    prev = None
    for v, s in zip(vel, speed):
        if s > MIN_MOVING_SPEED:
            th = math.atan2(v[0], v[1])
            if prev is not None:
                d = th - prev
                while d > math.pi:
                    d -= 2 * math.pi
                while d < -math.pi:
                    d += 2 * math.pi
                heading += abs(d)
            prev = th
    return {
        "speed_series": speed,
        "accel_series": acc,
        "vx_series": [v[0] for v in vel],
        "vy_series": [v[1] for v in vel],
        "speed_mean": mean(speed),
        "speed_last": speed[-1],
        "speed_std": std(speed),
        "speed_min": min(speed),
        "speed_max": max(speed),
        "accel_mean": mean(acc),
        "accel_last": acc[-1],
        "accel_std": std(acc),
        "accel_min": min(acc),
        "vx_mean": mean([v[0] for v in vel]),
        "vy_mean": mean([v[1] for v in vel]),
        "heading_change": heading,
        "lateral_shift": pts[-1][0] - pts[0][0],
        "disp_y": pts[-1][1] - pts[0][1],
    }
