"""Semantic-analysis agent: feature vector -> structured traffic report.

Two backends share one output type. ``RulesBackend`` applies fixed thresholds
and is the reference; ``LlmBackend`` asks an HTTP completion endpoint for the
same fields and falls back to the rules whenever the answer is unusable.
"""

from __future__ import annotations

import json
import logging
import math
import os
import threading
import urllib.error
import urllib.request
from dataclasses import dataclass, field
from importlib import resources

import numpy as np

from .errors import ShapeError
from .features import FeatureVector

log = logging.getLogger(__name__)

REPORT_WIDTH = 384
REPORT_VERSION = "report-v1"
ANOMALIES = ("incident", "closure", "sudden_congestion")
PROFILE_LEN = 10
N_INTERSECTION = 4

# slot layout of the serialized report
FLAG_SLOTS = slice(0, 3)
CONGESTION_SLOT = 3
PROFILE_SLOTS = slice(4, 4 + PROFILE_LEN)
LANE_CHANGE_SLOT = 14
LATERAL_SLOT = 15
SLOPE_SLOT = 16
INTERSECTION_SLOTS = slice(17, 17 + N_INTERSECTION)
USED_SLOTS = 17 + N_INTERSECTION

PROFILE_RANGE = (0.0, 40.0)
LATERAL_RANGE = (0.0, 5.0)
SLOPE_RANGE = (-10.0, 10.0)


@dataclass
class SemanticReport:
    anomaly_flags: dict = field(default_factory=lambda: {k: False for k in ANOMALIES})
    congestion_level: float = 0.0
    temporal_profile: np.ndarray = field(default_factory=lambda: np.zeros(PROFILE_LEN))
    lane_change_rate: float = 0.0
    lateral_activity: float = 0.0
    speed_space_slope: float = 0.0
    intersection: np.ndarray = field(default_factory=lambda: np.zeros(N_INTERSECTION))
    free_text: str | None = None
    source: str = "rules"
    fallback: bool = False

    def __post_init__(self):
        self.anomaly_flags = {k: bool(self.anomaly_flags.get(k, False)) for k in ANOMALIES}
        self.congestion_level = float(min(max(self.congestion_level, 0.0), 1.0))
        self.temporal_profile = np.asarray(self.temporal_profile, dtype=float).reshape(PROFILE_LEN)
        self.intersection = np.asarray(self.intersection, dtype=float).reshape(N_INTERSECTION)

    @property
    def any_anomaly(self) -> bool:
        return any(self.anomaly_flags.values())

    @property
    def spatial_patterns(self) -> dict:
        return {"lane_change_rate": self.lane_change_rate, "lateral_activity": self.lateral_activity,
                "speed_space_slope": self.speed_space_slope, "intersection": self.intersection.tolist()}

    def to_dict(self):
        return {
            "anomaly_flags": dict(self.anomaly_flags),
            "congestion_level": self.congestion_level,
            "temporal_profile": self.temporal_profile.tolist(),
            "lane_change_rate": self.lane_change_rate,
            "lateral_activity": self.lateral_activity,
            "speed_space_slope": self.speed_space_slope,
            "intersection": self.intersection.tolist(),
            "free_text": self.free_text,
            "source": self.source,
            "fallback": self.fallback,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def _to_unit(v, lo, hi):
    return min(max(2.0 * (v - lo) / (hi - lo) - 1.0, -1.0), 1.0)


def _from_unit(z, lo, hi):
    z = np.clip(z, -1.0, 1.0)
    return lo + (z + 1.0) * 0.5 * (hi - lo)


def serialize_report(report: SemanticReport) -> np.ndarray:
    """Fixed 384-slot layout in [-1, 1]; slots past the layout are zero."""
    out = np.zeros(REPORT_WIDTH)
    out[FLAG_SLOTS] = [1.0 if report.anomaly_flags[k] else -1.0 for k in ANOMALIES]
    out[CONGESTION_SLOT] = 2.0 * report.congestion_level - 1.0
    out[PROFILE_SLOTS] = [_to_unit(v, *PROFILE_RANGE) for v in report.temporal_profile]
    out[LANE_CHANGE_SLOT] = _to_unit(report.lane_change_rate, 0.0, 1.0)
    out[LATERAL_SLOT] = _to_unit(report.lateral_activity, *LATERAL_RANGE)
    out[SLOPE_SLOT] = _to_unit(report.speed_space_slope, *SLOPE_RANGE)
    out[INTERSECTION_SLOTS] = [_to_unit(v, 0.0, 1.0) for v in report.intersection]
    return out


def deserialize_report(vector) -> SemanticReport:
    v = np.asarray(vector, dtype=float)
    if v.shape != (REPORT_WIDTH,):
        raise ShapeError(f"report vector must have length {REPORT_WIDTH}, got {v.shape}")
    v = np.clip(v, -1.0, 1.0)
    return SemanticReport(
        anomaly_flags={k: bool(x > 0.0) for k, x in zip(ANOMALIES, v[FLAG_SLOTS])},
        congestion_level=float((v[CONGESTION_SLOT] + 1.0) / 2.0),
        temporal_profile=_from_unit(v[PROFILE_SLOTS], *PROFILE_RANGE),
        lane_change_rate=float(_from_unit(v[LANE_CHANGE_SLOT], 0.0, 1.0)),
        lateral_activity=float(_from_unit(v[LATERAL_SLOT], *LATERAL_RANGE)),
        speed_space_slope=float(_from_unit(v[SLOPE_SLOT], *SLOPE_RANGE)),
        intersection=_from_unit(v[INTERSECTION_SLOTS], 0.0, 1.0),
        source="decoded",
    )


# --------------------------------------------------------------------------- rules backend

@dataclass
class RulesConfig:
    free_flow_speed: float = 30.0
    hard_decel: float = 2.0
    z_threshold: float = 2.5
    speed_std_ref: float = 2.0
    closure_speed: float = 0.5
    closure_moving_speed: float = 10.0
    lateral_shift_threshold: float = 1.0


class RulesBackend:
    """Deterministic thresholded mapping from features to a report.

    congestion = clip(1 - mean_speed / free_flow_speed, 0, 1)
    sudden_congestion when the hardest-braking vehicle exceeds ``hard_decel``
    incident when the speed spread exceeds ``z_threshold * speed_std_ref``
    closure when a vehicle is stopped while others still move
    """

    kind = "rules"

    def __init__(self, config: RulesConfig | None = None):
        self.config = config or RulesConfig()

    def analyze(self, fv: FeatureVector) -> SemanticReport:
        cfg = self.config
        scene = fv.schema.kind == "scene"
        speed_mean = fv.value("speed_mean")
        speed_std = fv.value("speed_std")
        accel_min = fv.value("accel_min")
        speed_min = fv.value("speed_min") if scene else fv.value("speed_last")
        speed_max = fv.value("speed_max")
        if scene:
            profile = fv.value("speed_profile")
            lane_change = fv.value("lane_change_rate")
            lateral = fv.value("lateral_speed_mean")
            slope = _speed_space_slope(fv)
        else:
            profile = fv.value("speed_series")
            lane_change = float(abs(fv.value("lateral_shift")) > cfg.lateral_shift_threshold)
            lateral = float(np.abs(fv.value("vx_series")).mean())
            slope = 0.0
        congestion = 1.0 - speed_mean / cfg.free_flow_speed
        flags = {
            "incident": speed_std > cfg.z_threshold * cfg.speed_std_ref,
            "closure": speed_min < cfg.closure_speed and speed_max > cfg.closure_moving_speed,
            "sudden_congestion": accel_min < -cfg.hard_decel,
        }
        return SemanticReport(
            anomaly_flags=flags,
            congestion_level=min(max(congestion, 0.0), 1.0),
            temporal_profile=np.asarray(profile).reshape(PROFILE_LEN, -1).mean(axis=1),
            lane_change_rate=min(max(lane_change, 0.0), 1.0),
            lateral_activity=min(max(lateral, LATERAL_RANGE[0]), LATERAL_RANGE[1]),
            speed_space_slope=min(max(slope, SLOPE_RANGE[0]), SLOPE_RANGE[1]),
            source="rules",
        )


def _speed_space_slope(fv: FeatureVector) -> float:
    """Least-squares slope of vehicle mean speed along the road, m/s per 100 m."""
    present = fv.value("veh_present") > 0.5
    if present.sum() < 2:
        return 0.0
    y = fv.value("veh_rel_y")[present]
    s = fv.value("veh_speed_mean")[present]
    yc = y - y.mean()
    den = float((yc ** 2).sum())
    if den < 1e-9:
        return 0.0
    return 100.0 * float((yc * (s - s.mean())).sum()) / den


# --------------------------------------------------------------------------- LLM backend

class LlmError(RuntimeError):
    pass


class LlmClient:
    """Blocking JSON-over-HTTP completion client.

    Request body ``{"model", "prompt", "temperature": 0}``; the response is a
    JSON object with a single text field (``text``). ``transport`` replaces the
    HTTP call entirely (prompt -> text), mainly for tests.
    """

    def __init__(self, url: str | None = None, key: str | None = None, model: str = "default",
                 timeout: float = 30.0, transport=None):
        self.url = url
        self.key = key
        self.model = model
        self.timeout = timeout
        self.transport = transport
        self._lock = threading.Lock()
        self.requests = 0

    @classmethod
    def from_env(cls, **kw):
        return cls(os.environ.get("SEMX_LLM_URL"), os.environ.get("SEMX_LLM_KEY"), **kw)

    def _count(self):
        with self._lock:
            self.requests += 1

    def complete(self, prompt: str) -> str:
        self._count()
        if self.transport is not None:
            try:
                return str(self.transport(prompt))
            except Exception as exc:
                raise LlmError(f"transport failed: {exc}") from exc
        if not self.url:
            raise LlmError("no LLM endpoint configured (SEMX_LLM_URL)")
        body = json.dumps({"model": self.model, "prompt": prompt, "temperature": 0}).encode()
        headers = {"Content-Type": "application/json"}
        if self.key:
            headers["Authorization"] = f"Bearer {self.key}"
        req = urllib.request.Request(self.url, data=body, headers=headers, method="POST")
        try:
            with urllib.request.urlopen(req, timeout=self.timeout) as resp:
                payload = json.loads(resp.read().decode())
        except (urllib.error.URLError, OSError, ValueError) as exc:
            raise LlmError(f"request to {self.url} failed: {exc}") from exc
        if not isinstance(payload, dict) or not isinstance(payload.get("text"), str):
            raise LlmError("response lacks a 'text' field")
        return payload["text"]


def load_template(name: str) -> str:
    return resources.files("semx.prompts").joinpath(name).read_text()


def _feature_lines(fv: FeatureVector) -> str:
    lines = []
    for e in fv.schema.entries:
        if e.extractor.startswith("const."):
            continue
        v = fv.value(e.name)
        if np.ndim(v) == 0:
            lines.append(f"{e.name} = {v:.4f}")
        else:
            lines.append(f"{e.name} = [{', '.join(f'{x:.3f}' for x in np.asarray(v))}]")
    return "\n".join(lines)


def semantic_prompt(fv: FeatureVector, template: str | None = None) -> str:
    template = template or load_template("semantic_v1.txt")
    return template.format(schema=fv.schema.version, features=_feature_lines(fv))


def parse_llm_report(text: str) -> SemanticReport:
    """Validate the constrained JSON answer; raises ValueError when it does not conform."""
    start, end = text.find("{"), text.rfind("}")
    if start < 0 or end <= start:
        raise ValueError("no JSON object in response")
    d = json.loads(text[start:end + 1])
    flags = d["anomaly_flags"]
    if set(flags) != set(ANOMALIES) or not all(isinstance(v, bool) for v in flags.values()):
        raise ValueError("anomaly_flags must hold exactly the three boolean categories")
    congestion = float(d["congestion_level"])
    profile = [float(x) for x in d["temporal_profile"]]
    if len(profile) != PROFILE_LEN:
        raise ValueError(f"temporal_profile must have {PROFILE_LEN} values")
    nums = [congestion, *profile, float(d["lane_change_rate"]), float(d["lateral_activity"]),
            float(d["speed_space_slope"])]
    if not all(math.isfinite(x) for x in nums):
        raise ValueError("non-finite numeric field")
    if not 0.0 <= congestion <= 1.0:
        raise ValueError("congestion_level outside [0, 1]")
    return SemanticReport(
        anomaly_flags=flags,
        congestion_level=congestion,
        temporal_profile=np.clip(profile, *PROFILE_RANGE),
        lane_change_rate=min(max(float(d["lane_change_rate"]), 0.0), 1.0),
        lateral_activity=min(max(float(d["lateral_activity"]), 0.0), LATERAL_RANGE[1]),
        speed_space_slope=min(max(float(d["speed_space_slope"]), SLOPE_RANGE[0]), SLOPE_RANGE[1]),
        free_text=d.get("summary"),
        source="llm",
    )


class LlmBackend:
    kind = "llm"

    def __init__(self, client: LlmClient, fallback: RulesBackend | None = None, template: str | None = None):
        self.client = client
        self.fallback = fallback or RulesBackend()
        self.template = template or load_template("semantic_v1.txt")
        self._lock = threading.Lock()
        self.fallbacks = 0

    def analyze(self, fv: FeatureVector) -> SemanticReport:
        try:
            return parse_llm_report(self.client.complete(semantic_prompt(fv, self.template)))
        except (LlmError, ValueError, KeyError, TypeError) as exc:
            log.warning("semantic LLM answer rejected, using rules: %s", exc)
            with self._lock:
                self.fallbacks += 1
            report = self.fallback.analyze(fv)
            report.fallback = True
            return report


def analyze(features: FeatureVector, backend=None) -> SemanticReport:
    return (backend or RulesBackend()).analyze(features)


def make_backend(kind: str = "rules", rules: RulesConfig | None = None, client: LlmClient | None = None):
    if kind == "rules":
        return RulesBackend(rules)
    if kind == "llm":
        return LlmBackend(client or LlmClient.from_env(), RulesBackend(rules))
    raise ValueError(f"unknown semantic backend {kind!r}")
