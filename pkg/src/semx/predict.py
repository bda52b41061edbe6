"""Trajectory-prediction agent.

Three predictor kinds share one output type, :class:`CandidateSet`:

``cv``        constant-velocity extrapolation (baseline and V2V bootstrap)
``maneuver``  deterministic maneuver hypotheses, fused with decoded features,
              semantic reports and neighbor predictions
``llm``       HTTP completion endpoint; malformed candidates are replaced by
              the maneuver predictor's candidate of the same rank

Road frame: ``x`` is lateral and ``y`` longitudinal. Travel direction is the
sign of the longitudinal velocity.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import threading
from dataclasses import asdict, dataclass, field

import numpy as np

from .data import DT, HORIZON_STEPS, Clip, Trajectory, TrackPoint, _accel_progress, quintic_blend
from .errors import ConfigError, ShapeError
from .features import FeatureVector
from .semantics import ANOMALIES, LlmClient, LlmError, SemanticReport, _feature_lines, load_template

log = logging.getLogger(__name__)

PREDICTOR_KINDS = ("cv", "maneuver", "llm")

# id -> (name, prior weight)
HYPOTHESES = (
    ("cv", 0.30),
    ("ca", 0.12),
    ("brake", 0.04),
    ("lc_left", 0.06),
    ("lc_right", 0.06),
    ("accel", 0.06),
    ("decel", 0.08),
    ("follow_flow", 0.12),
    ("lc_left_slow", 0.08),
    ("lc_right_slow", 0.08),
)
HYPOTHESIS_IDS = {name: i for i, (name, _) in enumerate(HYPOTHESES)}
DUPLICATE_ID = -1


@dataclass
class PredictorConfig:
    kind: str = "maneuver"
    K: int = 1
    maneuvers: tuple = tuple(name for name, _ in HYPOTHESES)
    residual: bool = False
    safety_gap: float = 2.0
    congestion_speed_scale: float = 0.7
    congestion_deadzone: float = 0.2
    velocity_window: int = 5
    lane_width: float = 3.7
    road_left_edge: float | None = 0.0  # lateral coordinate of the left road edge; None if unknown
    offroad_factor: float = 0.1
    lane_change_s: float = 4.0
    slow_lane_change_s: float = 6.0
    brake_decel: float = 3.0
    mild_accel: float = 1.0
    mild_decel: float = 1.5
    accel_clip: tuple = (-6.0, 3.0)
    relax_tau: float = 2.0
    lateral_trigger: float = 0.2
    accel_trigger: float = 0.3
    anomaly_brake_weight: float = 0.3
    jitter_std: float = 0.3
    seed: int = 0

    def validate(self):
        if self.kind not in PREDICTOR_KINDS:
            raise ConfigError(f"predictor kind must be one of {PREDICTOR_KINDS}")
        if int(self.K) < 1:
            raise ConfigError("K must be >= 1")
        unknown = set(self.maneuvers) - set(HYPOTHESIS_IDS)
        if unknown or not self.maneuvers:
            raise ConfigError(f"unknown or empty maneuver set: {sorted(unknown)}")
        if self.velocity_window < 3:
            raise ConfigError("velocity_window must be >= 3")
        if not 0.0 <= self.congestion_deadzone < 1.0:
            raise ConfigError("congestion_deadzone must lie in [0, 1)")
        if not 0.0 <= self.offroad_factor <= 1.0:
            raise ConfigError("offroad_factor must lie in [0, 1]")
        return self

    def to_dict(self):
        d = asdict(self)
        d["maneuvers"] = list(self.maneuvers)
        d["accel_clip"] = list(self.accel_clip)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        for key in ("maneuvers", "accel_clip"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)

    def hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


@dataclass
class CandidateSet:
    """K candidate futures on one time grid. ``candidates`` is (K, S, 2)."""

    t: np.ndarray
    candidates: np.ndarray
    weights: np.ndarray
    hypothesis_ids: list = field(default_factory=list)
    provenance: dict = field(default_factory=dict)
    substitutions: int = 0

    def __post_init__(self):
        c = np.asarray(self.candidates, dtype=float)
        if c.ndim != 3 or c.shape[2] != 2 or c.shape[1] != len(self.t):
            raise ShapeError(f"candidates must be (K, {len(self.t)}, 2), got {c.shape}")
        self.candidates = c
        self.weights = np.asarray(self.weights, dtype=float)

    @property
    def K(self) -> int:
        return len(self.candidates)

    def top(self) -> np.ndarray:
        return self.candidates[0]

    def to_dict(self):
        return {"t": self.t.tolist(), "K": self.K, "candidates": self.candidates.tolist(),
                "weights": self.weights.tolist(), "hypothesis_ids": list(map(int, self.hypothesis_ids)),
                "provenance": self.provenance, "substitutions": self.substitutions}

    @classmethod
    def from_dict(cls, d):
        return cls(np.asarray(d["t"], dtype=float), np.asarray(d["candidates"], dtype=float),
                   np.asarray(d["weights"], dtype=float), list(d.get("hypothesis_ids", [])),
                   dict(d.get("provenance", {})), int(d.get("substitutions", 0)))


# --------------------------------------------------------------------------- history handling

def _unpack(history, horizon=HORIZON_STEPS, dt=DT):
    """-> (vehicle_id, hist_t, hist_xy, future grid)."""
    if isinstance(history, Clip):
        vid, t, xy = history.vehicle_id, history.hist_t, history.hist_xy
        fut = history.fut_t[:horizon] if horizon <= len(history.fut_t) else None
    elif isinstance(history, Trajectory):
        vid, t, xy, fut = history.vehicle_id, history.t, history.xy, None
    elif isinstance(history, tuple) and len(history) == 2:
        vid, fut = 0, None
        t, xy = np.asarray(history[0], dtype=float), np.asarray(history[1], dtype=float)
    else:
        pts = list(history)
        if not pts or not isinstance(pts[0], TrackPoint):
            raise ShapeError("history must be a Clip, a Trajectory, (t, xy) or a list of TrackPoint")
        vid, fut = pts[0].vehicle_id, None
        t = np.array([p.t for p in pts])
        xy = np.array([(p.x, p.y) for p in pts])
    t = np.asarray(t, dtype=float)
    xy = np.asarray(xy, dtype=float).reshape(-1, 2)
    if len(t) < 2 or len(t) != len(xy):
        raise ShapeError("history needs at least 2 matching samples")
    if fut is None:
        # frame-locked grid, same construction as the data module
        frame = int(round(t[-1] / dt))
        fut = (frame + np.arange(1, horizon + 1)) * dt
    return vid, t, xy, np.asarray(fut, dtype=float)


def _fit(t, xy, window):
    """Least-squares quadratic over the last ``window`` samples, evaluated at the last one.

    Returns (fitted position, velocity, acceleration). The quadratic's slope is
    exact for constant-acceleration motion, which a straight-line fit is not.
    """
    n = min(window, len(t))
    tau = t[-n:] - t[-1]
    if n >= 3:
        A = np.column_stack([np.ones(n), tau, tau * tau])
        coef, *_ = np.linalg.lstsq(A, xy[-n:], rcond=None)
        return coef[0], coef[1], 2.0 * coef[2]
    v = (xy[-1] - xy[-2]) / (t[-1] - t[-2])
    return xy[-1].copy(), v, np.zeros(2)


def predict_cv(history, horizon: int = HORIZON_STEPS, window: int = 5, dt: float = DT) -> Trajectory:
    """Constant-velocity extrapolation from the last observed position."""
    vid, t, xy, fut = _unpack(history, horizon, dt)
    _, v, _ = _fit(t, xy, window)
    tau = fut - t[-1]
    return Trajectory(vid, fut, xy[-1] + tau[:, None] * v)


# --------------------------------------------------------------------------- maneuver hypotheses

def _ints(f, tau, fine=20):
    """Cumulative integral of ``f`` from 0 to each ``tau`` (trapezoid, ``fine`` substeps per step)."""
    grid = np.linspace(0.0, tau[-1], fine * len(tau) + 1)
    vals = f(grid)
    cum = np.concatenate([[0.0], np.cumsum(0.5 * (vals[1:] + vals[:-1]) * np.diff(grid))])
    return np.interp(tau, grid, cum)


class _Context:
    """Everything the hypotheses need about one ego vehicle."""

    def __init__(self, t, xy, cfg: PredictorConfig):
        self.cfg = cfg
        p_fit, v, a = _fit(t, xy, cfg.velocity_window)
        self.anchor = p_fit if cfg.residual else xy[-1].copy()
        self.v = v
        self.direction = -1.0 if v[1] < 0 else 1.0
        self.v_lon = abs(v[1])
        self.v_lat = v[0]
        self.a_lon = float(np.clip(self.direction * a[1], *cfg.accel_clip))
        steps = np.diff(xy, axis=0) / np.diff(t)[:, None]
        self.hist_speed = float(np.mean(np.abs(steps[:, 1])))
        self.flow_target = self.hist_speed
        self.congestion = 0.0

    def speed_fn(self, name):
        v0, cfg = self.v_lon, self.cfg
        if name == "ca":
            return _const_accel_speed(v0, self.a_lon)
        if name == "brake":
            return _const_accel_speed(v0, -cfg.brake_decel)
        if name == "accel":
            return _const_accel_speed(v0, cfg.mild_accel)
        if name == "decel":
            return _const_accel_speed(v0, -cfg.mild_decel)
        if name == "follow_flow":
            tgt, tau_r = self.flow_target, cfg.relax_tau
            return lambda s: tgt + (v0 - tgt) * np.exp(-s / tau_r)
        return lambda s: np.full_like(s, v0)

    def distance(self, name, tau):
        """Longitudinal progress along the travel direction."""
        v0, cfg = self.v_lon, self.cfg
        if name == "ca":
            base = _accel_progress(tau, v0, self.a_lon)
        elif name == "brake":
            base = _accel_progress(tau, v0, -cfg.brake_decel)
        elif name == "accel":
            base = _accel_progress(tau, v0, cfg.mild_accel)
        elif name == "decel":
            base = _accel_progress(tau, v0, -cfg.mild_decel)
        elif name == "follow_flow":
            tgt, tau_r = self.flow_target, cfg.relax_tau
            base = tgt * tau + (v0 - tgt) * tau_r * (1.0 - np.exp(-tau / tau_r))
        else:
            base = v0 * tau
        c = self.congestion
        if c <= 0.0:
            return base
        lo, hi = self.speed_band(name)
        f = self.speed_fn(name)
        banded = _ints(lambda s: np.clip(f(s), lo, hi), tau)
        return (1.0 - c) * base + c * banded

    def speed_band(self, name):
        """Along-road speed interval that congestion evidence pushes a hypothesis into.

        Slowing hypotheses (all but ``brake``) bottom out at the congested target
        ``hist_mean * (1 - 0.7 c)``; nothing exceeds the history mean.
        """
        c, k = self.congestion, self.cfg.congestion_speed_scale
        target = self.hist_speed * (1.0 - k * c)
        lo = 0.0 if name == "brake" else min(target, self.v_lon)
        return lo, max(self.hist_speed, lo)

    def lane_target(self, side):
        w = self.cfg.lane_width
        x = self.anchor[0]
        centers = (np.arange(-1, int(math.ceil(abs(x) / w)) + 3) + 0.5) * w * (1 if x >= 0 else -1)
        if side > 0:
            ahead = centers[centers > x + 0.25 * w]
            return float(ahead.min()) if len(ahead) else x + w
        behind = centers[centers < x - 0.25 * w]
        return float(behind.max()) if len(behind) else x - w

    def rollout(self, name, tau):
        cfg = self.cfg
        lon = self.distance(name, tau)
        if name.startswith("lc_"):
            side = -1 if "left" in name else 1
            dur = cfg.slow_lane_change_s if name.endswith("_slow") else cfg.lane_change_s
            target = self.lane_target(side)
            lat = self.anchor[0] + (target - self.anchor[0]) * quintic_blend(tau / dur)
        else:
            lat = self.anchor[0] + self.v_lat * tau
        if name == "cv" and self.congestion <= 0.0:
            return self.anchor + tau[:, None] * self.v
        return np.column_stack([lat, self.anchor[1] + self.direction * lon])


def _const_accel_speed(v0, a):
    if a >= 0:
        return lambda s: v0 + a * s
    return lambda s: np.maximum(v0 + a * s, 0.0)


def _min_separation(path, others):
    if not others:
        return math.inf
    return min(float(np.min(np.hypot(*(path - o).T))) for o in others)


def _neighbor_paths(neighbor_preds, n_steps):
    if not neighbor_preds:
        return []
    items = neighbor_preds.items() if isinstance(neighbor_preds, dict) else enumerate(neighbor_preds)
    out = []
    for _, p in sorted(items, key=lambda kv: kv[0]):
        p = np.asarray(p, dtype=float)
        if p.ndim != 2 or p.shape[1] != 2 or len(p) < n_steps:
            raise ShapeError(f"neighbor prediction must be (>= {n_steps}, 2), got {p.shape}")
        out.append(p[:n_steps])
    return out


def _flow_speed(features: FeatureVector):
    """Current traffic speed: last sample of the scene speed profile, else the mean speed."""
    if features.has("speed_profile"):
        return max(float(features.value("speed_profile")[-1]), 0.0)
    if features.has("speed_mean"):
        return max(float(features.value("speed_mean")), 0.0)
    return None


def effective_congestion(level, deadzone):
    """Reported congestion rescaled so levels up to ``deadzone`` (ordinary free flow) count as none."""
    c = float(np.clip(level, 0.0, 1.0))
    return max(0.0, (c - deadzone) / (1.0 - deadzone))


def hypothesis_weights(ctx: _Context, names, features: FeatureVector | None, report: SemanticReport | None):
    """Unnormalized weight per hypothesis after applying history, feature and report evidence."""
    cfg = ctx.cfg
    prior = dict(HYPOTHESES)
    w = {n: prior[n] for n in names}

    def mul(n, f):
        if n in w:
            w[n] *= f

    if abs(ctx.v_lat) > cfg.lateral_trigger:
        side = "right" if ctx.v_lat > 0 else "left"
        mul(f"lc_{side}", 3.0)
        mul(f"lc_{side}_slow", 3.0)
    if abs(ctx.a_lon) > cfg.accel_trigger:
        mul("ca", 3.0)
    if cfg.road_left_edge is not None and ctx.anchor[0] - cfg.lane_width < cfg.road_left_edge:
        # a left change would leave the road
        mul("lc_left", cfg.offroad_factor)
        mul("lc_left_slow", cfg.offroad_factor)
    if features is not None:
        flow = _flow_speed(features)
        if flow is not None:
            ctx.flow_target = flow
            dv = abs(ctx.flow_target - ctx.v_lon)
            mul("follow_flow", 1.0 + 2.0 * min(dv / 5.0, 1.0))
        if features.has("lane_change_rate"):
            boost = 1.0 + 2.0 * float(np.clip(features.value("lane_change_rate"), 0.0, 1.0))
            for n in ("lc_left", "lc_right", "lc_left_slow", "lc_right_slow"):
                mul(n, boost)
        if features.has("decel_fraction"):
            mul("decel", 1.0 + 2.0 * float(np.clip(features.value("decel_fraction"), 0.0, 1.0)))
    if report is not None:
        c = effective_congestion(report.congestion_level, cfg.congestion_deadzone)
        ctx.congestion = c
        mul("decel", 1.0 + c)
        n_flags = sum(bool(report.anomaly_flags.get(k, False)) for k in ANOMALIES)
        if "brake" in w:
            w["brake"] += cfg.anomaly_brake_weight * n_flags
    return w


def predict_fused(history, decoded_features: FeatureVector | None = None,
                  decoded_report: SemanticReport | None = None, neighbor_preds=None,
                  cfg: PredictorConfig | None = None, rng: np.random.Generator | None = None,
                  horizon: int = HORIZON_STEPS) -> CandidateSet:
    """Top-K maneuver hypotheses fused with whatever optional inputs are present.

    Hypotheses whose closest approach to any neighbor prediction is under
    ``safety_gap`` meters are dropped (if all would be, the one with the largest
    clearance survives). When fewer than K survive, the best one is repeated
    with a lateral jitter drawn sequentially from ``rng`` so a smaller K always
    yields a prefix of a larger K.
    """
    cfg = (cfg or PredictorConfig()).validate()
    vid, t, xy, fut = _unpack(history, horizon)
    tau = fut - t[-1]
    prov = {"predictor": cfg.kind, "config_hash": cfg.hash()}
    K = int(cfg.K)

    if cfg.kind == "cv":
        path = predict_cv((t, xy), horizon, cfg.velocity_window).xy
        return CandidateSet(fut, np.repeat(path[None], K, axis=0), np.full(K, 1.0 / K),
                            [HYPOTHESIS_IDS["cv"]] * K, prov)

    ctx = _Context(t, xy, cfg)
    names = [n for n, _ in HYPOTHESES if n in cfg.maneuvers]
    w = hypothesis_weights(ctx, names, decoded_features, decoded_report)
    paths = {n: ctx.rollout(n, tau) for n in names}

    others = _neighbor_paths(neighbor_preds, len(tau))
    if others:
        sep = {n: _min_separation(paths[n], others) for n in names}
        keep = [n for n in names if sep[n] >= cfg.safety_gap]
        if not keep:
            keep = [max(names, key=lambda n: (sep[n], -HYPOTHESIS_IDS[n]))]
        names = keep

    ranked = sorted(names, key=lambda n: (-w[n], HYPOTHESIS_IDS[n]))
    chosen = ranked[:K]
    cands = [paths[n] for n in chosen]
    ws = [w[n] for n in chosen]
    ids = [HYPOTHESIS_IDS[n] for n in chosen]
    if K > len(chosen):
        rng = rng if rng is not None else np.random.default_rng(cfg.seed)
        base, share = paths[chosen[0]], ws[0] / (K - len(chosen) + 1)
        ws[0] = share
        for _ in range(K - len(chosen)):
            dx = rng.normal(0.0, cfg.jitter_std)
            cands.append(base + np.array([dx, 0.0]))
            ws.append(share)
            ids.append(DUPLICATE_ID)
    ws = np.asarray(ws, dtype=float)
    ws = ws / ws.sum()
    return CandidateSet(fut, np.stack(cands), ws, ids, prov)


# --------------------------------------------------------------------------- LLM predictor

_sub_lock = threading.Lock()
substitution_count = 0


def _count_substitutions(n):
    global substitution_count
    with _sub_lock:
        substitution_count += n


def _fmt_path(xy):
    return "[" + ", ".join(f"[{x:.2f}, {y:.2f}]" for x, y in xy) + "]"


def predict_prompt(history, features: FeatureVector | None = None, report: SemanticReport | None = None,
                   neighbor_preds=None, K: int = 1, template: str | None = None,
                   horizon: int = HORIZON_STEPS) -> str:
    template = template or load_template("predict_v1.txt")
    vid, t, xy, fut = _unpack(history, horizon)
    if neighbor_preds:
        items = neighbor_preds.items() if isinstance(neighbor_preds, dict) else enumerate(neighbor_preds)
        nb = "\n".join(f"vehicle {k}: {_fmt_path(np.asarray(p)[:horizon])}" for k, p in sorted(items))
    else:
        nb = "none"
    rep = "none" if report is None else json.dumps(report.to_dict(), sort_keys=True)
    return template.format(vehicle_id=vid, K=K, horizon=horizon, dt=f"{np.mean(np.diff(t)):.2f}",
                           history=_fmt_path(xy), features="none" if features is None else _feature_lines(features),
                           report=rep, neighbors=nb)


def parse_llm_candidates(text: str, horizon: int = HORIZON_STEPS) -> list:
    """Candidate list from the answer; entries that are not (horizon, 2) finite arrays become None."""
    start, end = text.find("{"), text.rfind("}")
    if start < 0 or end <= start:
        raise ValueError("no JSON object in response")
    raw = json.loads(text[start:end + 1]).get("candidates")
    if not isinstance(raw, list):
        raise ValueError("'candidates' must be a list")
    out = []
    for c in raw:
        try:
            a = np.asarray(c, dtype=float)
        except (TypeError, ValueError):
            out.append(None)
            continue
        ok = a.shape == (horizon, 2) and np.all(np.isfinite(a))
        out.append(a if ok else None)
    return out


def predict_llm(history, context: dict | None = None, cfg: PredictorConfig | None = None,
                client: LlmClient | None = None, rng=None, horizon: int = HORIZON_STEPS) -> CandidateSet:
    """Ask the endpoint for K futures; repair bad ranks from the maneuver predictor.

    ``context`` may hold ``features``, ``report`` and ``neighbors``. Endpoint
    failure returns the maneuver predictor's set unchanged.
    """
    cfg = cfg or PredictorConfig(kind="llm")
    context = context or {}
    feats, rep, nbrs = context.get("features"), context.get("report"), context.get("neighbors")
    fused_cfg = PredictorConfig.from_dict({**cfg.to_dict(), "kind": "maneuver"})
    fused = predict_fused(history, feats, rep, nbrs, fused_cfg, rng, horizon)
    client = client or LlmClient.from_env()
    K = int(cfg.K)
    try:
        text = client.complete(predict_prompt(history, feats, rep, nbrs, K, horizon=horizon))
    except LlmError as exc:
        log.warning("trajectory LLM unavailable, using maneuver predictor: %s", exc)
        _count_substitutions(K)
        fused.substitutions = K
        fused.provenance = {**fused.provenance, "predictor": "llm", "fallback": "endpoint"}
        return fused
    try:
        parsed = parse_llm_candidates(text, horizon)
    except (ValueError, AttributeError):
        parsed = []
    cands, ids, subs = [], [], 0
    for i in range(K):
        c = parsed[i] if i < len(parsed) else None
        if c is None:
            subs += 1
            cands.append(fused.candidates[i])
            ids.append(fused.hypothesis_ids[i])
        else:
            cands.append(c)
            ids.append(100 + i)
    if subs:
        log.info("replaced %d of %d LLM candidates", subs, K)
        _count_substitutions(subs)
    weights = fused.weights.copy() if subs == K else np.full(K, 1.0 / K)
    prov = {"predictor": "llm", "config_hash": cfg.hash()}
    return CandidateSet(fused.t, np.stack(cands), weights, ids, prov, subs)
