"""End-to-end V2I / V2V pipelines, SNR x K sweeps and horizon sweeps.

Every random draw comes from a named stream keyed by (run seed, mode, SNR,
scene, vehicle, purpose), so a record does not depend on processing order
or on which K is being evaluated.
"""

from __future__ import annotations

import contextlib
import csv
import hashlib
import json
import logging
import math
import os
import platform
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .channel import ChannelConfig, transmit
from .codec import decode, encode, load_checkpoint
from .data import HORIZON_STEPS, Scene, build_scenes, neighbors, parse_ngsim, segment_clips
from .errors import ConfigError, SchemaError, StateError
from .features import (FEATURE_WIDTH, default_scene_schema, default_vehicle_schema, denormalize,
                       extract_scene_features, extract_vehicle_features, feature_vector, normalize)
from .metrics import METRICS, score, summarize
from .predict import CandidateSet, PredictorConfig, predict_cv, predict_fused, predict_llm
from .rng import stream
from .semantics import REPORT_VERSION, RulesConfig, analyze, deserialize_report, make_backend, serialize_report

log = logging.getLogger(__name__)

MODES = ("v2i", "v2v")
# ablation -> (features, semantic report, neighbor predictions)
ABLATIONS = {
    "base": (False, False, False),
    "F": (True, False, False),
    "FS": (True, True, False),
    "P": (False, False, True),
    "FP": (True, False, True),
    "full": (True, True, True),
}
V2I_ABLATIONS = ("base", "F", "FS", "full")
CODEC_KINDS = ("fr", "sr", "pr")
TRAJ_VERSION = "traj-v1"
TRAJ_VALUES = 2 * HORIZON_STEPS
DEFAULT_STEPS = (10, 20, 30, 40, 50)
CODEC_DIMS = (FEATURE_WIDTH, 32)


def schema_versions():
    return {"fr": default_scene_schema().version, "sr": REPORT_VERSION, "pr": TRAJ_VERSION}


def snr_key(snr) -> str:
    return "inf" if math.isinf(snr) else repr(float(snr))


@dataclass
class RunConfig:
    mode: str = "v2i"
    channel: ChannelConfig = field(default_factory=ChannelConfig)
    checkpoints: dict = field(default_factory=dict)
    predictor: PredictorConfig = field(default_factory=PredictorConfig)
    ablation: str = "full"
    v2v_rounds: int = 2
    seed: int = 0
    radius_m: float = 50.0
    backend: str = "rules"
    rules: RulesConfig = field(default_factory=RulesConfig)
    pr_bounds: tuple | None = None
    pr_margin: float = 0.1
    label: str | None = None

    def validate(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}")
        if self.ablation not in ABLATIONS:
            raise ConfigError(f"unknown ablation {self.ablation!r}; choose from {sorted(ABLATIONS)}")
        if self.mode == "v2i" and self.ablation not in V2I_ABLATIONS:
            raise ConfigError(f"ablation {self.ablation!r} uses neighbor predictions, which exist only in v2v")
        if self.v2v_rounds < 1:
            raise ConfigError("v2v_rounds must be >= 1")
        unknown = set(self.checkpoints) - set(CODEC_KINDS)
        if unknown:
            raise ConfigError(f"unknown checkpoint kinds {sorted(unknown)}")
        self.predictor.validate()
        return self

    @property
    def flags(self):
        return ABLATIONS[self.ablation]

    @property
    def model_label(self):
        return self.label or f"{self.mode}-{self.ablation}"

    def to_dict(self):
        d = asdict(self)
        d["channel"] = self.channel.to_dict()
        d["predictor"] = self.predictor.to_dict()
        d["pr_bounds"] = None if self.pr_bounds is None else list(self.pr_bounds)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        known = set(cls.__dataclass_fields__)
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown run-config keys {sorted(extra)}")
        if "channel" in d:
            d["channel"] = ChannelConfig.from_dict(d["channel"])
        if "predictor" in d:
            d["predictor"] = PredictorConfig.from_dict(d["predictor"])
        if "rules" in d:
            d["rules"] = RulesConfig(**d["rules"])
        if d.get("pr_bounds") is not None:
            d["pr_bounds"] = tuple(float(v) for v in d["pr_bounds"])
        return cls(**d)

    def hash(self) -> str:
        return config_hash(self.to_dict())


def config_hash(d) -> str:
    return hashlib.sha256(json.dumps(d, sort_keys=True, default=str).encode()).hexdigest()


@dataclass
class PredictionRecord:
    clip_id: str
    scene_id: int
    vehicle_id: int
    mode: str
    snr_db: float
    K: int
    ablation: str
    candidates: CandidateSet
    truth: np.ndarray
    metrics: dict | None = None
    extra: dict = field(default_factory=dict)

    def score(self):
        if self.metrics is not None:
            raise StateError(f"record {self.clip_id} already scored")
        if len(self.truth) != HORIZON_STEPS:
            raise StateError("ground truth must have 50 steps")
        self.metrics = score(self.candidates, self.truth)
        return self

    def to_dict(self):
        return {"clip_id": self.clip_id, "scene_id": self.scene_id, "vehicle_id": self.vehicle_id,
                "mode": self.mode, "snr_db": snr_key(self.snr_db), "K": self.K, "ablation": self.ablation,
                "metrics": self.metrics, "truth": self.truth.tolist(), "candidates": self.candidates.to_dict(),
                "extra": self.extra}

    @classmethod
    def from_dict(cls, d):
        return cls(d["clip_id"], d["scene_id"], d["vehicle_id"], d["mode"], float(d["snr_db"]), d["K"],
                   d["ablation"], CandidateSet.from_dict(d["candidates"]), np.asarray(d["truth"], dtype=float),
                   d.get("metrics"), d.get("extra", {}))


# --------------------------------------------------------------------------- corpus & codecs

def load_corpus(path, units: str = "meters", stride: int = 10, align: str = "global") -> list[Scene]:
    """NGSIM-format CSV -> scenes of vehicles observed over the same window."""
    tracks = parse_ngsim(path, units)
    return build_scenes(segment_clips(tracks, stride=stride, align=align))


def required_codecs(cfg: RunConfig) -> tuple:
    use_f, use_s, use_p = cfg.flags
    if cfg.mode == "v2i":
        return tuple(k for k, on in (("fr", use_f), ("sr", use_s)) if on)
    return ("pr",) if use_p else ()


def load_codecs(cfg: RunConfig, codecs: dict | None = None) -> dict:
    """Load (or accept) every codec the run needs; mismatches fail before any work."""
    codecs = dict(codecs or {})
    versions = schema_versions()
    for kind in required_codecs(cfg):
        if kind in codecs:
            p = codecs[kind]
        elif kind in cfg.checkpoints:
            p, _ = load_checkpoint(cfg.checkpoints[kind], kind=kind, schema_version=versions[kind])
        else:
            raise ConfigError(f"ablation {cfg.ablation!r} in {cfg.mode} needs a {kind!r} codec checkpoint")
        if (p.m, p.k) != CODEC_DIMS:
            raise SchemaError(f"{kind} codec has dims (m={p.m}, k={p.k}), expected {CODEC_DIMS}")
        if p.mode != "eval":
            raise StateError(f"{kind} codec is not in eval mode")
        codecs[kind] = p
    return codecs


def report_vector(features):
    return serialize_report(analyze(features))


def trajectory_bounds(scenes, margin: float = 0.1) -> tuple:
    """Corpus-wide (xmin, xmax, ymin, ymax) over histories and CV bootstraps, widened by ``margin``."""
    pts = []
    for sc in scenes:
        for c in sc.clips:
            pts.append(c.hist_xy)
            pts.append(predict_cv(c).xy)
    pts = np.concatenate(pts)
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    pad = np.maximum(margin * (hi - lo), 1.0)
    lo, hi = lo - pad, hi + pad
    return (float(lo[0]), float(hi[0]), float(lo[1]), float(hi[1]))


def pack_trajectory(xy, bounds) -> np.ndarray:
    """(50, 2) path -> 384-vector: interleaved x, y normalized into [-1, 1], zero padded."""
    xy = np.asarray(xy, dtype=float)[:HORIZON_STEPS]
    out = np.zeros(FEATURE_WIDTH)
    out[0:TRAJ_VALUES:2] = normalize(xy[:, 0], bounds[0], bounds[1])
    out[1:TRAJ_VALUES:2] = normalize(xy[:, 1], bounds[2], bounds[3])
    return np.clip(out, -1.0, 1.0)


def unpack_trajectory(vec, bounds) -> np.ndarray:
    vec = np.asarray(vec, dtype=float)
    return np.column_stack([denormalize(vec[0:TRAJ_VALUES:2], bounds[0], bounds[1]),
                            denormalize(vec[1:TRAJ_VALUES:2], bounds[2], bounds[3])])


def codec_dataset(scenes, kind: str, bounds=None) -> np.ndarray:
    """Training vectors for one codec kind, derived from a corpus.

    fr: one scene-feature vector per scene; sr: its rules-backend report;
    pr: packed CV bootstraps and ground-truth futures of every clip.
    """
    if kind == "fr":
        return np.stack([extract_scene_features(sc).values for sc in scenes])
    if kind == "sr":
        return np.stack([report_vector(extract_scene_features(sc)) for sc in scenes])
    if kind == "pr":
        bounds = bounds or trajectory_bounds(scenes)
        rows = []
        for sc in scenes:
            for c in sc.clips:
                rows.append(pack_trajectory(predict_cv(c).xy, bounds))
                rows.append(pack_trajectory(c.fut_xy, bounds))
        return np.stack(rows)
    raise ConfigError(f"unknown codec kind {kind!r}")


# --------------------------------------------------------------------------- pipelines

def _send(vec, s, codec, channel, rng):
    y, _ = transmit(s, channel, rng)
    x_hat = decode(y, codec)
    return x_hat, float(np.mean((x_hat - vec) ** 2))


def _dispatch_predictor(cfg: RunConfig, client=None):
    def run(clip, features, report, nbrs, rng):
        if cfg.predictor.kind == "llm":
            ctx = {"features": features, "report": report, "neighbors": nbrs}
            return predict_llm(clip, ctx, cfg.predictor, client, rng)
        return predict_fused(clip, features, report, nbrs, cfg.predictor, rng)
    return run


def _record(clip, cfg, cs, extra):
    return PredictionRecord(clip.clip_id, clip.scene_id, clip.vehicle_id, cfg.mode, cfg.channel.snr_db,
                            int(cfg.predictor.K), cfg.ablation, cs, clip.fut_xy.copy(), extra=extra).score()


def run_v2i(scenes, cfg: RunConfig, codecs: dict | None = None, predictor=None, client=None) -> list:
    """Roadside unit analyzes each scene and broadcasts features and report to every vehicle.

    ``predictor(clip, features, report, neighbors, rng)`` overrides the
    configured predictor (used to observe exactly what it receives).
    """
    cfg.validate()
    codecs = load_codecs(cfg, codecs)
    use_f, use_s, _ = cfg.flags
    predictor = predictor or _dispatch_predictor(cfg, client)
    backend = make_backend(cfg.backend, cfg.rules) if use_s else None
    schema = default_scene_schema()
    snr = snr_key(cfg.channel.snr_db)
    records = []
    for sc in scenes:
        x_fr = extract_scene_features(sc, schema) if (use_f or use_s) else None
        s_fr = encode(x_fr.values, codecs["fr"]) if use_f else None
        if use_s:
            x_sr = serialize_report(analyze(x_fr, backend))
            s_sr = encode(x_sr, codecs["sr"])
        for clip in sc.clips:
            keys = (cfg.seed, "v2i", snr, sc.scene_id, clip.vehicle_id)
            feats = report = None
            extra = {}
            if use_f:
                x_hat, extra["mse_fr"] = _send(x_fr.values, s_fr, codecs["fr"], cfg.channel, stream(*keys, "fr"))
                feats = feature_vector(x_hat, schema)
            if use_s:
                r_hat, extra["mse_sr"] = _send(x_sr, s_sr, codecs["sr"], cfg.channel, stream(*keys, "sr"))
                report = deserialize_report(r_hat)
            cs = predictor(clip, feats, report, None, stream(*keys, "pred"))
            records.append(_record(clip, cfg, cs, extra))
    return records


def run_v2v(scenes, cfg: RunConfig, codecs: dict | None = None, predictor=None, client=None) -> list:
    """Vehicles exchange predicted trajectories over R synchronous rounds.

    Round 0 is a constant-velocity bootstrap. In each later round every vehicle
    encodes its current top candidate once; each neighbor link gets its own
    channel draw. Features and reports are computed locally, without the channel.
    """
    cfg.validate()
    codecs = load_codecs(cfg, codecs)
    use_f, use_s, use_p = cfg.flags
    predictor = predictor or _dispatch_predictor(cfg, client)
    backend = make_backend(cfg.backend, cfg.rules) if use_s else None
    schema = default_vehicle_schema()
    bounds = None
    if use_p:
        bounds = tuple(cfg.pr_bounds) if cfg.pr_bounds is not None else trajectory_bounds(scenes, cfg.pr_margin)
    snr = snr_key(cfg.channel.snr_db)
    rounds = cfg.v2v_rounds if use_p else 1
    records = []
    for sc in scenes:
        local = {}
        for clip in sc.clips:
            f = extract_vehicle_features(clip, schema) if (use_f or use_s) else None
            local[clip.vehicle_id] = (f if use_f else None, analyze(f, backend) if use_s else None)
        nbr_ids = {c.vehicle_id: neighbors(sc, c.vehicle_id, cfg.radius_m) for c in sc.clips} if use_p else {}
        broadcast = {c.vehicle_id: predict_cv(c).xy for c in sc.clips}
        final, extras = {}, {}
        for r in range(1, rounds + 1):
            sent = {}
            if use_p:
                for vid, path in broadcast.items():
                    x = pack_trajectory(path, bounds)
                    sent[vid] = (x, encode(x, codecs["pr"]))
            for clip in sc.clips:
                v = clip.vehicle_id
                recv, errs = None, []
                if use_p:
                    recv = {}
                    for u in nbr_ids[v]:
                        x, s = sent[u]
                        rng = stream(cfg.seed, "v2v", snr, sc.scene_id, r, u, v)
                        x_hat, e = _send(x, s, codecs["pr"], cfg.channel, rng)
                        recv[u] = unpack_trajectory(x_hat, bounds)
                        errs.append(e)
                feats, report = local[v]
                final[v] = predictor(clip, feats, report, recv,
                                     stream(cfg.seed, "v2v", snr, sc.scene_id, v, "pred"))
                extras[v] = {"round": r, "neighbors": nbr_ids.get(v, [])}
                if errs:
                    extras[v]["mse_pr"] = float(np.mean(errs))
            broadcast = {v: cs.top() for v, cs in final.items()}
        for clip in sc.clips:
            extra = extras[clip.vehicle_id]
            if bounds is not None:
                extra["pr_bounds"] = list(bounds)
            records.append(_record(clip, cfg, final[clip.vehicle_id], extra))
    return records


def run(scenes, cfg: RunConfig, codecs=None, **kw) -> list:
    return (run_v2i if cfg.mode == "v2i" else run_v2v)(scenes, cfg, codecs, **kw)


# --------------------------------------------------------------------------- sweeps

def _with(cfg: RunConfig, snr=None, K=None) -> RunConfig:
    new = RunConfig.from_dict(cfg.to_dict())
    if snr is not None:
        new.channel.snr_db = float(snr)
    if K is not None:
        new.predictor.K = int(K)
    return new


def summary_rows(records, snr, K, aggregation: str = "mean_of_clips", steps=None):
    rows = []
    aggs = ("mean_of_clips", "pooled") if aggregation == "both" else (aggregation,)
    for agg in aggs:
        suffix = "" if agg == "mean_of_clips" else "_pooled"
        for m in METRICS:
            res = summarize(records, m, agg, steps)
            row = {"snr_db": snr_key(snr), "K": int(K), "metric": m + suffix, "value": res.value,
                   "n_clips": res.n_clips}
            if steps is not None:
                row = {"step": int(steps), **row}
            rows.append(row)
    return rows


@dataclass
class SweepResult:
    rows: list
    records: dict  # (snr, K) -> records
    extras: dict = field(default_factory=dict)

    def value(self, snr, K, metric):
        for r in self.rows:
            if r["snr_db"] == snr_key(snr) and r["K"] == K and r["metric"] == metric:
                return r["value"]
        raise KeyError((snr, K, metric))

    def table(self, k_list=(1, 5, 10)):
        """Wide layout: one row per SNR with K=1 FDE then ADE/RMSE for each larger K."""
        cols = ["snr_db"]
        for K in k_list:
            cols += [f"K{K}_fde"] if K == min(k_list) else [f"K{K}_ade", f"K{K}_rmse"]
        out = []
        for snr in dict.fromkeys(r["snr_db"] for r in self.rows):
            row = {"snr_db": snr}
            for c in cols[1:]:
                k, m = c.split("_")
                row[c] = self.value(float(snr), int(k[1:]), m)
            out.append(row)
        return cols, out


def sweep(scenes, base_cfg: RunConfig, snr_list=(0.0, 10.0, 20.0), k_list=(1, 5, 10),
          codecs=None, aggregation: str = "mean_of_clips") -> SweepResult:
    """Full SNR x K cross product.

    Channel and jitter streams depend on (master seed, SNR) but not on K, so
    the K=5 candidate set of a clip is a prefix of its K=10 set and best-of-K
    is monotone cell by cell.
    """
    base_cfg.validate()
    codecs = load_codecs(base_cfg, codecs)
    rows, recs = [], {}
    for snr in snr_list:
        for K in k_list:
            cfg = _with(base_cfg, snr, K)
            r = run(scenes, cfg, codecs)
            recs[(float(snr), int(K))] = r
            rows += summary_rows(r, snr, K, aggregation)
    return SweepResult(rows, recs)


def horizon_sweep(scenes, cfg: RunConfig, steps=DEFAULT_STEPS, codecs=None, records=None,
                  aggregation: str = "mean_of_clips") -> list:
    """Metrics recomputed on futures truncated to each step count."""
    records = records if records is not None else run(scenes, cfg, codecs)
    rows = []
    for s in steps:
        rows += summary_rows(records, cfg.channel.snr_db, cfg.predictor.K, aggregation, steps=s)
    return rows


# --------------------------------------------------------------------------- output files

SUMMARY_HEADER = ("snr_db", "K", "metric", "value", "n_clips")
HORIZON_HEADER = ("step",) + SUMMARY_HEADER
REPORT_HEADER = ("model", "snr_db", "K", "step", "metric", "value", "n_clips")


def _fmt(v):
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


def write_csv(path, header, rows):
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(r[h]) for h in header])
    return path


def read_csv(path):
    with Path(path).open(newline="") as fh:
        return list(csv.DictReader(fh))


def write_records(path, records):
    path = Path(path)
    with path.open("w") as fh:
        for r in records:
            fh.write(json.dumps(r.to_dict(), sort_keys=True) + "\n")
    return path


def read_records(path):
    with Path(path).open() as fh:
        return [PredictionRecord.from_dict(json.loads(line)) for line in fh if line.strip()]


def write_per_clip(path, records):
    path = Path(path)
    with path.open("w") as fh:
        for r in records:
            fh.write(json.dumps({"clip_id": r.clip_id, "snr_db": snr_key(r.snr_db), "K": r.K,
                                 "ablation": r.ablation, **r.metrics}, sort_keys=True) + "\n")
    return path


def file_sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_manifest(out_dir, command: str, config: dict, seed: int, outputs, inputs=(),
                   name: str = "manifest.json"):
    """Everything needed to regenerate ``outputs``: command, full config, input hashes, versions."""
    out_dir = Path(out_dir)
    manifest = {
        "command": command,
        "config": config,
        "config_hash": config_hash(config),
        "seed": seed,
        "inputs": {str(p): file_sha256(p) for p in inputs if Path(p).is_file()},
        "outputs": {Path(p).name: file_sha256(p) for p in outputs},
        "versions": {"semx": __version__, "numpy": np.__version__, "python": platform.python_version()},
    }
    path = out_dir / name
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


LOCK_NAME = ".semx.lock"


@contextlib.contextmanager
def output_lock(out_dir):
    """Exclusive lock file so two runs never write into the same directory."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    lock = out_dir / LOCK_NAME
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise StateError(f"{out_dir} is locked by another run ({lock})") from None
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield out_dir
    finally:
        with contextlib.suppress(FileNotFoundError):
            lock.unlink()


def merge_reports(run_dirs):
    """Rows keyed by (model, step, metric) from each run's summary or horizon CSV.

    Returns (rows, missing_dirs). Full-horizon summaries get ``step = 50``.
    """
    rows, missing = [], []
    for d in map(Path, run_dirs):
        label = d.name
        mf = d / "manifest.json"
        if mf.exists():
            cfg = json.loads(mf.read_text()).get("config", {})
            run_cfg = cfg.get("run", cfg)
            if isinstance(run_cfg, dict):
                label = run_cfg.get("label") or (f"{run_cfg['mode']}-{run_cfg['ablation']}"
                                                 if "mode" in run_cfg and "ablation" in run_cfg else label)
        found = False
        if (d / "horizon.csv").exists():
            found = True
            for r in read_csv(d / "horizon.csv"):
                rows.append({"model": label, **r})
        if (d / "summary.csv").exists():
            found = True
            for r in read_csv(d / "summary.csv"):
                rows.append({"model": label, "step": str(HORIZON_STEPS), **r})
        if not found:
            missing.append(str(d))
    return rows, missing
