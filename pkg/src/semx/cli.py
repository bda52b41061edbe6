"""``semx`` command line: ingest, synth, train-codec, run-v2i, run-v2v, sweep, horizon-sweep, report.

Exit codes: 0 success, 1 usage error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import __version__
from .channel import ChannelConfig
from .codec import TrainConfig, save_checkpoint, train
from .data import SynthConfig, parse_ngsim, synth_generate, write_ngsim
from .errors import SemxError
from .orchestrate import (DEFAULT_STEPS, HORIZON_HEADER, REPORT_HEADER, SUMMARY_HEADER, RunConfig,
                          codec_dataset, horizon_sweep, load_corpus, merge_reports, output_lock, run,
                          schema_versions, summary_rows, sweep, trajectory_bounds, write_csv,
                          write_manifest, write_per_clip, write_records)

log = logging.getLogger("semx")

CORPUS_KEYS = ("corpus", "units", "stride")
SWEEP_KEYS = ("snr_list", "k_list", "steps", "aggregation")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(1)


def _floats(text):
    return [math.inf if v.strip() in ("inf", "+inf") else float(v) for v in text.split(",") if v.strip()]


def _ints(text):
    return [int(v) for v in text.split(",") if v.strip()]


def _parse_value(text):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


# --------------------------------------------------------------------------- config assembly

def _load_config(path):
    if path is None:
        return {}, Path.cwd()
    p = Path(path)
    try:
        cfg = json.loads(p.read_text())
    except FileNotFoundError:
        raise SemxError(f"config file not found: {p}") from None
    except json.JSONDecodeError as exc:
        raise SemxError(f"config {p} is not valid JSON: {exc}") from None
    if not isinstance(cfg, dict):
        raise SemxError(f"config {p} must be a JSON object")
    return cfg, p.resolve().parent


def _resolve(base: Path, value):
    if value is None:
        return None
    p = Path(value)
    return str(p if p.is_absolute() else base / p)


def _set_dotted(d, key, value):
    parts = key.split(".")
    for k in parts[:-1]:
        d = d.setdefault(k, {})
    d[parts[-1]] = value


def _run_settings(args, mode=None):
    """Merge config file and flag overrides -> (corpus settings, RunConfig, sweep settings, raw dict)."""
    raw, base = _load_config(args.config)
    raw = json.loads(json.dumps(raw))
    if mode is not None:
        raw["mode"] = mode
    over = {
        "corpus": getattr(args, "corpus", None), "seed": args.seed, "ablation": args.ablation,
        "v2v_rounds": args.rounds, "label": args.label, "units": args.units, "stride": args.stride,
    }
    for k, v in over.items():
        if v is not None:
            raw[k] = v
    ch = raw.setdefault("channel", {})
    if args.snr is not None:
        ch["snr_db"] = "inf" if math.isinf(args.snr) else args.snr
    if args.fading is not None:
        ch["fading"] = args.fading
    if args.equalize:
        ch["equalize"] = True
    pred = raw.setdefault("predictor", {})
    if args.K is not None:
        pred["K"] = args.K
    if args.predictor is not None:
        pred["kind"] = args.predictor
    for item in args.set or []:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        _set_dotted(raw, k, _parse_value(v))
    if getattr(args, "snr_list", None):
        raw["snr_list"] = args.snr_list
    if getattr(args, "k_list", None):
        raw["k_list"] = args.k_list
    if getattr(args, "steps", None):
        raw["steps"] = args.steps

    corpus = {k: raw.get(k) for k in CORPUS_KEYS}
    if not corpus["corpus"]:
        raise SemxError("no corpus given (config key 'corpus' or --corpus)")
    corpus["corpus"] = _resolve(base, corpus["corpus"])
    corpus["units"] = corpus["units"] or "meters"
    corpus["stride"] = int(corpus["stride"] or 10)
    sweep_cfg = {k: raw[k] for k in SWEEP_KEYS if k in raw}
    run_dict = {k: v for k, v in raw.items() if k not in CORPUS_KEYS + SWEEP_KEYS}
    run_dict["checkpoints"] = {k: _resolve(base, v) for k, v in run_dict.get("checkpoints", {}).items()}
    cfg = RunConfig.from_dict(run_dict).validate()
    resolved = {**corpus, **sweep_cfg, "run": cfg.to_dict()}
    return corpus, cfg, sweep_cfg, resolved


def _inputs(corpus, cfg: RunConfig):
    return [corpus["corpus"], *cfg.checkpoints.values()]


# --------------------------------------------------------------------------- subcommands

def cmd_ingest(args):
    tracks = parse_ngsim(args.input, args.units)
    out = Path(args.out)
    write_ngsim(tracks, out, "meters")
    config = {"input": args.input, "units": args.units}
    _file_manifest(out, "ingest", config, None, [args.input])
    print(f"{len(tracks)} tracks -> {out}")


def cmd_synth(args):
    raw, _ = _load_config(args.config)
    for k in ("n_scenes", "n_vehicles"):
        if getattr(args, k) is not None:
            raw[k] = getattr(args, k)
    for k in ("speed_range", "spacing_range", "accel_range", "congested_speed_range", "slowdown_decel",
              "slowdown_ratio"):
        if k in raw:
            raw[k] = tuple(raw[k])
    try:
        cfg = SynthConfig(**raw)
    except TypeError as exc:
        raise SemxError(f"invalid synth config: {exc}") from None
    tracks = synth_generate(cfg, args.seed)
    out = Path(args.out)
    write_ngsim(tracks, out, "meters")
    _file_manifest(out, "synth", asdict(cfg), args.seed, [])
    print(f"{len(tracks)} tracks -> {out}")


def _file_manifest(out: Path, command, config, seed, inputs):
    write_manifest(out.parent, command, config, seed, [out], inputs, name=out.name + ".manifest.json")


def cmd_train_codec(args):
    data = Path(args.data)
    if data.suffix == ".npy":
        x = np.load(data)
        meta = {}
    else:
        scenes = load_corpus(data, args.units, args.stride)
        bounds = trajectory_bounds(scenes) if args.kind == "pr" else None
        x = codec_dataset(scenes, args.kind, bounds)
        meta = {"pr_bounds": list(bounds)} if bounds else {}
    snrs = args.snr
    channel = ChannelConfig(snr_db=snrs[0] if len(snrs) == 1 else 0.0, fading=args.fading)
    tcfg = TrainConfig(epochs=args.epochs, batch_size=args.batch_size, lr=args.lr, seed=args.seed,
                       hidden=args.hidden, train_snrs=tuple(snrs) if len(snrs) > 1 else None)
    res = train(x, tcfg, channel)
    meta.update({"kind": args.kind, "schema_version": schema_versions()[args.kind],
                 "train_config": asdict(tcfg), "channel": channel.to_dict(), "final_loss": res.final_loss,
                 "n_vectors": int(len(x)), "data": str(data)})
    out = Path(args.out)
    save_checkpoint(res.params, out, meta)
    print(f"trained {args.kind} codec on {len(x)} vectors, final loss {res.final_loss:.3e} -> {out}")


def _run_common(args, mode):
    corpus, cfg, _, resolved = _run_settings(args, mode)
    scenes = load_corpus(corpus["corpus"], corpus["units"], corpus["stride"])
    with output_lock(args.out) as out:
        records = run(scenes, cfg)
        files = [write_records(out / "records.jsonl", records),
                 write_csv(out / "summary.csv", SUMMARY_HEADER,
                           summary_rows(records, cfg.channel.snr_db, cfg.predictor.K, args.aggregation))]
        if args.per_clip:
            files.append(write_per_clip(out / "per_clip.jsonl", records))
        write_manifest(out, f"run-{mode}", resolved, cfg.seed, files, _inputs(corpus, cfg))
    print(f"{len(records)} records -> {out}")


def cmd_run_v2i(args):
    _run_common(args, "v2i")


def cmd_run_v2v(args):
    _run_common(args, "v2v")


def cmd_sweep(args):
    corpus, cfg, sw, resolved = _run_settings(args)
    scenes = load_corpus(corpus["corpus"], corpus["units"], corpus["stride"])
    snr_list = [math.inf if v == "inf" else float(v) for v in sw.get("snr_list", [0.0, 10.0, 20.0])]
    k_list = [int(k) for k in sw.get("k_list", [1, 5, 10])]
    agg = sw.get("aggregation", args.aggregation)
    with output_lock(args.out) as out:
        res = sweep(scenes, cfg, snr_list, k_list, aggregation=agg)
        files = [write_csv(out / "summary.csv", SUMMARY_HEADER, res.rows)]
        cols, table = res.table(k_list)
        files.append(write_csv(out / "table.csv", cols, table))
        if args.per_clip:
            files.append(write_per_clip(out / "per_clip.jsonl", [r for rs in res.records.values() for r in rs]))
        write_manifest(out, "sweep", resolved, cfg.seed, files, _inputs(corpus, cfg))
    print(f"{len(snr_list)}x{len(k_list)} sweep -> {out}")


def cmd_horizon_sweep(args):
    corpus, cfg, sw, resolved = _run_settings(args)
    scenes = load_corpus(corpus["corpus"], corpus["units"], corpus["stride"])
    steps = [int(s) for s in sw.get("steps", DEFAULT_STEPS)]
    with output_lock(args.out) as out:
        records = run(scenes, cfg)
        rows = horizon_sweep(scenes, cfg, steps, records=records, aggregation=sw.get("aggregation", args.aggregation))
        files = [write_csv(out / "horizon.csv", HORIZON_HEADER, rows)]
        if args.per_clip:
            files.append(write_per_clip(out / "per_clip.jsonl", records))
        write_manifest(out, "horizon-sweep", resolved, cfg.seed, files, _inputs(corpus, cfg))
    print(f"horizon sweep over steps {steps} -> {out}")


def cmd_report(args):
    rows, missing = merge_reports(args.run_dirs)
    with output_lock(args.out) as out:
        files = [write_csv(out / "report.csv", REPORT_HEADER, rows)]
        write_manifest(out, "report", {"run_dirs": list(args.run_dirs)}, None, files)
    for d in missing:
        print(f"semx: no summary.csv or horizon.csv in {d}, skipped", file=sys.stderr)
    print(f"{len(rows)} rows -> {out / 'report.csv'}")
    return 2 if missing else 0


# --------------------------------------------------------------------------- parser

def _add_run_flags(p, with_corpus=True):
    p.add_argument("--config", help="run-config JSON")
    if with_corpus:
        p.add_argument("--corpus", help="NGSIM-format CSV (overrides config)")
    p.add_argument("--units", choices=("feet", "meters"))
    p.add_argument("--stride", type=int)
    p.add_argument("--snr", type=lambda s: _floats(s)[0], help="channel SNR in dB (inf = noiseless)")
    p.add_argument("--fading", choices=("none", "rayleigh_block"))
    p.add_argument("--equalize", action="store_true", help="divide out the fading gain at the receiver")
    p.add_argument("--K", type=int, help="candidates per clip")
    p.add_argument("--predictor", choices=("cv", "maneuver", "llm"))
    p.add_argument("--seed", type=int)
    p.add_argument("--ablation", choices=("base", "F", "FS", "P", "FP", "full"))
    p.add_argument("--rounds", type=int, help="V2V exchange rounds")
    p.add_argument("--label", help="model label used by `report`")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="dotted config override, JSON value")
    p.add_argument("--aggregation", default="mean_of_clips", choices=("mean_of_clips", "pooled", "both"))
    p.add_argument("--per-clip", action="store_true", help="also write per-clip metrics as JSON lines")
    p.add_argument("--out", required=True, help="output directory")


def build_parser():
    parser = _Parser(prog="semx", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"semx {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("ingest", help="convert an NGSIM CSV to the metric corpus format")
    p.add_argument("--input", required=True)
    p.add_argument("--units", default="feet", choices=("feet", "meters"))
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("synth", help="generate a synthetic freeway corpus")
    p.add_argument("--config", help="SynthConfig JSON")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n-scenes", dest="n_scenes", type=int)
    p.add_argument("--n-vehicles", dest="n_vehicles", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train-codec", help="train one semantic codec through the channel")
    p.add_argument("--data", required=True, help="corpus CSV or .npy array of vectors")
    p.add_argument("--kind", default="fr", choices=("fr", "sr", "pr"))
    p.add_argument("--snr", type=_floats, default=[20.0], help="dB; a comma list trains at mixed SNR")
    p.add_argument("--fading", default="none", choices=("none", "rayleigh_block"))
    p.add_argument("--epochs", type=int, default=300)
    p.add_argument("--batch-size", dest="batch_size", type=int, default=32)
    p.add_argument("--lr", type=float, default=2e-3)
    p.add_argument("--hidden", type=int, default=128)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--units", default="meters", choices=("feet", "meters"))
    p.add_argument("--stride", type=int, default=10)
    p.add_argument("--out", required=True, help="checkpoint path")
    p.set_defaults(func=cmd_train_codec)

    for name, func, help_ in (("run-v2i", cmd_run_v2i, "roadside-unit pipeline"),
                              ("run-v2v", cmd_run_v2v, "vehicle-to-vehicle pipeline")):
        p = sub.add_parser(name, help=help_)
        _add_run_flags(p)
        p.set_defaults(func=func)

    p = sub.add_parser("sweep", help="SNR x K grid")
    _add_run_flags(p)
    p.add_argument("--snr-list", dest="snr_list", type=_floats)
    p.add_argument("--k-list", dest="k_list", type=_ints)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("horizon-sweep", help="metrics versus prediction steps")
    _add_run_flags(p)
    p.add_argument("--steps", type=_ints)
    p.set_defaults(func=cmd_horizon_sweep)

    p = sub.add_parser("report", help="merge run summaries into one table")
    p.add_argument("run_dirs", nargs="+")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        code = args.func(args)
    except UsageError as exc:
        print(f"semx: error: {exc}", file=sys.stderr)
        return 1
    except (SemxError, OSError, ValueError, KeyError) as exc:
        print(f"semx: error: {exc}", file=sys.stderr)
        return 2
    return int(code or 0)


if __name__ == "__main__":
    sys.exit(main())
