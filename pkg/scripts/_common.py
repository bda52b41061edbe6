"""Shared setup for the experiment scripts: corpus, trained codecs and CSV output."""

import argparse
from pathlib import Path

from semx.experiments import EPOCHS, probe_corpus, train_codecs, trajectory_bounds
from semx.orchestrate import write_csv


def parser(description):
    p = argparse.ArgumentParser(description=description)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n-scenes", type=int, default=50)
    p.add_argument("--n-vehicles", type=int, default=10)
    p.add_argument("--epochs", type=int, default=EPOCHS)
    p.add_argument("--out", default="results")
    return p


def setup(args, kinds=("fr", "sr")):
    scenes = probe_corpus(args.seed, args.n_scenes, args.n_vehicles)
    bounds = trajectory_bounds(scenes) if "pr" in kinds else None
    codecs, _ = train_codecs(scenes, kinds, epochs=args.epochs, seed=args.seed, bounds=bounds)
    return scenes, codecs, bounds


def save(out_dir, name, header, rows):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = write_csv(out / name, header, rows)
    print(f"wrote {path}")
    return path


def show(header, rows):
    print("  ".join(f"{h:>10}" for h in header))
    for r in rows:
        print("  ".join(f"{r[h]:>10.4f}" if isinstance(r[h], float) else f"{str(r[h]):>10}" for h in header))
