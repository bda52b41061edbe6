"""Reusable experiment drivers shared by ``scripts/`` and the acceptance tests."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .channel import ChannelConfig
from .codec import TrainConfig, train
from .data import SynthConfig, synth_scenes
from .orchestrate import RunConfig, codec_dataset, run_v2i, run_v2v, trajectory_bounds
from .predict import PredictorConfig


# 600 epochs (about 1200 Adam steps on 50 scene vectors) removes most of the
# systematic decode bias that 300 epochs leaves at high SNR
EPOCHS = 600


def probe_corpus(seed=0, n_scenes=50, n_vehicles=10, congestion_prob=0.3, **kw):
    """Synthetic freeway corpus, one scene per 8 s block (n_scenes * n_vehicles clips)."""
    cfg = SynthConfig(n_scenes=n_scenes, n_vehicles=n_vehicles, congestion_prob=congestion_prob, **kw)
    return synth_scenes(cfg, seed)


def train_codecs(scenes, kinds=("fr", "sr"), snrs=(0.0, 10.0, 20.0), epochs=EPOCHS, seed=0, lr=2e-3,
                 hidden=128, fading="none", bounds=None):
    """One codec per stream kind, trained through the channel at the given (mixed) SNRs."""
    out, traces = {}, {}
    for kind in kinds:
        x = codec_dataset(scenes, kind, bounds)
        tcfg = TrainConfig(epochs=epochs, lr=lr, seed=seed, hidden=hidden,
                           train_snrs=tuple(snrs) if len(snrs) > 1 else None)
        ch = ChannelConfig(snr_db=snrs[0] if len(snrs) == 1 else 0.0, fading=fading)
        res = train(x, tcfg, ch)
        out[kind], traces[kind] = res.params, res.loss_trace
    return out, traces


@dataclass
class SnrTrend:
    seed: int
    snrs: tuple
    mse_fr: dict = field(default_factory=dict)
    mse_sr: dict = field(default_factory=dict)
    ade: dict = field(default_factory=dict)

    @property
    def mse_ordered(self):
        m = [self.mse_fr[s] for s in sorted(self.snrs, reverse=True)]
        return all(a < b for a, b in zip(m, m[1:]))

    @property
    def ade_ordered(self):
        hi, lo = max(self.snrs), min(self.snrs)
        return self.ade[hi] <= self.ade[lo]


def snr_trend(seed=0, snrs=(0.0, 10.0, 20.0), K=5, epochs=EPOCHS, corpus_kw=None, ablation="full",
              fading="none", scenes=None, codecs=None) -> SnrTrend:
    """V2I with mixed-SNR codecs: reconstruction MSE and ADE at each evaluation SNR.

    ``scenes`` and ``codecs`` may be supplied to skip corpus generation and training.
    """
    scenes = scenes if scenes is not None else probe_corpus(seed, **(corpus_kw or {}))
    if codecs is None:
        codecs, _ = train_codecs(scenes, snrs=snrs, epochs=epochs, seed=seed, fading=fading)
    res = SnrTrend(seed, tuple(snrs))
    for snr in snrs:
        cfg = RunConfig(mode="v2i", ablation=ablation, channel=ChannelConfig(snr_db=snr, fading=fading),
                        predictor=PredictorConfig(K=K), seed=seed)
        recs = run_v2i(scenes, cfg, codecs)
        res.mse_fr[snr] = float(np.mean([r.extra["mse_fr"] for r in recs]))
        res.mse_sr[snr] = float(np.mean([r.extra.get("mse_sr", np.nan) for r in recs]))
        res.ade[snr] = float(np.mean([r.metrics["ade"] for r in recs]))
    return res


def ablation_table(scenes, codecs, mode="v2i", snr=20.0, K=5, seed=0, ablations=None, rounds=2):
    """Mean ADE / FDE / RMSE per ablation flag."""
    ablations = ablations or (("base", "F", "FS", "full") if mode == "v2i" else ("base", "F", "FS", "P", "FP", "full"))
    rows = []
    for ab in ablations:
        cfg = RunConfig(mode=mode, ablation=ab, channel=ChannelConfig(snr_db=snr), predictor=PredictorConfig(K=K),
                        seed=seed, v2v_rounds=rounds)
        recs = (run_v2i if mode == "v2i" else run_v2v)(scenes, cfg, codecs)
        rows.append({"ablation": ab, **{m: float(np.mean([r.metrics[m] for r in recs])) for m in ("ade", "fde", "rmse")}})
    return rows


__all__ = ["EPOCHS", "probe_corpus", "train_codecs", "snr_trend", "SnrTrend", "ablation_table", "trajectory_bounds"]
