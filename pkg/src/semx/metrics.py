"""Displacement metrics: RMSE, ADE, FDE, best-of-K and corpus summaries.

For a predicted path ``p`` and ground truth ``q`` of ``S`` steps with
``d_s = ||p_s - q_s||``::

    RMSE = sqrt(mean_s d_s^2)     ADE = mean_s d_s     FDE = d_S
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeError

METRICS = ("ade", "fde", "rmse")
AGGREGATIONS = ("mean_of_clips", "pooled")


def _displacements(pred, truth):
    p = np.asarray(pred, dtype=float)
    q = np.asarray(truth, dtype=float)
    if p.shape != q.shape or p.ndim != 2 or p.shape[1] != 2 or len(p) < 1:
        raise ShapeError(f"pred {p.shape} and truth {q.shape} must both be (S>=1, 2)")
    return np.hypot(p[:, 0] - q[:, 0], p[:, 1] - q[:, 1])


def rmse(pred, truth) -> float:
    d = _displacements(pred, truth)
    return float(np.sqrt(np.mean(d * d)))


def ade(pred, truth) -> float:
    return float(np.mean(_displacements(pred, truth)))


def fde(pred, truth) -> float:
    return float(_displacements(pred, truth)[-1])


METRIC_FUNCS = {"ade": ade, "fde": fde, "rmse": rmse}


def _candidate_array(candidates):
    c = getattr(candidates, "candidates", candidates)
    c = np.asarray(c, dtype=float)
    if c.ndim == 2:
        c = c[None]
    return c


def best_of_k(candidates, truth, metric="ade") -> float:
    """Minimum of ``metric`` over the candidates (a CandidateSet or (K, S, 2) array)."""
    c = _candidate_array(candidates)
    if len(c) == 0:
        raise ValueError("best_of_k needs at least one candidate")
    f = METRIC_FUNCS[metric] if isinstance(metric, str) else metric
    return min(f(p, truth) for p in c)


def score(candidates, truth, steps: int | None = None) -> dict:
    """Best-of-K ADE/FDE/RMSE, optionally on the first ``steps`` steps only."""
    c = _candidate_array(candidates)
    q = np.asarray(truth, dtype=float)
    if steps is not None:
        c, q = c[:, :steps], q[:steps]
    return {m: best_of_k(c, q, m) for m in METRICS}


def best_sq_sum(candidates, truth, steps: int | None = None) -> tuple[float, int]:
    """Squared-displacement sum of the RMSE-best candidate, and its step count (for pooling)."""
    c = _candidate_array(candidates)
    q = np.asarray(truth, dtype=float)
    if steps is not None:
        c, q = c[:, :steps], q[:steps]
    sums = [float(np.sum(_displacements(p, q) ** 2)) for p in c]
    return min(sums), len(q)


@dataclass
class MetricResult:
    metric: str
    K: int
    per_clip: np.ndarray
    aggregation: str = "mean_of_clips"
    pooled_value: float | None = None
    clip_ids: list = field(default_factory=list)

    @property
    def n_clips(self) -> int:
        return len(self.per_clip)

    @property
    def mean(self) -> float:
        return float(np.mean(self.per_clip)) if len(self.per_clip) else float("nan")

    @property
    def value(self) -> float:
        if self.aggregation == "pooled" and self.pooled_value is not None:
            return self.pooled_value
        return self.mean


def summarize(records, metric: str, aggregation: str = "mean_of_clips", steps: int | None = None) -> MetricResult:
    """Corpus summary of one metric over scored records.

    ``mean_of_clips`` averages per-clip values. ``pooled`` averages over all
    (clip, step) pairs; it differs from the clip mean only for RMSE, where
    the square root is taken after pooling.
    """
    if aggregation not in AGGREGATIONS:
        raise ValueError(f"aggregation must be one of {AGGREGATIONS}")
    per, ids, sq, n = [], [], 0.0, 0
    K = None
    for r in records:
        m = r.metrics if steps is None else score(r.candidates, r.truth, steps)
        per.append(m[metric])
        ids.append(r.clip_id)
        K = r.K if K is None else K
        if metric == "rmse":
            s, c = best_sq_sum(r.candidates, r.truth, steps)
            sq, n = sq + s, n + c
    per = np.asarray(per, dtype=float)
    pooled = float(np.sqrt(sq / n)) if metric == "rmse" and n else (float(per.mean()) if len(per) else None)
    return MetricResult(metric, K or 0, per, aggregation, pooled, ids)
