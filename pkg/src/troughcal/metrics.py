"""Evaluation metrics and fit-report assembly.

Pure post-processing over fitted parameters and predictions: RMSE,
coefficient of determination, heat-loss ranking and degraded-receiver
flagging.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateInput, EmptySeries, LengthMismatch


def rmse(predicted, measured) -> float:
    """Root mean squared difference between two equal-length series, K."""
    p = np.asarray(predicted, dtype=float).ravel()
    m = np.asarray(measured, dtype=float).ravel()
    if p.size != m.size:
        raise LengthMismatch(f"series lengths differ: {p.size} vs {m.size}")
    if p.size == 0:
        raise EmptySeries("rmse of empty series")
    return float(np.sqrt(np.mean((p - m) ** 2)))


def r_squared(x, y) -> float:
    """R^2 of y regressed on x by simple least squares."""
    x = np.asarray(x, dtype=float).ravel()
    y = np.asarray(y, dtype=float).ravel()
    if x.size != y.size:
        raise LengthMismatch(f"series lengths differ: {x.size} vs {y.size}")
    if x.size < 2:
        raise EmptySeries("r_squared needs >= 2 points")
    sxx = float(np.sum((x - x.mean()) ** 2))
    if sxx == 0.0:
        raise DegenerateInput("constant regressor")
    sxy = float(np.sum((x - x.mean()) * (y - y.mean())))
    syy = float(np.sum((y - y.mean()) ** 2))
    if syy == 0.0:
        # constant response: the regression line fits it exactly
        return 1.0
    ss_res = syy - sxy * sxy / sxx
    return 1.0 - ss_res / syy


@dataclass
class HeatLossEntry:
    loop_id: str
    span: int
    h_pg: float
    flagged: bool


def rank_heat_loss(hpg_table: dict, k: float = 3.0):
    """Rank (loop, span) pairs by fitted pipe-glass coefficient.

    ``hpg_table`` maps period id -> {loop id -> (n_spans,) array}. Values
    are aggregated over periods by the median; spans above
    median + k * IQR of the aggregated values are flagged.
    Returns a list of HeatLossEntry in descending h_pg order, every
    (loop, span) exactly once.
    """
    acc = {}
    for per_loops in hpg_table.values():
        for loop_id, vals in per_loops.items():
            for span, v in enumerate(np.asarray(vals, dtype=float)):
                acc.setdefault((loop_id, span), []).append(float(v))
    agg = {key: float(np.median(vs)) for key, vs in acc.items()}
    if not agg:
        return []
    values = np.array(list(agg.values()))
    q1, q3 = np.percentile(values, [25, 75])
    threshold = float(np.median(values) + k * (q3 - q1))
    entries = [HeatLossEntry(loop_id=key[0], span=key[1], h_pg=v,
                             flagged=v > threshold)
               for key, v in agg.items()]
    entries.sort(key=lambda e: (-e.h_pg, e.loop_id, e.span))
    return entries


@dataclass
class FitReport:
    """Everything a calibration run reports.

    ``beta`` holds the time-mean mass-flow ratios per (subfield, era);
    ``hpg`` the fitted pipe-glass coefficients per period / loop / span
    (actual values, not softplus pre-images).
    """

    loss_curve: list = field(default_factory=list)
    rmse_per_sensor: dict = field(default_factory=dict)   # loop -> (ns,)
    beta: dict = field(default_factory=dict)              # (sf, era) -> (N,)
    beta_loop_ids: dict = field(default_factory=dict)     # sf -> loop ids
    hpg: dict = field(default_factory=dict)               # period -> {loop: (spans,)}
    self_consistency: dict = field(default_factory=dict)  # era -> R^2
    ranking: list = field(default_factory=list)
    flags: list = field(default_factory=list)             # [(loop, span)]
    clip_events: int = 0
    meta: dict = field(default_factory=dict)

    @property
    def final_loss(self):
        return self.loss_curve[-1] if self.loss_curve else float("nan")

    @property
    def overall_rmse(self):
        """RMSE pooled over all loops and sensors, K."""
        if not self.rmse_per_sensor:
            return float("nan")
        sq = [np.asarray(v) ** 2 for v in self.rmse_per_sensor.values()]
        return float(np.sqrt(np.mean(np.concatenate(sq))))
