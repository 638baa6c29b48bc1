"""Quantitative evaluation: photometric error, frame-pair deltas, correlation.

The per-pixel photometric error of a correspondence set is defined here as
the mean absolute discrepancy between the two corrected intensities, times
100.  Absolute values of this metric are implementation-defined; comparisons
across calibration modes (ratios and orderings) are the meaningful output.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import norm

from .errors import ConfigError, UndefinedMetricError
from .model import ParamChain, calibrate_pixel, identity
from .spatial import SpatialField

__all__ = [
    "MODES",
    "photometric_error",
    "photometric_delta",
    "pearson",
    "pearson_confidence",
    "threshold_sweep",
    "EvalReport",
]

MODES = ("uncalibrated", "temporal", "temporal+spatial")
DEFAULT_SWEEP_THRESHOLDS = (0.05, 0.10, 0.15)


def photometric_error(
    cset,
    chain: ParamChain | None = None,
    spatial: SpatialField | None = None,
    mode: str = "uncalibrated",
) -> float:
    """Mean corrected-intensity discrepancy over a correspondence set, in %.

    Mode "uncalibrated" compares raw intensities, "temporal" undoes each
    frame's gain/offset, "temporal+spatial" additionally subtracts the bias
    field sampled at each pixel.
    """
    if mode not in MODES:
        raise ConfigError(f"unknown mode {mode!r}, expected one of {MODES}")
    if len(cset) == 0:
        raise UndefinedMetricError("empty correspondence set")
    if mode == "uncalibrated":
        p_from = identity()
        p_to = identity()
    else:
        if chain is None:
            raise ConfigError(f"mode {mode!r} requires a parameter chain")
        p_from = chain.entry(cset.from_frame)
        p_to = chain.entry(cset.to_frame)
    if mode == "temporal+spatial":
        if spatial is None:
            raise ConfigError("mode 'temporal+spatial' requires a spatial field")
        r_from = spatial.sample(cset.xy_from[:, 0], cset.xy_from[:, 1])
        r_to = spatial.sample(cset.xy_to[:, 0], cset.xy_to[:, 1])
    else:
        r_from = 0.0
        r_to = 0.0
    corrected_from = calibrate_pixel(cset.i_from, p_from, r_from)
    corrected_to = calibrate_pixel(cset.i_to, p_to, r_to)
    return float(100.0 * np.mean(np.abs(corrected_to - corrected_from)))


def photometric_delta(chain: ParamChain, t: int) -> float:
    """Magnitude of the parameter change between frames t-1 and t.

    Euclidean norm on the (c, b) pairs of the reference-relative entries,
    with c = exp(a) + b.
    """
    if t < chain.reference_frame + 1:
        raise UndefinedMetricError(f"delta needs two frames, got t={t}")
    prev = chain.entry(t - 1)
    cur = chain.entry(t)
    return math.hypot(prev.c - cur.c, prev.b - cur.b)


def pearson(xs, ys) -> float:
    """Sample Pearson correlation coefficient."""
    x = np.asarray(xs, dtype=np.float64)
    y = np.asarray(ys, dtype=np.float64)
    if x.shape != y.shape or x.size < 2:
        raise UndefinedMetricError("need two equal-length series of >= 2 samples")
    xd = x - x.mean()
    yd = y - y.mean()
    sx = np.sqrt(np.sum(xd**2))
    sy = np.sqrt(np.sum(yd**2))
    if sx == 0.0 or sy == 0.0:
        raise UndefinedMetricError("zero variance in a series")
    return float(np.sum(xd * yd) / (sx * sy))


def pearson_confidence(xs, ys, level: float = 0.95) -> tuple[float, float, float]:
    """(rho, lower, upper) with the interval from the Fisher z-transform."""
    rho = pearson(xs, ys)
    n = len(np.asarray(xs))
    if n < 4:
        raise UndefinedMetricError("confidence interval needs >= 4 samples")
    z = math.atanh(max(min(rho, 1 - 1e-15), -1 + 1e-15))
    se = 1.0 / math.sqrt(n - 3)
    zcrit = float(norm.ppf(0.5 + level / 2.0))
    return rho, math.tanh(z - zcrit * se), math.tanh(z + zcrit * se)


def threshold_sweep(
    deltas,
    improvements,
    thresholds=DEFAULT_SWEEP_THRESHOLDS,
) -> list[tuple[float, float | None, int]]:
    """Correlation between improvement and delta, restricted to large deltas.

    For each threshold, correlates the two series over pairs with
    delta >= threshold.  Entries with fewer than two survivors (or no
    variance) carry ``None`` for the coefficient.
    """
    d = np.asarray(deltas, dtype=np.float64)
    imp = np.asarray(improvements, dtype=np.float64)
    if d.shape != imp.shape:
        raise UndefinedMetricError("series must be aligned")
    out = []
    for threshold in thresholds:
        mask = d >= threshold
        n = int(mask.sum())
        if n < 2:
            out.append((float(threshold), None, n))
            continue
        try:
            rho = pearson(d[mask], imp[mask])
        except UndefinedMetricError:
            rho = None
        out.append((float(threshold), rho, n))
    return out


@dataclass
class EvalReport:
    """Per-frame evaluation results plus summary statistics."""

    frames: list[int]
    errors: dict[str, list[float]]  # mode -> per-frame mean error (%)
    deltas: list[float]  # photometric delta per frame (NaN for frame 1)
    sweep: list[tuple[float, float | None, int]]
    param_rmse: dict[str, float] | None = None  # vs. ground truth, if known
    summary: dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        if not self.summary:
            self.summary = {
                mode: float(np.mean(vals)) for mode, vals in self.errors.items() if vals
            }

    def to_json(self, path) -> None:
        payload = {
            "frames": self.frames,
            "errors": self.errors,
            "deltas": [None if math.isnan(d) else d for d in self.deltas],
            "sweep": [
                {"threshold": t, "rho": rho, "n": n} for t, rho, n in self.sweep
            ],
            "param_rmse": self.param_rmse,
            "summary": self.summary,
        }
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(payload, fh, indent=2)

    def to_csv(self, path) -> None:
        modes = list(self.errors)
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["frame"] + [f"error_{m}" for m in modes] + ["delta"])
            for i, frame in enumerate(self.frames):
                row = [frame]
                for m in modes:
                    vals = self.errors[m]
                    row.append(repr(float(vals[i])) if i < len(vals) else "")
                d = self.deltas[i]
                row.append("" if math.isnan(d) else repr(float(d)))
                writer.writerow(row)

    def format_table(self) -> str:
        lines = []
        lines.append("mean photometric error per pixel (%)")
        width = max(len(m) for m in self.errors) + 2
        for mode, value in self.summary.items():
            lines.append(f"  {mode:<{width}} {value:8.4f}")
        if self.param_rmse:
            lines.append("parameter recovery RMSE vs. ground truth")
            for name, value in self.param_rmse.items():
                lines.append(f"  {name:<{width}} {value:10.3e}")
        lines.append("delta-threshold sweep (threshold, rho, n)")
        for t, rho, n in self.sweep:
            rho_s = "undefined" if rho is None else f"{rho:+.3f}"
            lines.append(f"  {t:>9.3f}  {rho_s:>10}  {n:>6d}")
        return "\n".join(lines)
