"""Disparity-map evaluation against ground truth.

Error families follow the Middlebury conventions: fill factor, TX (error
rate above X), FX scores, MX (sub-pixel error rate among pixels within one
unit), RMS over valid pixels, bad-X, invalid, totbad and avgErr.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, ValidationError
from .stereo import DisparityMap

MASK_NONOCC = 255
MASK_OCCLUDED = 128
MASK_UNDEFINED = 0

T_THRESHOLDS = (0.125, 0.25, 0.5, 0.75, 1.0, 2.0, 4.0)
F_THRESHOLDS = (0.5, 0.75, 1.0)
M_THRESHOLDS = (0.125, 0.25, 0.5, 0.75)
BAD_THRESHOLDS = (0.5, 2.0)

SCHEMA_VERSION = 1


class DegenerateWarning(UserWarning):
    pass


@dataclass(frozen=True)
class GroundTruth:
    disparities: np.ndarray
    mask: np.ndarray | None = None  # MASK_* codes; None = every defined pixel non-occluded

    def __post_init__(self):
        d = np.asarray(self.disparities, dtype=np.float64)
        object.__setattr__(self, "disparities", d)
        if self.mask is None:
            mask = np.where(np.isfinite(d), MASK_NONOCC, MASK_UNDEFINED).astype(np.uint8)
            object.__setattr__(self, "mask", mask)
        else:
            mask = np.asarray(self.mask)
            if mask.shape != d.shape:
                raise DimensionError(f"mask {mask.shape} does not match disparities {d.shape}")
            bad = ~np.isin(mask, (MASK_NONOCC, MASK_OCCLUDED, MASK_UNDEFINED))
            if bad.any():
                raise ValidationError("mask values must be 0, 128 or 255")
            object.__setattr__(self, "mask", mask.astype(np.uint8))

    def domain(self, region: str) -> np.ndarray:
        defined = np.isfinite(self.disparities) & (self.mask != MASK_UNDEFINED)
        if region == "nonocc":
            return defined & (self.mask == MASK_NONOCC)
        if region == "all":
            return defined
        raise ValidationError(f"unknown region {region!r}; use 'nonocc' or 'all'")


@dataclass(frozen=True)
class MetricsReport:
    fill_factor_pct: float | None
    t_metrics: dict
    f_scores: dict
    m_metrics: dict
    rms_valid: float | None
    bad_pct: dict
    invalid_pct: float | None
    totbad_pct: float | None
    avg_err: float | None
    region: str = "nonocc"
    degenerate: bool = False

    def flat(self) -> dict:
        """Metric name -> value, in Table column order."""
        out = {"Fill_Factor": self.fill_factor_pct}
        out.update({f"T{t:g}": self.t_metrics[t] for t in T_THRESHOLDS})
        out.update({f"F{t:.1f}" if t == 1.0 else f"F{t:g}": self.f_scores[t] for t in F_THRESHOLDS})
        out["RMSv"] = self.rms_valid
        out.update({f"M{t:g}": self.m_metrics[t] for t in M_THRESHOLDS})
        out.update({f"bad{t:.1f}": self.bad_pct[t] for t in BAD_THRESHOLDS})
        out["invalid"] = self.invalid_pct
        out["totbad"] = self.totbad_pct
        out["avgErr"] = self.avg_err
        return out

    def to_json(self) -> str:
        body = {"schema_version": SCHEMA_VERSION, "region": self.region,
                "degenerate": self.degenerate, "metrics": self.flat()}
        return json.dumps(body, indent=2)


RATE_COLUMNS = ("Fill_Factor", "T0.125", "T0.25", "T0.5", "T0.75", "T1", "T2", "T4",
                "F0.5", "F0.75", "F1.0")
MIDDEVAL_COLUMNS = ("bad2.0", "invalid", "totbad", "avgErr")
KPI_COLUMNS = ("Fill_Factor", "RMSv", "M0.125", "M0.25", "M0.5", "M0.75", "T1", "T2", "T4",
               "F0.5", "F0.75", "F1.0")


def format_table(report: MetricsReport, columns=RATE_COLUMNS) -> str:
    flat = report.flat()
    cells = ["-" if flat[c] is None else f"{flat[c]:.3f}" for c in columns]
    widths = [max(len(c), len(v)) for c, v in zip(columns, cells)]
    header = "  ".join(c.rjust(w) for c, w in zip(columns, widths))
    row = "  ".join(v.rjust(w) for v, w in zip(cells, widths))
    return header + "\n" + row + "\n"


def _pct(num, den):
    return 100.0 * num / den if den else None


def evaluate(dmap: DisparityMap, gt: GroundTruth, region: str = "nonocc",
             t_over: str = "valid") -> MetricsReport:
    """Evaluate ``dmap`` on pixels with defined ground truth in ``region``.

    ``t_over="all"`` reports TX and bad-X over every evaluable pixel (invalid
    predictions counted as wrong) instead of the jointly valid ones.
    """
    if dmap.values.shape != gt.disparities.shape:
        raise DimensionError(
            f"prediction {dmap.values.shape} and ground truth {gt.disparities.shape} differ")
    if t_over not in ("valid", "all"):
        raise ValidationError("t_over must be 'valid' or 'all'")
    domain = gt.domain(region)
    n_d = int(domain.sum())
    if n_d == 0:
        warnings.warn("empty evaluation domain", DegenerateWarning, stacklevel=2)
        nulls = dict.fromkeys
        return MetricsReport(None, nulls(T_THRESHOLDS), nulls(F_THRESHOLDS), nulls(M_THRESHOLDS),
                             None, nulls(BAD_THRESHOLDS), None, None, None, region, True)
    pred = dmap.values[domain]
    truth = gt.disparities[domain]
    valid = np.isfinite(pred)
    n_v = int(valid.sum())
    err = np.abs(pred[valid] - truth[valid])

    def rate(x):
        if t_over == "all":
            return _pct(int((err > x).sum()) + (n_d - n_v), n_d)
        return _pct(int((err > x).sum()), n_v)

    t = {x: rate(x) for x in T_THRESHOLDS}
    bad = {x: rate(x) for x in BAD_THRESHOLDS}
    near = err[err <= 1.0]
    m = {x: _pct(int((near > x).sum()), near.size) for x in M_THRESHOLDS}
    f = {}
    for x in F_THRESHOLDS:
        good = int((err <= x).sum())
        precision = good / n_v if n_v else 0.0
        recall = good / n_d
        f[x] = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
    invalid = _pct(n_d - n_v, n_d)
    totbad = _pct(int((err > 2.0).sum()) + (n_d - n_v), n_d)
    return MetricsReport(
        fill_factor_pct=_pct(n_v, n_d),
        t_metrics=t,
        f_scores=f,
        m_metrics=m,
        rms_valid=float(math.sqrt((err ** 2).mean())) if n_v else None,
        bad_pct=bad,
        invalid_pct=invalid,
        totbad_pct=totbad,
        avg_err=float(err.mean()) if n_v else None,
        region=region,
    )


def fill_dense(dmap: DisparityMap) -> DisparityMap:
    """Fill invalid pixels with the smaller of the nearest valid values left and right.

    Rows without any valid pixel copy the filled result of the nearest valid row.
    """
    v = dmap.values
    valid = np.isfinite(v)
    if valid.all():
        return dmap
    if not valid.any():
        warnings.warn("no valid disparity to fill from", DegenerateWarning, stacklevel=2)
        return dmap
    h, w = v.shape
    idx = np.where(valid, np.arange(w)[None, :], -1)
    left_idx = np.maximum.accumulate(idx, axis=1)
    idx_r = np.where(valid, np.arange(w)[None, :], w)
    right_idx = np.minimum.accumulate(idx_r[:, ::-1], axis=1)[:, ::-1]
    rows = np.arange(h)[:, None]
    left_val = np.where(left_idx >= 0, v[rows, np.clip(left_idx, 0, w - 1)], np.inf)
    right_val = np.where(right_idx < w, v[rows, np.clip(right_idx, 0, w - 1)], np.inf)
    out = np.where(valid, v, np.minimum(left_val, right_val))
    good_rows = np.flatnonzero(valid.any(axis=1))
    for y in np.flatnonzero(~valid.any(axis=1)):
        src = good_rows[np.argmin(np.abs(good_rows - y))]
        out[y] = out[src]
    return DisparityMap(out)

