"""Fit metrics, a nonlinearity heuristic, and threshold range extraction."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np

from .core import MarginalCurve
from .dataset import Dataset
from .uncertainty import ConfidenceBand


@dataclass(frozen=True)
class MetricsReport:
    rmse_full: float
    rmse_marginal: float
    coverage: Mapping[str, float]  # percent per covariate
    coverage_mean: float  # unweighted mean over covariates
    coverage_pooled: float  # all (covariate, sample) pairs together
    bends: Mapping[str, "BendReport"]


@dataclass(frozen=True)
class BendReport:
    max_bend: float  # degrees
    threshold: float
    flagged: bool


@dataclass(frozen=True)
class RangeSet:
    covariate: str
    threshold: float
    above: tuple[tuple[float, float], ...]
    below: tuple[tuple[float, float], ...]


# -- errors ------------------------------------------------------------------


def rmse_full(predictions, x) -> float:
    """Root-mean-square error of full-model predictions."""
    p = np.asarray(predictions, dtype=float)
    x = np.asarray(x, dtype=float)
    if p.shape != x.shape:
        raise ValueError(f"length mismatch: {p.shape} predictions vs {x.shape} responses")
    return float(np.sqrt(np.mean((p - x) ** 2)))


def rmse_marginal(curves: Mapping[str, np.ndarray], x, covariates=None) -> float:
    """Root-mean-square error pooled over single-covariate marginals.

    ``curves[name]`` holds that covariate's marginal evaluated at every
    sample's own value of it. ``covariates`` (default: all keys) selects the
    covariates that enter the average.
    """
    x = np.asarray(x, dtype=float)
    names = list(curves) if covariates is None else list(covariates)
    if not names:
        raise ValueError("need at least one marginal curve")
    total = 0.0
    for name in names:
        if name not in curves:
            raise KeyError(f"no marginal curve for covariate {name!r}")
        c = np.asarray(curves[name], dtype=float)
        if c.shape != x.shape:
            raise ValueError(f"curve {name!r} has {c.shape} values, expected {x.shape}")
        total += float(np.sum((c - x) ** 2))
    return float(np.sqrt(total / (x.size * len(names))))


# -- coverage ----------------------------------------------------------------


def band_at(points, band: ConfidenceBand, values) -> tuple[np.ndarray, np.ndarray]:
    """Lower/upper band interpolated at ``values`` (clamped to the eval range)."""
    pts = np.asarray(points, dtype=float)
    order = np.argsort(pts)
    pts = pts[order]
    v = np.asarray(values, dtype=float)
    lo = np.interp(v, pts, np.asarray(band.lower, dtype=float)[order])
    hi = np.interp(v, pts, np.asarray(band.upper, dtype=float)[order])
    return lo, hi


def ci_coverage(
    dataset: Dataset, bands: Mapping[str, tuple[np.ndarray, ConfidenceBand]]
) -> tuple[dict[str, float], float, float]:
    """Percent of samples whose response lies inside each covariate's band.

    ``bands[name] = (eval_points, band)``. Samples with a missing value of
    that covariate are left out of its count. Returns per-covariate percents,
    their unweighted mean, and the pooled percent over all pairs.
    """
    if not bands:
        raise ValueError("need at least one band")
    per, hits, total = {}, 0, 0
    for name, (points, band) in bands.items():
        cov = dataset.covariate(name)
        if cov.spec.is_categorical:
            labels = list(points)
            idx = {lab: j for j, lab in enumerate(labels)}
            keep = np.array([v in idx for v in cov.values])
            j = np.array([idx[v] for v in cov.values[keep]], dtype=int)
            lo, hi = np.asarray(band.lower)[j], np.asarray(band.upper)[j]
        else:
            z = np.asarray(cov.values, dtype=float)
            keep = np.isfinite(z)
            lo, hi = band_at(points, band, z[keep])
        x = dataset.x[keep]
        inside = (lo <= x) & (x <= hi)
        n = int(keep.sum())
        per[name] = 100.0 * inside.sum() / n if n else float("nan")
        hits += int(inside.sum())
        total += n
    valid = [v for v in per.values() if v == v]
    mean = float(np.mean(valid)) if valid else float("nan")
    pooled = 100.0 * hits / total if total else float("nan")
    return per, mean, pooled


# -- nonlinearity ------------------------------------------------------------


def detect_bend(curve: MarginalCurve, threshold_deg: float = 10.0) -> BendReport:
    """Largest turning angle between successive chords of a curve.

    Both axes are rescaled to [0, 1] first, so the result does not depend on
    units. A curve with constant response has no bend.
    """
    t = np.asarray(curve.points, dtype=float)
    y = np.asarray(curve.mean, dtype=float).ravel()
    if t.size < 3:
        raise ValueError("bend detection needs at least 3 points")
    order = np.argsort(t, kind="stable")
    t, y = t[order], y[order]
    span_t = t[-1] - t[0]
    span_y = y.max() - y.min()
    if span_y == 0 or span_t == 0:
        return BendReport(0.0, threshold_deg, False)
    u = np.column_stack([(t - t[0]) / span_t, (y - y.min()) / span_y])
    seg = np.diff(u, axis=0)
    seg = seg[np.hypot(seg[:, 0], seg[:, 1]) > 0]
    if len(seg) < 2:
        return BendReport(0.0, threshold_deg, False)
    a, b = seg[:-1], seg[1:]
    cross = a[:, 0] * b[:, 1] - a[:, 1] * b[:, 0]
    dot = (a * b).sum(axis=1)
    angles = np.degrees(np.abs(np.arctan2(cross, dot)))
    max_bend = float(angles.max())
    return BendReport(max_bend, threshold_deg, max_bend > threshold_deg)


# -- ranges ------------------------------------------------------------------


def extract_ranges(curve: MarginalCurve, threshold: float) -> RangeSet:
    """Intervals where the piecewise-linear curve lies above / below ``threshold``.

    Boundaries are the exact crossing points on each linear segment; points
    where the curve equals the threshold separate intervals.
    """
    t = np.asarray(curve.points, dtype=float)
    y = np.asarray(curve.mean, dtype=float).ravel()
    if t.size == 0:
        raise ValueError("empty curve")
    order = np.argsort(t, kind="stable")
    t, y = t[order], y[order]
    name = curve.covariates[0]
    if t.size == 1 or t[0] == t[-1]:
        iv = ((float(t[0]), float(t[-1])),)
        above = iv if y[0] > threshold else ()
        below = iv if y[0] < threshold else ()
        return RangeSet(name, threshold, above, below)

    # breakpoints: domain ends, nodes on the threshold, and strict crossings
    cuts = [t[0]]
    for i in range(t.size - 1):
        if y[i] == threshold and t[i] > cuts[-1]:
            cuts.append(t[i])
        d0, d1 = y[i] - threshold, y[i + 1] - threshold
        if np.sign(d0) * np.sign(d1) < 0:
            c = t[i] + (t[i + 1] - t[i]) * d0 / (d0 - d1)
            if c > cuts[-1]:
                cuts.append(c)
    if y[-1] == threshold and t[-1] > cuts[-1]:
        cuts.append(t[-1])
    if t[-1] > cuts[-1]:
        cuts.append(t[-1])

    above, below = [], []
    for a, b in zip(cuts[:-1], cuts[1:]):
        side = _side(t, y - threshold, a, b)
        if side > 0:
            above.append((float(a), float(b)))
        elif side < 0:
            below.append((float(a), float(b)))
    return RangeSet(name, threshold, tuple(above), tuple(below))


def _side(t: np.ndarray, d: np.ndarray, a: float, b: float) -> float:
    """Sign of the curve offset ``d`` on the open interval (a, b) between cuts.

    Read off node values rather than an interpolated midpoint, which can
    round onto the threshold when the offset is tiny.
    """
    inner = (t > a) & (t < b)
    if inner.any():
        return float(np.sign(d[inner][np.argmax(np.abs(d[inner]))]))
    i = min(int(np.searchsorted(t, a, side="right")) - 1, t.size - 2)
    d0, d1 = d[i], d[i + 1]
    if np.sign(d0) * np.sign(d1) < 0:
        c = t[i] + (t[i + 1] - t[i]) * d0 / (d0 - d1)
        return float(np.sign(d0 if b <= c else d1))
    return float(np.sign(d0 + d1))
