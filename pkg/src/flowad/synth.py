"""Labeled synthetic evaluation panels.

A Gaussian ground-truth model is fitted to clean observations and sampled to
produce a normal panel; point and contextual anomalies are then injected
into a fraction `alpha` of fixed-length time slices, touching a fraction
`beta` of the features, with exact cell-level labels.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass
from datetime import datetime, timezone
from math import ceil

import numpy as np

from .dataio import SeriesPanel
from .rng import Xoshiro256

SHRINKAGE = 1e-6


@dataclass
class GaussianGroundTruth:
    mean: np.ndarray  # (N,)
    cov: np.ndarray  # (N, N), symmetric PSD after shrinkage


@dataclass
class InjectionSpec:
    """Anomaly injection controls.

    alpha: fraction of time slices made anomalous.
    beta: fraction of features affected inside each anomalous slice.
    slice_len: steps per anomalous slice (default 6 = half an hour at 5 min).
    """

    alpha: float
    beta: float
    slice_len: int = 6
    seed: int = 0

    def __post_init__(self):
        if not (0.0 <= self.alpha <= 1.0 and 0.0 <= self.beta <= 1.0):
            raise ValueError("alpha and beta must lie in [0, 1]")
        if self.slice_len < 1:
            raise ValueError("slice_len must be >= 1")


POINT, CONTEXTUAL = 1, 2


@dataclass
class LabelGrid:
    """Cell-level 0/1 anomaly labels aligned with a panel.

    `kinds` records how each labeled cell was produced (0 = untouched,
    1 = point, 2 = contextual); it is provenance only and is not exported.
    """

    grid: np.ndarray  # (T, N) uint8
    kinds: np.ndarray | None = None  # (T, N) uint8

    def __post_init__(self):
        if self.kinds is None:
            self.kinds = np.zeros_like(self.grid)

    @property
    def per_timestamp(self) -> np.ndarray:
        """Any-feature OR per row."""
        return (self.grid.sum(axis=1) > 0).astype(np.uint8)


def fit_gaussian(panel: SeriesPanel) -> GaussianGroundTruth:
    """Empirical mean and covariance with a small trace-scaled ridge."""
    if panel.n_steps < 2:
        raise ValueError("fit_gaussian needs at least 2 rows")
    x = panel.values
    mean = x.mean(axis=0)
    centered = x - mean
    cov = centered.T @ centered / x.shape[0]
    cov += SHRINKAGE * np.trace(cov) / panel.n_features * np.eye(panel.n_features)
    return GaussianGroundTruth(mean=mean, cov=cov)


def _lower_factor(cov: np.ndarray) -> np.ndarray:
    if not np.any(cov):
        return np.zeros_like(cov)
    try:
        return np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        bump = SHRINKAGE * np.trace(cov) / cov.shape[0]
        try:
            return np.linalg.cholesky(cov + bump * np.eye(cov.shape[0]))
        except np.linalg.LinAlgError as exc:
            raise ValueError("covariance cannot be factorized even after extra shrinkage") from exc


def sample_ground_truth(model: GaussianGroundTruth, n_steps: int, seed: int,
                        feature_ids=None, start_timestamp: int = 1546300800,
                        step_seconds: int = 300) -> SeriesPanel:
    """Draw n_steps rows as mean + L z with L the lower Cholesky factor."""
    n = len(model.mean)
    feature_ids = feature_ids or [f"f{i}" for i in range(n)]
    chol = _lower_factor(model.cov)
    rng = Xoshiro256(seed)
    z = rng.normal(size=(n_steps, n))
    values = model.mean[None, :] + z @ chol.T
    timestamps = start_timestamp + step_seconds * np.arange(n_steps, dtype=np.int64)
    return SeriesPanel(timestamps, feature_ids, values)


# ---------------------------------------------------------------------------
# anomaly injection
# ---------------------------------------------------------------------------

def _day_index(panel: SeriesPanel) -> np.ndarray:
    """Calendar day ordinal (UTC) per row."""
    return np.array([datetime.fromtimestamp(int(ts), tz=timezone.utc).toordinal()
                     for ts in panel.timestamps])


def _hour_index(panel: SeriesPanel) -> np.ndarray:
    return np.array([datetime.fromtimestamp(int(ts), tz=timezone.utc).hour
                     for ts in panel.timestamps])


def inject_anomalies(panel: SeriesPanel, spec: InjectionSpec) -> tuple[SeriesPanel, LabelGrid]:
    """Inject labeled point and contextual anomalies.

    ceil(alpha*T/slice_len) non-overlapping slices are drawn uniformly; each
    touches ceil(beta*N) uniformly drawn features.  Slices alternate between
    the two anomaly kinds in temporal order:

    - point: every affected cell gets an additive offset drawn from
      U(-g, +g) where g is the feature's maximum absolute value on that
      calendar day;
    - contextual: within the affected feature's calendar day, the one-hour
      value blocks holding the minimum and maximum hourly averages are
      swapped (value multiset of the feature-day is preserved).

    Labels mark exactly the cells whose values changed.
    """
    T, N = panel.n_steps, panel.n_features
    labels = np.zeros((T, N), dtype=np.uint8)
    kinds = np.zeros((T, N), dtype=np.uint8)
    out = panel.values.copy()

    if spec.alpha <= 0.0 or spec.beta <= 0.0:
        return SeriesPanel(panel.timestamps.copy(), list(panel.feature_ids), out), LabelGrid(labels, kinds)
    if spec.alpha * T < spec.slice_len:
        warnings.warn("alpha*T is below one slice; nothing injected")
        return SeriesPanel(panel.timestamps.copy(), list(panel.feature_ids), out), LabelGrid(labels, kinds)
    if spec.slice_len > T:
        raise ValueError("slice_len exceeds the panel length")

    rng = Xoshiro256(spec.seed)
    n_slices = ceil(spec.alpha * T / spec.slice_len)
    n_slots = T // spec.slice_len
    n_slices = min(n_slices, n_slots)
    slots = sorted(rng.sample(n_slots, n_slices))
    n_affected = ceil(spec.beta * N)

    day_of = _day_index(panel)
    hour_of = _hour_index(panel)
    original = panel.values  # anomaly magnitudes come from the clean data
    flipped: set[tuple[int, int]] = set()  # (day, feature) pairs already swapped

    for k, slot in enumerate(slots):
        rows = np.arange(slot * spec.slice_len, (slot + 1) * spec.slice_len)
        feats = rng.sample(N, n_affected)
        if k % 2 == 0:
            _inject_point(out, labels, kinds, original, rows, feats, day_of, rng)
        else:
            _inject_contextual(out, labels, kinds, original, rows, feats, day_of, hour_of, flipped)

    return SeriesPanel(panel.timestamps.copy(), list(panel.feature_ids), out), LabelGrid(labels, kinds)


def _inject_point(out, labels, kinds, original, rows, feats, day_of, rng):
    for t in rows:
        day_rows = day_of == day_of[t]
        for f in feats:
            if labels[t, f]:  # never compose two modifications on one cell
                continue
            g = float(np.max(np.abs(original[day_rows, f])))
            u = rng.uniform(-g, g)
            if u != 0.0:
                out[t, f] = out[t, f] + u
                labels[t, f] = 1
                kinds[t, f] = POINT


def _inject_contextual(out, labels, kinds, original, rows, feats, day_of, hour_of, flipped):
    day = day_of[rows[0]]
    day_rows = np.where(day_of == day)[0]
    hours = sorted(set(hour_of[day_rows].tolist()))
    for f in feats:
        if (day, f) in flipped:
            continue  # a second swap of the same feature-day would undo the first
        flipped.add((day, f))
        averages = {h: original[day_rows[hour_of[day_rows] == h], f].mean() for h in hours}
        h_min = min(hours, key=lambda h: (averages[h], h))
        h_max = max(hours, key=lambda h: (averages[h], -h))
        if h_min == h_max:
            continue
        rows_min = day_rows[hour_of[day_rows] == h_min]
        rows_max = day_rows[hour_of[day_rows] == h_max]
        # swap cell-pairwise; skipping already-labeled pairs keeps the
        # feature-day multiset intact and modifications non-composed
        for ta, tb in zip(rows_min, rows_max):
            if labels[ta, f] or labels[tb, f]:
                continue
            a, b = out[ta, f], out[tb, f]
            if a == b:
                continue
            out[ta, f], out[tb, f] = b, a
            labels[ta, f] = labels[tb, f] = 1
            kinds[ta, f] = kinds[tb, f] = CONTEXTUAL
