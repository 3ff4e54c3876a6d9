"""Panels, congestion rates, imputation, calendar features and windowing.

The substrate of every stage is a :class:`SeriesPanel`: a T x N float64
matrix with uniformly spaced epoch-second timestamps and one identifier per
column.  Missing observations are NaN until :func:`impute` clears them.
"""
from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass
from datetime import datetime, timezone

import numpy as np

SECONDS_PER_DAY = 86400
STD_FLOOR = 1e-8


@dataclass
class SeriesPanel:
    """Uniformly sampled multivariate series with column identifiers."""

    timestamps: np.ndarray  # (T,) int64 epoch seconds, constant spacing
    feature_ids: list[str]
    values: np.ndarray  # (T, N) float64, NaN marks a missing cell

    def __post_init__(self):
        self.timestamps = np.asarray(self.timestamps, dtype=np.int64)
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise ValueError("values must be a T x N matrix")
        if len(self.timestamps) != self.values.shape[0]:
            raise ValueError("timestamps and values disagree on T")
        if len(self.feature_ids) != self.values.shape[1]:
            raise ValueError("feature_ids and values disagree on N")
        if len(self.timestamps) >= 2:
            deltas = np.diff(self.timestamps)
            if deltas.min() <= 0 or deltas.max() != deltas.min():
                raise ValueError("timestamps must be strictly increasing with constant spacing")

    @property
    def n_steps(self) -> int:
        return self.values.shape[0]

    @property
    def n_features(self) -> int:
        return self.values.shape[1]

    @property
    def step_seconds(self) -> int:
        if len(self.timestamps) < 2:
            raise ValueError("panel has fewer than 2 rows")
        return int(self.timestamps[1] - self.timestamps[0])

    def copy(self) -> "SeriesPanel":
        return SeriesPanel(self.timestamps.copy(), list(self.feature_ids), self.values.copy())

    def slice_rows(self, start: int, stop: int) -> "SeriesPanel":
        return SeriesPanel(self.timestamps[start:stop], list(self.feature_ids),
                           self.values[start:stop].copy())


@dataclass
class SpeedPanel:
    """Observed, historical-average and free-flow speeds for one network."""

    observed: SeriesPanel  # harmonic mean speed per step
    historical: SeriesPanel  # historical average speed per step
    free_flow: np.ndarray  # (N,) free-flow speed per feature

    def __post_init__(self):
        self.free_flow = np.asarray(self.free_flow, dtype=np.float64)
        if np.any(self.free_flow <= 0):
            raise ValueError("free-flow speeds must be positive")
        if self.observed.feature_ids != self.historical.feature_ids:
            raise ValueError("observed and historical panels disagree on features")


def congestion_rate(historical_avg, observed, free_flow):
    """(historical average speed - observed speed) / free-flow speed."""
    free_flow = np.asarray(free_flow, dtype=np.float64)
    if np.any(free_flow <= 0):
        raise ValueError("free-flow speed must be positive")
    return (np.asarray(historical_avg, dtype=np.float64) - np.asarray(observed, dtype=np.float64)) / free_flow


def free_flow_speed(observations) -> float:
    """85th percentile of observed speeds (linear-interpolation quantile)."""
    obs = np.asarray(observations, dtype=np.float64)
    obs = obs[np.isfinite(obs)]
    if obs.size == 0:
        raise ValueError("free_flow_speed needs at least one observation")
    return float(np.quantile(obs, 0.85))


def congestion_panel(speeds: SpeedPanel) -> SeriesPanel:
    """Congestion-rate panel derived from the three speed inputs."""
    values = congestion_rate(speeds.historical.values, speeds.observed.values,
                             speeds.free_flow[None, :])
    return SeriesPanel(speeds.observed.timestamps.copy(),
                       list(speeds.observed.feature_ids), values)


# ---------------------------------------------------------------------------
# calendar features
# ---------------------------------------------------------------------------

def time_features(timestamp: int) -> tuple[float, float, float]:
    """(week-of-year, day-of-week, hour-of-day), each normalized to [0, 1].

    week: (ISO week - 1) / 52, day: Monday=0 scaled by 6, hour: hour / 23.
    Timestamps are interpreted in UTC.
    """
    dt = datetime.fromtimestamp(int(timestamp), tz=timezone.utc)
    week = (dt.isocalendar().week - 1) / 52.0
    day = dt.weekday() / 6.0
    hour = dt.hour / 23.0
    return week, day, hour


def time_feature_matrix(timestamps) -> np.ndarray:
    """(T, 3) matrix of normalized calendar features."""
    out = np.empty((len(timestamps), 3), dtype=np.float64)
    for i, ts in enumerate(timestamps):
        out[i] = time_features(int(ts))
    return out


# ---------------------------------------------------------------------------
# imputation
# ---------------------------------------------------------------------------

def week_slot(timestamp: int) -> int:
    """Hour-of-week slot (0..167), Monday 00:00 = 0, in UTC."""
    dt = datetime.fromtimestamp(int(timestamp), tz=timezone.utc)
    return dt.weekday() * 24 + dt.hour


def historical_averages(panel: SeriesPanel) -> np.ndarray:
    """(168, N) mean of observed cells per hour-of-week slot (NaN if never seen)."""
    slots = np.array([week_slot(ts) for ts in panel.timestamps])
    out = np.full((168, panel.n_features), np.nan)
    for s in range(168):
        rows = panel.values[slots == s]
        if rows.size:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", RuntimeWarning)
                out[s] = np.nanmean(rows, axis=0)
    return out


def impute(panel: SeriesPanel, neighbor_map: dict[str, list[str]],
           historical_avg: np.ndarray | None = None) -> SeriesPanel:
    """Fill missing cells from neighbors at the same timestamp, then from
    hour-of-week historical averages.

    `neighbor_map` must have an entry (possibly empty) for every feature.
    `historical_avg` is a (168, N) table; when omitted it is computed from
    the panel's own observed cells.  A cell that neither strategy can fill
    raises with its location.
    """
    missing_features = [f for f in panel.feature_ids if f not in neighbor_map]
    if missing_features:
        raise ValueError(f"neighbor_map lacks entries for {missing_features}")
    if historical_avg is None:
        historical_avg = historical_averages(panel)

    col = {f: i for i, f in enumerate(panel.feature_ids)}
    values = panel.values.copy()
    gap_rows, gap_cols = np.where(np.isnan(values))
    slots = np.array([week_slot(ts) for ts in panel.timestamps])
    for t, j in zip(gap_rows, gap_cols):
        fid = panel.feature_ids[j]
        neigh = [panel.values[t, col[g]] for g in neighbor_map[fid]
                 if g in col and np.isfinite(panel.values[t, col[g]])]
        if neigh:
            values[t, j] = float(np.mean(neigh))
            continue
        hist = historical_avg[slots[t], j]
        if np.isfinite(hist):
            values[t, j] = hist
            continue
        raise ValueError(
            f"cannot impute cell (t={t}, feature={fid!r}): no neighbor value "
            f"and no historical average for hour-of-week slot {slots[t]}")
    return SeriesPanel(panel.timestamps.copy(), list(panel.feature_ids), values)


# ---------------------------------------------------------------------------
# windows
# ---------------------------------------------------------------------------

@dataclass
class SlidingWindow:
    """One context block plus one prediction block cut from a panel."""

    context: np.ndarray  # (context_len, N)
    prediction: np.ndarray  # (pred_len, N)
    context_time: np.ndarray  # (context_len, 3)
    prediction_time: np.ndarray  # (pred_len, 3)
    start: int  # absolute row offset of the context in the source panel

    @property
    def pred_start(self) -> int:
        return self.start + self.context.shape[0]


def make_windows(panel: SeriesPanel, context_len: int, pred_len: int,
                 stride: int) -> list[SlidingWindow]:
    """Windows at offsets 0, stride, 2*stride, ... fully inside the panel."""
    if context_len < 1 or pred_len < 1:
        raise ValueError("context and prediction lengths must be >= 1")
    if stride < 1:
        raise ValueError("stride must be >= 1")
    total = context_len + pred_len
    if total > panel.n_steps:
        warnings.warn(f"panel of {panel.n_steps} steps is shorter than one window ({total})")
        return []
    feats = time_feature_matrix(panel.timestamps)
    windows = []
    for start in range(0, panel.n_steps - total + 1, stride):
        mid = start + context_len
        windows.append(SlidingWindow(
            context=panel.values[start:mid].copy(),
            prediction=panel.values[mid:start + total].copy(),
            context_time=feats[start:mid].copy(),
            prediction_time=feats[mid:start + total].copy(),
            start=start,
        ))
    return windows


# ---------------------------------------------------------------------------
# standardization
# ---------------------------------------------------------------------------

@dataclass
class Standardizer:
    """Per-feature affine map fitted on training data (population std)."""

    mean: np.ndarray
    std: np.ndarray

    def apply(self, values: np.ndarray) -> np.ndarray:
        return (values - self.mean) / self.std

    def invert(self, values: np.ndarray) -> np.ndarray:
        return values * self.std + self.mean

    def apply_panel(self, panel: SeriesPanel) -> SeriesPanel:
        return SeriesPanel(panel.timestamps.copy(), list(panel.feature_ids),
                           self.apply(panel.values))

    def invert_panel(self, panel: SeriesPanel) -> SeriesPanel:
        return SeriesPanel(panel.timestamps.copy(), list(panel.feature_ids),
                           self.invert(panel.values))


def fit_standardizer(panel: SeriesPanel) -> Standardizer:
    if panel.n_steps < 2:
        raise ValueError("standardizer needs at least 2 rows")
    mean = panel.values.mean(axis=0)
    std = panel.values.std(axis=0)  # population convention
    if np.any(std < STD_FLOOR):
        constant = [panel.feature_ids[i] for i in np.where(std < STD_FLOOR)[0]]
        warnings.warn(f"constant features {constant}: std floored at {STD_FLOOR}")
        std = np.maximum(std, STD_FLOOR)
    return Standardizer(mean=mean, std=std)


# ---------------------------------------------------------------------------
# CSV interchange
# ---------------------------------------------------------------------------

def parse_timestamp(text: str) -> int:
    text = text.strip()
    if text.endswith("Z"):
        text = text[:-1] + "+00:00"
    dt = datetime.fromisoformat(text)
    if dt.tzinfo is None:
        dt = dt.replace(tzinfo=timezone.utc)
    return int(dt.timestamp())


def format_timestamp(ts: int) -> str:
    return datetime.fromtimestamp(int(ts), tz=timezone.utc).strftime("%Y-%m-%dT%H:%M:%S")


def read_panel(path) -> SeriesPanel:
    """Read the interchange CSV: header `timestamp,<ids...>`, ISO-8601 first
    column, decimal values, empty or `NaN` for missing cells."""
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or header[0].strip().lower() != "timestamp":
            raise ValueError(f"{path}: first header column must be 'timestamp'")
        feature_ids = [h.strip() for h in header[1:]]
        timestamps, rows = [], []
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(feature_ids) + 1:
                raise ValueError(f"{path}:{lineno}: expected {len(feature_ids) + 1} columns")
            timestamps.append(parse_timestamp(row[0]))
            rows.append([float("nan") if c.strip() in ("", "NaN", "nan") else float(c)
                         for c in row[1:]])
    if not rows:
        raise ValueError(f"{path}: no data rows")
    return SeriesPanel(np.asarray(timestamps, dtype=np.int64), feature_ids,
                       np.asarray(rows, dtype=np.float64))


def write_panel(panel: SeriesPanel, path, fmt=repr) -> None:
    """Write the interchange CSV; NaN cells become empty fields."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["timestamp"] + list(panel.feature_ids))
        for ts, row in zip(panel.timestamps, panel.values):
            writer.writerow([format_timestamp(ts)]
                            + ["" if not np.isfinite(v) else fmt(float(v)) for v in row])


def read_speed_files(observed_path, historical_path, free_flow_path) -> SpeedPanel:
    """Three-file speed input; the free-flow file carries a single row."""
    observed = read_panel(observed_path)
    historical = read_panel(historical_path)
    ff_panel = read_panel(free_flow_path)
    if ff_panel.n_steps != 1:
        raise ValueError("free-flow file must contain exactly one row")
    if ff_panel.feature_ids != observed.feature_ids:
        raise ValueError("free-flow features disagree with the observed panel")
    return SpeedPanel(observed=observed, historical=historical,
                      free_flow=ff_panel.values[0])
