"""Anomaly decisions from log-densities.

Scores are negative conditional log densities (higher = more anomalous),
averaged where sliding windows overlap.  Thresholds are either a static
F1-optimal cut searched on a labeled prefix, or the streaming extreme-value
threshold (peaks-over-threshold with a Generalized Pareto tail fit, updated
online).  Flagged timestamps are narrowed to individual features with
Gaussian-kernel density estimates over period-matched history.  A linear
autoregressive scorer serves as the reference baseline.
"""
from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import brentq

from .dataio import SeriesPanel, format_timestamp, make_windows
from .train import DetectorModel, window_log_probs

MIN_EXCESSES = 8


@dataclass
class AnomalyScoreSeries:
    """Per-timestamp anomaly scores; NaN rows were never covered by a window."""

    timestamps: np.ndarray  # (T,) int64
    scores: np.ndarray  # (T,) float64, NaN = unscored
    coverage: np.ndarray  # (T,) int64

    @property
    def scored(self) -> np.ndarray:
        return self.coverage > 0


# ---------------------------------------------------------------------------
# scoring
# ---------------------------------------------------------------------------

def score_windows(model: DetectorModel, windows, n_steps: int, timestamps,
                  batch_size: int = 256) -> AnomalyScoreSeries:
    """Average negative log density per timestamp over covering windows."""
    sums = np.zeros(n_steps)
    cover = np.zeros(n_steps, dtype=np.int64)
    for i in range(0, len(windows), batch_size):
        chunk = windows[i:i + batch_size]
        lp = window_log_probs(chunk, model, training=False).value
        B = len(chunk)
        p = chunk[0].prediction.shape[0]
        for t in range(p):
            rows = lp[t * B:(t + 1) * B]
            for b, w in enumerate(chunk):
                idx = w.pred_start + t
                sums[idx] += -rows[b]
                cover[idx] += 1
    scores = np.full(n_steps, np.nan)
    hit = cover > 0
    scores[hit] = sums[hit] / cover[hit]
    return AnomalyScoreSeries(timestamps=np.asarray(timestamps, dtype=np.int64),
                              scores=scores, coverage=cover)


def score_panel(model: DetectorModel, panel: SeriesPanel,
                stride: int | None = None) -> AnomalyScoreSeries:
    """Standardize with the model's standardizer, window and score a panel."""
    if model.standardizer is None:
        raise ValueError("model carries no standardizer; score raw windows instead")
    stride = stride or model.pred_len
    std_panel = model.standardizer.apply_panel(panel)
    windows = make_windows(std_panel, model.context_len, model.pred_len, stride)
    return score_windows(model, windows, panel.n_steps, panel.timestamps)


# ---------------------------------------------------------------------------
# static thresholding
# ---------------------------------------------------------------------------

def _f1_at(scores, labels, eps):
    flags = scores > eps
    tp = np.sum(flags & (labels == 1))
    fp = np.sum(flags & (labels == 0))
    fn = np.sum(~flags & (labels == 1))
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return f1, recall


def static_threshold(scores, labels, grid_size: int = 200) -> float:
    """F1-maximizing cut over quantile-spaced candidates on a labeled prefix.

    Flag rule: score > epsilon.  Ties break toward higher recall, then the
    lower threshold.  A single-class prefix cannot rank thresholds.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(np.int64)
    if scores.shape != labels.shape:
        raise ValueError("scores and labels must align")
    classes = set(np.unique(labels).tolist())
    if classes != {0, 1}:
        raise ValueError("prefix must contain both classes; for unlabeled "
                         "streams use the streaming (SPOT) threshold instead")
    candidates = np.unique(np.quantile(scores, np.linspace(0.0, 1.0, grid_size)))
    best = None
    for eps in candidates:
        f1, recall = _f1_at(scores, labels, eps)
        key = (f1, recall, -eps)
        if best is None or key > best[0]:
            best = (key, eps)
    return float(best[1])


# ---------------------------------------------------------------------------
# POT / GPD tail fitting (Grimshaw's profile-likelihood trick)
# ---------------------------------------------------------------------------

@dataclass
class GpdFit:
    gamma: float
    sigma: float
    method: str  # "grimshaw" | "mom"


def gpd_log_likelihood(y: np.ndarray, gamma: float, sigma: float) -> float:
    """Log-likelihood of excesses under GPD(gamma, sigma, mu=0)."""
    if sigma <= 0:
        return -np.inf
    n = len(y)
    if abs(gamma) < 1e-12:
        return -n * math.log(sigma) - float(np.sum(y)) / sigma
    tail = 1.0 + gamma * y / sigma
    if np.any(tail <= 0):
        return -np.inf
    return -n * math.log(sigma) - (1.0 + 1.0 / gamma) * float(np.sum(np.log(tail)))


def _mom_gpd(y: np.ndarray) -> tuple[float, float]:
    m = float(np.mean(y))
    v = float(np.var(y))
    if v < 1e-12:
        # constant excesses: near-uniform fit supported on [0, mean]
        return -0.9, 0.9 * m
    gamma = 0.5 * (1.0 - m * m / v)
    sigma = 0.5 * m * (1.0 + m * m / v)
    return max(gamma, -0.99), max(sigma, 1e-12)


def _grimshaw_candidates(y: np.ndarray, n_points: int = 24) -> list[tuple[float, float]]:
    """(gamma, sigma) candidates from roots of the profile-likelihood equation."""
    y_min, y_max, y_mean = float(y.min()), float(y.max()), float(y.mean())
    if y_max - y_min < 1e-12:
        return []

    def w(theta: float) -> float:
        s = 1.0 + theta * y
        return (1.0 + float(np.mean(np.log(s)))) * float(np.mean(1.0 / s)) - 1.0

    eps = 1e-8 / max(y_mean, 1e-8)
    lo = -1.0 / y_max + eps
    intervals = [(lo, -eps),
                 (2 * (y_mean - y_min) / (y_mean * y_min),
                  2 * (y_mean - y_min) / (y_min * y_min))]
    roots = []
    for a, b in intervals:
        if not (np.isfinite(a) and np.isfinite(b)) or a >= b:
            continue
        grid = np.linspace(a, b, n_points)
        vals = np.array([w(t) for t in grid])
        for i in range(len(grid) - 1):
            if np.isfinite(vals[i]) and np.isfinite(vals[i + 1]) and vals[i] * vals[i + 1] < 0:
                try:
                    roots.append(brentq(w, grid[i], grid[i + 1]))
                except ValueError:
                    continue
    out = []
    for theta in roots:
        if abs(theta) < 1e-12:
            continue
        gamma = float(np.mean(np.log(1.0 + theta * y)))
        sigma = gamma / theta
        if sigma > 0 and gamma > -1:
            out.append((gamma, sigma))
    return out


SHAPE_MIN_EXCESSES = 200


def pot_fit(excesses, shape_min: int = SHAPE_MIN_EXCESSES) -> GpdFit:
    """Best-likelihood GPD fit over Grimshaw root candidates, the exponential
    limit (gamma=0) and the method-of-moments estimate; falls back to pure
    method-of-moments when the root search yields nothing.

    The shape is only estimated once `shape_min` excesses exist: below that
    the tail-index likelihood is too flat and spuriously short tails would
    clamp the alarm level, so the exponential limit is used.
    """
    y = np.asarray(excesses, dtype=np.float64)
    if len(y) < MIN_EXCESSES:
        raise ValueError(f"need at least {MIN_EXCESSES} excesses, got {len(y)}")
    if np.any(y <= 0):
        raise ValueError("excesses must be strictly positive")
    root_cands = _grimshaw_candidates(y)
    if not root_cands:
        gamma, sigma = _mom_gpd(y)
        return GpdFit(gamma=gamma, sigma=sigma, method="mom")
    if len(y) < shape_min:
        return GpdFit(gamma=0.0, sigma=float(np.mean(y)), method="exp")
    candidates = root_cands + [(0.0, float(np.mean(y))), _mom_gpd(y)]
    gamma, sigma = max(candidates, key=lambda c: gpd_log_likelihood(y, *c))
    return GpdFit(gamma=gamma, sigma=sigma, method="grimshaw")


# ---------------------------------------------------------------------------
# SPOT streaming threshold
# ---------------------------------------------------------------------------

@dataclass
class ThresholdState:
    """Streaming peaks-over-threshold state (single-owner)."""

    t: float  # fixed initial threshold
    q: float  # risk
    level: float
    n: int  # values observed
    excesses: list[float]
    gamma: float | None
    sigma: float | None
    z_q: float

    @property
    def n_excess(self) -> int:
        return len(self.excesses)


def _alarm_level(state: ThresholdState) -> float:
    r = state.q * state.n / state.n_excess
    if abs(state.gamma) < 1e-12:
        return state.t - state.sigma * math.log(r)
    return state.t + (state.sigma / state.gamma) * (r ** -state.gamma - 1.0)


def spot_init(init_scores, q: float = 1e-4, level: float = 0.98) -> ThresholdState:
    """Calibrate on an initial batch: empirical `level` quantile as the fixed
    threshold, GPD fit on its excesses, extreme quantile as the alarm level."""
    scores = np.asarray(init_scores, dtype=np.float64)
    if len(scores) < 100:
        raise ValueError("SPOT initialization needs at least 100 values")
    if not 0.0 < q < 1.0 - level:
        raise ValueError("require 0 < q < 1 - level (the tail mass above t)")
    t = float(np.quantile(scores, level))
    excesses = (scores[scores > t] - t).tolist()
    state = ThresholdState(t=t, q=q, level=level, n=len(scores),
                           excesses=excesses, gamma=None, sigma=None, z_q=np.nan)
    if len(excesses) < MIN_EXCESSES:
        warnings.warn("too few excesses for a tail fit; using the empirical "
                      "1-q quantile until more arrive")
        state.z_q = float(np.quantile(scores, 1.0 - q))
        return state
    fit = pot_fit(np.asarray(excesses))
    state.gamma, state.sigma = fit.gamma, fit.sigma
    state.z_q = _alarm_level(state)
    return state


def spot_update(state: ThresholdState, value: float) -> tuple[ThresholdState, bool]:
    """One streaming step.  Values above the alarm level flag an anomaly and
    leave the state untouched; values in (t, z_q] enter the tail and trigger
    a refit; everything else only grows the count."""
    if value > state.z_q:
        return state, True
    if value > state.t:
        state.excesses.append(value - state.t)
        state.n += 1
        if state.n_excess >= MIN_EXCESSES:
            try:
                fit = pot_fit(np.asarray(state.excesses))
                state.gamma, state.sigma = fit.gamma, fit.sigma
                state.z_q = _alarm_level(state)
            except ValueError as exc:
                warnings.warn(f"tail refit failed ({exc}); keeping z_q")
    else:
        state.n += 1
    return state, False


def run_spot(scores, q: float = 1e-4, level: float = 0.98,
             n_init: int = 1000):
    """Initialize on the first `n_init` scores, then stream the rest.

    Returns (flags over the streamed part, threshold trace, final state).
    """
    scores = np.asarray(scores, dtype=np.float64)
    if len(scores) <= n_init:
        raise ValueError("not enough scores beyond the initialization batch")
    state = spot_init(scores[:n_init], q=q, level=level)
    flags = np.zeros(len(scores) - n_init, dtype=np.uint8)
    trace = np.empty(len(scores) - n_init)
    for i, v in enumerate(scores[n_init:]):
        state, flagged = spot_update(state, float(v))
        flags[i] = flagged
        trace[i] = state.z_q
    return flags, trace, state


# ---------------------------------------------------------------------------
# KDE diagnosis
# ---------------------------------------------------------------------------

@dataclass
class KdeModel:
    samples: np.ndarray
    bandwidth: float
    threshold: float  # densities below this implicate the feature


def silverman_bandwidth(x: np.ndarray) -> float:
    x = np.asarray(x, dtype=np.float64)
    return max(1.06 * float(np.std(x)) * len(x) ** (-1 / 5), 1e-3)


def kde_density(samples, bandwidth: float, x):
    """Gaussian-kernel density; the direct sum (1/nh) sum phi((x - xi)/h)."""
    samples = np.asarray(samples, dtype=np.float64)
    x = np.atleast_1d(np.asarray(x, dtype=np.float64))
    u = (x[:, None] - samples[None, :]) / bandwidth
    dens = np.exp(-0.5 * u * u).sum(axis=1) / (len(samples) * bandwidth * math.sqrt(2 * math.pi))
    return dens if dens.size > 1 else float(dens[0])


def kde_fit(history, validation) -> KdeModel:
    """Bandwidth by Silverman's rule on the history; the implication cut is
    the 1st percentile of validation densities."""
    history = np.asarray(history, dtype=np.float64)
    validation = np.asarray(validation, dtype=np.float64)
    if len(history) < 1:
        raise ValueError("kde_fit needs history values")
    if len(history) < 5:
        warnings.warn("fewer than 5 history values; the density estimate is crude")
    h = silverman_bandwidth(history)
    if len(validation) == 0:
        warnings.warn("empty validation split; thresholding on history densities")
        validation = history
    dens = kde_density(history, h, validation)
    threshold = float(np.percentile(np.atleast_1d(dens), 1.0))
    return KdeModel(samples=history, bandwidth=h, threshold=threshold)


@dataclass
class DiagnosisResult:
    """Flagged timestamp (panel row) -> implicated features with densities."""

    implicated: dict[int, dict[str, float]] = field(default_factory=dict)
    thresholds: dict[int, dict[str, float]] = field(default_factory=dict)

    def features_at(self, idx: int) -> set[str]:
        return set(self.implicated.get(idx, {}))


def diagnose(panel: SeriesPanel, flagged_idx, sigma_steps: int = 12,
             validation_frac: float = 0.25, min_history: int = 5) -> DiagnosisResult:
    """Feature-level diagnosis of flagged rows.

    For each flagged row t and feature i, a KDE is fitted on the values of i
    observed on *prior* days within half a window (`sigma_steps`/2 steps of
    time-of-day) of t; the feature is implicated when the density of x_i^t
    falls below the validation cut.  Features without enough history are
    skipped with a warning.
    """
    if sigma_steps < 2:
        raise ValueError("sigma window must span at least 2 steps")
    step = panel.step_seconds
    secs_of_day = panel.timestamps % 86400
    day_ord = panel.timestamps // 86400
    half_window = sigma_steps // 2 * step
    result = DiagnosisResult()
    cache: dict[tuple[int, int, int], KdeModel | None] = {}

    for t in sorted(int(i) for i in flagged_idx):
        tod = int(secs_of_day[t])
        day = int(day_ord[t])
        hits: dict[str, float] = {}
        cuts: dict[str, float] = {}
        for j, fid in enumerate(panel.feature_ids):
            key = (tod, day, j)
            if key not in cache:
                diff = np.abs(secs_of_day - tod)
                near = np.minimum(diff, 86400 - diff) <= half_window
                prior = near & (day_ord < day)
                values = panel.values[prior, j]
                if len(values) < min_history:
                    warnings.warn(f"feature {fid}: only {len(values)} period-matched "
                                  f"history values; skipped")
                    cache[key] = None
                else:
                    n_val = max(1, int(round(validation_frac * len(values))))
                    cache[key] = kde_fit(values[:-n_val] if len(values) > n_val else values,
                                         values[-n_val:])
            model = cache[key]
            if model is None:
                continue
            dens = kde_density(model.samples, model.bandwidth, panel.values[t, j])
            if dens < model.threshold:
                hits[fid] = float(dens)
                cuts[fid] = model.threshold
        if hits:
            result.implicated[t] = hits
            result.thresholds[t] = cuts
    return result


# ---------------------------------------------------------------------------
# AR baseline
# ---------------------------------------------------------------------------

def fit_ar(series: np.ndarray, lag: int) -> np.ndarray:
    """Least-squares AR(lag) coefficients [intercept, w_1..w_lag] where w_k
    multiplies the value k steps back."""
    T = len(series)
    if T <= lag:
        raise ValueError("series shorter than the lag")
    rows = T - lag
    X = np.ones((rows, lag + 1))
    for k in range(1, lag + 1):
        X[:, k] = series[lag - k:T - k]
    y = series[lag:]
    xtx = X.T @ X
    xty = X.T @ y
    try:
        return np.linalg.solve(xtx, xty)
    except np.linalg.LinAlgError:
        return np.linalg.solve(xtx + 1e-6 * np.eye(lag + 1), xty)


def ar_baseline(panel: SeriesPanel, lag: int = 12) -> AnomalyScoreSeries:
    """Independent AR(lag) per feature; score = mean |prediction error|."""
    T, N = panel.n_steps, panel.n_features
    if T <= lag:
        raise ValueError("panel shorter than the lag")
    errors = np.empty((T - lag, N))
    for j in range(N):
        series = panel.values[:, j]
        coef = fit_ar(series, lag)
        X = np.ones((T - lag, lag + 1))
        for k in range(1, lag + 1):
            X[:, k] = series[lag - k:T - k]
        errors[:, j] = np.abs(series[lag:] - X @ coef)
    scores = np.full(T, np.nan)
    scores[lag:] = errors.mean(axis=1)
    coverage = np.zeros(T, dtype=np.int64)
    coverage[lag:] = 1
    return AnomalyScoreSeries(timestamps=panel.timestamps.copy(),
                              scores=scores, coverage=coverage)


# ---------------------------------------------------------------------------
# report output
# ---------------------------------------------------------------------------

def write_scores(path, series: AnomalyScoreSeries) -> None:
    """Score interchange CSV: timestamp, score (empty if unscored), coverage."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["timestamp", "score", "coverage"])
        for ts, s, c in zip(series.timestamps, series.scores, series.coverage):
            writer.writerow([format_timestamp(ts),
                             "" if not np.isfinite(s) else repr(float(s)), int(c)])


def read_scores(path) -> AnomalyScoreSeries:
    from .dataio import parse_timestamp

    timestamps, scores, coverage = [], [], []
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["timestamp", "score", "coverage"]:
            raise ValueError(f"{path}: not a score file")
        for row in reader:
            if not row:
                continue
            timestamps.append(parse_timestamp(row[0]))
            scores.append(float(row[1]) if row[1] else float("nan"))
            coverage.append(int(row[2]))
    return AnomalyScoreSeries(timestamps=np.asarray(timestamps, dtype=np.int64),
                              scores=np.asarray(scores),
                              coverage=np.asarray(coverage, dtype=np.int64))


def write_anomaly_report(path, series: AnomalyScoreSeries, flags,
                         diagnosis: DiagnosisResult | None = None) -> None:
    """Columns: timestamp, score, flag, implicated_features (semicolon-joined)."""
    flags = np.asarray(flags)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["timestamp", "score", "flag", "implicated_features"])
        for i, ts in enumerate(series.timestamps):
            score = "" if not np.isfinite(series.scores[i]) else repr(float(series.scores[i]))
            feats = ""
            if diagnosis is not None and i in diagnosis.implicated:
                feats = ";".join(sorted(diagnosis.implicated[i]))
            writer.writerow([format_timestamp(ts), score, int(flags[i]), feats])
