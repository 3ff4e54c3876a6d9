"""Feature grouping: DTW distances, OPTICS ordering and medoid assignment.

A sample of prototype features is compared pairwise with dynamic time
warping over one week of data; OPTICS (density-based, no preset cluster
count) orders the prototypes and a xi-steep-area extraction cuts the
reachability plot into clusters.  The remaining features join the cluster
of their nearest medoid.
"""
from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field

import numpy as np
from sklearn.cluster import cluster_optics_xi, compute_optics_graph

from .dataio import SeriesPanel
from .rng import Xoshiro256


def dtw_distance(a, b, band: int | None = None) -> float:
    """Dynamic time warping distance with squared pointwise cost.

    Classic DP over the full alignment lattice (match, insert, delete);
    returns the square root of the optimal accumulated cost.  `band` is an
    optional Sakoe-Chiba half-width (|i - j| <= band) used purely as a
    speed knob; None means exact unconstrained DTW.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.size == 0 or b.size == 0:
        raise ValueError("dtw_distance requires nonempty sequences")
    n, m = len(a), len(b)
    if band is not None:
        band = max(band, abs(n - m))  # keep the corner reachable

    # anti-diagonal sweep: cells on diagonal d depend on diagonals d-1, d-2
    prev2 = None  # diagonal d-2, aligned to its own j range
    prev = np.array([0.0])  # diagonal d-1 = the (0,0) corner in padded coords
    # padded coordinates: i in 0..n, j in 0..m with D[0,0]=0, first row/col inf
    prev_lo = 0  # j index where `prev` starts
    for d in range(1, n + m + 1):
        lo = max(0, d - n)
        hi = min(d, m)
        js = np.arange(lo, hi + 1)
        cur = np.full(len(js), np.inf)
        is_ = d - js
        interior = (is_ >= 1) & (js >= 1)
        if band is not None:
            interior &= np.abs(is_ - js) <= band
        if np.any(interior):
            ji = js[interior]
            ii = is_[interior]
            cost = (a[ii - 1] - b[ji - 1]) ** 2

            def get(diag, diag_lo, j_idx):
                out = np.full(len(j_idx), np.inf)
                if diag is None:
                    return out
                pos = j_idx - diag_lo
                ok = (pos >= 0) & (pos < len(diag))
                out[ok] = diag[pos[ok]]
                return out

            up = get(prev, prev_lo, ji)  # D[i-1, j]
            left = get(prev, prev_lo, ji - 1)  # D[i, j-1]
            diag = get(prev2, prev2_lo, ji - 1) if prev2 is not None else np.full(len(ji), np.inf)
            best = np.minimum(np.minimum(up, left), diag)
            cur[interior] = cost + best
        if d == 1:  # D[0,1] and D[1,0] stay inf, only D[0,0] seeds the lattice
            pass
        prev2, prev2_lo = prev, prev_lo
        prev, prev_lo = cur, lo
    return float(np.sqrt(prev[-1]))


def dtw_distance_matrix(series: np.ndarray, band: int | None = None) -> np.ndarray:
    """Pairwise DTW over the rows of an (M, L) array."""
    m = series.shape[0]
    out = np.zeros((m, m))
    for i in range(m):
        for j in range(i + 1, m):
            out[i, j] = out[j, i] = dtw_distance(series[i], series[j], band=band)
    return out


def build_distance_matrix(panel: SeriesPanel, sample_size: int, seed: int,
                          week_start: int = 0, week_len: int | None = None,
                          band: int | None = None):
    """DTW matrix over one week of data for a uniform sample of features.

    Returns (matrix, sampled feature ids, the (M, L) prototype series).
    The week defaults to the first seven days of the panel.
    """
    if sample_size > panel.n_features:
        raise ValueError("sample_size exceeds the number of features")
    if week_len is None:
        steps_per_week = 7 * 86400 // panel.step_seconds if panel.n_steps > 1 else panel.n_steps
        week_len = min(panel.n_steps - week_start, steps_per_week)
    rng = Xoshiro256(seed)
    picked = sorted(rng.sample(panel.n_features, sample_size))
    ids = [panel.feature_ids[i] for i in picked]
    proto = panel.values[week_start:week_start + week_len, picked].T.copy()
    return dtw_distance_matrix(proto, band=band), ids, proto


@dataclass
class OpticsResult:
    ordering: np.ndarray  # permutation of 0..M-1
    reachability: np.ndarray  # indexed by object, inf for the first seed
    core_distances: np.ndarray
    predecessor: np.ndarray
    min_pts: int


def optics(matrix: np.ndarray, min_pts: int = 5) -> OpticsResult:
    """Standard OPTICS ordering on a precomputed matrix, no epsilon cap."""
    if min_pts < 2:
        raise ValueError("min_pts must be >= 2")
    m = matrix.shape[0]
    if m < min_pts:
        warnings.warn(f"only {m} points for min_pts={min_pts}: single-cluster fallback")
        return OpticsResult(np.arange(m), np.full(m, np.inf), np.full(m, np.inf),
                            np.full(m, -1), min_pts)
    ordering, core, reach, pred = compute_optics_graph(
        matrix, min_samples=min_pts, max_eps=np.inf, metric="precomputed",
        p=2, metric_params=None, algorithm="brute", leaf_size=30, n_jobs=None)
    return OpticsResult(ordering, reach, core, pred, min_pts)


def extract_clusters(result: OpticsResult, xi: float = 0.05,
                     matrix: np.ndarray | None = None) -> np.ndarray:
    """xi-steep-area extraction; leftover noise joins its nearest medoid.

    Returns an integer label per point.  `matrix` is needed to reassign
    noise points; without it they keep label -1.
    """
    if not 0.0 < xi < 1.0:
        raise ValueError("xi must lie in (0, 1)")
    m = len(result.ordering)
    if not np.any(np.isfinite(result.reachability)):
        # degenerate ordering (tiny sample fallback): one cluster
        return np.zeros(m, dtype=np.int64)
    labels, _ = cluster_optics_xi(
        reachability=result.reachability, predecessor=result.predecessor,
        ordering=result.ordering, min_samples=result.min_pts, xi=xi)
    labels = labels.astype(np.int64)
    if labels.max() < 0:
        warnings.warn("xi extraction found no steep areas: single-cluster fallback")
        return np.zeros(m, dtype=np.int64)
    if np.any(labels < 0) and matrix is not None:
        medoid_idx = {c: _medoid(np.where(labels == c)[0], matrix)
                      for c in range(labels.max() + 1)}
        for i in np.where(labels < 0)[0]:
            labels[i] = min(medoid_idx, key=lambda c: (matrix[i, medoid_idx[c]], c))
    return labels


def _medoid(members: np.ndarray, matrix: np.ndarray) -> int:
    sums = matrix[np.ix_(members, members)].sum(axis=1)
    return int(members[np.argmin(sums)])


@dataclass
class ClusterAssignment:
    """Full feature-to-cluster map plus the ordering diagnostics."""

    labels: dict[str, int]
    medoids: dict[int, str]
    ordering: list[str]  # sampled ids in OPTICS order
    reachability: list[float]
    metadata: dict = field(default_factory=dict)

    @property
    def clusters(self) -> dict[int, list[str]]:
        out: dict[int, list[str]] = {}
        for fid, c in self.labels.items():
            out.setdefault(c, []).append(fid)
        return out


def assign_remaining(panel: SeriesPanel, sampled_ids: list[str],
                     sample_labels: np.ndarray, matrix: np.ndarray,
                     result: OpticsResult, week_start: int = 0,
                     week_len: int | None = None,
                     band: int | None = None) -> ClusterAssignment:
    """Route unsampled features to the cluster of their nearest medoid.

    Medoids minimize summed DTW inside their cluster; distances use the
    same week of data that built the matrix.
    """
    if sample_labels.max() < 0:
        raise ValueError("no clusters to assign into")
    if week_len is None:
        steps_per_week = 7 * 86400 // panel.step_seconds if panel.n_steps > 1 else panel.n_steps
        week_len = min(panel.n_steps - week_start, steps_per_week)
    col = {f: i for i, f in enumerate(panel.feature_ids)}
    week = slice(week_start, week_start + week_len)

    medoids: dict[int, str] = {}
    for c in range(int(sample_labels.max()) + 1):
        members = np.where(sample_labels == c)[0]
        medoids[c] = sampled_ids[_medoid(members, matrix)]

    labels = {fid: int(c) for fid, c in zip(sampled_ids, sample_labels)}
    for fid in panel.feature_ids:
        if fid in labels:
            continue
        series = panel.values[week, col[fid]]
        dists = {c: dtw_distance(series, panel.values[week, col[mid]], band=band)
                 for c, mid in medoids.items()}
        labels[fid] = min(dists, key=lambda c: (dists[c], c))

    return ClusterAssignment(
        labels=labels, medoids=medoids,
        ordering=[sampled_ids[i] for i in result.ordering],
        reachability=[float(result.reachability[i]) for i in result.ordering],
    )


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------

def save_assignment(assignment: ClusterAssignment, path) -> None:
    """Two-column CSV preceded by `# key=value` metadata lines."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        for key in sorted(assignment.metadata):
            fh.write(f"# {key}={assignment.metadata[key]}\n")
        fh.write("# medoids=" + ";".join(f"{c}:{m}" for c, m in sorted(assignment.medoids.items())) + "\n")
        fh.write("# ordering=" + ";".join(assignment.ordering) + "\n")
        fh.write("# reachability=" + ";".join(repr(r) for r in assignment.reachability) + "\n")
        writer = csv.writer(fh)
        writer.writerow(["feature_id", "cluster_label"])
        for fid, c in assignment.labels.items():
            writer.writerow([fid, c])


def load_assignment(path) -> ClusterAssignment:
    metadata, labels = {}, {}
    medoids: dict[int, str] = {}
    ordering: list[str] = []
    reachability: list[float] = []
    with open(path, "r", encoding="utf-8", newline="") as fh:
        rows = []
        for line in fh:
            if line.startswith("#"):
                key, _, value = line[1:].strip().partition("=")
                if key == "medoids":
                    for item in value.split(";"):
                        if item:
                            c, _, mid = item.partition(":")
                            medoids[int(c)] = mid
                elif key == "ordering":
                    ordering = [v for v in value.split(";") if v]
                elif key == "reachability":
                    reachability = [float(v) for v in value.split(";") if v]
                else:
                    metadata[key] = value
            else:
                rows.append(line)
        reader = csv.reader(rows)
        header = next(reader, None)
        if header != ["feature_id", "cluster_label"]:
            raise ValueError(f"{path}: malformed assignment header")
        for row in reader:
            if row:
                labels[row[0]] = int(row[1])
    return ClusterAssignment(labels=labels, medoids=medoids, ordering=ordering,
                             reachability=reachability, metadata=metadata)


def cluster_features(panel: SeriesPanel, sample_size: int | None = None,
                     min_pts: int = 5, xi: float = 0.05, seed: int = 0,
                     week_start: int = 0, week_len: int | None = None,
                     band: int | None = None) -> ClusterAssignment:
    """End-to-end clustering: sample, DTW matrix, OPTICS, xi cut, merge rest."""
    if sample_size is None:
        sample_size = min(panel.n_features, 100)
    matrix, ids, _ = build_distance_matrix(panel, sample_size, seed,
                                           week_start=week_start,
                                           week_len=week_len, band=band)
    result = optics(matrix, min_pts=min_pts)
    labels = extract_clusters(result, xi=xi, matrix=matrix)
    assignment = assign_remaining(panel, ids, labels, matrix, result,
                                  week_start=week_start, week_len=week_len,
                                  band=band)
    assignment.metadata = {"seed": str(seed), "sample_size": str(sample_size),
                           "min_pts": str(min_pts), "xi": repr(xi),
                           "sample_ids": ";".join(ids)}
    return assignment
