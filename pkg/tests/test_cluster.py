import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from flowad import cluster
from flowad.dataio import SeriesPanel


def brute_force_dtw(a, b):
    """Exhaustive enumeration over all monotone alignments (oracle)."""
    n, m = len(a), len(b)
    best = [np.inf]

    def walk(i, j, acc):
        acc = acc + (a[i] - b[j]) ** 2
        if acc >= best[0]:
            return
        if i == n - 1 and j == m - 1:
            best[0] = acc
            return
        if i + 1 < n:
            walk(i + 1, j, acc)
        if j + 1 < m:
            walk(i, j + 1, acc)
        if i + 1 < n and j + 1 < m:
            walk(i + 1, j + 1, acc)

    walk(0, 0, 0.0)
    return float(np.sqrt(best[0]))


def group_panel(n_groups=3, per_group=15, length=200, seed=0, noise=0.15):
    rs = np.random.RandomState(seed)
    t = np.linspace(0, 12, length)
    patterns = [np.sin(t + 2.0 * g) * (1.5 + g) for g in range(n_groups)]
    cols, ids, truth = [], [], []
    for g in range(n_groups):
        for k in range(per_group):
            cols.append(patterns[g] + rs.normal(0, noise, length))
            ids.append(f"g{g}_{k}")
            truth.append(g)
    values = np.column_stack(cols)
    ts = 1546300800 + 300 * np.arange(length)
    return SeriesPanel(ts, ids, values), np.array(truth)


class TestDtw:
    def test_identity_is_zero(self):
        x = np.array([0.3, -1.2, 5.0, 2.2])
        assert cluster.dtw_distance(x, x) == 0.0

    def test_warping_absorbs_repeated_endpoint(self):
        assert cluster.dtw_distance([0, 1, 2], [0, 1, 2, 2]) == 0.0

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            cluster.dtw_distance([], [1.0])

    def test_matches_brute_force_enumeration(self):
        rs = np.random.RandomState(7)
        for _ in range(50):
            n, m = rs.randint(1, 7), rs.randint(1, 7)
            a, b = rs.normal(0, 1, n), rs.normal(0, 1, m)
            assert cluster.dtw_distance(a, b) == pytest.approx(brute_force_dtw(a, b), abs=1e-12)

    def test_symmetry_and_nonnegativity(self):
        rs = np.random.RandomState(9)
        for _ in range(20):
            a, b = rs.normal(0, 1, 12), rs.normal(0, 1, 9)
            d1, d2 = cluster.dtw_distance(a, b), cluster.dtw_distance(b, a)
            assert d1 == pytest.approx(d2, abs=1e-12)
            assert d1 >= 0.0

    def test_wide_band_equals_exact(self):
        rs = np.random.RandomState(11)
        a, b = rs.normal(0, 1, 20), rs.normal(0, 1, 20)
        assert cluster.dtw_distance(a, b, band=20) == pytest.approx(
            cluster.dtw_distance(a, b), abs=1e-12)

    @given(st.lists(st.floats(-5, 5), min_size=1, max_size=10),
           st.lists(st.floats(-5, 5), min_size=1, max_size=10))
    @settings(max_examples=60, deadline=None)
    def test_symmetry_nonnegativity_property(self, a, b):
        d = cluster.dtw_distance(a, b)
        assert d >= 0.0
        assert d == pytest.approx(cluster.dtw_distance(b, a), abs=1e-12)
        assert cluster.dtw_distance(a, a) == 0.0

    def test_narrow_band_matches_plain_loop(self):
        def banded_reference(a, b, band):
            n, m = len(a), len(b)
            w = max(band, abs(n - m))
            D = np.full((n + 1, m + 1), np.inf)
            D[0, 0] = 0.0
            for i in range(1, n + 1):
                for j in range(1, m + 1):
                    if abs(i - j) > w:
                        continue
                    cost = (a[i - 1] - b[j - 1]) ** 2
                    D[i, j] = cost + min(D[i - 1, j], D[i, j - 1], D[i - 1, j - 1])
            return float(np.sqrt(D[n, m]))

        rs = np.random.RandomState(13)
        for _ in range(10):
            n, m = rs.randint(5, 15), rs.randint(5, 15)
            a, b = rs.normal(0, 1, n), rs.normal(0, 1, m)
            for band in (1, 2, 4):
                got = cluster.dtw_distance(a, b, band=band)
                assert got == pytest.approx(banded_reference(a, b, band), abs=1e-12)
                assert got >= cluster.dtw_distance(a, b) - 1e-12


class TestDistanceMatrix:
    def test_full_sample_matrix(self):
        panel, _ = group_panel(per_group=3, length=60)
        matrix, ids, proto = cluster.build_distance_matrix(panel, panel.n_features, seed=1)
        assert matrix.shape == (9, 9)
        assert set(ids) == set(panel.feature_ids)

    def test_symmetric_zero_diagonal(self):
        panel, _ = group_panel(per_group=3, length=60)
        matrix, _, _ = cluster.build_distance_matrix(panel, 6, seed=2)
        assert np.allclose(matrix, matrix.T)
        assert np.allclose(np.diag(matrix), 0.0)

    def test_entries_match_pairwise_calls(self):
        panel, _ = group_panel(per_group=2, length=50)
        matrix, ids, proto = cluster.build_distance_matrix(panel, 4, seed=3)
        for i in range(4):
            for j in range(4):
                assert matrix[i, j] == pytest.approx(
                    cluster.dtw_distance(proto[i], proto[j]), abs=1e-12)

    def test_oversample_rejected(self):
        panel, _ = group_panel(per_group=2, length=50)
        with pytest.raises(ValueError):
            cluster.build_distance_matrix(panel, panel.n_features + 1, seed=0)


class TestOptics:
    def test_ordering_is_permutation(self):
        panel, _ = group_panel(per_group=5, length=80)
        matrix, _, _ = cluster.build_distance_matrix(panel, 15, seed=4)
        result = cluster.optics(matrix, min_pts=5)
        assert sorted(result.ordering.tolist()) == list(range(15))

    def test_two_far_groups_show_two_valleys(self):
        # reachability in OPTICS order: one jump inside means two valleys
        panel, _ = group_panel(n_groups=2, per_group=10, length=80)
        matrix, _, _ = cluster.build_distance_matrix(panel, 20, seed=5)
        result = cluster.optics(matrix, min_pts=5)
        reach = result.reachability[result.ordering][1:]  # first is inf
        big = reach > reach.min() + 0.5 * (reach.max() - reach.min())
        assert big.sum() == 1  # exactly one ridge between the two valleys

    def test_identical_points_equal_reachability(self):
        matrix = np.zeros((10, 10))
        result = cluster.optics(matrix, min_pts=3)
        reach = result.reachability[result.ordering][1:]
        assert np.allclose(reach, reach[0])

    def test_tiny_sample_falls_back(self):
        with pytest.warns(UserWarning):
            result = cluster.optics(np.zeros((3, 3)), min_pts=5)
        labels = cluster.extract_clusters(result, 0.05, np.zeros((3, 3)))
        assert set(labels.tolist()) == {0}

    def test_invariant_to_input_ordering(self):
        panel, truth = group_panel(per_group=6, length=80)
        matrix, ids, _ = cluster.build_distance_matrix(panel, 18, seed=6)
        result = cluster.optics(matrix, min_pts=4)
        labels = cluster.extract_clusters(result, 0.05, matrix)
        perm = np.random.RandomState(0).permutation(18)
        matrix2 = matrix[np.ix_(perm, perm)]
        labels2 = cluster.extract_clusters(cluster.optics(matrix2, min_pts=4), 0.05, matrix2)
        # same partition up to label renaming
        pairs_same = lambda lab: {(i, j) for i in range(18) for j in range(18) if lab[i] == lab[j]}
        mapped = {(perm[i], perm[j]) for i, j in pairs_same(labels2)}
        assert pairs_same(labels) == mapped


class TestExtraction:
    def test_single_valley_one_cluster(self):
        panel, _ = group_panel(n_groups=1, per_group=15, length=80)
        matrix, _, _ = cluster.build_distance_matrix(panel, 15, seed=7)
        result = cluster.optics(matrix, min_pts=5)
        labels = cluster.extract_clusters(result, 0.05, matrix)
        assert set(labels.tolist()) == {0}

    def test_three_planted_blobs(self):
        panel, truth = group_panel(n_groups=3, per_group=15, length=120)
        matrix, ids, _ = cluster.build_distance_matrix(panel, 45, seed=8)
        result = cluster.optics(matrix, min_pts=5)
        labels = cluster.extract_clusters(result, 0.05, matrix)
        idx = {f: i for i, f in enumerate(panel.feature_ids)}
        truth_sampled = np.array([truth[idx[f]] for f in ids])
        purity = sum(np.bincount(truth_sampled[labels == c]).max()
                     for c in set(labels.tolist())) / len(labels)
        assert len(set(labels.tolist())) == 3
        assert purity >= 0.95

    def test_noise_gets_valid_label(self):
        panel, _ = group_panel(n_groups=2, per_group=10, length=80)
        matrix, _, _ = cluster.build_distance_matrix(panel, 20, seed=9)
        labels = cluster.extract_clusters(cluster.optics(matrix, 5), 0.05, matrix)
        assert labels.min() >= 0

    def test_bad_xi_rejected(self):
        with pytest.raises(ValueError):
            cluster.extract_clusters(cluster.optics(np.zeros((6, 6)), 2), xi=1.5)


class TestAssignment:
    def test_full_assignment_covers_everything(self):
        panel, truth = group_panel(per_group=8, length=100)
        assignment = cluster.cluster_features(panel, sample_size=15, min_pts=4, seed=10)
        assert set(assignment.labels) == set(panel.feature_ids)
        total = sum(len(v) for v in assignment.clusters.values())
        assert total == panel.n_features

    def test_sampled_features_keep_labels(self):
        panel, _ = group_panel(per_group=8, length=100)
        matrix, ids, _ = cluster.build_distance_matrix(panel, 15, seed=11)
        result = cluster.optics(matrix, 4)
        labels = cluster.extract_clusters(result, 0.05, matrix)
        assignment = cluster.assign_remaining(panel, ids, labels, matrix, result)
        for fid, lab in zip(ids, labels):
            assert assignment.labels[fid] == lab

    def test_feature_identical_to_medoid(self):
        panel, _ = group_panel(per_group=8, length=100)
        assignment = cluster.cluster_features(panel, sample_size=15, min_pts=4, seed=12)
        for c, medoid in assignment.medoids.items():
            assert assignment.labels[medoid] == c

    def test_matches_exhaustive_nearest_medoid(self):
        panel, _ = group_panel(per_group=6, length=90)
        matrix, ids, _ = cluster.build_distance_matrix(panel, 12, seed=13)
        result = cluster.optics(matrix, 4)
        labels = cluster.extract_clusters(result, 0.05, matrix)
        assignment = cluster.assign_remaining(panel, ids, labels, matrix, result)
        col = {f: i for i, f in enumerate(panel.feature_ids)}
        week = panel.values  # panel shorter than a week: whole range
        for fid in panel.feature_ids:
            if fid in ids:
                continue
            dists = {c: cluster.dtw_distance(week[:, col[fid]], week[:, col[m]])
                     for c, m in assignment.medoids.items()}
            assert assignment.labels[fid] == min(dists, key=lambda c: (dists[c], c))


class TestPersistence:
    def test_round_trip(self, tmp_path):
        panel, _ = group_panel(per_group=5, length=80)
        assignment = cluster.cluster_features(panel, sample_size=12, min_pts=4, seed=14)
        path = tmp_path / "clusters.csv"
        cluster.save_assignment(assignment, path)
        back = cluster.load_assignment(path)
        assert back.labels == assignment.labels
        assert back.medoids == assignment.medoids
        assert back.ordering == assignment.ordering
        assert back.metadata["seed"] == "14"
        assert np.allclose(back.reachability, assignment.reachability)
