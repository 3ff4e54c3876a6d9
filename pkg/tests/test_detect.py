import math

import numpy as np
import pytest

from flowad import detect, train
from flowad.dataio import SeriesPanel, Standardizer, fit_standardizer, make_windows
from flowad.rng import Xoshiro256


def sin_panel(days=10, n=2, seed=0, noise=0.1, step=300):
    rs = np.random.RandomState(seed)
    T = days * 288
    t = np.arange(T)
    base = np.sin(2 * np.pi * t / 288)
    values = np.column_stack([base * (1 + 0.5 * i) + rs.normal(0, noise, T)
                              for i in range(n)])
    ts = 1546300800 + step * np.arange(T)
    return SeriesPanel(ts, [f"f{i}" for i in range(n)], values)


class TestScore:
    @pytest.fixture(scope="class")
    @staticmethod
    def scored():
        panel = sin_panel(days=3)
        model = train.build_model(n_features=2, context_len=12, pred_len=4,
                                  hidden=[6], n_blocks=2, st_hidden=8,
                                  st_layers=1, seed=1,
                                  standardizer=fit_standardizer(panel))
        series = detect.score_panel(model, panel)
        return panel, model, series

    def test_stride_equals_pred_gives_unit_coverage(self, scored):
        panel, model, series = scored
        hit = series.coverage > 0
        assert np.all(series.coverage[hit] == 1)
        assert np.all(np.isnan(series.scores[:model.context_len]))
        assert not np.any(np.isnan(series.scores[hit]))

    def test_duplicate_window_leaves_average_unchanged(self, scored):
        panel, model, _ = scored
        std = model.standardizer.apply_panel(panel)
        windows = make_windows(std, model.context_len, model.pred_len, model.pred_len)
        once = detect.score_windows(model, windows, panel.n_steps, panel.timestamps)
        doubled = detect.score_windows(model, windows + [windows[3]],
                                       panel.n_steps, panel.timestamps)
        hit = once.coverage > 0
        assert np.allclose(once.scores[hit], doubled.scores[hit])
        assert doubled.coverage[windows[3].pred_start] == 2

    def test_scores_monotone_in_log_density(self, scored):
        # score is exactly the negative mean log density
        panel, model, series = scored
        std = model.standardizer.apply_panel(panel)
        windows = make_windows(std, model.context_len, model.pred_len, model.pred_len)
        lp = train.window_log_probs(windows[:1], model).value
        t0 = windows[0].pred_start
        assert series.scores[t0] == pytest.approx(-lp[0])


class TestStaticThreshold:
    def test_perfect_separation_reaches_f1_one(self):
        scores = np.array([0.1, 0.2, 0.3, 5.0, 6.0])
        labels = np.array([0, 0, 0, 1, 1])
        eps = detect.static_threshold(scores, labels)
        f1, _ = detect._f1_at(scores, labels, eps)
        assert f1 == 1.0
        assert 0.3 <= eps < 5.0

    def test_single_class_rejected(self):
        with pytest.raises(ValueError, match="SPOT"):
            detect.static_threshold(np.arange(5.0), np.ones(5))

    def test_matches_exhaustive_search(self):
        rs = np.random.RandomState(3)
        for _ in range(20):
            scores = rs.normal(0, 1, 10)
            labels = (rs.uniform(0, 1, 10) < 0.4).astype(int)
            if labels.min() == labels.max():
                continue
            eps = detect.static_threshold(scores, labels)
            got_f1, _ = detect._f1_at(scores, labels, eps)
            best_f1 = max(detect._f1_at(scores, labels, e)[0] for e in scores)
            assert got_f1 == pytest.approx(best_f1, abs=1e-12)

    def test_tie_breaks_toward_lower_eps(self):
        scores = np.array([1.0, 2.0, 3.0, 10.0, 11.0])
        labels = np.array([0, 0, 0, 1, 1])
        eps = detect.static_threshold(scores, labels)
        # anything in [3, 10) is F1-optimal; the lowest optimal grid
        # candidate wins, so eps sits just above the highest normal score
        assert 3.0 <= eps < 3.2
        candidates = np.unique(np.quantile(scores, np.linspace(0, 1, 200)))
        optimal = [c for c in candidates if detect._f1_at(scores, labels, c)[0] == 1.0]
        assert eps == min(optimal)


class TestPotFit:
    def test_exponential_recovers_unit_scale(self):
        draws = Xoshiro256(5).exponential(scale=1.0, size=10000)
        fit = detect.pot_fit(draws)
        assert abs(fit.gamma) < 0.1
        assert fit.sigma == pytest.approx(1.0, abs=0.1)

    def test_constant_excesses_use_mom(self):
        fit = detect.pot_fit(np.full(20, 2.0))
        assert fit.method == "mom"
        assert fit.gamma > -1
        assert fit.sigma > 0

    def test_likelihood_at_least_mom(self):
        for seed in range(5):
            draws = Xoshiro256(seed).exponential(scale=2.0, size=500)
            fit = detect.pot_fit(draws)
            mom = detect._mom_gpd(draws)
            assert detect.gpd_log_likelihood(draws, fit.gamma, fit.sigma) >= \
                detect.gpd_log_likelihood(draws, *mom) - 1e-9

    def test_too_few_excesses_rejected(self):
        with pytest.raises(ValueError):
            detect.pot_fit(np.ones(4))

    def test_nonpositive_rejected(self):
        with pytest.raises(ValueError):
            detect.pot_fit(np.array([1.0, -0.5] + [1.0] * 8))


class TestSpot:
    def test_values_below_t_never_flag(self):
        rng = Xoshiro256(6)
        init = rng.uniform(0, 1, size=500)
        state = detect.spot_init(init, q=1e-3, level=0.98)
        z0 = state.z_q
        for v in rng.uniform(0, state.t * 0.9, size=200):
            state, flag = detect.spot_update(state, float(v))
            assert not flag
        assert state.z_q == z0

    def test_exponential_analytic_quantile(self):
        # q = 1e-3 on Exp(1): the true quantile is ln(1000) ~ 6.908.
        # Alarms never feed the tail fit, so the long-run level sits a few
        # percent below the analytic value; 15% covers that bias.
        target = math.log(1000.0)
        for seed in (1, 5, 6):
            draws = Xoshiro256(seed).exponential(scale=1.0, size=10000)
            flags, trace, state = detect.run_spot(draws, q=1e-3, level=0.98,
                                                  n_init=1000)
            assert abs(state.z_q - target) / target < 0.15

    def test_flags_are_exactly_exceedances_at_arrival(self):
        draws = Xoshiro256(8).exponential(scale=1.0, size=3000)
        flags, trace, _ = detect.run_spot(draws, q=1e-3, level=0.98, n_init=1000)
        stream = draws[1000:]
        # at arrival i the active threshold was trace[i] unless i flagged;
        # reconstruct by replaying
        state = detect.spot_init(draws[:1000], q=1e-3, level=0.98)
        for i, v in enumerate(stream):
            before = state.z_q
            state, flag = detect.spot_update(state, float(v))
            assert flag == (v > before)
            assert flag == bool(flags[i])

    def test_n_never_decreases_and_zq_moves_only_on_excess(self):
        draws = Xoshiro256(9).exponential(scale=1.0, size=2000)
        state = detect.spot_init(draws[:1000], q=1e-3, level=0.98)
        n_prev, z_prev, exc_prev = state.n, state.z_q, state.n_excess
        for v in draws[1000:]:
            state, flag = detect.spot_update(state, float(v))
            assert state.n >= n_prev
            if state.z_q != z_prev:
                assert state.n_excess == exc_prev + 1
            n_prev, z_prev, exc_prev = state.n, state.z_q, state.n_excess

    def test_bad_risk_rejected(self):
        with pytest.raises(ValueError):
            detect.spot_init(np.arange(200.0), q=0.5, level=0.98)

    def test_small_init_rejected(self):
        with pytest.raises(ValueError):
            detect.spot_init(np.arange(50.0), q=1e-3)


class TestKde:
    def test_single_sample_kernel_center(self):
        model = detect.kde_fit(np.array([0.0]), np.array([0.0]))
        with pytest.warns(UserWarning):
            model = detect.kde_fit(np.array([0.0]), np.array([0.0]))
        dens = detect.kde_density(model.samples, model.bandwidth, 0.0)
        assert dens == pytest.approx(1.0 / (model.bandwidth * math.sqrt(2 * math.pi)))

    def test_matches_direct_sum(self):
        rng = Xoshiro256(10)
        samples = rng.normal(size=200)
        h = detect.silverman_bandwidth(samples)
        queries = rng.uniform(-3, 3, size=1000)
        fast = detect.kde_density(samples, h, queries)
        direct = np.array([
            sum(math.exp(-0.5 * ((x - xi) / h) ** 2) for xi in samples)
            / (len(samples) * h * math.sqrt(2 * math.pi)) for x in queries])
        assert np.max(np.abs(fast - direct)) < 1e-12
        assert np.all(fast > 0)

    def test_density_integrates_to_one(self):
        samples = Xoshiro256(11).normal(size=100)
        h = detect.silverman_bandwidth(samples)
        grid = np.linspace(samples.min() - 8 * h, samples.max() + 8 * h, 4001)
        dens = detect.kde_density(samples, h, grid)
        assert np.trapezoid(dens, grid) == pytest.approx(1.0, abs=1e-3)

    def test_threshold_is_validation_percentile(self):
        rng = Xoshiro256(12)
        hist, val = rng.normal(size=300), rng.normal(size=100)
        model = detect.kde_fit(hist, val)
        dens = detect.kde_density(hist, model.bandwidth, val)
        assert model.threshold == pytest.approx(np.percentile(dens, 1.0))


class TestDiagnose:
    def test_mode_value_not_implicated_extreme_is(self):
        panel = sin_panel(days=12, n=2, noise=0.05)
        t = panel.n_steps - 100
        expected = panel.values[t, 0]
        panel.values[t, 0] = expected + 10.0  # ten sigmas away from history
        result = detect.diagnose(panel, [t], sigma_steps=12)
        assert "f0" in result.features_at(t)
        assert "f1" not in result.features_at(t)

    def test_insufficient_history_skips_with_warning(self):
        panel = sin_panel(days=1)
        with pytest.warns(UserWarning):
            result = detect.diagnose(panel, [200], sigma_steps=12)
        assert result.features_at(200) == set()

    def test_densities_reported_below_threshold(self):
        panel = sin_panel(days=12, n=1, noise=0.05)
        t = panel.n_steps - 50
        panel.values[t, 0] += 8.0
        result = detect.diagnose(panel, [t])
        dens = result.implicated[t]["f0"]
        cut = result.thresholds[t]["f0"]
        assert dens < cut

    def test_false_implication_rate_low(self):
        panel = sin_panel(days=14, n=4, noise=0.1)
        flagged = list(range(panel.n_steps - 288, panel.n_steps, 24))
        result = detect.diagnose(panel, flagged)
        implicated = sum(len(result.features_at(t)) for t in flagged)
        assert implicated / (len(flagged) * 4) <= 0.10


class TestArBaseline:
    def test_noiseless_ar1_scores_vanish(self):
        T = 400
        x = np.zeros(T)
        x[0] = 1.0
        for t in range(1, T):
            x[t] = 0.9 * x[t - 1]
        panel = SeriesPanel(1546300800 + 300 * np.arange(T), ["a"], x[:, None])
        series = detect.ar_baseline(panel, lag=3)
        assert np.nanmax(series.scores) < 1e-8

    def test_coefficient_recovery(self):
        # marginally stable oscillator: exactly AR(2) with no noise and no decay
        coef_true = np.array([0.0, 2 * np.cos(0.3), -1.0])  # intercept, w1, w2
        T = 500
        x = [0.0, np.sin(0.3)]
        for t in range(2, T):
            x.append(coef_true[1] * x[t - 1] + coef_true[2] * x[t - 2])
        got = detect.fit_ar(np.array(x), lag=2)
        assert np.allclose(got, coef_true, atol=1e-6)

    def test_spike_raises_local_score(self):
        panel = sin_panel(days=2, n=2, noise=0.02)
        t = 400
        panel.values[t, :] += 3.0
        series = detect.ar_baseline(panel, lag=6)
        normal = np.nanmedian(series.scores)
        assert series.scores[t] > 10 * normal

    def test_short_panel_rejected(self):
        panel = sin_panel(days=1)
        with pytest.raises(ValueError):
            detect.ar_baseline(panel.slice_rows(0, 5), lag=10)


class TestReport:
    def test_written_columns(self, tmp_path):
        panel = sin_panel(days=1, n=1)
        series = detect.ar_baseline(panel, lag=3)
        flags = np.nan_to_num(series.scores, nan=0.0) > 0.5
        diag = detect.DiagnosisResult(implicated={5: {"f0": 1e-4}})
        path = tmp_path / "report.csv"
        detect.write_anomaly_report(path, series, flags, diag)
        lines = path.read_text().strip().splitlines()
        assert lines[0] == "timestamp,score,flag,implicated_features"
        assert len(lines) == panel.n_steps + 1
        assert lines[1].split(",")[1] == ""  # unscored rows carry no score
        assert lines[6].split(",")[3] == "f0"
