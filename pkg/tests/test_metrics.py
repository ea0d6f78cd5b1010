import numpy as np
import pytest
from scipy import stats
from sklearn.metrics import mean_absolute_percentage_error, r2_score

from specdrop.commons import ConfigError, MetricError
from specdrop.metrics import (EvalReport, MetricSeries, absolute_percent_errors, evaluate, evaluate_predictions, mape,
                              pearson_r, r_squared, s_bar)
from specdrop.models import ModelConfig, build_model
from specdrop.variants import get_variant, sample_parameters


class TestSBar:
    def test_alternating_series(self):
        assert s_bar([0, 1, 0, 1, 0, 1]) == 4.0

    def test_zero_on_affine_series(self):
        assert s_bar(3.0 + 2.0 * np.arange(10)) == 0.0
        assert s_bar([5.0, 5.0, 5.0]) == 0.0

    def test_affine_invariance_and_quadratic_scaling(self, rng):
        for _ in range(100):
            values = rng.normal(size=int(rng.integers(3, 40)))
            trend = rng.normal() + rng.normal() * np.arange(values.size)
            assert s_bar(values + trend) == pytest.approx(s_bar(values), rel=1e-8, abs=1e-10)
            assert s_bar(3.0 * values) == pytest.approx(9.0 * s_bar(values), rel=1e-10)

    def test_brute_force(self, rng):
        for _ in range(100):
            m = rng.normal(size=int(rng.integers(3, 30)))
            d = [m[k + 1] - 2 * m[k] + m[k - 1] for k in range(1, len(m) - 1)]
            mean = sum(d) / len(d)
            expected = sum((x - mean) ** 2 for x in d) / len(d)
            assert s_bar(m) == pytest.approx(expected, rel=1e-10, abs=1e-12)

    @pytest.mark.parametrize('values', [[1.0, 2.0], [1.0, np.nan, 2.0]])
    def test_invalid(self, values):
        with pytest.raises(MetricError):
            s_bar(values)


class TestMetricSeries:
    def test_append_and_s_bar(self):
        series = MetricSeries('val/mape')
        for epoch, value in enumerate([0, 1, 0, 1, 0, 1]):
            series.append(epoch, value)
            assert (series.s_bar() is None) == (epoch < 2)
        assert series.s_bar() == 4.0
        assert series.last == 1.0

    def test_rejects_bad_values(self):
        series = MetricSeries('val/mape', [1.0], [3])
        with pytest.raises(MetricError):
            series.append(3, 1.0)
        with pytest.raises(MetricError):
            series.append(4, float('inf'))
        with pytest.raises(MetricError):
            MetricSeries('val/mape', [1.0, 2.0], [2, 1])


class TestPrecisionMetrics:
    def test_mape_matches_brute_force(self, rng):
        for _ in range(100):
            target = rng.uniform(0.1, 1.0, size=(20, 3))
            pred = target + rng.normal(scale=0.1, size=target.shape)
            result = mape(pred, target)
            ape = [100 * abs(p - t) / abs(t) for p, t in zip(pred.ravel(), target.ravel())]
            assert result.mean == pytest.approx(np.mean(ape), rel=1e-10)
            assert result.std == pytest.approx(np.std(ape), rel=1e-10)
            assert result.mean == pytest.approx(100 * mean_absolute_percentage_error(target.ravel(), pred.ravel()),
                                                rel=1e-10)

    def test_zero_targets_are_excluded(self):
        result = mape([1.0, 2.0, 3.0], [0.0, 1.0, 2.0])
        assert result.excluded == 1
        assert result.mean == pytest.approx(75.0)
        assert np.isnan(absolute_percent_errors([1.0], [0.0])[0])
        with pytest.raises(MetricError):
            mape([1.0], [0.0])

    def test_r_squared_and_pearson(self, rng):
        for _ in range(100):
            target = rng.normal(size=(15, 2))
            pred = target + rng.normal(scale=0.5, size=target.shape)
            assert r_squared(pred, target) == pytest.approx(r2_score(target.ravel(), pred.ravel()), rel=1e-10)
            assert pearson_r(pred, target) == pytest.approx(stats.pearsonr(pred.ravel(), target.ravel())[0],
                                                            rel=1e-10)
        assert r_squared(target, target) == 1.0

    @pytest.mark.parametrize(['function', 'pred', 'target'], [
        (mape, [1.0, 2.0], [1.0]),
        (r_squared, [1.0, 2.0], [1.0, 1.0]),
        (r_squared, [1.0], [1.0]),
        (pearson_r, [1.0, 1.0], [1.0, 2.0]),
        (pearson_r, [1.0], [1.0]),
    ])
    def test_errors(self, function, pred, target):
        with pytest.raises(MetricError):
            function(pred, target)


class TestEvaluate:
    def targets(self, variant, n=30):
        return np.vstack([sample_parameters(variant, seed).values for seed in range(n)])

    def test_only_amplitudes_count(self):
        variant = get_variant('STANDARD14')
        target = self.targets(variant)
        pred = target.copy()
        pred[:, variant.indices('amplitude')] *= 1.1
        report = evaluate_predictions(pred, target, variant)
        pred[:, variant.indices('baseline_coeff', 'snr', 'phase0')] = 0.0
        assert evaluate_predictions(pred, target, variant) == report
        assert report.mape == pytest.approx(10.0)
        assert report.std == pytest.approx(0.0, abs=1e-9)
        assert sorted(report.per_metabolite) == sorted(variant.metabolite_names)
        assert report.per_metabolite['NAA']['mape'] == pytest.approx(10.0)

    def test_shape_mismatch(self):
        variant = get_variant('SIMPLE7')
        with pytest.raises(ConfigError):
            evaluate_predictions(np.zeros((3, 6)), np.zeros((3, 6)), variant)

    def test_report_json(self, tmp_path):
        variant = get_variant('SIMPLE7')
        target = self.targets(variant)
        report = evaluate_predictions(target * 0.9, target, variant)
        report.s_bar = {'val/mape': 0.25}
        report.best_epoch = 3
        assert EvalReport.from_json(report.to_json(tmp_path / 'report.json')) == report

    def test_model_of_other_variant(self, small_dataset):
        model = build_model(ModelConfig(output_dim=14))
        with pytest.raises(ConfigError):
            evaluate(model, small_dataset, small_dataset.input_scale())

    def test_evaluate_is_deterministic(self, small_dataset):
        model = build_model(ModelConfig(output_dim=7))
        scale = small_dataset.input_scale()
        assert evaluate(model, small_dataset, scale) == evaluate(model, small_dataset, scale)
