from unittest import mock

import numpy as np
import pytest

from specdrop.commons import ConfigError
from specdrop.variants import (COMPLEX26, SIMPLE7, STANDARD14, ParameterVector, draw_uniform, get_variant,
                               sample_parameters)


class TestTaskVariant:
    @pytest.mark.parametrize(['name', 'size', 'metabolites'], [
        (SIMPLE7, 7, 5),
        (STANDARD14, 14, 5),
        (COMPLEX26, 26, 9),
    ])
    def test_schema_sizes(self, name, size, metabolites):
        variant = get_variant(name)
        assert variant.size == len(variant) == size
        assert len(variant.metabolite_names) == metabolites
        assert len(variant.indices('amplitude')) == metabolites

    def test_simple7_symbols(self):
        assert get_variant('simple7').symbols == ('A_PCh', 'A_Cre', 'A_NAA', 'A_MM', 'A_Lip', 'T2star', 'SNR')

    def test_standard14_roles(self):
        variant = get_variant(STANDARD14)
        assert variant.n_baselines == 5
        assert variant.has_role('phase0') and variant.has_role('phase1')
        assert not variant.has_role('lorentzian_per_met')

    def test_complex26_roles(self):
        variant = get_variant(COMPLEX26)
        assert len(variant.indices('lorentzian_per_met')) == 9
        assert len(variant.indices('gaussian_global')) == 1
        assert not variant.has_role('phase1')
        assert variant.n_baselines == 5

    def test_unknown_variant(self):
        with pytest.raises(ConfigError):
            get_variant('SIMPLE8')

    def test_index_of_unknown_symbol(self):
        with pytest.raises(KeyError):
            get_variant(SIMPLE7).index_of('phi0')

    def test_normalize_maps_bounds_to_unit_interval(self):
        variant = get_variant(STANDARD14)
        assert np.allclose(variant.normalize(variant.low), 0.0)
        assert np.allclose(variant.normalize(variant.high), 1.0)
        values = sample_parameters(variant, 3).values
        assert np.allclose(variant.denormalize(variant.normalize(values)), values)

    def test_with_bounds_prefers_symbols_over_roles(self):
        variant = get_variant(SIMPLE7).with_bounds({'amplitude': (0.1, 0.2), 'A_NAA': (0.5, 0.6)})
        assert variant.low[variant.index_of('A_PCh')] == 0.1
        assert variant.low[variant.index_of('A_NAA')] == 0.5
        assert get_variant(SIMPLE7).low[0] == 0.0


class TestParameterVector:
    @pytest.mark.parametrize('name', [SIMPLE7, STANDARD14, COMPLEX26])
    def test_sample_within_bounds(self, name):
        variant = get_variant(name)
        for seed in range(20):
            values = sample_parameters(name, seed).values
            assert np.all(values >= variant.low) and np.all(values <= variant.high)
        assert 5.0 <= sample_parameters(name, 0)['SNR'] <= 30.0

    def test_sample_reproducible(self):
        first = sample_parameters(COMPLEX26, (4, 2))
        second = sample_parameters(COMPLEX26, (4, 2))
        assert np.array_equal(first.values, second.values)
        assert not np.array_equal(first.values, sample_parameters(COMPLEX26, (4, 3)).values)

    def test_upper_bound_is_reachable(self):
        variant = get_variant(SIMPLE7)
        rng = mock.MagicMock()
        rng.random.return_value = np.zeros(variant.size)
        assert np.array_equal(draw_uniform(variant, rng), variant.high)

    @pytest.mark.parametrize('values', [
        [0.5] * 6,
        [0.5, 0.5, 0.5, 0.5, 0.5, 0.05, 40.0],
        [0.5, 0.5, 0.5, 0.5, np.nan, 0.05, 10.0],
    ])
    def test_invalid_values(self, values):
        with pytest.raises(ConfigError):
            ParameterVector(SIMPLE7, np.array(values))

    def test_access_and_replace(self):
        params = sample_parameters(SIMPLE7, 1)
        changed = params.replace(SNR=12.5)
        assert changed['SNR'] == 12.5
        assert params['SNR'] != 12.5
        assert changed.as_dict()['A_NAA'] == params['A_NAA']
        with pytest.raises(ConfigError):
            params.replace(SNR=100.0)
