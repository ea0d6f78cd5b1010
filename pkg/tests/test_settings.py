import logging
from unittest import mock

import pytest
import yaml

from specdrop import settings as settings_module
from specdrop.commons import ConfigError
from specdrop.settings import (OUTPUT_ROOT_VARIABLE, Settings, ablation_matrix, dropout_sites, parse_args,
                               run_config)
from tests.conftest import logger, test_folder_path

CONFIG_DIR = test_folder_path.parent / 'configs'


def write_settings(path, data):
    path.write_text(yaml.safe_dump(data))
    return path


def load(path, *extra, command='train'):
    return Settings(parse_args([command, '--config', str(path), *extra]))


class TestSettingsFile:
    @pytest.mark.parametrize('name', ['specdrop_settings.yml.example', 'table1.yml', 'table2.yml',
                                      'precision_check.yml'])
    def test_shipped_files_are_valid(self, name):
        settings = load(CONFIG_DIR / name)
        assert run_config(settings).epochs == settings['epochs']

    def test_defaults(self, tmp_path):
        settings = load(write_settings(tmp_path / 'empty.yml', {}))
        assert settings.settings_file == tmp_path / 'empty.yml'
        assert (settings['epochs'], settings['batch_size'], settings['learning_rate']) == (100, 250, 0.001)
        assert settings['loss'] == {'pen_min': 1.0, 'normalize_s_bar': False}
        assert 'ablation' not in settings

    def test_nested_blocks_keep_defaults(self, tmp_path):
        settings = load(write_settings(tmp_path / 's.yml', {'model': {'condenser_blocks': 3}}))
        assert settings['model'] == {'crelu_half': True, 'condenser_blocks': 3, 'condenser_attention': True}

    def test_search_locations(self, tmp_path, monkeypatch):
        monkeypatch.chdir(tmp_path)
        write_settings(tmp_path / settings_module.SETTING_FILENAME, {'epochs': 7})
        assert Settings()['epochs'] == 7

    def test_missing_file(self, tmp_path, monkeypatch):
        monkeypatch.chdir(tmp_path)
        with mock.patch.object(Settings, 'find', return_value=None):
            with pytest.raises(FileNotFoundError):
                Settings()
            assert Settings(required=False)['n'] == 2000
        with pytest.raises(FileNotFoundError):
            load(tmp_path / 'nothing.yml')

    @pytest.mark.parametrize('content', ['epochs: [1, 2', '- a\n- b\n'])
    def test_malformed_file(self, tmp_path, content):
        path = tmp_path / 'bad.yml'
        path.write_text(content)
        with pytest.raises(ConfigError):
            load(path)

    @pytest.mark.parametrize('data', [
        {'epochs': 0},
        {'split': 1.5},
        {'preset': 'resnet18'},
        {'momentum': 0.9},
        {'dropout': {'outside': {'technique': 'gaussian', 'p_max': 0.1}}},
        {'dropout': {'outside': {'technique': 'fad', 'p_max': 0.1, 'schedule': 'cosine'}}},
        {'ablation': {'matrix': 'table3'}},
    ])
    def test_invalid_values(self, tmp_path, data):
        with pytest.raises(ConfigError):
            load(write_settings(tmp_path / 's.yml', data))

    def test_output_root_from_environment(self, tmp_path, monkeypatch):
        monkeypatch.setenv(OUTPUT_ROOT_VARIABLE, '/data/specdrop')
        path = write_settings(tmp_path / 's.yml', {})
        assert load(path)['output_dir'] == '/data/specdrop'
        assert load(path, '-o', str(tmp_path))['output_dir'] == str(tmp_path)
        assert load(write_settings(tmp_path / 't.yml', {'output_dir': 'mine'}))['output_dir'] == 'mine'

    def test_command_line_overrides(self, tmp_path):
        path = write_settings(tmp_path / 's.yml', {'epochs': 20, 'seed': 1})
        settings = load(path, '--epochs', '5', '--seed', '3', '--debug', '--variant', 'COMPLEX26')
        assert (settings['epochs'], settings['seed'], settings['debug'], settings['variant']) == \
            (5, 3, True, 'COMPLEX26')
        assert load(path)['debug'] is False

    def test_invalid_override(self, tmp_path):
        with pytest.raises(ConfigError):
            load(write_settings(tmp_path / 's.yml', {}), '--split', '2.0')


class TestRunConfig:
    def test_q_is_the_threshold(self, mock_settings):
        config = run_config(mock_settings)
        assert config.dropout == {'outside': {'technique': 'wfad', 'p_max': 0.05, 'q_threshold': 0.8,
                                              'activation_epoch': 1}}
        assert config.name == 'mocked'

    @pytest.mark.parametrize(['site', 'placement'], [('inside', 'outside'), ('post_stem', 'inside'),
                                                     ('outside_layer2', 'inside')])
    def test_placement_mismatch(self, mock_settings, site, placement):
        mock_settings.settings['dropout'] = {site: {'technique': 'fad', 'p_max': 0.05, 'placement': placement}}
        with pytest.raises(ConfigError):
            dropout_sites(mock_settings)

    def test_matching_placement(self, mock_settings):
        mock_settings.settings['dropout'] = {'post_stem': {'technique': 'dropcluster', 'p_max': 0.1,
                                                           'placement': 'stem', 'activation_epoch': 1}}
        assert run_config(mock_settings).dropout['post_stem']['placement'] == 'stem'

    def test_high_rate_warning(self, mock_settings, caplog):
        mock_settings.settings['dropout']['outside']['p_max'] = 0.2
        with caplog.at_level(logging.WARNING):
            run_config(mock_settings, logger)
        assert 'exceeds 0.1' in caplog.text


class TestParseArgs:
    def test_shard(self):
        args = parse_args(['ablate', '--matrix', 'table1', '--shard', '1/4'])
        assert (args.command, args.matrix, args.shard, args.collect) == ('ablate', 'table1', (1, 4), False)

    @pytest.mark.parametrize('argv', [
        ['ablate', '--shard', '4/4'],
        ['ablate', '--shard', 'one/four'],
        ['report'],
        [],
        ['simulate'],
        ['simulate', 'data.bin'],
    ])
    def test_invalid(self, argv):
        with pytest.raises(SystemExit):
            parse_args(argv)

    def test_simulate_options(self):
        args = parse_args(['simulate', '--variant', 'complex26', '--n', '10', '--seed', '0', '--split', '0.8',
                           '--out', 'x.bin'])
        assert (args.variant, args.n, args.seed, args.split, args.output) == ('complex26', 10, 0, 0.8, 'x.bin')

    def test_debug_is_unset_by_default(self):
        assert parse_args(['train']).debug is None


class TestAblationMatrix:
    def test_table1_rates(self, mock_settings):
        mock_settings.settings['ablation'] = {'matrix': 'table1', 'p_values': [0.1], 'shard': [0, 2],
                                              'site_defaults': {'activation_epoch': 1, 'q': 0.5}}
        cells, site_defaults, shard = ablation_matrix(mock_settings)
        assert len(cells) == 12
        assert site_defaults == {'activation_epoch': 1, 'q_threshold': 0.5}
        assert shard == (0, 2)

    def test_default_is_table1(self, mock_settings):
        cells, site_defaults, shard = ablation_matrix(mock_settings)
        assert len(cells) == 26
        assert (site_defaults, shard) == ({}, None)
        assert len(ablation_matrix(mock_settings, 'table2')[0]) == 6

    def test_cells_from_file(self):
        settings = load(CONFIG_DIR / 'precision_check.yml', command='ablate')
        cells, site_defaults, _ = ablation_matrix(settings, 'config')
        assert [cell.name for cell in cells] == ['baseline', 'dC+FAD_I+wFAD_O']
        assert cells[1].delta['dropout']['inside'] == {'technique': 'fad', 'p_max': 0.025}
        assert cells[0].delta == {'dropout': {}}
        assert site_defaults == {'activation_epoch': 10}

    def test_errors(self, mock_settings):
        with pytest.raises(ConfigError):
            ablation_matrix(mock_settings, 'config')
        with pytest.raises(ConfigError):
            ablation_matrix(mock_settings, 'table3')
        mock_settings.settings['ablation'] = {'matrix': 'table1', 'shard': [1]}
        with pytest.raises(ConfigError):
            ablation_matrix(mock_settings)
