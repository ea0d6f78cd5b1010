# Copyright 2024, specdrop contributors
#
# This Source Code Form is subject to the terms of the Mozilla Public
# License, v. 2.0. If a copy of the MPL was not distributed with this
# file, You can obtain one at https://mozilla.org/MPL/2.0/.


"""Settings"""
import os
import argparse
import copy
import pathlib
import yaml
from schema import Schema, SchemaError, And, Optional, Or, Use

from .ablation import baseline_cell, dropout_cell, table1_matrix, table2_matrix
from .commons import ConfigError
from .dropout import Q_MODES, SELECTIONS, TECHNIQUES
from .models import PRESETS
from .trainer import OPTIMIZERS, RunConfig

SETTING_FILENAME = 'specdrop_settings.yml'
OUTPUT_ROOT_VARIABLE = 'SPECDROP_OUTPUT_ROOT'
P_MAX_WARNING = 0.10
COMMANDS = ('simulate', 'train', 'ablate', 'report')
SCHEDULES = ('linear',)

# Filled before validation.
DEFAULTS = {
    'name': 'run',
    'variant': 'SIMPLE7',
    'preset': 'tiny',
    'seed': 0,
    'epochs': 100,
    'batch_size': 250,
    'learning_rate': 0.001,
    'optimizer': 'adam',
    'dataset': None,
    'n': 2000,
    'split': 0.8,
    'output_dir': 'runs',
    'device': 'cpu',
    'divergence_factor': 10.0,
    'divergence_patience': 3,
    'cluster_batch': 256,
    'debug': False,
    'model': {
        'crelu_half': True,
        'condenser_blocks': 2,
        'condenser_attention': True,
    },
    'loss': {
        'pen_min': 1.0,
        'normalize_s_bar': False,
    },
    'dropout': {},
}

_rate = And(Use(float), lambda p: 0.0 <= p <= 1.0)
_positive_int = And(int, lambda n: n >= 1)
_site_options = {
    Optional('placement'): Or('inside', 'outside', 'stem'),
    Optional('q'): _rate,
    Optional('q_mode'): Or(*Q_MODES),
    Optional('activation_epoch'): And(int, lambda n: n >= 0),
    Optional('schedule'): Or(*SCHEDULES),
    Optional('selection'): Or(*SELECTIONS),
    Optional('distance_threshold'): And(Use(float), lambda d: d > 0),
}
SITE_SCHEMA = Schema({'technique': Or(*TECHNIQUES), 'p_max': _rate, **_site_options})
SITE_DEFAULTS_SCHEMA = Schema(_site_options)
CELL_SCHEMA = Schema({
    'name': str,
    Optional('group'): Or('baseline', 'individual', 'combinations'),
    Optional('variant'): str,
    Optional('sites'): {Or('post_stem', 'inside', 'outside'): {'technique': Or(*TECHNIQUES), 'p_max': _rate}},
})
SETTING_SCHEMA = Schema(
            {
                'name': And(str, len),
                'variant': Use(str),
                'preset': Or(*PRESETS),
                'seed': int,
                'epochs': _positive_int,
                'batch_size': _positive_int,
                'learning_rate': And(Use(float), lambda lr: lr > 0),
                'optimizer': Or(*OPTIMIZERS),
                'dataset': Or(str, None),
                'n': _positive_int,
                'split': And(Use(float), lambda s: 0 < s < 1),
                'output_dir': str,
                'device': str,
                'divergence_factor': And(Use(float), lambda f: f > 1),
                'divergence_patience': _positive_int,
                'cluster_batch': _positive_int,
                'debug': bool,
                'model': {
                    'crelu_half': bool,
                    'condenser_blocks': And(int, lambda n: n >= 0),
                    'condenser_attention': bool,
                },
                'loss': {
                    'pen_min': Use(float),
                    'normalize_s_bar': bool,
                },
                'dropout': {Optional(str): SITE_SCHEMA},
                Optional('ablation'): {
                    'matrix': Or('table1', 'table2', [CELL_SCHEMA]),
                    Optional('p_values'): [_rate],
                    Optional('variants'): [str],
                    Optional('site_defaults'): SITE_DEFAULTS_SCHEMA,
                    Optional('shard'): [int],
                },
            })

# Command-line options that override a setting of the same name.
OVERRIDES = ('name', 'variant', 'preset', 'seed', 'epochs', 'batch_size', 'learning_rate', 'dataset', 'n',
             'split', 'output_dir', 'device', 'debug')


def shard_type(value):
    """'i/n' -> (i, n)."""
    try:
        index, count = (int(part) for part in value.split('/'))
    except ValueError:
        raise argparse.ArgumentTypeError('Expected a shard as i/n, got {}'.format(value)) from None
    if count < 1 or not 0 <= index < count:
        raise argparse.ArgumentTypeError('Shard index must lie in [0, {}), got {}'.format(count, index))
    return index, count


def parse_args(argv=None):
    """CLI interface."""
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument(
        '-c', '--config',
        type=str,
        help='Path to the settings file (default: {} in the usual locations).'.format(SETTING_FILENAME)
    )
    common.add_argument(
        '--debug',
        action='store_true',
        default=None,
        help='Enable debug mode.'
    )
    data = argparse.ArgumentParser(add_help=False)
    data.add_argument('--variant', type=str, help='Task variant: SIMPLE7, STANDARD14 or COMPLEX26.')
    data.add_argument('-n', '--n', type=int, help='Number of simulated spectra.')
    data.add_argument('--seed', type=int, help='Random seed.')
    data.add_argument('--split', type=float, help='Training fraction of the dataset.')
    run = argparse.ArgumentParser(add_help=False)
    run.add_argument('--name', type=str, help='Run name (the run directory below the output directory).')
    run.add_argument('--preset', type=str, help='Model preset: {}.'.format(', '.join(PRESETS)))
    run.add_argument('--epochs', type=int, help='Number of epochs.')
    run.add_argument('--batch-size', dest='batch_size', type=int, help='Batch size.')
    run.add_argument('--learning-rate', dest='learning_rate', type=float, help='Adam learning rate.')
    run.add_argument('--dataset', type=str, help='Dataset file; simulated when omitted.')
    run.add_argument('-o', '--output-dir', dest='output_dir', type=str,
                     help='Output root (default: ${} or ./runs).'.format(OUTPUT_ROOT_VARIABLE))
    run.add_argument('--device', type=str, help='Torch device, e.g. cpu or cuda.')

    parser = argparse.ArgumentParser(description='Precise CNN-based MRS spectral modeling with structured dropout.')
    commands = parser.add_subparsers(dest='command', metavar='command')
    commands.required = True

    simulate = commands.add_parser('simulate', parents=[common, data], help='Simulate a labeled dataset.')
    simulate.add_argument('--out', dest='output', required=True, help='Path of the dataset file to write.')
    simulate.add_argument('--basis', type=str, help='Basis set (.npz); built from the line list when omitted.')

    commands.add_parser('train', parents=[common, data, run], help='Train one configuration.')

    ablate = commands.add_parser('ablate', parents=[common, data, run], help='Run an ablation matrix.')
    ablate.add_argument('--matrix', type=str, help='table1, table2 or config (the cells of the settings file).')
    ablate.add_argument('--shard', type=shard_type, help='Run only shard i of n, written as i/n.')
    ablate.add_argument('--collect', action='store_true',
                        help='Only assemble the table from the records already written.')

    report = commands.add_parser('report', parents=[common], help='Write reports of finished runs.')
    report.add_argument('--run-dir', dest='run_dir', type=str, help='One run directory.')
    report.add_argument('--runs-root', dest='runs_root', type=str, help='Every run directory below this one.')
    report.add_argument('--table', type=str, help='An ablation table CSV.')
    report.add_argument('--reevaluate', action='store_true',
                        help='Re-evaluate the best checkpoint of --run-dir against its recorded report.')
    report.add_argument('-o', '--output-dir', dest='output_dir', type=str, help='Report directory.')

    args = parser.parse_args(argv)
    if args.command == 'report' and not (args.run_dir or args.runs_root or args.table):
        parser.error('report needs --run-dir, --runs-root or --table')
    return args


def site_fields(block):
    """DropoutConfig fields of a settings site block."""
    fields = dict(block)
    fields.pop('schedule', None)
    if 'q' in fields:
        fields['q_threshold'] = fields.pop('q')
    return fields


def _check_placement(site, block):
    placement = block.get('placement')
    if placement is None:
        return
    implied = 'stem' if site == 'post_stem' else site.split('_')[0]
    if placement != implied:
        raise ConfigError('Site {} implies placement {}, got {}'.format(site, implied, placement))


class Settings:
    """Gather settings.

        Attributes:
            args (Namespace): Parsed command line, or None.
            settings (dict): Validated settings with defaults filled.
            settings_file (Path): The file used, or None.
    """
    def __init__(self, args=None, setting_filename=SETTING_FILENAME, required=True):
        self.file_name = setting_filename
        self.args = args
        self.required = required
        self.locations = [os.getcwd()]
        try:
            file_path = pathlib.Path(__file__)
            self.locations.append(str(file_path.resolve().parent))
        except NameError:
            pass
        self.locations.extend(['/usr/local/etc', '/etc'])
        self.settings_file = None
        self.settings = self.load()
        if args is not None:
            self.apply_args()

    def __contains__(self, key):
        return key in self.settings

    def __getitem__(self, key):
        return self.settings[key]

    def find(self):
        """The settings file: --config if given, else the first one in the search locations."""
        explicit = getattr(self.args, 'config', None)
        if explicit:
            path = pathlib.Path(explicit)
            if not path.exists():
                raise FileNotFoundError('No such settings file: {}'.format(path))
            return path
        for location in self.locations:
            path = pathlib.Path(location) / self.file_name
            if path.exists():
                return path
        return None

    def apply_args(self):
        """Override config options with cli parameters."""
        for item in OVERRIDES:
            value = getattr(self.args, item, None)
            if value is not None:
                self.settings[item] = value
        self.settings = self.validate(self.settings)

    def load(self):
        """Load the settings."""
        self.settings_file = self.find()
        if self.settings_file is None:
            if self.required:
                raise FileNotFoundError('No settings file found.')
            settings = {}
        else:
            with open(str(self.settings_file)) as file_handle:
                try:
                    settings = yaml.safe_load(file_handle) or {}
                except yaml.YAMLError as err:
                    raise ConfigError('Malformed settings file {}: {}'.format(self.settings_file, err)) from err
        if not isinstance(settings, dict):
            raise ConfigError('The settings file must hold a mapping.')
        if 'output_dir' not in settings and os.environ.get(OUTPUT_ROOT_VARIABLE):
            settings['output_dir'] = os.environ[OUTPUT_ROOT_VARIABLE]
        return self.validate(settings)

    @staticmethod
    def validate(settings):
        merged = copy.deepcopy(DEFAULTS)
        for key, value in settings.items():
            if isinstance(value, dict) and isinstance(merged.get(key), dict) and key != 'dropout':
                merged[key] = dict(merged[key], **value)
            else:
                merged[key] = value
        try:
            return SETTING_SCHEMA.validate(merged)
        except SchemaError as err:
            raise ConfigError('Invalid settings: {}'.format(err)) from err


def dropout_sites(settings, logger=None):
    """Site key to DropoutConfig fields."""
    sites = {}
    for site, block in settings['dropout'].items():
        _check_placement(site, block)
        if block['p_max'] > P_MAX_WARNING and logger is not None:
            logger.warning('Site %s: p_max %s exceeds %s', site, block['p_max'], P_MAX_WARNING)
        sites[site] = site_fields(block)
    return sites


def run_config(settings, logger=None):
    """RunConfig of the settings."""
    model = settings['model']
    loss = settings['loss']
    return RunConfig(
        name=settings['name'],
        variant=settings['variant'],
        preset=settings['preset'],
        dropout=dropout_sites(settings, logger),
        seed=settings['seed'],
        epochs=settings['epochs'],
        batch_size=settings['batch_size'],
        learning_rate=settings['learning_rate'],
        optimizer=settings['optimizer'],
        dataset=settings['dataset'],
        n=settings['n'],
        split=settings['split'],
        output_dir=settings['output_dir'],
        device=settings['device'],
        divergence_factor=settings['divergence_factor'],
        divergence_patience=settings['divergence_patience'],
        crelu_half=model['crelu_half'],
        condenser_blocks=model['condenser_blocks'],
        condenser_attention=model['condenser_attention'],
        pen_min=loss['pen_min'],
        normalize_s_bar=loss['normalize_s_bar'],
        cluster_batch=settings['cluster_batch'],
    )


def _cell(block):
    sites = {site: (values['technique'], values['p_max']) for site, values in block.get('sites', {}).items()}
    if sites:
        cell = dropout_cell(block.get('group', 'individual'), sites, variant=block.get('variant'))
    else:
        cell = baseline_cell(variant=block.get('variant'), label='Baseline')
    cell.name = block['name']
    return cell


def ablation_matrix(settings, matrix=None):
    """(cells, site_defaults, shard) of the ablation block; matrix overrides its kind."""
    block = settings['ablation'] if 'ablation' in settings else {'matrix': 'table1'}
    kind = matrix or block['matrix']
    if kind == 'table1':
        cells = table1_matrix(*([tuple(block['p_values'])] if 'p_values' in block else []))
    elif kind == 'table2':
        cells = table2_matrix(*([tuple(block['variants'])] if 'variants' in block else []))
    elif kind == 'config':
        if not isinstance(block['matrix'], list):
            raise ConfigError('The settings file lists no ablation cells.')
        cells = [_cell(cell) for cell in block['matrix']]
    elif isinstance(kind, list):
        cells = [_cell(cell) for cell in kind]
    else:
        raise ConfigError('Unknown ablation matrix: {}'.format(kind))
    site_defaults = site_fields(block.get('site_defaults', {}))
    shard = tuple(block['shard']) if 'shard' in block else None
    if shard is not None and len(shard) != 2:
        raise ConfigError('An ablation shard is [index, count].')
    return cells, site_defaults, shard
