# Copyright 2024, specdrop contributors
#
# This Source Code Form is subject to the terms of the Mozilla Public
# License, v. 2.0. If a copy of the MPL was not distributed with this
# file, You can obtain one at https://mozilla.org/MPL/2.0/.


"""Ablation matrices and the table they produce.

A matrix is a list of cells; every cell is a set of RunConfig overrides plus the
labels of its table row. Each cell trains in its own run directory, so a matrix can
be split into shards that run concurrently and are merged by re-reading the records.
"""
import copy
import json
import math
import pathlib
from dataclasses import dataclass, field
from typing import Dict, Tuple

import pandas as pd

from .commons import ConfigError, DivergenceError, SpecdropError
from .trainer import RECORD_FILE, RunConfig, RunRecord, Trainer, load_run_dataset

GROUPS = ('baseline', 'individual', 'combinations')
TABLE_COLUMNS = ['group', 'run', 'technique', 'placement', 'drop prob', 'Epoch', 'MAPE', 'STD', 'r²', 'S̄',
                 'status']
NA = 'na'
P_VALUES = (0.10, 0.05, 0.025)
LABELS = {'dropcluster': 'dC', 'fad': 'FAD', 'wfd': 'wFD', 'wfad': 'wFAD'}
SUBSCRIPTS = {'post_stem': '', 'inside': '_I', 'outside': '_O'}
COMPLEXITY_VARIANTS = ('SIMPLE7', 'STANDARD14', 'COMPLEX26')
REUSABLE = ('complete', 'diverged')


def format_rate(p):
    """0.1 -> '0.10', 0.025 -> '0.025'."""
    text = '{:.3f}'.format(p).rstrip('0')
    whole, _, decimals = text.partition('.')
    return '{}.{}'.format(whole, decimals.ljust(2, '0'))


@dataclass
class AblationCell:
    """One row of an ablation table.

        Attributes:
            group (str): baseline, individual or combinations.
            name (str): Run name, also the name of its run directory.
            delta (dict): RunConfig overrides.
            technique (str): Row label.
            placement (str): Site label(s).
            rates (tuple): Distinct p_max values, in site order.
    """
    group: str
    name: str
    delta: Dict = field(default_factory=dict)
    technique: str = '-'
    placement: str = '-'
    rates: Tuple[float, ...] = ()

    def __post_init__(self):
        if self.group not in GROUPS:
            raise ConfigError('Unknown ablation group: {}'.format(self.group))

    @property
    def drop_prob(self):
        if not self.rates:
            return '- -'
        return '/'.join(format_rate(p) for p in self.rates)


def dropout_cell(group, sites, prefix='', variant=None):
    """Cell from {site: (technique, p_max)}; sites are post_stem, inside or outside."""
    dropout = {}
    labels = []
    rates = []
    for site, (technique, p_max) in sites.items():
        if site not in SUBSCRIPTS:
            raise ConfigError('Unknown ablation site: {}'.format(site))
        dropout[site] = {'technique': technique, 'p_max': float(p_max)}
        labels.append(LABELS[technique] + SUBSCRIPTS[site])
        if p_max not in rates:
            rates.append(p_max)
    name = prefix + '+'.join('{}_{}'.format(label, format_rate(dropout[site]['p_max']))
                             for label, site in zip(labels, sites))
    delta = {'dropout': dropout}
    if variant is not None:
        delta['variant'] = variant
    placement = ', '.join('stem' if site == 'post_stem' else site for site in sites)
    return AblationCell(group, name, delta, ', '.join(labels), placement, tuple(rates))


def baseline_cell(prefix='', variant=None, label='ResNet'):
    delta = {'dropout': {}}
    if variant is not None:
        delta['variant'] = variant
    return AblationCell('baseline', prefix + 'baseline', delta, label)


def table1_matrix(p_values=P_VALUES):
    """The dropout study: the baseline, every technique alone at every rate and
    the four combinations at the rates the published study reports."""
    cells = [baseline_cell()]
    for p in p_values:
        cells.append(dropout_cell('individual', {'post_stem': ('dropcluster', p)}))
    for technique in ('fad', 'wfd', 'wfad'):
        for site in ('outside', 'inside'):
            for p in p_values:
                cells.append(dropout_cell('individual', {site: (technique, p)}))
    combinations = (
        {'post_stem': ('dropcluster', 0.10), 'outside': ('wfad', 0.05)},
        {'post_stem': ('dropcluster', 0.10), 'inside': ('fad', 0.05)},
        {'inside': ('fad', 0.025), 'outside': ('wfad', 0.025)},
        {'post_stem': ('dropcluster', 0.10), 'inside': ('fad', 0.025), 'outside': ('wfad', 0.025)},
    )
    cells.extend(dropout_cell('combinations', sites) for sites in combinations)
    return cells


def proposed_sites():
    return {'post_stem': ('dropcluster', 0.10), 'inside': ('fad', 0.025), 'outside': ('wfad', 0.025)}


def table2_matrix(variants=COMPLEXITY_VARIANTS):
    """The complexity sweep: baseline and the dC/FAD_I/wFAD_O combination per variant."""
    cells = []
    for variant in variants:
        prefix = '{}_'.format(variant.lower())
        cells.append(baseline_cell(prefix, variant, label='Baseline'))
        cells.append(dropout_cell('combinations', proposed_sites(), prefix, variant))
    return cells


def merge(base, delta):
    """Recursive dict update; returns a new dict."""
    merged = copy.deepcopy(base)
    for key, value in delta.items():
        if isinstance(value, dict) and value and isinstance(merged.get(key), dict):
            merged[key] = merge(merged[key], value)
        else:
            merged[key] = copy.deepcopy(value)
    return merged


def apply_delta(base, cell, site_defaults=None):
    """RunConfig of one cell: the cell's overrides on top of the base run. The
    cell's dropout block replaces the base block; site_defaults fill every site."""
    data = base.to_dict()
    delta = dict(cell.delta)
    dropout = delta.pop('dropout', data['dropout'])
    data = merge(data, delta)
    data['dropout'] = {site: merge(site_defaults or {}, values) for site, values in dropout.items()}
    data['name'] = cell.name
    return RunConfig.from_dict(data)


class AblationTable:
    """Rows of an ablation in the published column layout; all cells are strings."""
    def __init__(self, frame=None):
        if frame is None:
            frame = pd.DataFrame(columns=TABLE_COLUMNS)
        missing = set(TABLE_COLUMNS) - set(frame.columns)
        if missing:
            raise ConfigError('Ablation table lacks columns: {}'.format(', '.join(sorted(missing))))
        self.frame = frame[TABLE_COLUMNS].astype(str).reset_index(drop=True)

    def __len__(self):
        return len(self.frame)

    def __eq__(self, other):
        return isinstance(other, AblationTable) and self.frame.equals(other.frame)

    def group(self, name):
        return self.frame[self.frame['group'] == name]

    @property
    def failed(self):
        return self.frame[self.frame['status'] != 'complete']

    def to_csv(self, path):
        path = pathlib.Path(path)
        self.frame.to_csv(str(path), index=False)
        return path

    @classmethod
    def from_csv(cls, path):
        return cls(pd.read_csv(str(path), dtype=str, keep_default_na=False))

    def to_json(self, path):
        path = pathlib.Path(path)
        path.write_text(json.dumps(self.frame.to_dict(orient='records'), indent=2, ensure_ascii=False),
                        encoding='utf-8')
        return path

    def to_text(self):
        return self.frame.drop(columns=['run', 'status']).to_string(index=False)

    def best_per_technique(self):
        """One individual row per (technique, placement): the completed rate with the
        lowest MAPE, or a row of 'na' when no rate completed. Baseline and
        combination rows are kept as they are."""
        rows = []
        individual = self.group('individual')
        for _, row in self.frame.iterrows():
            if row['group'] != 'individual':
                rows.append(row.to_dict())
                continue
            key = (row['technique'], row['placement'])
            if any((r['technique'], r['placement']) == key for r in rows if r['group'] == 'individual'):
                continue
            candidates = individual[(individual['technique'] == key[0]) & (individual['placement'] == key[1])]
            mape = pd.to_numeric(candidates['MAPE'], errors='coerce').where(candidates['status'] == 'complete')
            if mape.notna().any():
                rows.append(candidates.loc[mape.idxmin()].to_dict())
                continue
            statuses = list(dict.fromkeys(candidates['status']))
            rows.append(dict(table_row(AblationCell('individual', key[0], technique=key[0], placement=key[1])),
                             **{'drop prob': NA, 'status': '/'.join(statuses)}))
        return AblationTable(pd.DataFrame(rows, columns=TABLE_COLUMNS))


def _number(value):
    if value is None or not math.isfinite(value):
        return NA
    return '{:.2f}'.format(value)


def table_row(cell, record=None):
    """Row of a cell; every result column is 'na' unless the run completed."""
    row = {
        'group': cell.group,
        'run': cell.name,
        'technique': cell.technique,
        'placement': cell.placement,
        'drop prob': cell.drop_prob,
        'Epoch': NA, 'MAPE': NA, 'STD': NA, 'r²': NA, 'S̄': NA,
        'status': 'pending' if record is None else record.status,
    }
    if record is None or record.status != 'complete' or record.best is None:
        return row
    series = record.series.get('val/mape')
    row.update({
        'Epoch': str(record.best_epoch),
        'MAPE': _number(record.best['mape']),
        'STD': _number(record.best['std']),
        'r²': _number(record.best['r2']),
        'S̄': _number(None if series is None else series.s_bar()),
    })
    return row


def select_shard(cells, shard=None):
    """Every n-th cell starting at i, for shard = (i, n)."""
    if shard is None:
        return list(cells)
    index, count = shard
    if count < 1 or not 0 <= index < count:
        raise ConfigError('Invalid shard {}/{}'.format(index, count))
    return list(cells)[index::count]


class AblationRunner:
    """Train the cells of a matrix and assemble their table.

        Attributes:
            base (RunConfig): Settings shared by all cells.
            logger (Logger): Progress messages.
            site_defaults (dict): DropoutConfig fields applied to every site.
    """
    def __init__(self, base, logger, site_defaults=None):
        self.base = base
        self.logger = logger
        self.site_defaults = dict(site_defaults or {})
        self.datasets = {}

    def config(self, cell):
        return apply_delta(self.base, cell, self.site_defaults)

    def _dataset(self, config):
        key = (config.dataset, config.variant, config.n, config.seed, config.split)
        if key not in self.datasets:
            self.datasets[key] = load_run_dataset(config, self.logger)
        return self.datasets[key]

    def stored_record(self, config):
        path = config.run_dir / RECORD_FILE
        if not path.exists():
            return None
        record = RunRecord.load(path)
        if record.config_hash != config.hash:
            return None
        return record

    def run_cell(self, cell):
        config = self.config(cell)
        record = self.stored_record(config)
        if record is not None and record.status in REUSABLE:
            self.logger.info('Cell %s: reusing %s record', cell.name, record.status)
            return record
        trainer = Trainer(config, self.logger, dataset=self._dataset(config))
        try:
            record = trainer.run()
        except DivergenceError as err:
            self.logger.warning('Cell %s diverged: %s', cell.name, err)
            if err.record is not None:
                return err.record
            status, error = 'diverged', str(err)
        except SpecdropError as err:
            self.logger.error('Cell %s failed: %s', cell.name, err)
            status, error = 'failed', str(err)
        else:
            self.logger.info('Cell %s: complete', cell.name)
            return record
        record = trainer.record or RunRecord(config.name, config.to_dict(), config.hash)
        record.status = status
        record.error = error
        config.run_dir.mkdir(parents=True, exist_ok=True)
        record.save(config.run_dir / RECORD_FILE)
        return record

    def run(self, cells, shard=None):
        """Run the cells of one shard; {cell name: RunRecord}."""
        selected = select_shard(cells, shard)
        self.logger.info('Ablation: %s of %s cells', len(selected), len(cells))
        return {cell.name: self.run_cell(cell) for cell in selected}

    def collect(self, cells, records=None):
        """Table over all cells, completed from the records on disk."""
        records = dict(records or {})
        rows = []
        for cell in cells:
            record = records.get(cell.name)
            if record is None:
                record = self.stored_record(self.config(cell))
            rows.append(table_row(cell, record))
        return AblationTable(pd.DataFrame(rows, columns=TABLE_COLUMNS))


def check_matrix(cells):
    names = [cell.name for cell in cells]
    duplicates = sorted({name for name in names if names.count(name) > 1})
    if duplicates:
        raise ConfigError('Duplicate cell names: {}'.format(', '.join(duplicates)))
    if not cells:
        raise ConfigError('Empty ablation matrix.')


def ablate(base, cells, logger, shard=None, site_defaults=None):
    """Run a matrix (or one shard of it) and return the table over all its cells."""
    check_matrix(cells)
    runner = AblationRunner(base, logger, site_defaults)
    records = runner.run(cells, shard)
    table = runner.collect(cells, records)
    for _, row in table.failed.iterrows():
        logger.warning('Cell %s: %s', row['run'], row['status'])
    return table
