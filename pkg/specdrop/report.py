# Copyright 2024, specdrop contributors
#
# This Source Code Form is subject to the terms of the Mozilla Public
# License, v. 2.0. If a copy of the MPL was not distributed with this
# file, You can obtain one at https://mozilla.org/MPL/2.0/.


"""Reports: JSON summaries, CSV tables and plots, rebuilt from run records alone."""
import json
import pathlib

import matplotlib
matplotlib.use('Agg')
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .ablation import AblationTable  # noqa: E402
from .trainer import APE_FILE, RECORD_FILE, RunRecord  # noqa: E402

PLOT_DIR = 'plots'
SUMMARY_FILE = 'report.json'
# PNG metadata carries the matplotlib version otherwise.
PNG_METADATA = {'Software': None}


def plot_name(series_name):
    return series_name.replace('/', '_') + '.png'


def plot_series(series, path):
    """Curve of one MetricSeries, annotated with its S̄; returns that S̄ (None below three epochs)."""
    value = series.s_bar()
    figure, axes = plt.subplots(figsize=(6, 4))
    try:
        axes.plot(series.epochs, series.values, marker='.', linewidth=1.5)
        axes.set_xlabel('Epoch')
        axes.set_ylabel(series.name)
        axes.grid(True, alpha=0.3)
        label = 'S̄ = n/a' if value is None else 'S̄ = {:.4g}'.format(value)
        axes.text(0.98, 0.95, label, transform=axes.transAxes, ha='right', va='top')
        figure.tight_layout()
        figure.savefig(str(path), metadata=PNG_METADATA)
    finally:
        plt.close(figure)
    return value


def plot_ape_histogram(ape, path, bins=50):
    """Histogram of absolute percent errors; NaN (zero-target) entries are left out."""
    ape = np.asarray(ape, dtype=np.float64).ravel()
    ape = ape[np.isfinite(ape)]
    figure, axes = plt.subplots(figsize=(6, 4))
    try:
        axes.hist(ape, bins=bins)
        axes.set_xlabel('Absolute percent error (%)')
        axes.set_ylabel('Count')
        if ape.size:
            axes.axvline(float(np.mean(ape)), color='k', linestyle='--', linewidth=1)
        figure.tight_layout()
        figure.savefig(str(path), metadata=PNG_METADATA)
    finally:
        plt.close(figure)
    return path


def summary(record):
    return {
        'name': record.name,
        'status': record.status,
        'error': record.error,
        'config_hash': record.config_hash,
        'best_epoch': record.best_epoch,
        'best': record.best,
        's_bar': record.s_bars(),
        'wall_clock': record.wall_clock,
        'environment': record.environment,
    }


class Reporter:
    """Write the report files of runs and ablation tables.

        Attributes:
            output_dir (Path): Where the files go.
            logger (Logger): Progress messages.
    """
    def __init__(self, output_dir, logger):
        self.output_dir = pathlib.Path(output_dir)
        self.logger = logger

    def _target(self, name):
        target = self.output_dir / name
        target.mkdir(parents=True, exist_ok=True)
        return target

    def report_run(self, run_dir):
        """Summary JSON, metrics CSV, one curve per logged series and the APE histogram."""
        run_dir = pathlib.Path(run_dir)
        record = RunRecord.load(run_dir / RECORD_FILE)
        target = self._target(record.name)
        plots = target / PLOT_DIR
        plots.mkdir(exist_ok=True)
        written = []
        summary_path = target / SUMMARY_FILE
        summary_path.write_text(json.dumps(summary(record), indent=2, sort_keys=True, ensure_ascii=False),
                                encoding='utf-8')
        written.append(summary_path)
        metrics_path = target / 'metrics.csv'
        record.metric_rows().to_csv(str(metrics_path), index=False)
        written.append(metrics_path)
        for name in sorted(record.series):
            path = plots / plot_name(name)
            plot_series(record.series[name], path)
            written.append(path)
        ape_path = run_dir / APE_FILE
        if ape_path.exists():
            written.append(plot_ape_histogram(np.load(str(ape_path)), plots / 'ape_histogram.png'))
        self.logger.info('Report of %s: %s files in %s', record.name, len(written), target)
        return written

    def report_table(self, table, name='ablation'):
        """CSV, JSON and plain-text renderings of an ablation table."""
        if not isinstance(table, AblationTable):
            table = AblationTable.from_csv(table)
        target = self._target('')
        written = [
            table.to_csv(target / '{}.csv'.format(name)),
            table.to_json(target / '{}.json'.format(name)),
        ]
        text_path = target / '{}.txt'.format(name)
        text_path.write_text(table.to_text() + '\n', encoding='utf-8')
        written.append(text_path)
        self.logger.info('Table %s: %s rows, %s not complete', name, len(table), len(table.failed))
        return written

    def report_all(self, runs_root):
        """Report every run directory under runs_root."""
        written = []
        for record_path in sorted(pathlib.Path(runs_root).glob('*/' + RECORD_FILE)):
            written.extend(self.report_run(record_path.parent))
        if not written:
            self.logger.warning('No run records under %s', runs_root)
        return written
