# Copyright 2024, specdrop contributors
#
# This Source Code Form is subject to the terms of the Mozilla Public
# License, v. 2.0. If a copy of the MPL was not distributed with this
# file, You can obtain one at https://mozilla.org/MPL/2.0/.


"""Training runs: the epoch loop, per-epoch records, best-model checkpoints."""
import json
import os
import pathlib
import time
from dataclasses import asdict, dataclass, field, fields
from typing import Dict, Optional

import numpy as np
import pandas as pd
import torch
from torch.utils.data import DataLoader, TensorDataset

from .commons import (ConfigError, DivergenceError, ZCLock, check_disk_usage, check_permissions,
                      config_hash, environment_fingerprint)
from .dataset import generate_dataset, read_dataset
from .dropout import DropCluster
from .loss import LossGroups, compute_lambdas, initial_lambdas, total_loss
from .metrics import EvalReport, MetricSeries, absolute_percent_errors, evaluate_predictions
from .models import ModelConfig, build_model, predict, refit_clusters, set_dropout_mode, to_input
from .variants import get_variant

RECORD_FILE = 'record.json'
METRICS_FILE = 'metrics.csv'
CHECKPOINT_FILE = 'best.pt'
SIDECAR_FILE = 'best.json'
APE_FILE = 'best_ape.npy'
OPTIMIZERS = ('adam',)
MIN_DIVERGENCE_PATIENCE = 1


@dataclass
class RunConfig:
    """Everything that determines one training run.

        dropout maps site keys (post_stem, inside, outside, inside_layerN,
        outside_layerN) to DropoutConfig fields. Without a dataset path the data are
        simulated from (variant, n, seed, split).
    """
    name: str = 'run'
    variant: str = 'SIMPLE7'
    preset: str = 'tiny'
    dropout: Dict[str, dict] = field(default_factory=dict)
    seed: int = 0
    epochs: int = 100
    batch_size: int = 250
    learning_rate: float = 0.001
    optimizer: str = 'adam'
    dataset: Optional[str] = None
    n: int = 2000
    split: float = 0.8
    output_dir: str = 'runs'
    device: str = 'cpu'
    divergence_factor: float = 10.0
    divergence_patience: int = 3
    crelu_half: bool = True
    condenser_blocks: int = 2
    condenser_attention: bool = True
    pen_min: float = 1.0
    normalize_s_bar: bool = False
    cluster_batch: int = 256

    def __post_init__(self):
        self.variant = get_variant(self.variant).name
        if self.optimizer.lower() not in OPTIMIZERS:
            raise ConfigError('Unsupported optimizer: {}'.format(self.optimizer))
        if self.epochs < 1 or self.batch_size < 1 or self.learning_rate <= 0:
            raise ConfigError('epochs, batch_size and learning_rate must be positive.')
        if self.divergence_patience < MIN_DIVERGENCE_PATIENCE or self.divergence_factor <= 1:
            raise ConfigError('Invalid divergence settings.')
        for site, config in self.model_config().dropout_sites.items():
            if config.activation_epoch >= self.epochs:
                raise ConfigError('Site {} activates at epoch {}, but training ends at {}'.format(
                    site, config.activation_epoch, self.epochs))

    @property
    def task(self):
        return get_variant(self.variant)

    @property
    def run_dir(self):
        return pathlib.Path(self.output_dir) / self.name

    def model_config(self):
        return ModelConfig(
            preset=self.preset,
            output_dim=self.task.size,
            crelu_half=self.crelu_half,
            condenser_blocks=self.condenser_blocks,
            condenser_attention=self.condenser_attention,
            dropout_sites=dict(self.dropout),
            seed=self.seed,
            total_epochs=self.epochs,
        )

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, data):
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError('Unknown run settings: {}'.format(', '.join(sorted(unknown))))
        return cls(**data)

    @property
    def hash(self):
        # The output location does not change the results.
        data = self.to_dict()
        data.pop('output_dir')
        data.pop('name')
        return config_hash(data)


@dataclass
class RunRecord:
    """Append-only log of one run; saved after every epoch.

        Attributes:
            series (dict): 'split/metric' to MetricSeries.
            best (dict): EvalReport of the best epoch (by validation MAPE).
            status (str): running, complete or diverged.
    """
    name: str
    config: dict
    config_hash: str
    series: Dict[str, MetricSeries] = field(default_factory=dict)
    best: Optional[dict] = None
    best_epoch: Optional[int] = None
    status: str = 'running'
    error: Optional[str] = None
    wall_clock: float = 0.0
    environment: dict = field(default_factory=dict)
    checkpoint: Optional[str] = None

    def log(self, name, epoch, value):
        self.series.setdefault(name, MetricSeries(name)).append(epoch, value)

    def s_bars(self):
        return {name: series.s_bar() for name, series in self.series.items() if series.s_bar() is not None}

    def best_report(self):
        return None if self.best is None else EvalReport.from_dict(self.best)

    def to_dict(self):
        data = asdict(self)
        data['series'] = {name: asdict(series) for name, series in self.series.items()}
        return data

    @classmethod
    def from_dict(cls, data):
        data = dict(data)
        data['series'] = {name: MetricSeries(**series) for name, series in data.get('series', {}).items()}
        return cls(**data)

    def save(self, path):
        path = pathlib.Path(path)
        tmp = path.with_suffix('.tmp')
        tmp.write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True))
        os.replace(str(tmp), str(path))
        return path

    @classmethod
    def load(cls, path):
        return cls.from_dict(json.loads(pathlib.Path(path).read_text()))

    def metric_rows(self):
        """Long table (epoch, metric, split, value) of all series."""
        rows = []
        for name, series in self.series.items():
            split, metric = name.split('/', 1)
            rows.extend((epoch, metric, split, value) for epoch, value in zip(series.epochs, series.values))
        return pd.DataFrame(rows, columns=['epoch', 'metric', 'split', 'value'])


def load_run_dataset(config, logger=None):
    if config.dataset:
        path = pathlib.Path(config.dataset)
        if not path.exists():
            raise ConfigError('Dataset not found: {}'.format(path))
        dataset = read_dataset(path)
    else:
        dataset = generate_dataset(config.variant, config.n, config.seed, config.split, logger=logger)
    if dataset.variant.name != config.variant:
        raise ConfigError('Dataset holds {}, the run expects {}'.format(dataset.variant.name, config.variant))
    return dataset


class Trainer:
    """Run one training configuration.

        Attributes:
            config (RunConfig): The run.
            logger (Logger): Progress messages.
            dataset (Dataset): Training data; loaded or simulated when None.
    """
    def __init__(self, config, logger, dataset=None):
        self.config = config
        self.logger = logger
        self.dataset = dataset
        self.run_dir = config.run_dir
        self.record = None
        self.model = None

    def run(self):
        output = pathlib.Path(self.config.output_dir)
        output.mkdir(parents=True, exist_ok=True)
        if not check_permissions((str(output),), logger=self.logger):
            raise ConfigError('Insufficient permissions for {}'.format(output))
        if not check_disk_usage((str(output),), logger=self.logger):
            raise ConfigError('Not enough free space at {}'.format(output))
        self.run_dir.mkdir(parents=True, exist_ok=True)
        with ZCLock(self.run_dir):
            return self._run()

    def _prepare(self):
        config = self.config
        if self.dataset is None:
            self.dataset = load_run_dataset(config, self.logger)
        elif self.dataset.variant.name != config.variant:
            raise ConfigError('Dataset holds {}, the run expects {}'.format(
                self.dataset.variant.name, config.variant))
        torch.manual_seed(config.seed)
        self.model = build_model(config.model_config()).to(config.device)
        self.input_scale = self.dataset.input_scale()
        spectra, targets = self.dataset.part('train')
        x = to_input(spectra, self.input_scale)
        y = torch.as_tensor(self.dataset.variant.normalize(targets), dtype=torch.float32)
        self.loader = DataLoader(TensorDataset(x, y), batch_size=config.batch_size, shuffle=True,
                                 generator=torch.Generator().manual_seed(config.seed))
        self.val_spectra, self.val_targets = self.dataset.part('val')
        if len(self.val_spectra) == 0:
            raise ConfigError('The validation split is empty.')
        self.cluster_batch = to_input(self.val_spectra[:config.cluster_batch], self.input_scale, config.device)
        self.optimizer = torch.optim.Adam(self.model.parameters(), lr=config.learning_rate)
        self.groups = LossGroups(self.dataset.variant, config.pen_min, config.normalize_s_bar)
        self.lambdas = initial_lambdas(self.groups)
        self.record = RunRecord(config.name, config.to_dict(), config.hash,
                                environment=environment_fingerprint())
        self.logger.info('Run %s: %s, %s train / %s val spectra, %s epochs',
                         config.name, config.variant, len(spectra), len(self.val_spectra), config.epochs)

    def _dropcluster_due(self, epoch):
        return [module for module in self.model.dropout_modules()
                if isinstance(module, DropCluster) and epoch >= module.config.activation_epoch]

    def _train_epoch(self, epoch):
        device = self.config.device
        self.model.train()
        set_dropout_mode(self.model, True)
        total, count = 0.0, 0
        for x, y in self.loader:
            x, y = x.to(device), y.to(device)
            self.optimizer.zero_grad()
            loss = total_loss(self.model(x), y, self.groups, self.lambdas)
            if not torch.isfinite(loss):
                raise DivergenceError('Non-finite training loss at epoch {}'.format(epoch))
            loss.backward()
            self.optimizer.step()
            total += float(loss.detach()) * len(x)
            count += len(x)
        return total / count

    def _validate(self, epoch):
        normalized = predict(self.model, self.val_spectra, self.input_scale)
        if not np.all(np.isfinite(normalized)):
            raise DivergenceError('Non-finite validation predictions at epoch {}'.format(epoch))
        variant = self.dataset.variant
        targets = np.asarray(self.val_targets, dtype=np.float64)
        with torch.no_grad():
            val_loss = float(total_loss(torch.as_tensor(normalized), torch.as_tensor(variant.normalize(targets)),
                                        self.groups, self.lambdas))
        pred = variant.denormalize(normalized)
        report = evaluate_predictions(pred, targets, variant)
        return val_loss, pred, report

    def _log_epoch(self, epoch, train_loss, val_loss, report, lambda_sched):
        record = self.record
        record.log('train/loss', epoch, train_loss)
        record.log('val/loss', epoch, val_loss)
        record.log('val/mape', epoch, report.mape)
        record.log('val/std', epoch, report.std)
        if np.isfinite(report.r2):
            record.log('val/r2', epoch, report.r2)
        record.log('train/lambda_sched', epoch, lambda_sched)
        for group in self.groups:
            record.log('val/{}/mape'.format(group.name), epoch, group.history.last)
            record.log('val/{}/r'.format(group.name), epoch, group.r)
            record.log('val/{}/r2'.format(group.name), epoch, group.r2)
        for name, value in self.lambdas.items():
            record.log('train/lambda/{}'.format(name), epoch, value)

    def _checkpoint(self, epoch, report, pred):
        torch.save(self.model.state_dict(), str(self.run_dir / CHECKPOINT_FILE))
        sidecar = {
            'config_hash': self.config.hash,
            'epoch': epoch,
            'input_scale': self.input_scale,
            'report': report.to_dict(),
        }
        (self.run_dir / SIDECAR_FILE).write_text(json.dumps(sidecar, indent=2, sort_keys=True))
        columns = self.dataset.variant.indices('amplitude')
        np.save(str(self.run_dir / APE_FILE),
                absolute_percent_errors(pred[:, columns], np.asarray(self.val_targets, dtype=np.float64)[:, columns]))
        self.record.best = report.to_dict()
        self.record.best_epoch = epoch
        self.record.checkpoint = str(self.run_dir / CHECKPOINT_FILE)
        self.logger.debug('Checkpoint written at epoch %s (MAPE %.3f)', epoch, report.mape)

    def _run(self):
        self._prepare()
        config = self.config
        record_path = self.run_dir / RECORD_FILE
        started = time.perf_counter()
        first_mape = None
        strikes = 0
        try:
            for epoch in range(1, config.epochs + 1):
                self.model.set_epoch(epoch)
                lambda_sched = max((m.lambda_sched for m in self.model.dropout_modules()), default=0.0)
                if self._dropcluster_due(epoch):
                    fitted = refit_clusters(self.model, self.cluster_batch, self.logger)
                    self.logger.debug('Refitted %s dropCluster sites', fitted)
                train_loss = self._train_epoch(epoch)
                val_loss, pred, report = self._validate(epoch)
                self.groups.update(pred, self.val_targets, epoch)
                self._log_epoch(epoch, train_loss, val_loss, report, lambda_sched)
                self.lambdas = compute_lambdas(self.groups, epoch)
                report.best_epoch = epoch
                if self.record.best is None or report.mape < self.record.best['mape']:
                    self._checkpoint(epoch, report, pred)
                self.logger.info('Epoch %s/%s: loss %.5f, val loss %.5f, val MAPE %.3f, lambda_sched %.3f',
                                 epoch, config.epochs, train_loss, val_loss, report.mape, lambda_sched)
                first_mape = report.mape if first_mape is None else first_mape
                strikes = strikes + 1 if report.mape > config.divergence_factor * first_mape else 0
                self.record.wall_clock = time.perf_counter() - started
                self.record.save(record_path)
                self._write_metrics()
                if strikes >= config.divergence_patience:
                    raise DivergenceError('Validation MAPE above {}x its first value for {} epochs'.format(
                        config.divergence_factor, strikes))
        except DivergenceError as err:
            self.record.status = 'diverged'
            self.record.error = str(err)
            self.record.wall_clock = time.perf_counter() - started
            self.record.save(record_path)
            self.logger.warning('Run %s diverged: %s', config.name, err)
            raise DivergenceError(str(err), record=self.record, checkpoint=self.record.checkpoint) from err
        self.record.status = 'complete'
        if self.record.best is not None:
            self.record.best['s_bar'] = self.record.s_bars()
        self.record.save(record_path)
        self.logger.info('Run %s finished: best epoch %s, val MAPE %.3f',
                         config.name, self.record.best_epoch, self.record.best['mape'])
        return self.record

    def _write_metrics(self):
        self.record.metric_rows().to_csv(str(self.run_dir / METRICS_FILE), index=False)


def train(config, logger, dataset=None):
    """Train one configuration; returns its RunRecord."""
    return Trainer(config, logger, dataset=dataset).run()


def load_checkpoint(run_dir, device='cpu'):
    """(model, sidecar, record) of a finished run directory."""
    run_dir = pathlib.Path(run_dir)
    record = RunRecord.load(run_dir / RECORD_FILE)
    sidecar_path = run_dir / SIDECAR_FILE
    if not sidecar_path.exists():
        raise FileNotFoundError('No checkpoint in {}'.format(run_dir))
    sidecar = json.loads(sidecar_path.read_text())
    config = RunConfig.from_dict(record.config)
    if sidecar['config_hash'] != config.hash:
        raise ConfigError('The checkpoint in {} belongs to another configuration.'.format(run_dir))
    model = build_model(config.model_config())
    model.load_state_dict(torch.load(str(run_dir / CHECKPOINT_FILE), map_location=device))
    return model.to(device), sidecar, record


def reevaluate(run_dir, logger=None, dataset=None):
    """Evaluate the best checkpoint again; returns (report, matches the recorded report)."""
    model, sidecar, record = load_checkpoint(run_dir)
    config = RunConfig.from_dict(record.config)
    if dataset is None:
        dataset = load_run_dataset(config, logger)
    spectra, targets = dataset.part('val')
    pred = dataset.variant.denormalize(predict(model, spectra, sidecar['input_scale']))
    report = evaluate_predictions(pred, targets, dataset.variant)
    report.best_epoch = sidecar['epoch']
    recorded = EvalReport.from_dict(sidecar['report'])
    matches = (report.mape, report.std, report.r2) == (recorded.mape, recorded.std, recorded.r2)
    if logger is not None:
        logger.info('Re-evaluated %s: MAPE %.4f (recorded %.4f)', run_dir, report.mape, recorded.mape)
    return report, matches
