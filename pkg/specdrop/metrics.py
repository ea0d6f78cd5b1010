# Copyright 2024, specdrop contributors
#
# This Source Code Form is subject to the terms of the Mozilla Public
# License, v. 2.0. If a copy of the MPL was not distributed with this
# file, You can obtain one at https://mozilla.org/MPL/2.0/.


"""Precision metrics: MAPE with its STD, r², Pearson r and the S̄ consistency metric."""
import json
import math
import pathlib
from dataclasses import asdict, dataclass, field
from typing import Dict, List, NamedTuple, Optional

import numpy as np

from .commons import ConfigError, MetricError
from .models import predict


class MapeResult(NamedTuple):
    mean: float
    std: float
    excluded: int


def absolute_percent_errors(pred, target):
    """100 |pred - target| / |target| per element; NaN where the target is zero."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise MetricError('Shapes differ: {} vs. {}'.format(pred.shape, target.shape))
    ape = np.full(target.shape, np.nan)
    nonzero = target != 0
    ape[nonzero] = 100.0 * np.abs(pred[nonzero] - target[nonzero]) / np.abs(target[nonzero])
    return ape


def mape(pred, target):
    """Mean and (population) standard deviation of the absolute percent errors.

        Zero targets are excluded and counted.
    """
    ape = absolute_percent_errors(pred, target)
    valid = ape[~np.isnan(ape)]
    excluded = int(ape.size - valid.size)
    if valid.size == 0:
        raise MetricError('All targets are zero.')
    return MapeResult(float(np.mean(valid)), float(np.std(valid)), excluded)


def r_squared(pred, target):
    """Coefficient of determination, pooled over all dimensions around the global target mean."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise MetricError('Shapes differ: {} vs. {}'.format(pred.shape, target.shape))
    if target.size < 2:
        raise MetricError('r² needs at least two values.')
    total = np.sum((target - np.mean(target)) ** 2)
    if total == 0:
        raise MetricError('Zero target variance.')
    return float(1.0 - np.sum((target - pred) ** 2) / total)


def pearson_r(pred, target):
    pred = np.ravel(np.asarray(pred, dtype=np.float64))
    target = np.ravel(np.asarray(target, dtype=np.float64))
    if pred.size < 2 or pred.size != target.size:
        raise MetricError('Pearson r needs two equally long series of at least two values.')
    pred = pred - pred.mean()
    target = target - target.mean()
    norm = math.sqrt(np.sum(pred ** 2) * np.sum(target ** 2))
    if norm == 0:
        raise MetricError('Pearson r is undefined for constant series.')
    return float(np.sum(pred * target) / norm)


def _values(series):
    values = series.values if isinstance(series, MetricSeries) else series
    return np.asarray(values, dtype=np.float64)


def s_bar(series):
    """Temporal inconsistency of a metric curve: population variance of its
    discrete second differences (unit epoch spacing)."""
    values = _values(series)
    if values.size < 3:
        raise MetricError('S̄ needs at least three values, got {}'.format(values.size))
    if not np.all(np.isfinite(values)):
        raise MetricError('S̄ of a non-finite series.')
    return float(np.var(np.diff(values, n=2)))


@dataclass
class MetricSeries:
    """Per-epoch values of one metric."""
    name: str
    values: List[float] = field(default_factory=list)
    epochs: List[int] = field(default_factory=list)

    def __post_init__(self):
        if len(self.values) != len(self.epochs):
            raise MetricError('Values and epochs differ in length.')
        if any(b <= a for a, b in zip(self.epochs, self.epochs[1:])):
            raise MetricError('Epochs of {} are not strictly increasing.'.format(self.name))

    def __len__(self):
        return len(self.values)

    def append(self, epoch, value):
        value = float(value)
        if not math.isfinite(value):
            raise MetricError('Non-finite value for {} at epoch {}'.format(self.name, epoch))
        if self.epochs and epoch <= self.epochs[-1]:
            raise MetricError('Epoch {} does not follow {} in {}'.format(epoch, self.epochs[-1], self.name))
        self.epochs.append(int(epoch))
        self.values.append(value)

    def s_bar(self):
        """S̄ of the series, or None while it is shorter than three epochs."""
        if len(self) < 3:
            return None
        return s_bar(self)

    @property
    def last(self):
        return self.values[-1] if self.values else None


@dataclass
class EvalReport:
    """Precision of one model on one split.

        Attributes:
            mape (float): Cumulative MAPE (%) over all metabolite amplitudes.
            std (float): STD (%) of the absolute percent errors.
            r2 (float): Pooled r² over all metabolite amplitudes.
            per_metabolite (dict): name to {'mape', 'std', 'r2'}.
            excluded (int): Zero targets left out of the percent errors.
            s_bar (dict): S̄ per monitored metric series.
            best_epoch (int): Epoch of the evaluated model, if known.
    """
    mape: float
    std: float
    r2: float
    per_metabolite: Dict[str, Dict[str, float]] = field(default_factory=dict)
    excluded: int = 0
    s_bar: Dict[str, float] = field(default_factory=dict)
    best_epoch: Optional[int] = None

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, data):
        return cls(**data)

    def to_json(self, path):
        path = pathlib.Path(path)
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))
        return path

    @classmethod
    def from_json(cls, path):
        return cls.from_dict(json.loads(pathlib.Path(path).read_text()))


def _r_squared_or_nan(pred, target):
    try:
        return r_squared(pred, target)
    except MetricError:
        return float('nan')


def evaluate_predictions(pred, target, variant):
    """EvalReport of physical-unit predictions, restricted to the metabolite amplitudes."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape or pred.shape[-1] != variant.size:
        raise ConfigError('Predictions {} do not match targets {} of {}'.format(
            pred.shape, target.shape, variant.name))
    columns = variant.indices('amplitude')
    result = mape(pred[:, columns], target[:, columns])
    per_metabolite = {}
    for name, column in zip(variant.metabolite_names, columns):
        single = mape(pred[:, column], target[:, column])
        per_metabolite[name] = {
            'mape': single.mean,
            'std': single.std,
            'r2': _r_squared_or_nan(pred[:, column], target[:, column]),
        }
    return EvalReport(result.mean, result.std, _r_squared_or_nan(pred[:, columns], target[:, columns]),
                      per_metabolite, result.excluded)


def evaluate(model, dataset, input_scale, split='val', batch_size=1024):
    """Evaluate a model on one split of a dataset; deterministic."""
    if model.config.output_dim != dataset.variant.size:
        raise ConfigError('Model emits {} values, {} has {} targets'.format(
            model.config.output_dim, dataset.variant.name, dataset.variant.size))
    spectra, targets = dataset.part(split)
    pred = dataset.variant.denormalize(predict(model, spectra, input_scale, batch_size))
    return evaluate_predictions(pred, targets, dataset.variant)
