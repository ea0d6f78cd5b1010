# Copyright 2024, specdrop contributors
#
# This Source Code Form is subject to the terms of the Mozilla Public
# License, v. 2.0. If a copy of the MPL was not distributed with this
# file, You can obtain one at https://mozilla.org/MPL/2.0/.


"""Grouped MSE loss with adaptive group weights.

Each group of spectral components gets the weight
    max(((1 - r) + (1 - r²) + S̄) * (10 + epoch / 100), pen_min + epoch / 100 + S̄)
from the validation statistics of the previous epoch.
"""
import math

import numpy as np
import torch

from .commons import MetricError
from .metrics import MetricSeries, mape, pearson_r, r_squared

# Roles without a group (the phases) only enter the whole-output term.
GROUP_ROLES = {
    'metabolites': ('amplitude',),
    'line_broadening': ('lorentzian_global', 'lorentzian_per_met', 'gaussian_global'),
    'noise': ('snr',),
    'baseline': ('baseline_coeff',),
}
FULL_OUTPUT = 'full'


class GroupStats:
    """Validation statistics of one group."""
    def __init__(self, name, indices):
        self.name = name
        self.indices = list(indices)
        self.r = 0.0
        self.r2 = 0.0
        self.history = MetricSeries('val/{}/mape'.format(name))

    @property
    def s_bar(self):
        value = self.history.s_bar()
        return 0.0 if value is None else value


class LossGroups:
    """Index sets of the component groups of a variant and their running statistics.

        Attributes:
            variant (TaskVariant): The task.
            stats (dict): Group name to GroupStats, for the groups the variant has.
            pen_min (float): Floor of the weights.
            normalize_s_bar (bool): Divide S̄ by its largest value over the groups.
    """
    def __init__(self, variant, pen_min=1.0, normalize_s_bar=False):
        self.variant = variant
        self.pen_min = float(pen_min)
        self.normalize_s_bar = normalize_s_bar
        self.stats = {}
        for name, roles in GROUP_ROLES.items():
            indices = variant.indices(*roles)
            if indices:
                self.stats[name] = GroupStats(name, indices)

    def __iter__(self):
        return iter(self.stats.values())

    def __len__(self):
        return len(self.stats)

    @property
    def index_sets(self):
        return {name: stats.indices for name, stats in self.stats.items()}

    def update(self, pred, target, epoch):
        """Refresh r, r² and the MAPE history of every group from validation
        predictions in physical units."""
        pred = np.asarray(pred, dtype=np.float64)
        target = np.asarray(target, dtype=np.float64)
        for group in self:
            columns = group.indices
            try:
                group.r = pearson_r(pred[:, columns], target[:, columns])
            except MetricError:
                group.r = 0.0
            try:
                group.r2 = r_squared(pred[:, columns], target[:, columns])
            except MetricError:
                group.r2 = 0.0
            group.history.append(epoch, mape(pred[:, columns], target[:, columns]).mean)
        return self

    def s_bars(self):
        values = {group.name: group.s_bar for group in self}
        if self.normalize_s_bar:
            largest = max(values.values(), default=0.0)
            if largest > 0:
                values = {name: value / largest for name, value in values.items()}
        return values


def group_lambda(r, r2, s_bar, epoch, pen_min=1.0):
    """Weight of one group."""
    for value in (r, r2, s_bar, epoch, pen_min):
        if not math.isfinite(value):
            raise MetricError('Non-finite input to the group weight: {}'.format((r, r2, s_bar, epoch)))
    pen_epoch = epoch / 100.0
    value = ((1.0 - r) + (1.0 - r2) + s_bar) * (10.0 + pen_epoch)
    return max(value, pen_min + pen_epoch + s_bar)


def compute_lambdas(groups, epoch):
    """Group name to weight, from the current statistics."""
    if epoch < 0:
        raise ValueError('Negative epoch: {}'.format(epoch))
    s_bars = groups.s_bars()
    return {
        group.name: group_lambda(group.r, group.r2, s_bars[group.name], epoch, groups.pen_min)
        for group in groups
    }


def initial_lambdas(groups):
    """Weights before the first validation pass: every group at the floor."""
    return {group.name: groups.pen_min for group in groups}


def loss_terms(index_sets, lambdas, n_outputs):
    """(indices, weight) of every MSE term: the whole output with weight 1, each
    group and each of its parameters with the group weight. Identical index sets
    are counted once; the first weight wins."""
    terms = {tuple(range(n_outputs)): 1.0}
    for name, indices in index_sets.items():
        terms.setdefault(tuple(indices), float(lambdas[name]))
    for name, indices in index_sets.items():
        for index in indices:
            terms.setdefault((index,), float(lambdas[name]))
    return list(terms.items())


def total_loss(pred, target, groups, lambdas):
    """Weighted sum of MSE terms over the whole output, the groups and the single parameters."""
    if pred.shape != target.shape:
        raise ValueError('Shapes differ: {} vs. {}'.format(tuple(pred.shape), tuple(target.shape)))
    index_sets = groups.index_sets if isinstance(groups, LossGroups) else groups
    loss = pred.new_zeros(())
    for indices, weight in loss_terms(index_sets, lambdas, pred.shape[-1]):
        columns = torch.as_tensor(indices, device=pred.device)
        loss = loss + weight * torch.mean((pred[:, columns] - target[:, columns]) ** 2)
    return loss
