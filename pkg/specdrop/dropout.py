# Copyright 2024, specdrop contributors
#
# This Source Code Form is subject to the terms of the Mozilla Public
# License, v. 2.0. If a copy of the MPL was not distributed with this
# file, You can obtain one at https://mozilla.org/MPL/2.0/.


"""Structured dropout: feature alpha dropout (FAD), weighted feature dropout (wFD),
weighted feature alpha dropout (wFAD) and dropCluster, with linear annealing.

The functional forms (apply_*) take their random numbers from an explicit
torch.Generator. The nn.Module sites own one generator each and are only
active in training mode.
"""
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np
import torch
from torch import nn
from sklearn.cluster import AgglomerativeClustering
from sklearn.feature_extraction.image import grid_to_graph

from .commons import ConfigError, DropoutError

SELU_ALPHA = 1.6732632423543772848170429916717
SELU_SCALE = 1.0507009873554804934193349852946
# Negative saturation value of SELU.
ALPHA_PRIME = -SELU_SCALE * SELU_ALPHA

TECHNIQUES = ('dropcluster', 'fad', 'wfd', 'wfad')
PLACEMENTS = ('inside', 'outside', 'stem')
Q_MODES = ('quantile', 'absolute')
SELECTIONS = ('bernoulli', 'frozen')
EPSILON = 1e-12
MIN_CLUSTER_BATCH = 8


@dataclass(frozen=True)
class DropoutConfig:
    """Configuration of one dropout site.

        Attributes:
            technique (str): dropcluster, fad, wfd or wfad.
            p_max (float): Maximum rate, reached at the last epoch.
            placement (str): inside (before the skip addition), outside (after it) or stem.
            q_threshold (float): Score threshold of wFD/wFAD.
            q_mode (str): quantile (threshold at the q-quantile of the scores) or absolute.
            activation_epoch (int): First epoch with a nonzero rate.
            layer_multiplier (int): Rate multiplier of the hosting ResNet layer (1-4).
            selection (str): dropCluster only, bernoulli or frozen.
            distance_threshold (float): dropCluster only, merge limit of 1 - correlation.
    """
    technique: str
    p_max: float
    placement: str = 'outside'
    q_threshold: float = 0.90
    q_mode: str = 'quantile'
    activation_epoch: int = 10
    layer_multiplier: int = 1
    selection: str = 'bernoulli'
    distance_threshold: float = 0.5

    def __post_init__(self):
        if self.technique not in TECHNIQUES:
            raise ConfigError('Unknown dropout technique: {}'.format(self.technique))
        if self.placement not in PLACEMENTS:
            raise ConfigError('Unknown placement: {}'.format(self.placement))
        if self.q_mode not in Q_MODES:
            raise ConfigError('Unknown q_mode: {}'.format(self.q_mode))
        if self.selection not in SELECTIONS:
            raise ConfigError('Unknown selection: {}'.format(self.selection))
        if not 0.0 <= self.p_max <= 1.0:
            raise ConfigError('p_max must lie in [0, 1], got {}'.format(self.p_max))
        if not 0.0 <= self.q_threshold <= 1.0:
            raise ConfigError('q must lie in [0, 1], got {}'.format(self.q_threshold))
        if self.activation_epoch < 0:
            raise ConfigError('The activation epoch must not be negative.')
        if int(self.layer_multiplier) != self.layer_multiplier or self.layer_multiplier < 1:
            raise ConfigError('The layer multiplier must be a positive integer.')
        if self.effective_p_max > 1.0:
            raise ConfigError('layer_multiplier * p_max exceeds 1: {} * {}'.format(
                self.layer_multiplier, self.p_max))

    @property
    def effective_p_max(self):
        return self.p_max * self.layer_multiplier


@dataclass(frozen=True)
class ScheduleState:
    current_epoch: int
    total_epochs: int
    activation_epoch: int = 10


def schedule_lambda(state):
    """Linear warm-up: 0 before the activation epoch, 1 at the last epoch."""
    if state.activation_epoch >= state.total_epochs:
        raise DropoutError('The activation epoch ({}) must precede the last epoch ({}).'.format(
            state.activation_epoch, state.total_epochs))
    if not 0 <= state.current_epoch <= state.total_epochs:
        raise DropoutError('Epoch {} outside [0, {}]'.format(state.current_epoch, state.total_epochs))
    if state.current_epoch < state.activation_epoch:
        return 0.0
    value = (state.current_epoch - state.activation_epoch) / (state.total_epochs - state.activation_epoch)
    return min(max(value, 0.0), 1.0)


@dataclass(frozen=True, eq=False)
class ChannelScore:
    """Per-channel activation scores of one batch."""
    raw_means: torch.Tensor
    s: torch.Tensor
    s_hat: torch.Tensor
    effective_rates: torch.Tensor


def score_channels(activations, q=0.90, p_max=0.05, lambda_sched=1.0, q_mode='quantile'):
    """Score channels by the log share of their mean activation and derive drop rates.

        Means are taken as magnitudes with a floor of 1e-12. The scores are min-max
        normalized first and then thresholded; equal scores all normalize to 0.
    """
    x = torch.as_tensor(activations).detach().to(torch.float64)
    if x.dim() != 3 or x.shape[1] < 1:
        raise DropoutError('Expected activations [batch, channels, length], got {}'.format(tuple(x.shape)))
    if not torch.all(torch.isfinite(x)):
        raise DropoutError('Non-finite activations.')
    if not torch.any(x != 0):
        raise DropoutError('All activations are zero; channel scores are undefined.')
    means = x.mean(dim=(0, 2))
    magnitudes = means.abs().clamp_min(EPSILON)
    s = torch.log(magnitudes / magnitudes.sum())
    spread = s.max() - s.min()
    if spread > 0:
        s_hat = (s - s.min()) / spread
    else:
        s_hat = torch.zeros_like(s)
    if q_mode == 'quantile':
        threshold = torch.quantile(s_hat, q)
    elif q_mode == 'absolute':
        threshold = torch.tensor(float(q), dtype=s_hat.dtype)
    else:
        raise ConfigError('Unknown q_mode: {}'.format(q_mode))
    s_hat = torch.where(s_hat < threshold, torch.zeros_like(s_hat), s_hat)
    rates = p_max * lambda_sched * s_hat
    return ChannelScore(means, s, s_hat, rates)


def alpha_affine(p):
    """(a, b) restoring zero mean and unit variance after alpha dropout at rate p."""
    keep = 1.0 - p
    a = (keep + ALPHA_PRIME ** 2 * keep * (1.0 - keep)) ** -0.5
    b = -a * (1.0 - keep) * ALPHA_PRIME
    return a, b


def _uniform(shape, generator, device):
    return torch.rand(shape, generator=generator, dtype=torch.float64).to(device)


def apply_fad(x, p_eff, generator=None, training=True):
    """Feature alpha dropout: whole channels take the SELU saturation value."""
    if not training or p_eff == 0:
        return x
    if not 0 <= p_eff < 1:
        raise DropoutError('FAD needs a rate in [0, 1), got {}'.format(p_eff))
    dropped = _uniform((x.shape[0], x.shape[1], 1), generator, x.device) < p_eff
    a, b = alpha_affine(p_eff)
    return x.masked_fill(dropped, ALPHA_PRIME) * a + b


def apply_wfd(x, rates, generator=None, training=True):
    """Weighted feature dropout: channel c is zeroed with probability rates[c];
    survivors are scaled by 1 / (1 - rates[c])."""
    rates = torch.as_tensor(rates, dtype=torch.float64).to(x.device)
    if not training or not torch.any(rates > 0):
        return x
    if torch.any(rates < 0) or torch.any(rates > 1):
        raise DropoutError('Rates must lie in [0, 1].')
    dropped = _uniform((x.shape[0], x.shape[1], 1), generator, x.device) < rates[None, :, None]
    scale = torch.where(rates < 1, 1.0 / (1.0 - rates), torch.zeros_like(rates))
    return torch.where(dropped, torch.zeros_like(x), x * scale[None, :, None].to(x.dtype))


def apply_wfad(x, rates, generator=None, training=True):
    """Weighted feature alpha dropout: wFD selection with the FAD replacement and a
    per-channel affine."""
    rates = torch.as_tensor(rates, dtype=torch.float64).to(x.device)
    if not training or not torch.any(rates > 0):
        return x
    if torch.any(rates < 0) or torch.any(rates >= 1):
        raise DropoutError('wFAD needs rates in [0, 1).')
    dropped = _uniform((x.shape[0], x.shape[1], 1), generator, x.device) < rates[None, :, None]
    a, b = alpha_affine(rates)
    a = a[None, :, None].to(x.dtype)
    b = b[None, :, None].to(x.dtype)
    return x.masked_fill(dropped, ALPHA_PRIME) * a + b


@dataclass(frozen=True, eq=False)
class ClusterMap:
    """Contiguous clusters along the length axis, per channel.

        Attributes:
            labels (ndarray): [channels, length], cluster index within the channel.
            sizes (tuple): Per channel, the sizes of its clusters in order.
            frozen_draws (ndarray): One uniform draw per cluster, fixed at fit time.
    """
    labels: np.ndarray
    sizes: Tuple[np.ndarray, ...]
    frozen_draws: Optional[np.ndarray] = None

    @property
    def channels(self):
        return self.labels.shape[0]

    @property
    def length(self):
        return self.labels.shape[1]

    @property
    def n_clusters(self):
        return [len(sizes) for sizes in self.sizes]

    @property
    def offsets(self):
        return np.concatenate([[0], np.cumsum(self.n_clusters)[:-1]]).astype(np.int64)

    @property
    def global_labels(self):
        """[channels, length] index into the flat list of all clusters."""
        return self.labels + self.offsets[:, None]

    @property
    def flat_sizes(self):
        return np.concatenate(self.sizes)

    def boundaries(self, channel):
        """Start positions of the clusters of a channel."""
        return np.concatenate([[0], np.cumsum(self.sizes[channel])[:-1]])


def correlation_distance(features):
    """1 - Pearson correlation between positions over the batch: [length, length].

        Constant positions are at distance 0 from each other and 1 from the rest.
    """
    centered = features - features.mean(axis=0, keepdims=True)
    deviation = np.sqrt(np.mean(centered ** 2, axis=0))
    scale = max(float(np.max(np.abs(features))), 1.0)
    constant = deviation <= EPSILON * scale
    covariance = centered.T @ centered / features.shape[0]
    norm = np.outer(deviation, deviation)
    correlation = np.divide(covariance, norm, out=np.zeros_like(covariance), where=~np.outer(constant, constant) & (norm > 0))
    distance = 1.0 - np.clip(correlation, -1.0, 1.0)
    distance[np.outer(constant, constant)] = 0.0
    distance[np.logical_xor.outer(constant, constant)] = 1.0
    np.fill_diagonal(distance, 0.0)
    return distance


def _contiguous_sizes(labels):
    """Relabel to runs in position order; returns (labels, sizes)."""
    change = np.concatenate([[True], labels[1:] != labels[:-1]])
    run_labels = np.cumsum(change) - 1
    return run_labels, np.bincount(run_labels)


def fit_clusters(features, distance_threshold=0.5, generator=None):
    """Agglomerate adjacent positions of each channel by activation correlation.

        Merging is restricted to neighbours on the length axis (average linkage on
        1 - correlation), so every cluster is a contiguous run.
    """
    x = torch.as_tensor(features).detach().to('cpu', torch.float64).numpy()
    if x.ndim != 3:
        raise DropoutError('Expected features [batch, channels, length], got {}'.format(x.shape))
    batch, channels, length = x.shape
    if batch < MIN_CLUSTER_BATCH:
        raise DropoutError('Clustering needs at least {} samples, got {}'.format(MIN_CLUSTER_BATCH, batch))
    labels = np.zeros((channels, length), dtype=np.int64)
    sizes = []
    connectivity = grid_to_graph(length, 1) if length > 1 else None
    for channel in range(channels):
        if length == 1:
            sizes.append(np.array([1]))
            continue
        clustering = AgglomerativeClustering(
            n_clusters=None,
            distance_threshold=distance_threshold,
            metric='precomputed',
            linkage='average',
            connectivity=connectivity,
        )
        raw = clustering.fit_predict(correlation_distance(x[:, channel, :]))
        labels[channel], channel_sizes = _contiguous_sizes(raw)
        sizes.append(channel_sizes)
    total = sum(len(s) for s in sizes)
    frozen = torch.rand(total, generator=generator, dtype=torch.float64).numpy()
    return ClusterMap(labels, tuple(sizes), frozen)


def cluster_rates(cluster_map, p_max, lambda_sched):
    """Rate per cluster: p_max * lambda_sched * size / length."""
    return p_max * lambda_sched * cluster_map.flat_sizes / cluster_map.length


def apply_dropcluster(x, cluster_map, p_max, lambda_sched, generator=None, training=True, selection='bernoulli'):
    """Zero whole clusters; survivors are scaled by 1 / (1 - rate of their cluster).

        bernoulli draws a fresh decision per sample and cluster; frozen compares the
        rates against the draws fixed at fit time, so the same clusters are dropped
        for every sample.
    """
    if not training or lambda_sched == 0 or p_max == 0:
        return x
    if cluster_map is None:
        raise DropoutError('dropCluster needs a fitted cluster map.')
    if (cluster_map.channels, cluster_map.length) != tuple(x.shape[1:]):
        raise DropoutError('Cluster map {} does not fit features {}'.format(
            (cluster_map.channels, cluster_map.length), tuple(x.shape[1:])))
    rates = torch.as_tensor(cluster_rates(cluster_map, p_max, lambda_sched), dtype=torch.float64)
    if selection == 'bernoulli':
        dropped = torch.rand((x.shape[0], rates.shape[0]), generator=generator, dtype=torch.float64) < rates
    elif selection == 'frozen':
        dropped = (torch.as_tensor(cluster_map.frozen_draws) < rates).expand(x.shape[0], -1)
    else:
        raise ConfigError('Unknown selection: {}'.format(selection))
    scale = torch.where(rates < 1, 1.0 / (1.0 - rates), torch.zeros_like(rates))
    factor = torch.where(dropped, torch.zeros_like(scale), scale.expand_as(dropped))
    index = torch.as_tensor(cluster_map.global_labels).reshape(-1)
    factor = factor[:, index].reshape(x.shape[0], *x.shape[1:])
    return x * factor.to(x.device, x.dtype)


def site_seed(seed, site_index):
    """A generator seed derived from (run seed, site index)."""
    return int(np.random.SeedSequence([int(seed), int(site_index)]).generate_state(1)[0])


class StructuredDropout(nn.Module):
    """Base of the dropout sites: schedule state, own generator, training-only."""
    def __init__(self, config, seed=0, site_index=0):
        super().__init__()
        self.config = config
        self.lambda_sched = 0.0
        self.generator = torch.Generator()
        self.generator.manual_seed(site_seed(seed, site_index))

    @property
    def p_max(self):
        return self.config.effective_p_max

    @property
    def rate(self):
        """Current maximum rate of this site."""
        return self.p_max * self.lambda_sched

    def set_schedule(self, epoch, total_epochs):
        self.lambda_sched = schedule_lambda(ScheduleState(epoch, total_epochs, self.config.activation_epoch))
        return self.lambda_sched

    def extra_repr(self):
        return 'technique={}, p_max={}, lambda_sched={:.3f}'.format(
            self.config.technique, self.p_max, self.lambda_sched)

    def active(self):
        return self.training and self.rate > 0


class FeatureAlphaDropout(StructuredDropout):
    def forward(self, x):
        if not self.active():
            return x
        return apply_fad(x, self.rate, self.generator)


class WeightedFeatureDropout(StructuredDropout):
    def forward(self, x):
        if not self.active():
            return x
        score = score_channels(x, self.config.q_threshold, self.p_max, self.lambda_sched, self.config.q_mode)
        return apply_wfd(x, score.effective_rates, self.generator)


class WeightedFeatureAlphaDropout(StructuredDropout):
    def forward(self, x):
        if not self.active():
            return x
        score = score_channels(x, self.config.q_threshold, self.p_max, self.lambda_sched, self.config.q_mode)
        return apply_wfad(x, score.effective_rates, self.generator)


class DropCluster(StructuredDropout):
    """dropCluster; the cluster map is refitted by the trainer once per epoch."""
    def __init__(self, config, seed=0, site_index=0):
        super().__init__(config, seed, site_index)
        self.cluster_map = None

    def fit(self, features):
        self.cluster_map = fit_clusters(features, self.config.distance_threshold, self.generator)
        return self.cluster_map

    def forward(self, x):
        if not self.active():
            return x
        return apply_dropcluster(x, self.cluster_map, self.p_max, self.lambda_sched, self.generator,
                                 selection=self.config.selection)


SITE_CLASSES = {
    'fad': FeatureAlphaDropout,
    'wfd': WeightedFeatureDropout,
    'wfad': WeightedFeatureAlphaDropout,
    'dropcluster': DropCluster,
}


def build_dropout(config, seed=0, site_index=0):
    """Instantiate the site module of a DropoutConfig."""
    return SITE_CLASSES[config.technique](config, seed, site_index)
