# Copyright 2024, specdrop contributors
#
# This Source Code Form is subject to the terms of the Mozilla Public
# License, v. 2.0. If a copy of the MPL was not distributed with this
# file, You can obtain one at https://mozilla.org/MPL/2.0/.


"""1D pre-activation ResNets for spectral regression.

The stem and the first two ResNet layers use CReLU, which doubles the channels
seen by the following convolution. Downsampling follows ResNet-b (stride on the
3x1 convolution) and ResNet-d (average pooling before the 1x1 shortcut
convolution). A spatial feature condenser of strided depthwise convolutions with
optional attention gates shrinks the length before global pooling.
"""
import re
from dataclasses import dataclass, field, replace
from typing import Dict, NamedTuple, Tuple

import numpy as np
import torch
from torch import nn

from .commons import ConfigError, DivergenceError
from .dropout import DropCluster, DropoutConfig, StructuredDropout, build_dropout

MAX_CONDENSED_LENGTH = 16
N_LAYERS = 4
SITE_PATTERN = re.compile(r'^(inside|outside)_layer([1-4])$')


class Preset(NamedTuple):
    block: str
    stem_width: int
    widths: Tuple[int, ...]
    blocks: Tuple[int, ...]


PRESETS = {
    'tiny': Preset('basic', 8, (16, 32, 64, 128), (1, 1, 1, 1)),
    'resnet50': Preset('bottleneck', 32, (64, 128, 256, 512), (3, 4, 6, 3)),
}
EXPANSION = {'basic': 1, 'bottleneck': 4}
LAYER_STRIDES = (1, 2, 2, 2)


def _site_config(value):
    if isinstance(value, DropoutConfig):
        return value
    try:
        return DropoutConfig(**value)
    except TypeError as err:
        raise ConfigError('Invalid dropout site: {}'.format(err)) from None


def expand_sites(sites):
    """Resolve site keys to concrete sites.

        'inside' and 'outside' apply to all four layers; inside_layerN and
        outside_layerN address one layer and take precedence. Layer N gets the
        rate multiplier N; post_stem gets 1.
    """
    expanded = {}
    explicit = {}
    for key, value in (sites or {}).items():
        config = _site_config(value)
        if key == 'post_stem':
            explicit[key] = replace(config, placement='stem', layer_multiplier=1)
        elif key in ('inside', 'outside'):
            for layer in range(1, N_LAYERS + 1):
                expanded['{}_layer{}'.format(key, layer)] = replace(config, placement=key, layer_multiplier=layer)
        else:
            match = SITE_PATTERN.match(key)
            if match is None:
                raise ConfigError('Unknown dropout site: {}'.format(key))
            explicit[key] = replace(config, placement=match.group(1), layer_multiplier=int(match.group(2)))
    expanded.update(explicit)
    return expanded


@dataclass
class ModelConfig:
    """Architecture of one network.

        Attributes:
            preset (str): tiny or resnet50.
            output_dim (int): Number of regression targets.
            input_length (int): Spectrum length.
            crelu_half (bool): CReLU in the stem and layers 1-2 (ReLU otherwise).
            condenser_blocks (int): Strided depthwise blocks before pooling.
            condenser_attention (bool): Spatial attention gate in each condenser block.
            dropout_sites (dict): Site name to DropoutConfig (or its fields).
            seed (int): Weight initialization and dropout generator seed.
            total_epochs (int): Length of training, the end of the dropout warm-up.
    """
    preset: str = 'tiny'
    output_dim: int = 7
    input_length: int = 512
    crelu_half: bool = True
    condenser_blocks: int = 2
    condenser_attention: bool = True
    dropout_sites: Dict[str, DropoutConfig] = field(default_factory=dict)
    seed: int = 0
    total_epochs: int = 100

    def __post_init__(self):
        if self.preset not in PRESETS:
            raise ConfigError('Unknown preset: {}'.format(self.preset))
        if self.output_dim < 1 or self.input_length < 1 or self.condenser_blocks < 0:
            raise ConfigError('Invalid model dimensions.')
        self.dropout_sites = expand_sites(self.dropout_sites)


class Stage(NamedTuple):
    name: str
    in_channels: int
    out_channels: int
    stride: int
    blocks: int
    crelu: bool
    length: int


def _downsampled(length, stride):
    return -(-length // stride)


def stage_table(cfg):
    """Channels, strides and output lengths of the stem and the four layers."""
    preset = PRESETS[cfg.preset]
    expansion = EXPANSION[preset.block]
    length = _downsampled(cfg.input_length, 2)
    channels = preset.stem_width * (2 if cfg.crelu_half else 1)
    table = [Stage('stem', 1, preset.stem_width, 2, 1, cfg.crelu_half, length)]
    for index, (width, blocks, stride) in enumerate(zip(preset.widths, preset.blocks, LAYER_STRIDES)):
        length = _downsampled(length, stride)
        table.append(Stage('layer{}'.format(index + 1), channels, width * expansion, stride, blocks,
                           cfg.crelu_half and index < 2, length))
        channels = width * expansion
    return table


def condenser_lengths(cfg):
    """Lengths entering the condenser and after each of its blocks."""
    lengths = [stage_table(cfg)[-1].length]
    for _ in range(cfg.condenser_blocks):
        lengths.append(_downsampled(lengths[-1], 2))
    return lengths


def analytic_parameter_count(cfg):
    """Number of trainable parameters, computed from the stage table."""
    table = stage_table(cfg)
    block = PRESETS[cfg.preset].block
    stem = table[0]
    count = 7 * stem.out_channels + 2 * stem.out_channels
    for stage in table[1:]:
        factor = 2 if stage.crelu else 1
        in_channels = stage.in_channels
        for index in range(stage.blocks):
            stride = stage.stride if index == 0 else 1
            out = stage.out_channels
            if block == 'basic':
                planes = out
                count += 2 * in_channels + factor * in_channels * planes * 3
                count += 2 * planes + factor * planes * planes * 3
            else:
                planes = out // EXPANSION['bottleneck']
                count += 2 * in_channels + factor * in_channels * planes
                count += 2 * planes + factor * planes * planes * 3
                count += 2 * planes + factor * planes * out
            if stride != 1 or in_channels != out:
                count += in_channels * out + 2 * out
            in_channels = out
    channels = table[-1].out_channels
    count += 2 * channels
    gate = (channels + 1) if cfg.condenser_attention else 0
    count += cfg.condenser_blocks * (3 * channels + 2 * channels + gate)
    count += channels * cfg.output_dim + cfg.output_dim
    return count


class CReLU(nn.Module):
    """Concatenated ReLU: [relu(x), relu(-x)] along the channels."""
    def forward(self, x):
        return torch.cat([torch.relu(x), torch.relu(-x)], dim=1)


def _activation(crelu):
    return CReLU() if crelu else nn.ReLU()


def _shortcut(in_channels, out_channels, stride):
    if stride == 1 and in_channels == out_channels:
        return nn.Identity()
    layers = []
    if stride != 1:
        layers.append(nn.AvgPool1d(stride, stride, ceil_mode=True, count_include_pad=False))
    layers.append(nn.Conv1d(in_channels, out_channels, 1, bias=False))
    layers.append(nn.BatchNorm1d(out_channels))
    return nn.Sequential(*layers)


class PreActBlock(nn.Module):
    """Basic pre-activation block; inside dropout acts before the skip addition,
    outside dropout after it."""
    def __init__(self, in_channels, planes, stride=1, crelu=False, inside=None, outside=None):
        super().__init__()
        factor = 2 if crelu else 1
        self.bn1 = nn.BatchNorm1d(in_channels)
        self.act1 = _activation(crelu)
        self.conv1 = nn.Conv1d(factor * in_channels, planes, 3, stride, 1, bias=False)
        self.bn2 = nn.BatchNorm1d(planes)
        self.act2 = _activation(crelu)
        self.conv2 = nn.Conv1d(factor * planes, planes, 3, 1, 1, bias=False)
        self.shortcut = _shortcut(in_channels, planes, stride)
        self.inside = inside if inside is not None else nn.Identity()
        self.outside = outside if outside is not None else nn.Identity()

    def forward(self, x):
        out = self.conv1(self.act1(self.bn1(x)))
        out = self.conv2(self.act2(self.bn2(out)))
        return self.outside(self.inside(out) + self.shortcut(x))


class PreActBottleneck(nn.Module):
    """Bottleneck pre-activation block with the stride on the 3x1 convolution."""
    def __init__(self, in_channels, out_channels, stride=1, crelu=False, inside=None, outside=None):
        super().__init__()
        factor = 2 if crelu else 1
        planes = out_channels // EXPANSION['bottleneck']
        self.bn1 = nn.BatchNorm1d(in_channels)
        self.act1 = _activation(crelu)
        self.conv1 = nn.Conv1d(factor * in_channels, planes, 1, bias=False)
        self.bn2 = nn.BatchNorm1d(planes)
        self.act2 = _activation(crelu)
        self.conv2 = nn.Conv1d(factor * planes, planes, 3, stride, 1, bias=False)
        self.bn3 = nn.BatchNorm1d(planes)
        self.act3 = _activation(crelu)
        self.conv3 = nn.Conv1d(factor * planes, out_channels, 1, bias=False)
        self.shortcut = _shortcut(in_channels, out_channels, stride)
        self.inside = inside if inside is not None else nn.Identity()
        self.outside = outside if outside is not None else nn.Identity()

    def forward(self, x):
        out = self.conv1(self.act1(self.bn1(x)))
        out = self.conv2(self.act2(self.bn2(out)))
        out = self.conv3(self.act3(self.bn3(out)))
        return self.outside(self.inside(out) + self.shortcut(x))


class SpatialGate(nn.Module):
    """Per-position sigmoid gate from a 1x1 convolution."""
    def __init__(self, channels):
        super().__init__()
        self.conv = nn.Conv1d(channels, 1, 1)

    def forward(self, x):
        return x * torch.sigmoid(self.conv(x))


class CondenserBlock(nn.Module):
    def __init__(self, channels, attention=True):
        super().__init__()
        self.conv = nn.Conv1d(channels, channels, 3, 2, 1, groups=channels, bias=False)
        self.bn = nn.BatchNorm1d(channels)
        self.act = nn.ReLU()
        self.gate = SpatialGate(channels) if attention else nn.Identity()

    def forward(self, x):
        return self.gate(self.act(self.bn(self.conv(x))))


BLOCKS = {'basic': PreActBlock, 'bottleneck': PreActBottleneck}


class ResNet1d(nn.Module):
    """Pre-activation 1D ResNet with structured dropout sites.

        Attributes:
            config (ModelConfig): The architecture.
            sites (dict): Site name to the list of its dropout modules (one per block).
    """
    def __init__(self, cfg):
        super().__init__()
        self.config = cfg
        lengths = condenser_lengths(cfg)
        if lengths[-1] > MAX_CONDENSED_LENGTH:
            raise ConfigError('The condenser leaves length {} (at most {} allowed); add condenser blocks.'.format(
                lengths[-1], MAX_CONDENSED_LENGTH))
        self.sites = {}
        self._site_count = 0
        table = stage_table(cfg)
        stem = table[0]
        self.stem = nn.Sequential(
            nn.Conv1d(1, stem.out_channels, 7, 2, 3, bias=False),
            nn.BatchNorm1d(stem.out_channels),
            _activation(stem.crelu),
        )
        post_stem = self._site('post_stem')
        self.post_stem = post_stem if post_stem is not None else nn.Identity()
        block = BLOCKS[PRESETS[cfg.preset].block]
        self.layers = nn.ModuleList()
        for index, stage in enumerate(table[1:]):
            blocks = []
            in_channels = stage.in_channels
            for position in range(stage.blocks):
                blocks.append(block(
                    in_channels,
                    stage.out_channels,
                    stage.stride if position == 0 else 1,
                    stage.crelu,
                    inside=self._site('inside_layer{}'.format(index + 1)),
                    outside=self._site('outside_layer{}'.format(index + 1)),
                ))
                in_channels = stage.out_channels
            self.layers.append(nn.Sequential(*blocks))
        channels = table[-1].out_channels
        self.final = nn.Sequential(nn.BatchNorm1d(channels), nn.ReLU())
        self.condenser = nn.Sequential(*[CondenserBlock(channels, cfg.condenser_attention)
                                         for _ in range(cfg.condenser_blocks)])
        self.pool = nn.AdaptiveAvgPool1d(1)
        self.head = nn.Linear(channels, cfg.output_dim)

    def _site(self, name):
        config = self.config.dropout_sites.get(name)
        if config is None:
            return None
        module = build_dropout(config, self.config.seed, self._site_count)
        self._site_count += 1
        self.sites.setdefault(name, []).append(module)
        return module

    def stages(self):
        yield 'stem', self.stem
        yield 'post_stem', self.post_stem
        for index, layer in enumerate(self.layers):
            yield 'layer{}'.format(index + 1), layer
        yield 'final', self.final
        yield 'condenser', self.condenser

    def forward(self, x):
        if x.dim() != 3 or x.shape[1] != 1 or x.shape[2] != self.config.input_length:
            raise ValueError('Expected input [batch, 1, {}], got {}'.format(self.config.input_length, tuple(x.shape)))
        for name, stage in self.stages():
            x = stage(x)
            if not torch.all(torch.isfinite(x)):
                raise DivergenceError('Non-finite activations after {}'.format(name))
        return self.head(torch.flatten(self.pool(x), 1))

    def set_epoch(self, epoch):
        """Update the warm-up state of all dropout sites."""
        for module in self.dropout_modules():
            module.set_schedule(epoch, self.config.total_epochs)

    def dropout_modules(self):
        return [module for module in self.modules() if isinstance(module, StructuredDropout)]


def build_model(cfg):
    """Build a network; weights depend only on cfg.seed."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(cfg.seed)
        model = ResNet1d(cfg)
    return model


def set_dropout_mode(model, training):
    """Switch only the dropout sites between training and evaluation behavior."""
    for module in model.dropout_modules():
        module.train(training)


def forward(model, batch, mode, epoch):
    """Predict with the dropout sites in mode ('train' or 'eval') at the given epoch.

        Normalization layers keep whatever mode the model is in.
    """
    if mode not in ('train', 'eval'):
        raise ValueError('Unknown mode: {}'.format(mode))
    set_dropout_mode(model, mode == 'train')
    model.set_epoch(epoch)
    return model(batch)


def refit_clusters(model, batch, logger=None):
    """Refit the cluster maps of all dropCluster sites on the clean features of batch."""
    sites = [module for module in model.dropout_modules() if isinstance(module, DropCluster)]
    if not sites:
        return 0
    captured = {}
    hooks = [module.register_forward_pre_hook(
        lambda module, inputs: captured.__setitem__(module, inputs[0].detach()))
        for module in sites]
    training = model.training
    try:
        model.eval()
        with torch.no_grad():
            model(batch)
    finally:
        for hook in hooks:
            hook.remove()
        model.train(training)
    for module in sites:
        cluster_map = module.fit(captured[module])
        if logger is not None:
            logger.debug('Refitted %s: %s clusters', module.extra_repr(), int(np.sum(cluster_map.n_clusters)))
    return len(sites)


def to_input(spectra, input_scale, device=None):
    """Scaled float32 network input [N, 1, length]."""
    x = torch.as_tensor(np.asarray(spectra, dtype=np.float32) / np.float32(input_scale))
    return x.unsqueeze(1).to(device) if device is not None else x.unsqueeze(1)


def predict(model, spectra, input_scale, batch_size=1024):
    """Normalized predictions of an evaluation-mode model, as a float64 array."""
    device = next(model.parameters()).device
    training = model.training
    model.eval()
    outputs = []
    try:
        with torch.no_grad():
            for start in range(0, len(spectra), batch_size):
                batch = to_input(spectra[start:start + batch_size], input_scale, device)
                outputs.append(model(batch).double().cpu().numpy())
    finally:
        model.train(training)
    if not outputs:
        return np.empty((0, model.config.output_dim))
    return np.concatenate(outputs)
