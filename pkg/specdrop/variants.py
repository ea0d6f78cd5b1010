# Copyright 2024, specdrop contributors
#
# This Source Code Form is subject to the terms of the Mozilla Public
# License, v. 2.0. If a copy of the MPL was not distributed with this
# file, You can obtain one at https://mozilla.org/MPL/2.0/.


"""Task variants: the ordered parameter schemas of the three regression tasks,
and the sampling of ground-truth parameter vectors."""
import math
from dataclasses import dataclass, field, replace
from typing import Optional, Tuple

import numpy as np

from .commons import ConfigError

SIMPLE7 = 'SIMPLE7'
STANDARD14 = 'STANDARD14'
COMPLEX26 = 'COMPLEX26'

ROLES = (
    'amplitude',
    'lorentzian_global',
    'lorentzian_per_met',
    'gaussian_global',
    'phase0',
    'phase1',
    'snr',
    'baseline_coeff',
)

N_BASELINES = 5

# Default sampling bounds. Linewidths span 2-20 Hz (FWHM = 1 / (pi T2*)).
AMPLITUDE_BOUNDS = (0.0, 1.0)
T2STAR_BOUNDS = (1.0 / (math.pi * 20.0), 1.0 / (math.pi * 2.0))     # s
LORENTZIAN_RATE_BOUNDS = (math.pi * 2.0, math.pi * 20.0)              # 1/s
GAUSSIAN_BOUNDS = (2.0, 20.0)                                         # Hz
PHASE0_BOUNDS = (-math.pi, math.pi)                                   # rad
PHASE1_BOUNDS = (-5e-4, 5e-4)                                         # rad/Hz
SNR_BOUNDS = (5.0, 30.0)
BASELINE_BOUNDS = (0.0, 0.05)


@dataclass(frozen=True)
class SchemaEntry:
    """One regression target: symbol, role and uniform sampling bounds (low, high]."""
    symbol: str
    role: str
    low: float
    high: float
    metabolite: Optional[str] = None

    def __post_init__(self):
        if self.role not in ROLES:
            raise ConfigError('Unknown role: {}'.format(self.role))
        if not (math.isfinite(self.low) and math.isfinite(self.high)) or self.low > self.high:
            raise ConfigError('Invalid bounds for {}: ({}, {})'.format(self.symbol, self.low, self.high))


@dataclass(frozen=True)
class TaskVariant:
    """A named regression task.

        Attributes:
            name (str): One of SIMPLE7, STANDARD14, COMPLEX26.
            metabolite_names (tuple): Metabolites modulated by the basis set, in order.
            schema (tuple): The ordered SchemaEntry list defining the target vector.
    """
    name: str
    metabolite_names: Tuple[str, ...]
    schema: Tuple[SchemaEntry, ...] = field(repr=False)

    def __post_init__(self):
        symbols = self.symbols
        if len(set(symbols)) != len(symbols):
            raise ConfigError('Duplicate symbols in schema of {}'.format(self.name))

    def __len__(self):
        return len(self.schema)

    @property
    def size(self):
        return len(self.schema)

    @property
    def symbols(self):
        return tuple(entry.symbol for entry in self.schema)

    @property
    def low(self):
        return np.array([entry.low for entry in self.schema], dtype=np.float64)

    @property
    def high(self):
        return np.array([entry.high for entry in self.schema], dtype=np.float64)

    def indices(self, *roles):
        """Schema positions of all entries with one of the given roles."""
        return [i for i, entry in enumerate(self.schema) if entry.role in roles]

    def index_of(self, symbol):
        try:
            return self.symbols.index(symbol)
        except ValueError:
            raise KeyError('No such symbol in {}: {}'.format(self.name, symbol)) from None

    def has_role(self, role):
        return bool(self.indices(role))

    @property
    def n_baselines(self):
        return len(self.indices('baseline_coeff'))

    def validate(self, values):
        """Check length and bounds of a target vector (or a batch of them)."""
        values = np.asarray(values, dtype=np.float64)
        if values.shape[-1] != self.size:
            raise ConfigError('{} expects {} values, got {}'.format(
                self.name, self.size, values.shape[-1]))
        if not np.all(np.isfinite(values)):
            raise ConfigError('Non-finite parameter values.')
        outside = (values < self.low) | (values > self.high)
        if np.any(outside):
            bad = sorted({self.symbols[i] for i in np.argwhere(outside)[:, -1]})
            raise ConfigError('Values outside sampling bounds: {}'.format(', '.join(bad)))
        return values

    def normalize(self, values):
        """Map physical values onto [0, 1] by the schema bounds."""
        span = np.where(self.high > self.low, self.high - self.low, 1.0)
        return (np.asarray(values, dtype=np.float64) - self.low) / span

    def denormalize(self, values):
        """Inverse of normalize."""
        span = np.where(self.high > self.low, self.high - self.low, 1.0)
        return np.asarray(values, dtype=np.float64) * span + self.low

    def with_bounds(self, overrides):
        """Return a copy with some bounds replaced.

            overrides maps a symbol or a role to a (low, high) pair; symbols win over roles.
        """
        if not overrides:
            return self
        entries = []
        for entry in self.schema:
            bounds = overrides.get(entry.symbol, overrides.get(entry.role))
            if bounds is not None:
                low, high = bounds
                entry = replace(entry, low=float(low), high=float(high))
            entries.append(entry)
        return replace(self, schema=tuple(entries))


def _amplitudes(names):
    return [SchemaEntry('A_' + name, 'amplitude', *AMPLITUDE_BOUNDS, metabolite=name) for name in names]


def _baselines():
    return [SchemaEntry('b{}'.format(i + 1), 'baseline_coeff', *BASELINE_BOUNDS)
            for i in range(N_BASELINES)]


def _simple7():
    names = ('PCh', 'Cre', 'NAA', 'MM', 'Lip')
    schema = _amplitudes(names) + [
        SchemaEntry('T2star', 'lorentzian_global', *T2STAR_BOUNDS),
        SchemaEntry('SNR', 'snr', *SNR_BOUNDS),
    ]
    return TaskVariant(SIMPLE7, names, tuple(schema))


def _standard14():
    names = ('PCh', 'Cre', 'NAA', 'Glx', 'Ins')
    schema = _amplitudes(names) + _baselines() + [
        SchemaEntry('T2star', 'lorentzian_global', *T2STAR_BOUNDS),
        SchemaEntry('SNR', 'snr', *SNR_BOUNDS),
        SchemaEntry('phi0', 'phase0', *PHASE0_BOUNDS),
        SchemaEntry('phi1', 'phase1', *PHASE1_BOUNDS),
    ]
    return TaskVariant(STANDARD14, names, tuple(schema))


def _complex26():
    names = ('PCh', 'Cre', 'NAA', 'Glx', 'Ins', 'GPC', 'Tau', 'MM', 'Lip')
    schema = _amplitudes(names)
    schema += [SchemaEntry('D_' + name, 'lorentzian_per_met', *LORENTZIAN_RATE_BOUNDS, metabolite=name)
               for name in names]
    schema += [
        SchemaEntry('G', 'gaussian_global', *GAUSSIAN_BOUNDS),
        SchemaEntry('phi0', 'phase0', *PHASE0_BOUNDS),
        SchemaEntry('SNR', 'snr', *SNR_BOUNDS),
    ]
    schema += _baselines()
    return TaskVariant(COMPLEX26, names, tuple(schema))


VARIANTS = {
    SIMPLE7: _simple7(),
    STANDARD14: _standard14(),
    COMPLEX26: _complex26(),
}


def get_variant(variant, bounds=None):
    """Resolve a variant by name ('simple7', 'STANDARD14', ...) or pass one through."""
    if isinstance(variant, TaskVariant):
        return variant.with_bounds(bounds)
    try:
        return VARIANTS[str(variant).upper()].with_bounds(bounds)
    except KeyError:
        raise ConfigError('Unknown task variant: {}'.format(variant)) from None


@dataclass(frozen=True, eq=False)
class ParameterVector:
    """The ground truth of one spectrum under a named variant.

        The optional task carries overridden bounds; by default the registered
        variant of that name is used.
    """
    variant: str
    values: np.ndarray
    task: Optional[TaskVariant] = field(default=None, repr=False)

    def __post_init__(self):
        task = self.task if self.task is not None else get_variant(self.variant)
        if task.name != self.variant:
            raise ConfigError('Variant mismatch: {} vs. {}'.format(self.variant, task.name))
        values = task.validate(self.values)
        object.__setattr__(self, 'task', task)
        object.__setattr__(self, 'values', values)

    def as_dict(self):
        return dict(zip(self.task.symbols, (float(v) for v in self.values)))

    def __getitem__(self, symbol):
        return float(self.values[self.task.index_of(symbol)])

    def replace(self, **symbols):
        """A copy with some values set by symbol (bounds are checked again)."""
        values = self.values.copy()
        for symbol, value in symbols.items():
            values[self.task.index_of(symbol)] = value
        return ParameterVector(self.variant, values, self.task)


def make_rng(rng_seed):
    """A numpy Generator from an int, a sequence such as (seed, index), or a Generator."""
    if isinstance(rng_seed, np.random.Generator):
        return rng_seed
    return np.random.default_rng(rng_seed)


def draw_uniform(variant, rng):
    """Draw one value per schema entry, each independently uniform on (low, high]."""
    variant = get_variant(variant)
    # 1 - U[0, 1) lies in (0, 1], so the upper bound is reachable and the lower one is not.
    unit = 1.0 - rng.random(variant.size)
    return np.minimum(variant.low + unit * (variant.high - variant.low), variant.high)


def sample_parameters(variant, rng_seed):
    """Sample a ParameterVector; reproducible under rng_seed."""
    variant = get_variant(variant)
    rng = make_rng(rng_seed)
    return ParameterVector(variant.name, draw_uniform(variant, rng), variant)
