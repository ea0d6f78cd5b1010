# Copyright 2024, specdrop contributors
#
# This Source Code Form is subject to the terms of the Mozilla Public
# License, v. 2.0. If a copy of the MPL was not distributed with this
# file, You can obtain one at https://mozilla.org/MPL/2.0/.


"""Labeled spectra datasets and their file format.

A dataset file starts with the magic bytes SPECDROP, a little-endian uint32 header
length and a UTF-8 JSON header, followed by the spectra [n, length] and the targets
[n, n_params], both row-major little-endian float32.
"""
import json
import pathlib
import struct
from dataclasses import dataclass

import numpy as np
from packaging.version import InvalidVersion, Version
from schema import Schema, SchemaError, And, Use

from . import __version__
from .basis import build_basis_set
from .commons import ConfigError, DatasetFormatError, UnsupportedVersionError
from .simulator import draw_baseline_indices, synthesize_batch
from .variants import draw_uniform, get_variant, make_rng

MAGIC = b'SPECDROP'
FORMAT_VERSION = '1.0'
HEADER_SCHEMA = Schema(
    {
        'version': str,
        'variant': str,
        'n': And(int, lambda n: n >= 1),
        'n_train': And(int, lambda n: n >= 0),
        'length': And(int, lambda n: n >= 1),
        'schema': [[Use(str), Use(str), Use(float), Use(float)]],
        'seed': int,
        'generator_version': str,
        'ppm_start': float,
        'ppm_end': float,
    })
GENERATION_CHUNK = 1024


@dataclass(frozen=True, eq=False)
class Dataset:
    """Spectra and targets; the first n_train rows form the training split.

        Attributes:
            variant (TaskVariant): The task, including the sampling bounds used.
            spectra (ndarray): float32 [n, length].
            targets (ndarray): float32 [n, n_params], physical units.
            n_train (int): Number of training rows.
            seed (int): Generation seed.
            generator_version (str): specdrop version that generated the data.
            ppm_range (tuple): (start, end) of the descending ppm axis.
    """
    variant: object
    spectra: np.ndarray
    targets: np.ndarray
    n_train: int
    seed: int
    generator_version: str = __version__
    ppm_range: tuple = (4.2, 0.2)

    def __post_init__(self):
        if self.spectra.shape[0] != self.targets.shape[0]:
            raise DatasetFormatError('Spectra and targets differ in rows: {} vs. {}'.format(
                self.spectra.shape[0], self.targets.shape[0]))
        if self.targets.shape[1] != self.variant.size:
            raise DatasetFormatError('Targets have {} columns, {} expects {}'.format(
                self.targets.shape[1], self.variant.name, self.variant.size))
        if not 0 <= self.n_train <= self.n:
            raise DatasetFormatError('Invalid training split size: {}'.format(self.n_train))

    def __len__(self):
        return self.n

    @property
    def n(self):
        return self.spectra.shape[0]

    @property
    def length(self):
        return self.spectra.shape[1]

    @property
    def split(self):
        return self.n_train / self.n

    @property
    def split_tags(self):
        tags = np.full(self.n, 'val', dtype=object)
        tags[:self.n_train] = 'train'
        return tags

    @property
    def ppm_axis(self):
        return np.linspace(self.ppm_range[0], self.ppm_range[1], self.length)

    def part(self, split):
        """(spectra, targets) of 'train' or 'val'."""
        if split == 'train':
            rows = slice(0, self.n_train)
        elif split == 'val':
            rows = slice(self.n_train, self.n)
        else:
            raise ValueError('Unknown split: {}'.format(split))
        return self.spectra[rows], self.targets[rows]

    def input_scale(self):
        """Largest magnitude over the training spectra."""
        spectra, _ = self.part('train')
        if spectra.size == 0:
            spectra = self.spectra
        scale = float(np.max(np.abs(spectra)))
        return scale if scale > 0 else 1.0


def sample_rows(task, start, count, seed, library_size, length):
    """Draws for rows start..start+count, each from its own stream (seed, row):
    targets, then the baseline choice, then the noise."""
    values = np.empty((count, task.size))
    indices = np.zeros((count, task.n_baselines), dtype=np.int64)
    noise = np.empty((count, length))
    for offset in range(count):
        rng = make_rng([seed, start + offset])
        values[offset] = draw_uniform(task, rng)
        if task.n_baselines:
            indices[offset] = draw_baseline_indices(rng, library_size, task.n_baselines)
        noise[offset] = rng.standard_normal(length)
    return values, indices, noise


def generate_dataset(variant, n, seed, split=0.8, basis=None, bounds=None, logger=None):
    """Simulate n labeled spectra; deterministic under seed."""
    if n < 1:
        raise ConfigError('A dataset needs at least one spectrum.')
    if not 0 < split < 1:
        raise ConfigError('The split must lie in (0, 1), got {}'.format(split))
    task = get_variant(variant, bounds)
    if basis is None:
        basis = build_basis_set(task)
    grid = basis.grid
    spectra = np.empty((n, grid.length), dtype=np.float32)
    targets = np.empty((n, task.size), dtype=np.float32)
    for start in range(0, n, GENERATION_CHUNK):
        count = min(GENERATION_CHUNK, n - start)
        values, indices, noise = sample_rows(task, start, count, seed, basis.baseline_library.shape[0],
                                             grid.length)
        signals, _ = synthesize_batch(values, task, basis, indices if task.n_baselines else None, noise)
        spectra[start:start + count] = signals
        targets[start:start + count] = values
        if logger is not None:
            logger.debug('Synthesized %s/%s spectra', start + count, n)
    n_train = int(round(n * split))
    if logger is not None:
        logger.info('Dataset %s: %s train / %s val spectra (seed %s)', task.name, n_train, n - n_train, seed)
    return Dataset(task, spectra, targets, n_train, int(seed),
                   ppm_range=(float(grid.ppm_axis[0]), float(grid.ppm_axis[-1])))


def _header(ds):
    return {
        'version': FORMAT_VERSION,
        'variant': ds.variant.name,
        'n': ds.n,
        'n_train': ds.n_train,
        'length': ds.length,
        'schema': [[e.symbol, e.role, e.low, e.high] for e in ds.variant.schema],
        'seed': ds.seed,
        'generator_version': ds.generator_version,
        'ppm_start': float(ds.ppm_range[0]),
        'ppm_end': float(ds.ppm_range[1]),
    }


def write_dataset(ds, path):
    """Write a dataset file; returns its path."""
    path = pathlib.Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = json.dumps(_header(ds), sort_keys=True).encode('utf-8')
    with open(str(path), 'wb') as file_handle:
        file_handle.write(MAGIC)
        file_handle.write(struct.pack('<I', len(header)))
        file_handle.write(header)
        file_handle.write(np.ascontiguousarray(ds.spectra, dtype='<f4').tobytes())
        file_handle.write(np.ascontiguousarray(ds.targets, dtype='<f4').tobytes())
    return path


def check_version(value):
    """Accept any 1.x format version."""
    try:
        version = Version(str(value))
    except InvalidVersion:
        raise UnsupportedVersionError('Unknown dataset format version: {}'.format(value)) from None
    if version.major != Version(FORMAT_VERSION).major:
        raise UnsupportedVersionError('Unsupported dataset format version: {}'.format(value))
    return version


def _task_from_header(header):
    task = get_variant(header['variant'])
    symbols = tuple(entry[0] for entry in header['schema'])
    if symbols != task.symbols:
        raise DatasetFormatError('Schema of the file does not match {}'.format(task.name))
    return task.with_bounds({entry[0]: (entry[2], entry[3]) for entry in header['schema']})


def read_dataset(path):
    """Read a dataset file written by write_dataset."""
    data = pathlib.Path(path).read_bytes()
    prefix = len(MAGIC) + 4
    if len(data) < prefix or data[:len(MAGIC)] != MAGIC:
        raise DatasetFormatError('Not a dataset file: {}'.format(path))
    (header_length,) = struct.unpack('<I', data[len(MAGIC):prefix])
    try:
        header = json.loads(data[prefix:prefix + header_length].decode('utf-8'))
    except (UnicodeDecodeError, ValueError) as err:
        raise DatasetFormatError('Malformed header in {}: {}'.format(path, err)) from None
    if not isinstance(header, dict) or 'version' not in header:
        raise DatasetFormatError('Header without version in {}'.format(path))
    check_version(header['version'])
    try:
        header = HEADER_SCHEMA.validate(header)
        task = _task_from_header(header)
    except (SchemaError, ConfigError) as err:
        raise DatasetFormatError('Invalid header in {}: {}'.format(path, err)) from None
    n, length, n_params = header['n'], header['length'], task.size
    body = memoryview(data)[prefix + header_length:]
    expected = 4 * n * (length + n_params)
    if len(body) != expected:
        raise DatasetFormatError('Expected {} bytes of data for n = {}, found {}'.format(expected, n, len(body)))
    spectra = np.frombuffer(body[:4 * n * length], dtype='<f4').reshape(n, length).astype(np.float32)
    targets = np.frombuffer(body[4 * n * length:], dtype='<f4').reshape(n, n_params).astype(np.float32)
    return Dataset(task, spectra, targets, header['n_train'], header['seed'],
                   header['generator_version'], (header['ppm_start'], header['ppm_end']))
