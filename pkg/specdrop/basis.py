# Copyright 2024, specdrop contributors
#
# This Source Code Form is subject to the terms of the Mozilla Public
# License, v. 2.0. If a copy of the MPL was not distributed with this
# file, You can obtain one at https://mozilla.org/MPL/2.0/.


"""Metabolite basis functions, the baseline library and the acquisition grid."""
import pathlib
from dataclasses import dataclass, field, replace
from typing import Tuple

import numpy as np
from numpy.polynomial import legendre

from .commons import ConfigError
from .variants import get_variant

MIN_POINTS = 1024
MIN_BASELINES = 5

# (ppm, protons, intrinsic FWHM in Hz) per resonance.
METABOLITE_LINES = {
    'NAA': ((2.01, 3.0, 0.0),),
    'Cre': ((3.03, 3.0, 0.0), (3.91, 2.0, 0.0)),
    'PCh': ((3.21, 9.0, 0.0),),
    'GPC': ((3.23, 9.0, 0.0),),
    'Ins': ((3.56, 4.0, 0.0), (4.05, 1.0, 0.0), (3.27, 1.0, 0.0)),
    'Tau': ((3.42, 2.0, 0.0), (3.25, 2.0, 0.0)),
    'Glx': ((2.05, 1.0, 0.0), (2.12, 1.0, 0.0), (2.35, 2.0, 0.0), (2.45, 2.0, 0.0), (3.75, 2.0, 0.0)),
    'MM': ((0.91, 3.0, 13.0), (1.21, 2.0, 13.0), (1.39, 2.0, 13.0)),
    'Lip': ((0.90, 3.0, 25.0), (1.30, 6.0, 25.0)),
}

N_LEGENDRE = 8
GAUSSIAN_CENTERS = np.linspace(0.5, 3.9, 8)   # ppm
GAUSSIAN_WIDTHS = np.linspace(0.6, 1.4, 8)    # ppm, standard deviation


@dataclass(frozen=True)
class GridSpec:
    """Acquisition and output grid.

        Attributes:
            n_points (int): Time-domain points before crop.
            dwell (float): Dwell time in seconds.
            mhz (float): Spectrometer frequency in MHz.
            reference_ppm (float): Chemical shift of the carrier (0 Hz offset).
            crop (tuple): (low, high) ppm range of the output spectrum.
            length (int): Output points after crop and resample.
    """
    n_points: int = 2048
    dwell: float = 5e-4
    mhz: float = 127.74
    reference_ppm: float = 4.7
    crop: Tuple[float, float] = (0.2, 4.2)
    length: int = 512

    @property
    def time(self):
        return np.arange(self.n_points, dtype=np.float64) * self.dwell

    @property
    def ppm_axis(self):
        """Output axis, descending from crop[1] to crop[0]."""
        return np.linspace(self.crop[1], self.crop[0], self.length)

    def ppm_to_hz(self, ppm):
        return (np.asarray(ppm, dtype=np.float64) - self.reference_ppm) * self.mhz

    @property
    def frequencies(self):
        """Output axis as Hz offsets from the carrier, which is the first-order phase pivot."""
        return self.ppm_to_hz(self.ppm_axis)

    @property
    def bandwidth(self):
        return 1.0 / self.dwell

    def check(self):
        if self.n_points < MIN_POINTS:
            raise ConfigError('The grid needs at least {} points before crop, got {}'.format(
                MIN_POINTS, self.n_points))
        if self.dwell <= 0 or self.mhz <= 0 or self.length < 2:
            raise ConfigError('Invalid grid: {}'.format(self))
        low, high = self.crop
        if not low < high:
            raise ConfigError('Invalid crop range: {}'.format(self.crop))
        nyquist = self.bandwidth / 2.0
        if np.max(np.abs(self.ppm_to_hz([low, high]))) >= nyquist:
            raise ConfigError('Crop range exceeds the acquisition bandwidth.')
        return self


@dataclass(frozen=True, eq=False)
class BasisSet:
    """Metabolite and baseline basis functions on a common grid."""
    names: Tuple[str, ...]
    fids: np.ndarray
    baseline_library: np.ndarray = field(repr=False)
    grid: GridSpec = GridSpec()

    def __post_init__(self):
        object.__setattr__(self, 'names', tuple(self.names))
        object.__setattr__(self, 'fids', np.asarray(self.fids, dtype=np.complex128))
        object.__setattr__(self, 'baseline_library', np.asarray(self.baseline_library, dtype=np.float64))
        if len(set(self.names)) != len(self.names):
            raise ConfigError('Metabolite names are not unique: {}'.format(self.names))
        if self.fids.ndim != 2 or self.fids.shape[0] != len(self.names):
            raise ConfigError('Expected one basis function per name.')
        if self.fids.shape[1] != self.grid.n_points:
            raise ConfigError('Basis functions have {} points, the grid {}'.format(
                self.fids.shape[1], self.grid.n_points))
        zero = np.linalg.norm(self.fids, axis=1) == 0
        if np.any(zero):
            raise ConfigError('Zero basis functions: {}'.format(
                ', '.join(n for n, z in zip(self.names, zero) if z)))
        library = self.baseline_library
        if library.ndim != 2 or library.shape[1] != self.grid.length:
            raise ConfigError('Baseline functions must have {} points.'.format(self.grid.length))
        if library.shape[0] < MIN_BASELINES:
            raise ConfigError('The baseline library needs at least {} entries.'.format(MIN_BASELINES))
        if np.unique(library, axis=0).shape[0] != library.shape[0]:
            raise ConfigError('Baseline library entries are not unique.')

    def __len__(self):
        return len(self.names)

    def subset(self, names):
        """The basis restricted to names, in that order."""
        try:
            rows = [self.names.index(name) for name in names]
        except ValueError:
            missing = [name for name in names if name not in self.names]
            raise ConfigError('Missing basis functions: {}'.format(', '.join(missing))) from None
        return replace(self, names=tuple(names), fids=self.fids[rows])


def singlet(grid, ppm, fwhm=0.0, weight=1.0):
    """A unit-area Lorentzian resonance in the time domain."""
    t = grid.time
    frequency = grid.ppm_to_hz(ppm)
    return weight * np.exp(2j * np.pi * frequency * t - np.pi * fwhm * t)


def metabolite_fid(grid, lines):
    fid = np.zeros(grid.n_points, dtype=np.complex128)
    for ppm, protons, fwhm in lines:
        fid += singlet(grid, ppm, fwhm, protons)
    return fid


def baseline_library(grid):
    """Smooth baseline functions on the output axis: Legendre polynomials and
    broad Gaussians, each scaled to unit peak magnitude."""
    x = np.linspace(-1.0, 1.0, grid.length)
    entries = [legendre.legval(x, np.eye(N_LEGENDRE)[k]) for k in range(N_LEGENDRE)]
    ppm = grid.ppm_axis
    for center, width in zip(GAUSSIAN_CENTERS, GAUSSIAN_WIDTHS):
        entries.append(np.exp(-0.5 * ((ppm - center) / width) ** 2))
    library = np.vstack(entries)
    return library / np.max(np.abs(library), axis=1, keepdims=True)


def build_basis_set(variant, grid=None):
    """Synthesize the basis set of a task variant from literature chemical shifts."""
    variant = get_variant(variant)
    grid = (grid or GridSpec()).check()
    fids = np.vstack([metabolite_fid(grid, METABOLITE_LINES[name]) for name in variant.metabolite_names])
    return BasisSet(variant.metabolite_names, fids, baseline_library(grid), grid)


def save_basis_set(basis, path):
    """Write a basis set as .npz (readable by load_basis_set)."""
    path = pathlib.Path(path)
    np.savez(str(path),
             names=np.array(basis.names),
             fids=basis.fids,
             baseline_library=basis.baseline_library,
             dwell=basis.grid.dwell,
             mhz=basis.grid.mhz,
             reference_ppm=basis.grid.reference_ppm)
    return path


def load_basis_set(path, variant, grid=None):
    """Read a user basis from an .npz file.

        Required arrays: names, fids. Optional: dwell, mhz, reference_ppm (override
        the grid) and baseline_library (defaults to the built-in library).
        The basis is reduced to the metabolites of the variant, in variant order.
    """
    variant = get_variant(variant)
    path = pathlib.Path(path)
    if not path.exists():
        raise FileNotFoundError('No basis file: {}'.format(path))
    with np.load(str(path), allow_pickle=False) as data:
        if 'names' not in data or 'fids' not in data:
            raise ConfigError('A basis file needs the arrays "names" and "fids": {}'.format(path))
        names = [str(name) for name in data['names']]
        fids = np.asarray(data['fids'])
        overrides = {key: float(data[key]) for key in ('dwell', 'mhz', 'reference_ppm') if key in data}
        library = np.asarray(data['baseline_library']) if 'baseline_library' in data else None
    grid = replace(grid or GridSpec(), n_points=fids.shape[-1], **overrides).check()
    if library is None:
        library = baseline_library(grid)
    return BasisSet(names, fids, library, grid).subset(variant.metabolite_names)
