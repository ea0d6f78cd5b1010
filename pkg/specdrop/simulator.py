# Copyright 2024, specdrop contributors
#
# This Source Code Form is subject to the terms of the Mozilla Public
# License, v. 2.0. If a copy of the MPL was not distributed with this
# file, You can obtain one at https://mozilla.org/MPL/2.0/.


"""Spectrum synthesis.

The signal model: basis functions are scaled by their amplitudes and damped by a
Lorentzian (global 1/T2* or per-metabolite D) and, for COMPLEX26, a Gaussian factor
exp(-(tG)^2) in the time domain. The Fourier transform is evaluated directly on the
cropped output axis, which is band-limited interpolation of the full spectrum. Zero-
and first-order phase follow, then the baseline and finally white noise whose standard
deviation is max|clean| / SNR.
"""
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.integrate import trapezoid

from .commons import SynthesisError
from .variants import N_BASELINES, ParameterVector, get_variant, make_rng

CHUNK_SIZE = 128


@dataclass(frozen=True, eq=False)
class Spectrum:
    """A real frequency-domain spectrum on the output axis, with its ground truth."""
    signal: np.ndarray
    ppm_axis: np.ndarray
    params: ParameterVector
    clean_signal: Optional[np.ndarray] = None
    baseline_indices: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.signal.shape != self.ppm_axis.shape:
            raise SynthesisError('Signal and axis lengths differ: {} vs. {}'.format(
                self.signal.shape, self.ppm_axis.shape))

    def __len__(self):
        return len(self.signal)

    @property
    def snr(self):
        """Measured SNR; needs the clean signal."""
        if self.clean_signal is None:
            raise SynthesisError('No clean signal to measure the SNR against.')
        return measure_snr(self.signal, self.clean_signal)


def measure_snr(signal, clean):
    """Peak of the clean real spectrum over the standard deviation of the noise."""
    noise = np.asarray(signal) - np.asarray(clean)
    deviation = np.std(noise)
    if deviation == 0:
        return np.inf
    return float(np.max(np.abs(clean)) / deviation)


def _check_basis(task, basis):
    if tuple(basis.names) != tuple(task.metabolite_names):
        raise SynthesisError('Basis ({}) does not match variant {} ({})'.format(
            ', '.join(basis.names), task.name, ', '.join(task.metabolite_names)))


def _column(values, task, role, default=0.0):
    index = task.indices(role)
    if not index:
        return np.full(values.shape[0], default)
    return values[:, index[0]]


def _fourier_kernel(grid):
    """[n_points, length] kernel of the scaled Fourier sum at the output frequencies."""
    return grid.dwell * np.exp(-2j * np.pi * np.outer(grid.time, grid.frequencies))


def _time_domain(values, task, basis):
    """Damped, amplitude-weighted sum of the basis functions: [B, n_points]."""
    t = basis.grid.time
    amplitudes = values[:, task.indices('amplitude')]
    if task.has_role('lorentzian_per_met'):
        rates = values[:, task.indices('lorentzian_per_met')]
        damped = basis.fids[None, :, :] * np.exp(-rates[:, :, None] * t[None, None, :])
        fid = np.einsum('bm,bmn->bn', amplitudes, damped)
    else:
        t2star = _column(values, task, 'lorentzian_global')
        fid = (amplitudes @ basis.fids) * np.exp(-t[None, :] / t2star[:, None])
    if task.has_role('gaussian_global'):
        gauss = _column(values, task, 'gaussian_global')
        fid = fid * np.exp(-(t[None, :] * gauss[:, None]) ** 2)
    return fid


def _phase(spectra, values, task, frequencies):
    phi0 = _column(values, task, 'phase0')
    phi1 = _column(values, task, 'phase1')
    return spectra * np.exp(-1j * (phi0[:, None] + phi1[:, None] * frequencies[None, :]))


def _baseline(values, task, library, baseline_indices):
    coefficients = values[:, task.indices('baseline_coeff')]
    if coefficients.shape[1] == 0:
        return 0.0
    if baseline_indices is None:
        raise SynthesisError('Baseline coefficients given, but no baseline functions selected.')
    baseline_indices = np.asarray(baseline_indices, dtype=np.int64)
    if baseline_indices.shape != coefficients.shape:
        raise SynthesisError('Expected baseline indices of shape {}, got {}'.format(
            coefficients.shape, baseline_indices.shape))
    return np.einsum('bk,bkl->bl', coefficients, library[baseline_indices])


def clean_batch(values, variant, basis, baseline_indices=None):
    """Noise-free spectra for a batch of target vectors: [B, length]."""
    task = get_variant(variant)
    _check_basis(task, basis)
    values = np.atleast_2d(np.asarray(values, dtype=np.float64))
    kernel = _fourier_kernel(basis.grid)
    frequencies = basis.grid.frequencies
    out = np.empty((values.shape[0], basis.grid.length), dtype=np.float64)
    for start in range(0, values.shape[0], CHUNK_SIZE):
        chunk = slice(start, start + CHUNK_SIZE)
        spectra = _time_domain(values[chunk], task, basis) @ kernel
        out[chunk] = _phase(spectra, values[chunk], task, frequencies).real
    indices = None if baseline_indices is None else np.asarray(baseline_indices)
    out += _baseline(values, task, basis.baseline_library, indices)
    if not np.all(np.isfinite(out)):
        raise SynthesisError('Non-finite values during synthesis.')
    return out


def add_noise(clean, snr, standard_normal):
    """Add white Gaussian noise with standard deviation max|clean| / snr, per row."""
    clean = np.atleast_2d(clean)
    z = np.atleast_2d(np.asarray(standard_normal, dtype=np.float64))
    peak = np.max(np.abs(clean), axis=1, keepdims=True)
    return clean + z * (peak / np.asarray(snr, dtype=np.float64).reshape(-1, 1))


def synthesize_batch(values, variant, basis, baseline_indices=None, standard_normal=None):
    """Return (signals, clean) for a batch; noise is left out when standard_normal is None."""
    task = get_variant(variant)
    clean = clean_batch(values, task, basis, baseline_indices)
    if standard_normal is None:
        return clean.copy(), clean
    snr = np.atleast_2d(values)[:, task.indices('snr')[0]]
    signals = add_noise(clean, snr, standard_normal)
    if not np.all(np.isfinite(signals)):
        raise SynthesisError('Non-finite values after adding noise.')
    return signals, clean


def draw_baseline_indices(rng, library_size, count=N_BASELINES):
    """Select baseline functions uniformly without replacement."""
    return rng.choice(library_size, size=count, replace=False)


def synthesize(params, basis, rng=None, noise=True, baseline_indices=None):
    """Synthesize one Spectrum.

        Without an rng and without explicit baseline_indices, the first baseline
        functions of the library are used; noise requires an rng.
    """
    task = params.task
    rng = None if rng is None else make_rng(rng)
    if task.n_baselines and baseline_indices is None:
        if rng is not None:
            baseline_indices = draw_baseline_indices(rng, basis.baseline_library.shape[0], task.n_baselines)
        else:
            baseline_indices = np.arange(task.n_baselines)
    indices = None if baseline_indices is None else np.asarray(baseline_indices)[None, :]
    standard_normal = None
    if noise:
        if rng is None:
            raise SynthesisError('Noise requested without a random generator.')
        standard_normal = rng.standard_normal(basis.grid.length)
    signals, clean = synthesize_batch(params.values[None, :], task, basis, indices, standard_normal)
    return Spectrum(signals[0], basis.grid.ppm_axis, params, clean[0],
                    None if indices is None else indices[0])


def components(params, basis):
    """Phased, clean contribution of each metabolite on the output axis: [M, length]."""
    task = params.task
    _check_basis(task, basis)
    rows = []
    amplitude_index = task.indices('amplitude')
    for m in range(len(basis)):
        values = params.values.copy()
        for other, index in enumerate(amplitude_index):
            if other != m:
                values[index] = 0.0
        values[task.indices('baseline_coeff')] = 0.0
        rows.append(clean_batch(values[None, :], task, basis,
                                np.zeros((1, task.n_baselines), dtype=np.int64))[0])
    return np.vstack(rows)


def quantify_peaks(spectrum, basis, params=None):
    """Per-metabolite peak height and area of the clean modulated components.

        The area is integrated over the Hz axis; the height is the largest magnitude.
    """
    if params is None:
        params = spectrum.params
    parts = components(params, basis)
    hz = basis.grid.frequencies[::-1]
    return {
        name: {
            'height': float(np.max(np.abs(part))),
            'area': float(trapezoid(part[::-1], hz)),
        }
        for name, part in zip(basis.names, parts)
    }
