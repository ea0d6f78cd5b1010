import logging
import math
from pathlib import Path
from unittest import mock

import numpy as np
import pytest

from specdrop.basis import build_basis_set
from specdrop.dataset import generate_dataset
from specdrop.settings import Settings
from specdrop.trainer import RunConfig

test_folder_path = Path(__file__).parent.absolute()
logger = logging.getLogger('specdrop.tests')


def binomial_tolerance(p, n, sigmas=3.0):
    """Allowed deviation of an empirical frequency from p after n trials."""
    return sigmas * math.sqrt(p * (1.0 - p) / n)


def small_run_config(output_dir, **kwargs):
    """A run that trains in seconds on a CPU."""
    values = dict(
        name='small',
        variant='SIMPLE7',
        preset='tiny',
        n=64,
        epochs=3,
        batch_size=16,
        seed=7,
        output_dir=str(output_dir),
    )
    values.update(kwargs)
    return RunConfig(**values)


@pytest.fixture(scope='session')
def basis_sets():
    return {name: build_basis_set(name) for name in ('SIMPLE7', 'STANDARD14', 'COMPLEX26')}


@pytest.fixture(scope='session')
def small_dataset():
    return generate_dataset('SIMPLE7', 64, seed=7)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def mock_settings(tmp_path) -> Settings:
    # Do not load any data from a file
    with mock.patch.object(Settings, 'load', spec=True):
        mock_settings = Settings()

    mock_settings.settings = Settings.validate({
        'name': 'mocked',
        'variant': 'SIMPLE7',
        'n': 64,
        'epochs': 3,
        'batch_size': 16,
        'output_dir': str(tmp_path),
        'dropout': {
            'outside': {'technique': 'wfad', 'p_max': 0.05, 'q': 0.8, 'activation_epoch': 1, 'schedule': 'linear'},
        },
    })
    return mock_settings
