# Copyright 2024, specdrop contributors
#
# This Source Code Form is subject to the terms of the Mozilla Public
# License, v. 2.0. If a copy of the MPL was not distributed with this
# file, You can obtain one at https://mozilla.org/MPL/2.0/.


"""Shared functions."""
import os
import json
import hashlib
import pathlib
import platform
import shutil
import zc.lockfile


class SpecdropError(Exception):
    """Base exception."""
    pass


class ConfigError(SpecdropError):
    """Invalid run configuration."""
    pass


class SynthesisError(SpecdropError):
    """A spectrum could not be synthesized."""
    pass


class DatasetFormatError(SpecdropError):
    """A dataset file is malformed."""
    pass


class UnsupportedVersionError(DatasetFormatError):
    """A dataset file was written by an unknown format version."""
    pass


class DropoutError(SpecdropError):
    """Invalid dropout state or rates."""
    pass


class MetricError(SpecdropError):
    """A metric is undefined for its input."""
    pass


class DivergenceError(SpecdropError):
    """Training diverged.

        Attributes:
            record (RunRecord): The record up to the last finished epoch.
            checkpoint (Path): The last good checkpoint, if any was written.
    """
    def __init__(self, message, record=None, checkpoint=None):
        super().__init__(message)
        self.record = record
        self.checkpoint = checkpoint


def check_permissions(locations, logger=None, mode=os.F_OK | os.R_OK | os.W_OK):
    """Check all permissions at the given locations."""
    for location in locations:
        allowed = os.access(location, mode)
        if logger is not None:
            logger.debug('Check permissions (%s) for "%s"\t\t[%s]',
                         mode,
                         location,
                         {True: 'Ok', False: 'Not okay'}[allowed]
                         )
        if not allowed:
            return False
    return True


def check_disk_usage(locations, logger=None, minimum=10**8):
    """Check, if there is enough free disk space at each location.
    (default=100mb/10**8 bytes.)"""
    for location in locations:
        if shutil.disk_usage(location).free <= minimum:
            if logger is not None:
                logger.warning('Insufficient free disk space at %s', location)
            return False
    return True


def config_hash(config):
    """Stable sha256 of a json-serializable configuration."""
    canonical = json.dumps(config, sort_keys=True, separators=(',', ':'), default=str)
    return hashlib.sha256(canonical.encode('utf-8')).hexdigest()


def environment_fingerprint():
    """Versions that influence numerical reproducibility."""
    # Imported here, so that commons stays importable without the numeric stack.
    import numpy
    import torch
    return {
        'python': platform.python_version(),
        'platform': platform.platform(),
        'numpy': numpy.__version__,
        'torch': torch.__version__,
    }


class ZCLock:
    """This class implements a simple file based lock."""
    def __init__(self, directory, filename='.specdrop.lock'):
        self.path = pathlib.Path(directory) / filename
        self._lock = None

    def __enter__(self):
        self.acquire()
        return self

    def __exit__(self, *args):
        self.release()

    def __str__(self):
        return str(self.path)

    def acquire(self):
        """Acquire a lock."""
        self._lock = zc.lockfile.LockFile(str(self.path))

    def release(self):
        """Release the lock."""
        if self._lock is None:
            raise ValueError('There is no lock to be released for: {}'.format(self.path))
        self._lock.close()
        self._lock = None
        if self.path.exists():
            self.path.unlink()
