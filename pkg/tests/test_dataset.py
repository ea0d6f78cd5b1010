import json
import struct

import checksumdir
import numpy as np
import pytest

from specdrop.commons import ConfigError, DatasetFormatError, UnsupportedVersionError
from specdrop.dataset import MAGIC, check_version, generate_dataset, read_dataset, write_dataset


def rewrite_header(path, **changes):
    """Replace header fields of a written dataset file in place."""
    data = path.read_bytes()
    prefix = len(MAGIC) + 4
    (length,) = struct.unpack('<I', data[len(MAGIC):prefix])
    header = json.loads(data[prefix:prefix + length].decode('utf-8'))
    header.update(changes)
    encoded = json.dumps(header).encode('utf-8')
    path.write_bytes(MAGIC + struct.pack('<I', len(encoded)) + encoded + data[prefix + length:])


class TestGenerateDataset:
    def test_shapes_and_split(self, small_dataset):
        assert small_dataset.spectra.shape == (64, 512)
        assert small_dataset.targets.shape == (64, 7)
        assert small_dataset.spectra.dtype == np.float32
        assert small_dataset.n_train == 51
        assert list(small_dataset.split_tags).count('val') == 13
        assert small_dataset.part('val')[0].shape == (13, 512)

    def test_targets_within_bounds(self, small_dataset):
        task = small_dataset.variant
        assert np.all(small_dataset.targets >= task.low.astype(np.float32))
        assert np.all(small_dataset.targets <= task.high.astype(np.float32))

    def test_deterministic(self, tmp_path):
        for name in ('first', 'second'):
            write_dataset(generate_dataset('STANDARD14', 20, seed=3), tmp_path / name / 'data.bin')
        assert checksumdir.dirhash(str(tmp_path / 'first'), 'md5') == \
            checksumdir.dirhash(str(tmp_path / 'second'), 'md5')

    def test_seed_changes_data(self):
        first = generate_dataset('SIMPLE7', 8, seed=1)
        second = generate_dataset('SIMPLE7', 8, seed=2)
        assert not np.array_equal(first.targets, second.targets)

    def test_rows_do_not_depend_on_dataset_size(self):
        short = generate_dataset('COMPLEX26', 10, seed=5)
        long = generate_dataset('COMPLEX26', 25, seed=5)
        assert np.array_equal(short.targets, long.targets[:10])
        assert np.allclose(short.spectra, long.spectra[:10], rtol=1e-5, atol=1e-6)

    def test_bounds_override(self):
        ds = generate_dataset('SIMPLE7', 16, seed=0, bounds={'snr': (10.0, 12.0)})
        column = ds.variant.index_of('SNR')
        assert np.all(ds.targets[:, column] >= 10.0) and np.all(ds.targets[:, column] <= 12.0)

    @pytest.mark.parametrize(['n', 'split'], [(0, 0.8), (10, 0.0), (10, 1.0)])
    def test_invalid_arguments(self, n, split):
        with pytest.raises(ConfigError):
            generate_dataset('SIMPLE7', n, seed=0, split=split)

    def test_unknown_split(self, small_dataset):
        with pytest.raises(ValueError):
            small_dataset.part('test')


class TestDatasetFile:
    def test_round_trip(self, tmp_path):
        ds = generate_dataset('STANDARD14', 12, seed=9, split=0.5, bounds={'snr': (10.0, 12.0)})
        loaded = read_dataset(write_dataset(ds, tmp_path / 'sub' / 'data.bin'))
        assert np.array_equal(loaded.spectra, ds.spectra)
        assert np.array_equal(loaded.targets, ds.targets)
        assert (loaded.n_train, loaded.seed, loaded.variant.name) == (6, 9, 'STANDARD14')
        assert loaded.variant.low[loaded.variant.index_of('SNR')] == 10.0
        assert loaded.ppm_range == pytest.approx((4.2, 0.2))
        assert np.allclose(loaded.ppm_axis, ds.ppm_axis)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / 'data.bin'
        path.write_bytes(b'NOTADATASET' + bytes(64))
        with pytest.raises(DatasetFormatError):
            read_dataset(path)

    def test_truncated(self, small_dataset, tmp_path):
        path = write_dataset(small_dataset, tmp_path / 'data.bin')
        path.write_bytes(path.read_bytes()[:-4])
        with pytest.raises(DatasetFormatError):
            read_dataset(path)

    def test_malformed_header(self, small_dataset, tmp_path):
        path = write_dataset(small_dataset, tmp_path / 'data.bin')
        data = path.read_bytes()
        path.write_bytes(data[:len(MAGIC) + 4] + b'[' + data[len(MAGIC) + 5:])
        with pytest.raises(DatasetFormatError):
            read_dataset(path)

    @pytest.mark.parametrize('version', ['2.0', 'not-a-version'])
    def test_unsupported_version(self, small_dataset, tmp_path, version):
        path = write_dataset(small_dataset, tmp_path / 'data.bin')
        rewrite_header(path, version=version)
        with pytest.raises(UnsupportedVersionError):
            read_dataset(path)

    def test_minor_version_is_accepted(self, small_dataset, tmp_path):
        path = write_dataset(small_dataset, tmp_path / 'data.bin')
        rewrite_header(path, version='1.7')
        assert len(read_dataset(path)) == 64
        assert str(check_version('1.0')) == '1.0'

    def test_schema_mismatch(self, small_dataset, tmp_path):
        path = write_dataset(small_dataset, tmp_path / 'data.bin')
        rewrite_header(path, variant='STANDARD14')
        with pytest.raises(DatasetFormatError):
            read_dataset(path)
