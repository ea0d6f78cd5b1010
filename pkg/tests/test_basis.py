import numpy as np
import pytest

from specdrop.basis import (BasisSet, GridSpec, baseline_library, load_basis_set, save_basis_set,
                            singlet)
from specdrop.commons import ConfigError
from specdrop.variants import get_variant


class TestGridSpec:
    def test_axes(self):
        grid = GridSpec()
        assert grid.ppm_axis[0] == 4.2 and grid.ppm_axis[-1] == 0.2
        assert grid.ppm_axis.shape == (512,)
        assert np.isclose(grid.ppm_to_hz(grid.reference_ppm), 0.0)
        assert grid.time[1] == grid.dwell

    @pytest.mark.parametrize('grid', [
        GridSpec(n_points=512),
        GridSpec(crop=(-5.0, 4.2)),
        GridSpec(crop=(4.2, 0.2)),
        GridSpec(dwell=0.0),
    ])
    def test_invalid_grid(self, grid):
        with pytest.raises(ConfigError):
            grid.check()


class TestBasisSet:
    @pytest.mark.parametrize('name', ['SIMPLE7', 'STANDARD14', 'COMPLEX26'])
    def test_build(self, basis_sets, name):
        basis = basis_sets[name]
        assert basis.names == get_variant(name).metabolite_names
        assert basis.fids.shape == (len(basis), 2048)
        assert np.all(np.linalg.norm(basis.fids, axis=1) > 0)

    def test_baseline_library(self):
        library = baseline_library(GridSpec())
        assert library.shape == (16, 512)
        assert np.allclose(np.max(np.abs(library), axis=1), 1.0)
        assert np.unique(library, axis=0).shape[0] == 16

    def test_carrier_singlet_is_constant(self):
        grid = GridSpec()
        assert np.allclose(singlet(grid, grid.reference_ppm), 1.0)

    @pytest.mark.parametrize('change', ['duplicate_name', 'zero_fid', 'short_library', 'duplicate_library',
                                        'wrong_length'])
    def test_invariants(self, basis_sets, change):
        basis = basis_sets['SIMPLE7']
        names, fids, library = list(basis.names), basis.fids.copy(), basis.baseline_library.copy()
        if change == 'duplicate_name':
            names[1] = names[0]
        elif change == 'zero_fid':
            fids[2] = 0.0
        elif change == 'short_library':
            library = library[:4]
        elif change == 'duplicate_library':
            library[3] = library[2]
        else:
            fids = fids[:, :1024]
        with pytest.raises(ConfigError):
            BasisSet(names, fids, library, basis.grid)

    def test_subset_keeps_order(self, basis_sets):
        subset = basis_sets['COMPLEX26'].subset(['NAA', 'PCh'])
        assert subset.names == ('NAA', 'PCh')
        assert np.array_equal(subset.fids[0], basis_sets['COMPLEX26'].fids[2])
        with pytest.raises(ConfigError):
            subset.subset(['Lac'])


class TestLoadBasisSet:
    def test_round_trip_with_subset(self, basis_sets, tmp_path):
        path = save_basis_set(basis_sets['COMPLEX26'], tmp_path / 'basis.npz')
        loaded = load_basis_set(path, 'SIMPLE7')
        assert loaded.names == get_variant('SIMPLE7').metabolite_names
        assert np.allclose(loaded.fids, basis_sets['SIMPLE7'].fids)
        assert loaded.grid == basis_sets['SIMPLE7'].grid

    def test_missing_file(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_basis_set(tmp_path / 'nothing.npz', 'SIMPLE7')

    def test_missing_arrays(self, tmp_path):
        path = tmp_path / 'basis.npz'
        np.savez(str(path), fids=np.ones((5, 2048), dtype=np.complex128))
        with pytest.raises(ConfigError):
            load_basis_set(path, 'SIMPLE7')

    def test_missing_metabolite(self, basis_sets, tmp_path):
        path = save_basis_set(basis_sets['SIMPLE7'], tmp_path / 'basis.npz')
        with pytest.raises(ConfigError):
            load_basis_set(path, 'STANDARD14')
