import numpy as np
import pytest
from scipy.spatial.distance import pdist

from smallscat.background import PotentialGrid
from smallscat.continuum import DensityField, ImpedanceField
from smallscat.errors import PlacementError
from smallscat.placement import PlacementSpec, place_particles
from smallscat.shapes import ShapeSummary

SHAPE = ShapeSummary.sphere(0.001)


def box(upper=1.0, spacing=0.25):
    # placement grids only carry geometry, so the wavelength check is relaxed
    return PotentialGrid.box([0, 0, 0], [upper] * 3, spacing, 0.1)


def test_lattice_one_per_voxel():
    g = box(3.0, 1.0)
    cfg, rep = place_particles(PlacementSpec("lattice", DensityField(g, 1.0)), SHAPE, 1.0, 5.0)
    assert cfg.M == 27
    np.testing.assert_allclose(np.sort(cfg.centers[:, 0]), np.repeat([0.5, 1.5, 2.5], 9))
    assert rep.to_json()["realized_total"] == 27


def test_lattice_fractional_counts_floor():
    g = box()
    # 0.25^3 * 200 = 3.125 -> 3 per voxel
    cfg, rep = place_particles(PlacementSpec("lattice", DensityField(g, 200.0)), SHAPE, 1.0, 5.0)
    assert cfg.M == 3 * 64
    assert rep.to_json()["max_voxel_deficit"] == pytest.approx(0.125)


def test_zero_density_gives_empty_configuration():
    g = box()
    for mode in ("lattice", "poisson-disk"):
        cfg, _ = place_particles(PlacementSpec(mode, DensityField(g, 0.0)), SHAPE, 1.0, 5.0)
        assert cfg.M == 0


def test_poisson_disk_is_deterministic_per_seed():
    g = box()
    spec = lambda seed: PlacementSpec("poisson-disk", DensityField(g, 300.0), min_distance=0.05, seed=seed)
    a, _ = place_particles(spec(3), SHAPE, 1.0, 5.0)
    b, _ = place_particles(spec(3), SHAPE, 1.0, 5.0)
    c, _ = place_particles(spec(4), SHAPE, 1.0, 5.0)
    np.testing.assert_array_equal(a.centers, b.centers)
    assert a.M != c.M or not np.array_equal(a.centers, c.centers)


def test_poisson_disk_respects_min_distance_and_voxels():
    g = box()
    N = 300.0
    cfg, rep = place_particles(PlacementSpec("poisson-disk", DensityField(g, N), min_distance=0.05, seed=1),
                               SHAPE, 1.0, 5.0)
    assert pdist(cfg.centers).min() >= 0.05
    assert abs(cfg.M - N) < 4 * np.sqrt(64)
    np.testing.assert_array_equal(np.bincount(g.voxel_index(cfg.centers), minlength=64), rep.realized)


def test_packing_bound_rejected():
    g = box()
    with pytest.raises(PlacementError, match="packing"):
        place_particles(PlacementSpec("poisson-disk", DensityField(g, 1e5), min_distance=0.05), SHAPE, 1.0, 5.0)


def test_lattice_spacing_rejected():
    g = box()
    with pytest.raises(PlacementError, match="sub-lattice"):
        place_particles(PlacementSpec("lattice", DensityField(g, 1000.0), min_distance=0.1), SHAPE, 1.0, 5.0)


def test_impedance_field_lookup():
    g = box(1.0, 0.5)
    hv = np.arange(8, dtype=complex).reshape(g.shape) + 1 - 1j
    cfg, _ = place_particles(PlacementSpec("lattice", DensityField(g, 8.0)), SHAPE, 1.0,
                             ImpedanceField(g, hv))
    np.testing.assert_array_equal(cfg.h, hv.ravel()[g.voxel_index(cfg.centers)])


def test_unknown_mode_rejected():
    with pytest.raises(PlacementError):
        PlacementSpec("random")
    with pytest.raises(PlacementError):
        PlacementSpec("explicit")
