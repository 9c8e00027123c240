import numpy as np
import pytest

from pottsfit import datagen as dg
from pottsfit.analytic import ConfigurationError, energy_features
from pottsfit.io import read_snapshot_bytes, snapshot_bytes
from pottsfit.lattice import LatticeError, cell_volumes, component_counts, dihedral

from conftest import brute_edt, voronoi_state

TABLE_A = [[0.0], [0.5, 0.333333], [0.5, 0.2, 0.266667]]
TABLE_D = [[0.0], [16.0, 6.0], [16.0, 16.0, 6.0]]


def _small_spec(**kw):
    base = dict(width=40, height=40, counts=[4, 4], contact=TABLE_A, lambda_v=0.1, target_volume=60.0,
                radius=10, sweeps=200)
    base.update(kw)
    return dg.ScenarioSpec(**base)


class TestScenarioSpec:
    def test_truth_vector_layout(self):
        spec = dg.ScenarioSpec(contact=[[0.0], [2.5, 1.0], [1.0, 4.5, 1.0]], lambda_v=0.5)
        # J01 J02 J11 J12 J22 lambda
        assert spec.truth_vector().tolist() == [2.5, 1.0, 1.0, 4.5, 1.0, 0.5]

    @pytest.mark.parametrize("bad", [dict(counts=[0, 3]), dict(radius=60), dict(contact=[[0.0], [1.0, 1.0]])])
    def test_invalid(self, bad):
        with pytest.raises(ConfigurationError):
            dg.ScenarioSpec(**bad)

    def test_coupling_goes_to_type(self):
        spec = dg.ScenarioSpec(width=10, height=10, radius=3, potential={"coupling": {2: 10.0}})
        p = spec.analytic_params(np.ones((10, 10)))
        assert p.potential.coupling.tolist() == [0.0, 0.0, 10.0]


class TestInitScatter:
    def test_paper_scale(self):
        spec = dg.ScenarioSpec()
        s = dg.init_scatter(spec, np.random.default_rng(0))
        vols = cell_volumes(s)
        assert len(vols) == 50 and set(vols.values()) == {1}
        assert np.bincount(s.cell_types)[1:].tolist() == [25, 25]
        r, c = np.nonzero(s.grid)
        assert np.all((r - 49.5) ** 2 + (c - 49.5) ** 2 <= 25 ** 2)

    def test_single_cell(self):
        s = dg.init_scatter(dg.ScenarioSpec(width=9, height=9, counts=[1], contact=[[0.0], [1.0, 1.0]], radius=2),
                            np.random.default_rng(1))
        assert (s.grid > 0).sum() == 1

    def test_circle_too_small(self):
        spec = dg.ScenarioSpec(width=10, height=10, counts=[5, 5], radius=1)
        with pytest.raises(ConfigurationError):
            dg.init_scatter(spec, np.random.default_rng(0))


class TestCellsort:
    def test_reproducible_and_reloadable(self):
        spec = _small_spec(sweeps=20)
        a = dg.generate_cellsort(spec, 2, seed=3)
        b = dg.generate_cellsort(spec, 2, seed=3)
        assert all(x == y for x, y in zip(a, b))
        assert not np.array_equal(a[0].grid, a[1].grid)
        assert all(read_snapshot_bytes(snapshot_bytes(s)) == s for s in a)

    def test_volume_near_target(self):
        states = dg.generate_cellsort(_small_spec(), 3, seed=0)
        assert abs(dg.mean_cell_volume(states) - 60.0) <= 0.15 * 60.0


class TestIDX:
    def test_round_trip(self, tmp_path, rng):
        imgs = rng.integers(0, 256, size=(2, 28, 28)).astype(np.uint8)
        dg.write_idx(tmp_path / "x.idx", imgs)
        assert np.array_equal(dg.load_idx(tmp_path / "x.idx"), imgs)

    def test_bad_magic(self, tmp_path):
        (tmp_path / "x.idx").write_bytes(b"\x00\x00\x08\x01" + b"\x00" * 12)
        with pytest.raises(dg.IDXFormatError):
            dg.load_idx(tmp_path / "x.idx")

    def test_truncated(self, tmp_path, rng):
        dg.write_idx(tmp_path / "x.idx", np.zeros((2, 28, 28), np.uint8))
        data = (tmp_path / "x.idx").read_bytes()
        (tmp_path / "x.idx").write_bytes(data[:-5])
        with pytest.raises(dg.IDXFormatError):
            dg.load_idx(tmp_path / "x.idx")
        (tmp_path / "y.idx").write_bytes(data[:10])
        with pytest.raises(dg.IDXFormatError):
            dg.load_idx(tmp_path / "y.idx")

    def test_bundled_digits(self):
        imgs = dg.bundled_digits()
        assert imgs.shape == (10, 28, 28) and imgs.dtype == np.uint8
        assert np.array_equal(imgs, dg.synthetic_digit_images()[0])


class TestDigitPotential:
    def test_single_pixel_edt(self):
        mask = np.zeros((5, 5), bool)
        mask[0, 0] = True
        i, j = np.indices((5, 5))
        assert np.array_equal(dg.euclidean_distance_transform(mask), np.sqrt(i ** 2 + j ** 2))

    def test_edt_matches_brute_force(self, rng):
        for _ in range(20):
            mask = rng.random((int(rng.integers(3, 15)), int(rng.integers(3, 15)))) < 0.15
            if not mask.any():
                mask[0, 0] = True
            assert np.array_equal(dg.euclidean_distance_transform(mask), brute_edt(mask))

    def test_full_foreground_is_zero(self):
        pot = dg.build_digit_potential(np.full((28, 28), 255), (108, 108))
        assert pot.phi.shape == (108, 108) and np.all(pot.phi == 0)

    def test_low_on_stroke_high_off_it(self):
        img = dg.synthetic_digit_images()[0][3]
        phi = dg.build_digit_potential(img, (112, 112)).phi
        stroke = np.kron(img > 127.5, np.ones((4, 4), bool))
        assert phi.min() >= 0.0
        assert phi[stroke].mean() < 0.5 < 2.0 < phi[~stroke].mean()

    def test_identity_resize_is_edt(self):
        img = np.zeros((28, 28))
        img[10:14, 5:20] = 200
        phi = dg.build_digit_potential(img, (28, 28)).phi
        assert np.allclose(phi, brute_edt(img > 127.5), atol=1e-9)

    def test_blank_image(self):
        with pytest.raises(ValueError):
            dg.build_digit_potential(np.full((28, 28), 100), (56, 56))


class TestBipolar:
    def test_poles_on_opposite_sides(self):
        spec = dg.ScenarioSpec(width=48, height=48, counts=[6, 6], contact=TABLE_D, lambda_v=1.0, target_volume=80.0,
                               temperature=2.0, radius=12, sweeps=200, motion={"strength": 500.0})
        states, poles = dg.generate_bipolar(spec, 3, seed=4, with_poles=True)
        for s, (axis, dirs) in zip(states, poles):
            rr, cc = np.indices(s.grid.shape)
            proj = rr * axis[0] + cc * axis[1]
            types = s.cell_types[s.grid]
            core = proj[types == 1].mean()
            sign = dirs[:, 0] * axis[0] + dirs[:, 1] * axis[1]
            plus = np.isin(s.grid, np.flatnonzero(sign > 0))
            minus = np.isin(s.grid, np.flatnonzero(sign < 0))
            assert proj[plus].mean() > core > proj[minus].mean()

    def test_odd_polar_count(self):
        spec = dg.ScenarioSpec(width=30, height=30, counts=[2, 3], contact=TABLE_D, radius=5)
        with pytest.raises(ConfigurationError):
            dg.generate_bipolar(spec, 1)


class TestAugment:
    def test_invariants_under_every_element(self, rng):
        s = voronoi_state(rng, 14, 14, n_cells=6)
        feats = energy_features(s, 3, 10.0, None)
        frags = component_counts(s)
        for k in range(8):
            t = dihedral(s, k)
            assert cell_volumes(t) == cell_volumes(s)
            assert np.array_equal(energy_features(t, 3, 10.0, None)["pairs"], feats["pairs"])
            assert np.array_equal(component_counts(t), frags)

    def test_uniform_over_group(self):
        s = voronoi_state(np.random.default_rng(0), 8, 8, n_cells=3)
        rng = np.random.default_rng(1)
        seen = {dg.augment_rotate(s, rng).grid.tobytes() for _ in range(200)}
        assert len(seen) == len({dihedral(s, k).grid.tobytes() for k in range(8)})

    def test_non_square(self, rng):
        s = voronoi_state(rng, 8, 10)
        with pytest.raises(LatticeError):
            dg.augment_rotate(s, rng)
