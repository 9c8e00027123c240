import csv
import math

import numpy as np
import pytest
from scipy import ndimage

from pottsfit import metrics as mt
from pottsfit.lattice import LatticeState, Neighborhood, dihedral

from conftest import voronoi_state


def _kl_double_loop(p):
    n, k = p.shape
    marg = [sum(p[i, j] for i in range(n)) / n for j in range(k)]
    total = 0.0
    for i in range(n):
        for j in range(k):
            if p[i, j] > 0:
                total += p[i, j] * math.log(p[i, j] / marg[j])
    return math.exp(total / n)


def _split_cells(n_frag):
    """6x20 lattice with four cells; the first ``n_frag`` are split in two pieces."""
    g = np.zeros((6, 20), dtype=np.int64)
    for c in range(4):
        g[1:3, 5 * c:5 * c + 2] = c + 1
        if c < n_frag:
            g[4:6, 5 * c + 3] = c + 1
        else:
            g[1:3, 5 * c + 2] = c + 1
    return LatticeState(g, [0, 1, 1, 2, 2])


class TestBiological:
    def test_training_states_pass(self, rng):
        states = [voronoi_state(rng, 16, 16, n_cells=5) for _ in range(4)]
        bounds = mt.VolumeBounds.from_states(states)
        assert mt.biological_indicators(states, bounds)[0] == 1.0

    def test_vanished_cell_fails_volume(self, rng):
        s = voronoi_state(rng, 16, 16, n_cells=5)
        bounds = mt.VolumeBounds.from_states([s])
        gone = LatticeState(s.grid, np.concatenate([s.cell_types, [1]]))  # registered, zero volume
        assert mt.biological_indicators([s, gone], bounds)[0] == 0.5

    def test_fragment_threshold(self):
        states = [_split_cells(4), _split_cells(4), _split_cells(3), _split_cells(0)]
        for s in states:
            n = sum(ndimage.label(s.grid == c, structure=np.ones((3, 3)))[1] > 1 for c in range(1, 5))
            assert n in (0, 3, 4)
        bounds = mt.VolumeBounds(1, 10, 5)
        assert mt.biological_indicators(states, bounds)[1] == 0.5

    def test_interval(self):
        assert mt.VolumeBounds(40, 80, 60).interval() == (34.0, 86.0)

    def test_invariant_under_relabel_and_symmetry(self, rng):
        states = [voronoi_state(rng, 16, 16, n_cells=5) for _ in range(6)]
        bounds = mt.VolumeBounds.from_states(states[:3])
        base = mt.biological_indicators(states, bounds)
        moved = [dihedral(s.relabel(np.r_[0, rng.permutation(np.arange(1, s.cell_types.size))]), k)
                 for k, s in enumerate(states)]
        assert mt.biological_indicators(moved, bounds) == base

    def test_empty(self):
        with pytest.raises(ValueError):
            mt.biological_indicators([], mt.VolumeBounds(1, 2, 1.5))


class TestClassifierScore:
    def test_uniform(self):
        assert mt.classifier_score(np.full((5, 4), 0.25)) == pytest.approx(1.0)

    def test_balanced_one_hot(self):
        assert mt.classifier_score(np.eye(10)) == pytest.approx(10.0)

    def test_double_loop(self, rng):
        for _ in range(5):
            p = rng.dirichlet(np.full(6, 0.5), size=12)
            p[0] = [1, 0, 0, 0, 0, 0]
            assert mt.classifier_score(p) == pytest.approx(_kl_double_loop(p), rel=1e-12)

    def test_permutation_invariance_and_bounds(self, rng):
        p = rng.dirichlet(np.ones(7), size=20)
        cs = mt.classifier_score(p)
        assert 1.0 <= cs <= 7.0
        assert mt.classifier_score(p[rng.permutation(20)][:, rng.permutation(7)]) == pytest.approx(cs, rel=1e-12)

    def test_invalid_rows(self):
        with pytest.raises(ValueError):
            mt.classifier_score([[0.5, 0.6]])
        with pytest.raises(ValueError):
            mt.classifier_score(np.zeros((0, 3)))

    def test_reference_classifier_recovers_masks(self):
        from pottsfit.datagen import synthetic_digit_images
        imgs, labels = synthetic_digit_images()
        clf = mt.NearestCentroidClassifier(beta=5.0).fit_images(imgs)
        states = [LatticeState(np.where(img > 127, 1, 0), [0, 2]) for img in imgs]
        proba = clf.predict_proba(states)
        assert np.allclose(proba.sum(1), 1.0)
        assert np.array_equal(proba.argmax(1), labels)


def _oracle_fractions(state, polar_type, types):
    st = state.site_types()
    rr, cc = np.nonzero(st == polar_type)
    xy = np.stack([cc, rr], 1).astype(float)
    xy -= xy.mean(0)
    best, best_v = 0.0, -1.0
    for ang in np.deg2rad(np.arange(0, 180, 0.1)):
        v = np.mean((xy @ np.array([np.cos(ang), np.sin(ang)])) ** 2)
        if v > best_v:
            best, best_v = ang, v
    a = np.array([np.cos(best), np.sin(best)])
    o = np.array([-a[1], a[0]])
    out = {}
    for t in types:
        rr, cc = np.nonzero(st == t)
        p = np.stack([cc, rr], 1).astype(float)
        p -= p.mean(0)
        va, vo = np.mean((p @ a) ** 2), np.mean((p @ o) ** 2)
        out[t] = va / (va + vo)
    return out


class TestAxial:
    def test_disc_is_isotropic(self):
        rr, cc = np.indices((61, 61))
        g = (((rr - 30) ** 2 + (cc - 30) ** 2) <= 20 ** 2).astype(np.int64)
        st = LatticeState(g, [0, 2])
        assert (g > 0).sum() >= 1000
        assert mt.axial_alignment(st, 2)[2].frac_var_axis == pytest.approx(0.5, abs=0.05)

    def test_lines(self):
        g = np.zeros((11, 11), dtype=np.int64)
        g[5, 1:10] = 1     # polar type 2 along a row (x axis)
        g[1:5, 8] = 2
        g[6:10, 8] = 2     # type 1 along a column
        s = LatticeState(g, [0, 2, 1])
        a = mt.axial_alignment(s, 2)
        assert a[2].frac_var_axis == pytest.approx(1.0)
        assert a[1].frac_var_axis == pytest.approx(0.0, abs=1e-12)

    def test_single_pixel_degenerate(self):
        g = np.zeros((5, 5), dtype=np.int64)
        g[2, 2] = 1
        with pytest.raises(mt.DegenerateError):
            mt.axial_alignment(LatticeState(g, [0, 2]), 2)

    def test_rotation_grid_search_oracle(self, rng):
        for _ in range(5):
            s = voronoi_state(rng, 20, 20, n_cells=6)
            if not {1, 2} <= set(s.cell_types[1:].tolist()):
                continue
            got = mt.axial_alignment(s, 2, (1, 2))
            want = _oracle_fractions(s, 2, (1, 2))
            for t in (1, 2):
                assert got[t].frac_var_axis == pytest.approx(want[t], abs=1e-3)

    def test_trace_identity(self, rng):
        s = voronoi_state(rng, 20, 20, n_cells=6)
        st = s.site_types()
        for t, a in mt.axial_alignment(s, int(st[st > 0][0])).items():
            rr, cc = np.nonzero(st == t)
            total = np.var(cc) + np.var(rr)
            assert a.var_axis + a.var_orth == pytest.approx(total, rel=1e-12)
            assert 0.0 <= a.frac_var_axis <= 1.0

    def test_axis_orientation(self, rng):
        pts = rng.normal(size=(50, 2)) * [3, 1]
        ax = mt.principal_axis(pts)
        assert ax[0] > 0
        assert np.allclose(np.abs(mt.principal_axis(-pts)), np.abs(ax))

    def test_axial_rmse_formula(self, rng):
        sim = [voronoi_state(rng, 20, 20, n_cells=8) for _ in range(3)]
        ref = [voronoi_state(rng, 20, 20, n_cells=8) for _ in range(3)]

        def stats(states):
            rows = []
            for s in states:
                a = mt.axial_alignment(s, 2, (1, 2))
                rows.append([a[1].var_axis, a[1].var_orth, a[2].var_axis, a[2].var_orth])
            return np.mean(rows, 0)

        want = np.sqrt(np.mean((stats(sim) - stats(ref)) ** 2))
        assert mt.axial_alignment_rmse(sim, ref) == pytest.approx(want)
        assert mt.axial_alignment_rmse(ref, ref) == 0.0


class TestParamRMSE:
    def test_equal(self, rng):
        t = rng.normal(size=6)
        assert mt.param_rmse(t, t, "T1") == 0.0
        assert mt.param_rmse(t, t, "TStar") == pytest.approx(0.0, abs=1e-12)

    def test_half(self, rng):
        t = rng.normal(size=6)
        assert mt.param_rmse(t / 2, t, "TStar") == pytest.approx(0.0, abs=1e-12)
        assert mt.param_rmse(t / 2, t, "T1") == pytest.approx(np.linalg.norm(t) * 0.5 / np.sqrt(6))

    def test_formula(self, rng):
        a, b = rng.normal(size=6), rng.normal(size=6)
        assert mt.param_rmse(a, b) == pytest.approx(np.sqrt(((a - b) ** 2).mean()))
        ts = a @ b / (a @ a)
        assert mt.param_rmse(a, b, "TStar") == pytest.approx(np.sqrt(((ts * a - b) ** 2).mean()))

    def test_errors(self):
        with pytest.raises(ValueError):
            mt.param_rmse([1, 2], [1, 2, 3])
        with pytest.raises(ValueError):
            mt.param_rmse([1, 2], [1, 2], "T2")


class TestReport:
    def test_csv_rows_and_summary(self, rng, tmp_path):
        states = [voronoi_state(rng, 16, 16, n_cells=5) for _ in range(3)]
        rows = mt.state_report(states, mt.VolumeBounds.from_states(states), Neighborhood.MOORE, polar_type=2)
        mt.write_csv(tmp_path / "r.csv", rows, mt.STATE_COLUMNS, "bio report\nslack 0.1")
        lines = (tmp_path / "r.csv").read_text().splitlines()
        assert lines[:2] == ["# bio report", "# slack 0.1"]
        table = list(csv.DictReader(lines[2:]))
        assert len(table) == 4 and table[-1]["index"] == "summary"
        assert table[-1]["volume_ok"] == "p_volume=1.000000"
