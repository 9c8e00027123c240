import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import ndimage

from pottsfit.lattice import (
    LatticeError,
    LatticeState,
    Neighborhood,
    boundary_sites,
    cell_volumes,
    component_counts,
    dihedral,
    fragment_count,
    one_hot_encode,
)

from conftest import brute_boundary, random_state


def _state(grid, types=None):
    grid = np.asarray(grid)
    if types is None:
        types = [0] + [1] * int(grid.max())
    return LatticeState(grid, types)


@st.composite
def states(draw, max_side=9, max_cells=6):
    h = draw(st.integers(1, max_side))
    w = draw(st.integers(1, max_side))
    n = draw(st.integers(0, max_cells))
    flat = draw(st.lists(st.integers(0, n), min_size=h * w, max_size=h * w))
    types = [0] + draw(st.lists(st.integers(1, 2), min_size=n, max_size=n))
    return LatticeState(np.array(flat).reshape(h, w), types)


class TestNeighborhood:
    @pytest.mark.parametrize("nb", list(Neighborhood))
    def test_offsets_symmetric_and_distinct(self, nb):
        offs = {tuple(o) for o in nb.offsets}
        assert len(offs) == len(nb.offsets)
        assert (0, 0) not in offs
        assert {(-a, -b) for a, b in offs} == offs

    def test_parse_aliases(self):
        assert Neighborhood.parse("moore8") is Neighborhood.MOORE
        assert Neighborhood.parse("VonNeumann4") is Neighborhood.VON_NEUMANN
        with pytest.raises(ValueError):
            Neighborhood.parse("hex")


class TestLatticeState:
    def test_rejects_unregistered_ids(self):
        with pytest.raises(LatticeError):
            LatticeState(np.array([[0, 3]]), [0, 1])

    def test_medium_must_be_type_zero(self):
        with pytest.raises(LatticeError):
            LatticeState(np.array([[0]]), [1])

    def test_relabel_moves_types(self, rng):
        s = random_state(rng)
        perm = np.concatenate([[0], rng.permutation(np.arange(1, s.cell_types.size))])
        r = s.relabel(perm)
        assert np.array_equal(r.site_types(), s.site_types())


class TestOneHot:
    def test_single_medium_site(self):
        assert np.array_equal(one_hot_encode(_state([[0]])), [[[1]]])

    def test_exclude_medium(self):
        planes = one_hot_encode(_state([[1, 1], [0, 2]]), include_medium=False)
        assert np.array_equal(planes[0], [[1, 1], [0, 0]])
        assert np.array_equal(planes[1], [[0, 0], [0, 1]])

    def test_planes_partition_sites(self, rng):
        s = random_state(rng, 8, 8)
        planes = one_hot_encode(s)
        assert np.array_equal(planes.sum(0), np.ones((8, 8)))
        assert np.array_equal(planes.argmax(0), s.grid)


class TestBoundary:
    def test_uniform_grid_has_none(self):
        assert len(boundary_sites(_state(np.zeros((4, 4), int)), Neighborhood.MOORE)) == 0

    def test_center_cell_moore(self):
        g = np.zeros((3, 3), int)
        g[1, 1] = 1
        assert set(boundary_sites(_state(g), Neighborhood.MOORE).tolist()) == set(range(9))

    def test_half_split_von_neumann(self):
        g = np.array([[1, 1, 2, 2]] * 4)
        got = set(boundary_sites(_state(g, [0, 1, 1]), Neighborhood.VON_NEUMANN).tolist())
        assert got == {r * 4 + c for r in range(4) for c in (1, 2)}

    @settings(max_examples=60, deadline=None)
    @given(states())
    def test_matches_brute_force(self, s):
        for nb in Neighborhood:
            assert set(boundary_sites(s, nb).tolist()) == brute_boundary(s, nb)

    @settings(max_examples=30, deadline=None)
    @given(states(), st.randoms(use_true_random=False))
    def test_relabel_invariant(self, s, rnd):
        ids = list(range(1, s.cell_types.size))
        rnd.shuffle(ids)
        r = s.relabel([0] + ids)
        assert np.array_equal(boundary_sites(r), boundary_sites(s))


class TestVolumes:
    def test_all_medium(self):
        assert cell_volumes(_state(np.zeros((3, 3), int))) == {}

    def test_direct_count(self):
        assert cell_volumes(_state([[1, 1], [1, 2]])) == {1: 3, 2: 1}

    def test_absent_cell_reads_zero(self):
        v = cell_volumes(LatticeState(np.array([[1]]), [0, 1, 2]))
        assert v[2] == 0

    @settings(max_examples=40, deadline=None)
    @given(states())
    def test_sum_to_lattice(self, s):
        medium = int((s.grid == 0).sum())
        assert sum(cell_volumes(s).values()) + medium == s.n_sites


class TestFragments:
    def test_square_cell(self):
        g = np.zeros((5, 5), int)
        g[1:4, 1:4] = 1
        assert fragment_count(_state(g)) == 0

    def test_diagonal_corners(self):
        g = np.array([[1, 0], [0, 1]])
        assert fragment_count(_state(g), Neighborhood.VON_NEUMANN) == 1
        assert fragment_count(_state(g), Neighborhood.MOORE) == 0

    def test_far_corners_split_in_both(self):
        g = np.zeros((4, 4), int)
        g[0, 0] = g[3, 3] = 1
        assert fragment_count(_state(g), Neighborhood.MOORE) == 1

    @settings(max_examples=60, deadline=None)
    @given(states())
    def test_matches_scipy_label(self, s):
        structs = {Neighborhood.VON_NEUMANN: ndimage.generate_binary_structure(2, 1),
                   Neighborhood.MOORE: ndimage.generate_binary_structure(2, 2)}
        for nb, struct in structs.items():
            counts = component_counts(s, nb)
            for c in range(1, s.cell_types.size):
                assert counts[c] == ndimage.label(s.grid == c, structure=struct)[1]

    def test_large_grid_no_recursion_limit(self):
        g = np.ones((400, 400), int)
        assert fragment_count(_state(g)) == 0


class TestDihedral:
    def test_identity(self, rng):
        s = random_state(rng, 6, 6)
        assert dihedral(s, 0) == s

    def test_half_turn_involution(self, rng):
        s = random_state(rng, 6, 6)
        assert dihedral(dihedral(s, 2), 2) == s

    def test_group_elements_distinct(self):
        g = np.arange(9).reshape(3, 3)
        s = LatticeState(g, [0] + [1] * 8)
        grids = {dihedral(s, k).grid.tobytes() for k in range(8)}
        assert len(grids) == 8

    def test_non_square_rejected(self):
        with pytest.raises(LatticeError):
            dihedral(_state(np.zeros((2, 3), int)), 1)
