import numpy as np
import pytest

from amyparc.voxelgrid import (
    DistanceField,
    Mask,
    VoxelGrid,
    connected_components,
    distance_field,
)


def brute_force_distances(grid, query_indices, target_indices):
    """Independent O(|query|*|target|) nearest-target oracle."""
    q = grid.coords_of(query_indices).astype(np.float64)
    t = grid.coords_of(target_indices).astype(np.float64)
    d = np.sqrt(((q[:, None, :] - t[None, :, :]) ** 2).sum(axis=2))
    return d.min(axis=1)


class TestIndexing:
    def test_origin(self):
        g = VoxelGrid((4, 4, 4))
        assert g.linear_index((0, 0, 0)) == 0

    def test_formula(self):
        g = VoxelGrid((4, 4, 4))
        assert g.linear_index((1, 2, 3)) == 57

    def test_last_voxel(self):
        g = VoxelGrid((4, 4, 4))
        assert g.linear_index((3, 3, 3)) == 63

    def test_roundtrip_bijection(self):
        g = VoxelGrid((3, 5, 4))
        seen = set()
        for i in range(g.size):
            c = g.coord_of(i)
            assert g.linear_index(c) == i
            seen.add(c)
        assert len(seen) == g.size

    def test_vectorized_matches_scalar(self):
        g = VoxelGrid((7, 3, 5))
        idx = np.arange(g.size)
        coords = g.coords_of(idx)
        assert np.array_equal(g.linear_of(coords), idx)

    def test_out_of_range(self):
        g = VoxelGrid((4, 4, 4))
        with pytest.raises(IndexError):
            g.linear_index((4, 0, 0))
        with pytest.raises(IndexError):
            g.linear_index((0, -1, 0))
        with pytest.raises(IndexError):
            g.coord_of(64)

    def test_bad_grid(self):
        with pytest.raises(ValueError):
            VoxelGrid((0, 4, 4))
        with pytest.raises(ValueError):
            VoxelGrid((4, 4, 4), spacing=(1.0, 0.0, 1.0))


class TestNeighbors:
    def test_interior_26(self):
        g = VoxelGrid((5, 5, 5))
        assert len(g.neighbors((2, 2, 2), 26)) == 26

    def test_corner_26(self):
        g = VoxelGrid((5, 5, 5))
        assert len(g.neighbors((0, 0, 0), 26)) == 7

    def test_interior_6(self):
        g = VoxelGrid((5, 5, 5))
        n = g.neighbors((2, 2, 2), 6)
        assert len(n) == 6
        assert all(sum(abs(a - b) for a, b in zip(c, (2, 2, 2))) == 1 for c in n)

    def test_symmetry(self):
        g = VoxelGrid((4, 3, 5))
        rng = np.random.default_rng(11)
        for _ in range(50):
            a = tuple(rng.integers(0, d) for d in g.dims)
            for conn in (6, 26):
                for b in g.neighbors(a, conn):
                    assert a in g.neighbors(b, conn)

    def test_bad_connectivity(self):
        g = VoxelGrid((4, 4, 4))
        with pytest.raises(ValueError):
            g.neighbors((0, 0, 0), 18)


class TestMask:
    def test_sorted_and_immutable(self):
        g = VoxelGrid((4, 4, 4))
        m = Mask(g, np.array([5, 2, 9]))
        assert np.array_equal(m.voxels, [2, 5, 9])
        with pytest.raises(ValueError):
            m.voxels[0] = 1

    def test_rejects_duplicates_and_empty(self):
        g = VoxelGrid((4, 4, 4))
        with pytest.raises(ValueError):
            Mask(g, np.array([1, 1, 2]))
        with pytest.raises(ValueError):
            Mask(g, np.array([], dtype=np.int64))
        with pytest.raises(IndexError):
            Mask(g, np.array([64]))

    def test_rows_of(self):
        g = VoxelGrid((4, 4, 4))
        m = Mask(g, np.array([2, 5, 9]))
        assert np.array_equal(m.rows_of([9, 2]), [2, 0])
        with pytest.raises(KeyError):
            m.rows_of([3])


class TestDistanceField:
    def test_unit_cube_diagonal(self):
        g = VoxelGrid((4, 4, 4))
        m = Mask(g, np.arange(g.size))
        f = distance_field(m, np.array([g.linear_index((0, 0, 0))]))
        q = m.rows_of([g.linear_index((1, 1, 1))])[0]
        assert f.values[q] == pytest.approx(np.sqrt(3.0), abs=1e-12)

    def test_zero_on_sources(self):
        g = VoxelGrid((4, 4, 4))
        m = Mask(g, np.arange(g.size))
        tgt = np.array([0, 21, 63])
        f = distance_field(m, tgt)
        assert np.all(f.values[m.rows_of(tgt)] == 0.0)

    def test_matches_brute_force(self):
        # [DERIVED] brute-force nearest-target oracle on random instances
        g = VoxelGrid((6, 6, 6))
        rng = np.random.default_rng(3)
        for _ in range(20):
            vox = rng.choice(g.size, size=40, replace=False)
            m = Mask(g, vox)
            tgt = rng.choice(vox, size=5, replace=False)
            f = distance_field(m, tgt)
            expect = brute_force_distances(g, m.voxels, tgt)
            np.testing.assert_allclose(f.values, expect, atol=1e-9, rtol=0)

    def test_out_of_mask_targets_are_sources(self):
        g = VoxelGrid((6, 6, 6))
        m = Mask(g, np.array([g.linear_index((3, 3, 3))]))
        outside = np.array([g.linear_index((3, 3, 4))])
        f = distance_field(m, outside)
        assert f.values[0] == pytest.approx(1.0)

    def test_empty_target_rejected(self):
        g = VoxelGrid((4, 4, 4))
        m = Mask(g, np.arange(8))
        with pytest.raises(ValueError):
            distance_field(m, np.array([], dtype=np.int64))

    def test_metric_consistency_invariant(self):
        g = VoxelGrid((5, 5, 5))
        m = Mask(g, np.arange(g.size))
        rng = np.random.default_rng(17)
        tgt = rng.choice(g.size, size=4, replace=False)
        f = distance_field(m, tgt)
        vals = {tuple(c): v for c, v in zip(map(tuple, m.coords), f.values)}
        for c in map(tuple, m.coords):
            for nb in g.neighbors(c, 26):
                step = np.sqrt(sum((a - b) ** 2 for a, b in zip(c, nb)))
                assert vals[c] <= vals[nb] + step + 1e-9


class TestConnectedComponents:
    def _mask_cube(self, n=4):
        g = VoxelGrid((n, n, n))
        return g, Mask(g, np.arange(g.size))

    def test_single_voxel(self):
        g, m = self._mask_cube()
        labels = np.zeros(len(m), dtype=int)
        labels[m.rows_of([g.linear_index((1, 1, 1))])] = 7
        comps = connected_components(m, labels, 7)
        assert len(comps) == 1 and comps[0].size == 1

    def test_face_sharing_pair(self):
        g, m = self._mask_cube()
        pair = [g.linear_index((1, 1, 1)), g.linear_index((2, 1, 1))]
        labels = np.zeros(len(m), dtype=int)
        labels[m.rows_of(pair)] = 1
        for conn in (6, 26):
            assert len(connected_components(m, labels, 1, conn)) == 1

    def test_corner_touching_pair(self):
        g, m = self._mask_cube()
        pair = [g.linear_index((1, 1, 1)), g.linear_index((2, 2, 2))]
        labels = np.zeros(len(m), dtype=int)
        labels[m.rows_of(pair)] = 1
        assert len(connected_components(m, labels, 1, 6)) == 2
        assert len(connected_components(m, labels, 1, 26)) == 1

    def test_absent_label(self):
        _, m = self._mask_cube()
        labels = np.zeros(len(m), dtype=int)
        assert connected_components(m, labels, 3) == []

    def test_partition_properties(self):
        # partition: disjoint, exhaustive, internally connected, mutually separated
        g = VoxelGrid((6, 5, 4))
        rng = np.random.default_rng(5)
        vox = rng.choice(g.size, size=60, replace=False)
        m = Mask(g, vox)
        labels = rng.integers(0, 3, size=len(m))
        for lab in range(3):
            for conn in (6, 26):
                comps = connected_components(m, labels, lab, conn)
                flat = np.concatenate(comps) if comps else np.array([], dtype=np.int64)
                want = np.sort(m.voxels[labels == lab])
                assert np.array_equal(np.sort(flat), want)  # disjoint + exhaustive
                comp_sets = [set(map(tuple, g.coords_of(c))) for c in comps]
                for i, cs in enumerate(comp_sets):
                    if len(cs) > 1:  # internally connected
                        assert _is_connected(g, cs, conn)
                    for j in range(i + 1, len(comp_sets)):  # no mutual adjacency
                        assert not _adjacent(g, cs, comp_sets[j], conn)


def _is_connected(grid, coord_set, conn):
    start = next(iter(coord_set))
    seen = {start}
    stack = [start]
    while stack:
        for nb in grid.neighbors(stack.pop(), conn):
            if nb in coord_set and nb not in seen:
                seen.add(nb)
                stack.append(nb)
    return seen == coord_set


def _adjacent(grid, set_a, set_b, conn):
    return any(nb in set_b for c in set_a for nb in grid.neighbors(c, conn))


def test_distance_field_validates_shape():
    g = VoxelGrid((4, 4, 4))
    m = Mask(g, np.arange(8))
    with pytest.raises(ValueError):
        DistanceField(m, np.zeros(3))
    with pytest.raises(ValueError):
        DistanceField(m, -np.ones(8))
