import numpy as np
import pytest

from amyparc.features import intersection_features
from amyparc.phantom import (
    PhantomConfig,
    build_signatures,
    ellipsoid_mask,
    generate_cohort,
    load_subject,
    partition_regions,
    rasterize_streamline,
    save_subject,
)
from amyparc.voxelgrid import VoxelGrid, connected_components


def small_cfg(**kw):
    base = dict(
        dims=(16, 13, 11),
        semi_axes=(6.0, 5.0, 4.0),
        regions=5,
        groups=2,
        clusters=10,
        subjects=3,
        train_subjects=2,
        streamlines_per_cluster=3,
        spurious_prob=0.0,
        jitter_std=0.0,
        dropout_prob=0.0,
        seed=11,
    )
    base.update(kw)
    return PhantomConfig(**base)


class TestConfig:
    def test_infeasible_clusters(self):
        with pytest.raises(ValueError, match="clusters"):
            small_cfg(clusters=3, regions=5)

    def test_bad_probabilities(self):
        with pytest.raises(ValueError):
            small_cfg(spurious_prob=1.5)

    def test_bad_split(self):
        with pytest.raises(ValueError):
            small_cfg(train_subjects=3, subjects=3)


class TestRasterize:
    def test_axis_aligned_segment(self):
        g = VoxelGrid((6, 4, 4))
        got = rasterize_streamline(np.array([[0.5, 0.5, 0.5], [3.5, 0.5, 0.5]]), g)
        want = np.array([g.linear_index((x, 0, 0)) for x in range(4)])
        assert np.array_equal(got, np.sort(want))

    def test_single_cell(self):
        g = VoxelGrid((4, 4, 4))
        got = rasterize_streamline(np.array([[1.2, 1.2, 1.2], [1.8, 1.4, 1.6]]), g)
        assert np.array_equal(got, [g.linear_index((1, 1, 1))])

    def test_out_of_bounds_dropped(self):
        g = VoxelGrid((4, 4, 4))
        got = rasterize_streamline(np.array([[2.5, 2.5, 2.5], [8.0, 2.5, 2.5]]), g)
        assert got.size > 0
        assert np.all(got < g.size)

    def test_against_fine_sampling_oracle(self):
        # [DERIVED] fine-step (0.01) sampling oracle: the rasterization may
        # never invent voxels off the line, and may only miss cells the
        # line merely grazes (per-segment dwell below the 0.25 step).
        g = VoxelGrid((10, 10, 10))
        rng = np.random.default_rng(3)
        for _ in range(15):
            pts = rng.uniform(0.0, 10.0, size=(4, 3))
            got = set(rasterize_streamline(pts, g).tolist())
            fine = set()
            dwell: dict[int, float] = {}
            for a, b in zip(pts[:-1], pts[1:]):
                length = np.linalg.norm(b - a)
                n = max(2, int(np.ceil(length / 0.01)))
                t = np.linspace(0.0, 1.0, n)[:, None]
                vox = np.floor(a + t * (b - a)).astype(np.int64)
                ok = np.all((vox >= 0) & (vox < 10), axis=1)
                idx = g.linear_of(vox[ok])
                fine.update(idx.tolist())
                step = length / (n - 1)
                for i, cnt in zip(*np.unique(idx, return_counts=True)):
                    dwell[i] = max(dwell.get(i, 0.0), cnt * step)
            assert got.issubset(fine), "rasterization invented voxels"
            for missed in fine - got:
                assert dwell[missed] < 0.25 + 0.02, (
                    f"missed voxel {missed} with dwell {dwell[missed]:.3f}"
                )

    def test_requires_two_points(self):
        g = VoxelGrid((4, 4, 4))
        with pytest.raises(ValueError):
            rasterize_streamline(np.array([[1.0, 1.0, 1.0]]), g)


class TestPartition:
    def test_regions_connected_and_exhaustive(self):
        cfg = small_cfg()
        mask = ellipsoid_mask(cfg)
        labels = partition_regions(mask, cfg.regions, 99)
        assert labels.min() == 0 and labels.max() == cfg.regions - 1
        for r in range(cfg.regions):
            comps = connected_components(mask, labels, r, connectivity=6)
            assert len(comps) == 1, f"region {r} fragmented"

    def test_sizes_roughly_balanced(self):
        cfg = small_cfg()
        mask = ellipsoid_mask(cfg)
        labels = partition_regions(mask, cfg.regions, 5)
        sizes = np.bincount(labels, minlength=cfg.regions)
        assert sizes.min() > 0.3 * sizes.mean()


class TestSignatures:
    def test_every_cluster_owned_and_private_reserved(self):
        cfg = small_cfg(overlap_fraction=1.0)
        adjacency = [(r, s) for r in range(5) for s in range(r + 1, 5)]
        sigs = build_signatures(cfg, adjacency)
        owned_union = set()
        for sig in sigs:
            owned_union |= sig
        assert owned_union == set(range(cfg.clusters))
        # each region keeps at least one cluster no other signature contains
        for r, sig in enumerate(sigs):
            others = set().union(*(s for i, s in enumerate(sigs) if i != r))
            assert sig - others, f"region {r} has no private cluster"

    def test_signatures_distinct(self):
        cfg = small_cfg(overlap_fraction=0.5)
        sigs = build_signatures(cfg, [(0, 1), (1, 2), (3, 4)])
        frozen = [frozenset(s) for s in sigs]
        assert len(set(frozen)) == len(frozen)

    def test_uneven_ownership(self):
        cfg = small_cfg(clusters=20, overlap_fraction=0.0)
        sigs = build_signatures(cfg, [])
        sizes = sorted(len(s) for s in sigs)
        assert sum(sizes) == cfg.clusters
        assert sizes[0] >= 1
        assert len(set(sizes)) > 1, "ownership widths should vary"


class TestCohort:
    def test_deterministic_and_seed_sensitive(self):
        a = generate_cohort(small_cfg(jitter_std=0.2, spurious_prob=0.05))
        b = generate_cohort(small_cfg(jitter_std=0.2, spurious_prob=0.05))
        c = generate_cohort(small_cfg(jitter_std=0.2, spurious_prob=0.05, seed=12))
        for sa, sb in zip(a, b):
            assert all(np.array_equal(x, y) for x, y in zip(sa.clusters.clusters, sb.clusters.clusters))
        assert any(
            not np.array_equal(x, y)
            for sa, sc in zip(a, c)
            for x, y in zip(sa.clusters.clusters, sc.clusters.clusters)
        )

    def test_zero_noise_subjects_identical(self):
        subjects = generate_cohort(small_cfg())
        first = subjects[0].clusters.clusters
        for s in subjects[1:]:
            assert all(np.array_equal(x, y) for x, y in zip(first, s.clusters.clusters))

    def test_zero_noise_binary_vectors_identify_regions(self):
        cfg = small_cfg()
        s = generate_cohort(cfg)[0]
        binary = intersection_features(s.clusters, s.mask).values
        sig_of_region = {}
        for r in range(cfg.regions):
            rows = binary[s.region_labels == r]
            assert np.all(rows == rows[0]), "same-region vectors differ"
            sig_of_region[r] = tuple(rows[0])
        assert len(set(sig_of_region.values())) == cfg.regions, "regions not separable"

    def test_no_empty_clusters_without_dropout(self):
        s = generate_cohort(small_cfg(spurious_prob=0.02, jitter_std=0.3))[0]
        assert s.clusters.empty_clusters() == []

    def test_dropout_empties_clusters(self):
        subjects = generate_cohort(small_cfg(dropout_prob=0.5, subjects=4, train_subjects=2))
        assert any(s.clusters.empty_clusters() for s in subjects)

    def test_groups_surjective_many_to_one(self):
        cfg = small_cfg()
        s = generate_cohort(cfg)[0]
        assert set(s.region_groups.tolist()) == set(range(cfg.groups))
        assert len(s.region_groups) == cfg.regions
        assert np.array_equal(s.group_labels, s.region_groups[s.region_labels])

    def test_noise_degrades_separability(self):
        # sanity trend: spurious intersections break exact signature identity
        clean = generate_cohort(small_cfg())[0]
        noisy = generate_cohort(small_cfg(spurious_prob=0.2))[0]

        def mismatch(subject):
            binary = intersection_features(subject.clusters, subject.mask).values
            bad = 0
            for r in np.unique(subject.region_labels):
                rows = binary[subject.region_labels == r]
                bad += int((rows != rows[0]).any(axis=1).sum())
            return bad

        assert mismatch(clean) == 0
        assert mismatch(noisy) > 0

    def test_infeasible_raises(self):
        with pytest.raises(ValueError, match="clusters"):
            generate_cohort(small_cfg(clusters=4))


class TestSubjectFiles:
    def test_roundtrip(self, tmp_path):
        cfg = small_cfg(spurious_prob=0.03, jitter_std=0.2)
        s = generate_cohort(cfg)[1]
        save_subject(tmp_path / "s1.json", s, cfg)
        back, echo = load_subject(tmp_path / "s1.json")
        assert back.subject_id == s.subject_id
        assert np.array_equal(back.mask.voxels, s.mask.voxels)
        assert np.array_equal(back.region_labels, s.region_labels)
        assert all(np.array_equal(a, b) for a, b in zip(back.clusters.clusters, s.clusters.clusters))
        assert echo["clusters"] == cfg.clusters
        assert echo["seed"] == cfg.seed

    def test_missing_field_rejected(self, tmp_path):
        p = tmp_path / "bad.json"
        p.write_text('{"dims": [4, 4, 4], "mask": [0]}')
        with pytest.raises(ValueError, match="missing field"):
            load_subject(p)
