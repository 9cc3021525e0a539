import numpy as np
import pytest
from scipy import ndimage

from voxfuse.camera import CameraModel, FeatureMap2D
from voxfuse.errors import ShapeError
from voxfuse.grid import GridGeometry, SparseVoxelGrid, subdivide_coords
from voxfuse.lidar import SparseConvSpec
from voxfuse.refine import (
    ImportanceMap,
    RefinementSets,
    estimate_importance,
    fuse_refined,
    gather_fine,
    gather_semi_fine,
    importance_from_scores,
    occupied_fraction,
    refinement_labels,
    seeded_projection,
    select_sets,
    sigmoid,
)


BASE = GridGeometry((0.0, 0.0, 0.0), 0.2, (64, 64, 64))


def grid_at(scale, coords, feats):
    return SparseVoxelGrid(BASE.with_scale(scale), coords, feats)


def random_grid4(rng, channels=3, n=30):
    coords = np.unique(rng.integers(0, 16, size=(n, 3)), axis=0)
    return grid_at(4, coords, rng.normal(size=(coords.shape[0], channels)))


def wide_cam():
    w, h = 96, 96
    fx = (w / 2) / np.tan(np.radians(55))
    return CameraModel.from_lookat((-4.0, 6.4, 6.4), (20.0, 6.4, 6.4), fx, fx,
                                   w / 2, h / 2, (w, h))


class TestImportance:
    def test_zero_conv_gives_half(self, rng):
        fm = random_grid4(rng, channels=3)
        rie = SparseConvSpec(np.zeros((3, 3, 3, 3, 1)), np.zeros(1))
        imp = estimate_importance(fm, rie)
        np.testing.assert_allclose(imp.scores, 0.5)

    def test_large_bias_saturates(self, rng):
        fm = random_grid4(rng, channels=2)
        rie = SparseConvSpec(np.zeros((3, 3, 3, 2, 1)), np.array([50.0]))
        imp = estimate_importance(fm, rie)
        np.testing.assert_allclose(imp.scores, 1.0, atol=1e-12)

    def test_matches_dense_sigmoid_oracle(self, rng):
        for trial in range(10):
            fm = random_grid4(rng, channels=3)
            rie = SparseConvSpec.seeded(3, 1, seed=trial)
            imp = estimate_importance(fm, rie)
            dense = fm.to_dense()
            acc = np.zeros(dense.shape[:3])
            for ci in range(3):
                acc += ndimage.correlate(dense[..., ci], rie.weights[..., ci, 0],
                                         mode="constant", cval=0.0)
            expect = 1.0 / (1.0 + np.exp(-acc[fm.coords[:, 0], fm.coords[:, 1], fm.coords[:, 2]]))
            np.testing.assert_allclose(imp.scores, expect, atol=1e-6)

    def test_requires_single_channel(self, rng):
        fm = random_grid4(rng, channels=3)
        with pytest.raises(ShapeError):
            estimate_importance(fm, SparseConvSpec.seeded(3, 2))

    def test_scores_range_validated(self, rng):
        fm = random_grid4(rng, channels=2)
        with pytest.raises(ValueError):
            ImportanceMap(fm, np.full(len(fm), 1.5))


class TestSelectSets:
    def test_all_zero_scores(self, rng):
        fm = random_grid4(rng)
        sets = select_sets(importance_from_scores(fm, np.zeros(len(fm))))
        assert sets.counts == (0, 0)

    def test_tie_handling_at_defaults(self):
        fm = grid_at(4, [[0, 0, 0], [1, 1, 1], [2, 2, 2]], np.zeros((3, 1)))
        imp = importance_from_scores(fm, [0.4, 0.69, 0.7])
        sets = select_sets(imp, 0.4, 0.7)
        assert sets.counts == (3, 1)
        assert tuple(sets.fine[0]) == (2, 2, 2)

    def test_fine_subset_of_semi_fine(self, rng):
        fm = random_grid4(rng, n=60)
        imp = importance_from_scores(fm, rng.uniform(size=len(fm)))
        sets = select_sets(imp, 0.4, 0.7)
        semi = {tuple(c) for c in sets.semi_fine}
        assert all(tuple(c) in semi for c in sets.fine)

    def test_monotone_in_thresholds(self, rng):
        fm = random_grid4(rng, n=60)
        imp = importance_from_scores(fm, rng.uniform(size=len(fm)))
        sizes = [select_sets(imp, t, 1.0).counts[0] for t in (0.1, 0.3, 0.5, 0.9)]
        assert sizes == sorted(sizes, reverse=True)

    def test_thresholds_above_one_disable(self, rng):
        fm = random_grid4(rng)
        imp = importance_from_scores(fm, np.ones(len(fm)))
        sets = select_sets(imp, 1.01, 1.01)
        assert sets.counts == (0, 0)

    def test_negative_threshold_rejected(self, rng):
        fm = random_grid4(rng)
        imp = importance_from_scores(fm, np.zeros(len(fm)))
        with pytest.raises(ValueError):
            select_sets(imp, -0.1, 0.5)


class TestGathers:
    def setup_method(self):
        self.rig = [wide_cam()]
        self.maps = FeatureMap2D.seeded(self.rig, 2, seed=3)

    def test_semi_fine_eight_children(self, rng):
        lidar2 = SparseVoxelGrid.empty(BASE.with_scale(2), 3)
        proj = seeded_projection(5, 4, seed=0)
        out = gather_semi_fine(np.array([[4, 8, 8]]), lidar2, self.rig, self.maps, proj)
        assert len(out) == 8
        assert out.scale == 2

    def test_fine_sixtyfour_children(self, rng):
        lidar1 = SparseVoxelGrid.empty(BASE.with_scale(1), 3)
        proj = seeded_projection(5, 4, seed=0)
        out = gather_fine(np.array([[4, 8, 8]]), lidar1, self.rig, self.maps, proj)
        assert len(out) == 64
        assert out.scale == 1

    def test_empty_fine_set(self):
        lidar1 = SparseVoxelGrid.empty(BASE.with_scale(1), 3)
        out = gather_fine(np.zeros((0, 3)), lidar1, self.rig, self.maps,
                          seeded_projection(5, 4))
        assert len(out) == 0

    def test_child_counts_scale_with_parents(self, rng):
        parents = np.unique(rng.integers(2, 14, size=(9, 3)), axis=0)
        lidar2 = SparseVoxelGrid.empty(BASE.with_scale(2), 2)
        out = gather_semi_fine(parents, lidar2, self.rig, self.maps, seeded_projection(4, 4))
        assert len(out) == 8 * parents.shape[0]

    def test_invisible_absent_child_maps_zero(self):
        # camera pointed away, empty grid: concat input is all zero
        rig = [CameraModel.from_lookat((0, 0, 0), (-5, 0, 0), 50, 50, 16, 16, (32, 32))]
        maps = FeatureMap2D.seeded(rig, 2, seed=1)
        lidar2 = SparseVoxelGrid.empty(BASE.with_scale(2), 3)
        proj = seeded_projection(5, 4, seed=2)
        out = gather_semi_fine(np.array([[8, 8, 8]]), lidar2, rig, maps, proj)
        np.testing.assert_array_equal(out.features, np.zeros((8, 4)))

    def test_identity_map_concats_lidar_and_image(self, rng):
        parent = np.array([[4, 8, 8]])
        children = subdivide_coords(parent, 2)
        feats = rng.normal(size=(8, 3))
        lidar2 = grid_at(2, children, feats)
        proj = np.eye(5)
        out = gather_semi_fine(parent, lidar2, self.rig, self.maps, proj)
        np.testing.assert_allclose(out.features[:, :3], feats, atol=1e-12)
        # image part equals a direct sample at each child center
        from voxfuse.camera import project, sample_array
        for i in range(8):
            ctr = out.centers()[i]
            hit = project(self.rig[0], ctr)
            assert hit is not None
            expect = sample_array(self.maps.maps[0], [[hit[0], hit[1]]])[0]
            np.testing.assert_allclose(out.features[i, 3:], expect, atol=1e-12)

    def test_overlap_fine_and_semi_children_coexist(self):
        parent = np.array([[4, 8, 8]])
        lidar2 = SparseVoxelGrid.empty(BASE.with_scale(2), 2)
        lidar1 = SparseVoxelGrid.empty(BASE.with_scale(1), 2)
        s = gather_semi_fine(parent, lidar2, self.rig, self.maps, seeded_projection(4, 3))
        f = gather_fine(parent, lidar1, self.rig, self.maps, seeded_projection(4, 3))
        assert len(s) == 8 and len(f) == 64
        # the fine children at scale 1 integer-divide onto the semi children at scale 2
        np.testing.assert_array_equal(np.unique(f.coords // 2, axis=0), s.coords)

    def test_wrong_scale_grid_rejected(self):
        lidar4 = SparseVoxelGrid.empty(BASE.with_scale(4), 2)
        with pytest.raises(ShapeError):
            gather_semi_fine(np.array([[1, 1, 1]]), lidar4, self.rig, self.maps,
                             seeded_projection(4, 3))


def dense_strided_conv(dense, spec):
    out = np.zeros(tuple(-(-d // 2) for d in dense.shape[:3]) + (spec.out_channels,))
    full = np.zeros(dense.shape[:3] + (spec.out_channels,))
    for co in range(spec.out_channels):
        acc = np.zeros(dense.shape[:3])
        for ci in range(spec.in_channels):
            acc += ndimage.correlate(dense[..., ci], spec.weights[..., ci, co],
                                     mode="constant", cval=0.0)
        full[..., co] = acc + spec.bias[co]
    out = full[::2, ::2, ::2]
    return out


class TestFuseRefined:
    def make_inputs(self, rng, refined_parents):
        channels = 3
        coords4 = np.unique(np.vstack([rng.integers(0, 4, size=(10, 3)), refined_parents]), axis=0)
        geom = GridGeometry((0.0, 0.0, 0.0), 0.2, (16, 16, 16))
        fm4 = SparseVoxelGrid(geom.with_scale(4), coords4,
                              rng.normal(size=(coords4.shape[0], channels)))
        fine_children = subdivide_coords(refined_parents, 4)
        ff1 = SparseVoxelGrid(geom, fine_children,
                              rng.normal(size=(fine_children.shape[0], channels)))
        semi_children = subdivide_coords(refined_parents, 2)
        fs2 = SparseVoxelGrid(geom.with_scale(2), semi_children,
                              rng.normal(size=(semi_children.shape[0], channels)))
        s1 = SparseConvSpec.seeded(channels, channels, seed=21)
        s2 = SparseConvSpec.seeded(channels, channels, seed=22)
        return ff1, fs2, fm4, s1, s2

    def test_empty_sets_identity(self, rng):
        _, _, fm4, s1, s2 = self.make_inputs(rng, np.array([[1, 1, 1]]))
        geom = fm4.geometry
        empty1 = SparseVoxelGrid.empty(geom.with_scale(1), 3)
        empty2 = SparseVoxelGrid.empty(geom.with_scale(2), 3)
        out = fuse_refined(empty1, empty2, fm4, s1, s2)
        assert np.array_equal(out.features, fm4.features)
        np.testing.assert_array_equal(out.coords, fm4.coords)

    def test_zero_weights_identity(self, rng):
        ff1, fs2, fm4, _, _ = self.make_inputs(rng, np.array([[1, 1, 1], [2, 2, 2]]))
        z1 = SparseConvSpec(np.zeros((3, 3, 3, 3, 3)), np.zeros(3))
        z2 = SparseConvSpec(np.zeros((3, 3, 3, 3, 3)), np.zeros(3))
        out = fuse_refined(ff1, fs2, fm4, z1, z2)
        assert np.array_equal(out.features, fm4.features)

    def test_output_coordinate_set_is_coarse_set(self, rng):
        ff1, fs2, fm4, s1, s2 = self.make_inputs(rng, np.array([[1, 1, 1]]))
        out = fuse_refined(ff1, fs2, fm4, s1, s2)
        np.testing.assert_array_equal(out.coords, fm4.coords)

    def test_matches_dense_oracle(self, rng):
        refined = np.array([[1, 1, 1], [2, 1, 0]])
        ff1, fs2, fm4, s1, s2 = self.make_inputs(rng, refined)
        out = fuse_refined(ff1, fs2, fm4, s1, s2)

        mid_dense = dense_strided_conv(ff1.to_dense(), s1)
        # restrict to the sparse branch's declared set before the union-sum
        mask_mid = np.zeros(mid_dense.shape[:3], dtype=bool)
        mask_mid[tuple(np.unique(ff1.coords // 2, axis=0).T)] = True
        mid_dense[~mask_mid] = 0.0
        mid_dense += fs2.to_dense()
        union = np.unique(np.vstack([np.unique(ff1.coords // 2, axis=0), fs2.coords]), axis=0)
        keep = np.zeros(mid_dense.shape[:3], dtype=bool)
        keep[tuple(union.T)] = True
        mid_dense[~keep] = 0.0

        coarse_dense = dense_strided_conv(mid_dense, s2)
        mask4 = np.zeros(coarse_dense.shape[:3], dtype=bool)
        mask4[tuple((union // 2).T)] = True
        coarse_dense[~mask4] = 0.0

        expect = fm4.features + coarse_dense[tuple(fm4.coords.T)]
        np.testing.assert_allclose(out.features, expect, atol=1e-5)

    def test_semi_only_path(self, rng):
        _, fs2, fm4, s1, s2 = self.make_inputs(rng, np.array([[1, 1, 1]]))
        empty1 = SparseVoxelGrid.empty(fm4.geometry.with_scale(1), 3)
        out = fuse_refined(empty1, fs2, fm4, s1, s2)
        # the refined parent's row changed, all others untouched
        row = fm4.lookup((1, 1, 1))
        others = np.ones(len(fm4), dtype=bool)
        others[row] = False
        assert not np.allclose(out.features[row], fm4.features[row])
        np.testing.assert_array_equal(out.features[others], fm4.features[others])

    def test_scale_mismatch_rejected(self, rng):
        ff1, fs2, fm4, s1, s2 = self.make_inputs(rng, np.array([[1, 1, 1]]))
        with pytest.raises(ShapeError):
            fuse_refined(fs2, fs2, fm4, s1, s2)


class TestOracleScorer:
    def test_occupied_fraction_exact(self):
        parents = np.array([[0, 0, 0], [1, 0, 0]])
        # 3 occupied children under the first parent, none under the second
        occ = np.array([[0, 0, 0], [1, 2, 3], [3, 3, 3]])
        frac = occupied_fraction(parents, occ)
        np.testing.assert_allclose(frac, [3 / 64, 0.0])

    def test_full_parent(self):
        parents = np.array([[2, 2, 2]])
        occ = subdivide_coords(parents, 4)
        np.testing.assert_allclose(occupied_fraction(parents, occ), [1.0])

    def test_labels_any_child(self):
        parents = np.array([[0, 0, 0], [1, 1, 1]])
        occ = np.array([[3, 3, 3]])
        np.testing.assert_array_equal(refinement_labels(parents, occ), [1.0, 0.0])

    def test_empty_occupied(self):
        parents = np.array([[0, 0, 0]])
        np.testing.assert_allclose(occupied_fraction(parents, np.zeros((0, 3))), [0.0])

    def test_foreground_focus_ordering(self, rng):
        # parents with high child occupancy should be picked for refinement
        parents = np.unique(rng.integers(0, 8, size=(40, 3)), axis=0)
        n = parents.shape[0]
        fractions = rng.uniform(size=n)
        occupied = []
        for p, target in zip(parents, fractions):
            kids = subdivide_coords(p[None, :], 4)
            k = int(round(target * 64))
            if k:
                occupied.append(kids[rng.choice(64, size=k, replace=False)])
        occ = np.vstack(occupied)
        fm = grid_at(4, parents, np.zeros((n, 1)))
        scores = occupied_fraction(fm.coords, occ)
        sets = select_sets(importance_from_scores(fm, scores), 0.4, 0.7)
        frac_all = occupied_fraction(fm.coords, occ)
        semi = {tuple(c) for c in sets.semi_fine}
        fine = {tuple(c) for c in sets.fine}
        coarse_mask = np.array([tuple(c) not in semi for c in fm.coords])
        fg_coarse = frac_all[coarse_mask].mean()
        fg_semi = occupied_fraction(sets.semi_fine, occ).mean()
        fg_fine = occupied_fraction(sets.fine, occ).mean()
        assert fg_fine > fg_semi > fg_coarse


class TestSigmoid:
    def test_symmetry_and_range(self, rng):
        x = rng.normal(scale=10, size=100)
        s = sigmoid(x)
        assert ((s > 0) & (s < 1)).all()
        np.testing.assert_allclose(s + sigmoid(-x), 1.0, atol=1e-12)

    def test_extreme_values_stable(self):
        assert sigmoid(np.array([1e4]))[0] == 1.0
        assert sigmoid(np.array([-1e4]))[0] == 0.0
