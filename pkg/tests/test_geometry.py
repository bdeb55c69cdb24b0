"""Patch geometry: exact sizes from hand-computed cases, alignment
conventions, scale independence, and rotary-table properties."""

import numpy as np
import pytest

from levelflow.geometry import (
    GeometryError,
    PatchGeometry,
    PositionTable,
    ScaleSpec,
    inter_patch_positions,
    intra_patch_positions,
    latent_level_positions,
    level_major_positions,
    patch_sizes,
    rope_rotate,
    rope_tables,
)
from levelflow.tensor import Tensor


class TestPatchSizes:
    def test_small_video(self):
        g = patch_sizes(ScaleSpec(16, 16, f=2, t=2), k=2, k_t=1)
        assert g.p_hw == 8 and g.p_t == 2
        assert g.grid == (1, 2, 2)

    def test_double_scale_same_grid(self):
        g = patch_sizes(ScaleSpec(32, 32, f=4, t=4), k=2, k_t=1)
        assert g.p_hw == 16 and g.p_t == 4
        assert g.grid == (1, 2, 2)

    def test_image_256(self):
        g = patch_sizes(ScaleSpec(256, 256), k=16)
        assert g.p_hw == 16 and g.p_t == 1
        assert g.grid == (1, 16, 16)

    def test_24fps_video(self):
        g = patch_sizes(ScaleSpec(256, 256, f=24, t=24), k=16, k_t=6)
        assert g.p_t == 4
        assert g.grid == (6, 16, 16)

    def test_wide_image(self):
        g = patch_sizes(ScaleSpec(16, 32), k=2)
        assert g.p_hw == 8 and g.grid == (1, 2, 4)

    @pytest.mark.parametrize("h,w,k", [(32, 32, 4), (64, 32, 4), (48, 96, 2), (16, 16, 16)])
    def test_short_side_always_k_patches(self, h, w, k):
        g = patch_sizes(ScaleSpec(h, w), k=k)
        assert min(g.grid[1], g.grid[2]) == k

    def test_error_short_side_not_multiple_of_k(self):
        with pytest.raises(GeometryError, match="multiple of k = 16"):
            patch_sizes(ScaleSpec(100, 100), k=16)

    def test_error_long_side_not_multiple_of_patch(self):
        with pytest.raises(GeometryError, match="multiple of the patch size 8"):
            patch_sizes(ScaleSpec(32, 44), k=4)

    def test_error_fps_not_multiple_of_kt(self):
        with pytest.raises(GeometryError, match="multiple of k_t = 6"):
            patch_sizes(ScaleSpec(32, 32, f=8, t=8), k=4, k_t=6)

    def test_error_frames_not_multiple_of_pt(self):
        with pytest.raises(GeometryError, match="temporal patch size"):
            patch_sizes(ScaleSpec(32, 32, f=4, t=6), k=4, k_t=1)

    def test_bad_scale_rejected(self):
        with pytest.raises(ValueError):
            ScaleSpec(0, 16)
        with pytest.raises(ValueError):
            ScaleSpec(16.0, 16)


class TestIntraPatchPositions:
    def test_2x2_corners(self):
        g = PatchGeometry(k=1, k_t=1, p_hw=2, p_t=1, grid=(1, 1, 1))
        tab = intra_patch_positions(g)
        got = {tuple(r) for r in tab.coords[:, 1:3]}
        assert got == {(0.0, 0.0), (0.0, 1.0), (1.0, 0.0), (1.0, 1.0)}

    def test_3x3_center(self):
        g = PatchGeometry(k=1, k_t=1, p_hw=3, p_t=1, grid=(1, 1, 1))
        tab = intra_patch_positions(g)
        assert (0.5, 0.5) in {tuple(r) for r in tab.coords[:, 1:3]}

    @pytest.mark.parametrize("p", [2, 3, 5, 8, 16])
    def test_corners_exact_at_every_size(self, p):
        g = PatchGeometry(k=1, k_t=1, p_hw=p, p_t=1, grid=(1, 1, 1))
        ys = intra_patch_positions(g).coords[:, 1]
        assert ys.min() == 0.0 and ys.max() == 1.0

    def test_temporal_tail_aligned(self):
        g = PatchGeometry(k=1, k_t=1, p_hw=1, p_t=4, grid=(1, 1, 1))
        ts = intra_patch_positions(g).coords[:, 0]
        np.testing.assert_array_equal(np.unique(ts), [0.25, 0.5, 0.75, 1.0])

    def test_single_frame_temporal_is_one(self):
        g = PatchGeometry(k=1, k_t=1, p_hw=2, p_t=1, grid=(1, 1, 1))
        assert np.all(intra_patch_positions(g).coords[:, 0] == 1.0)

    def test_pixels_have_zero_level(self):
        g = PatchGeometry(k=1, k_t=1, p_hw=4, p_t=2, grid=(1, 1, 1))
        assert np.all(intra_patch_positions(g).coords[:, 3] == 0.0)

    def test_shared_instants_share_coords_across_scales(self):
        # same physical location/instant -> same coordinate: 2x2 patch coords
        # are a subset of 3x3 (corners), p_t=2 temporal of p_t=4
        c2 = intra_patch_positions(PatchGeometry(1, 1, 2, 2, (1, 1, 1))).coords
        c4 = intra_patch_positions(PatchGeometry(1, 1, 3, 4, (1, 1, 1))).coords
        small = {tuple(r) for r in c2[:, :3]}
        big = {tuple(r) for r in c4[:, :3]}
        assert small <= big


class TestInterPatchPositions:
    def test_square_spans_unit(self):
        pos = inter_patch_positions((1, 4, 4))
        assert pos[:, 1].min() == 0.0 and pos[:, 1].max() == 1.0
        assert pos[:, 2].min() == 0.0 and pos[:, 2].max() == 1.0

    def test_wide_grid_long_side_span(self):
        pos = inter_patch_positions((1, 16, 32))
        assert pos[:, 1].max() == 1.0
        assert pos[:, 2].max() == 2.0

    def test_scale_independence(self):
        a = patch_sizes(ScaleSpec(32, 32, f=4, t=4), k=4, k_t=1)
        b = patch_sizes(ScaleSpec(64, 64, f=8, t=8), k=4, k_t=1)
        assert a.grid == b.grid
        np.testing.assert_array_equal(inter_patch_positions(a.grid),
                                      inter_patch_positions(b.grid))

    def test_temporal_tail_aligned(self):
        pos = inter_patch_positions((3, 1, 1))
        np.testing.assert_allclose(np.unique(pos[:, 0]), [1 / 3, 2 / 3, 1.0])


class TestLevelPositions:
    def test_latent_levels_are_one_based(self):
        tab = latent_level_positions(4)
        np.testing.assert_array_equal(tab.coords[:, 3], [1, 2, 3, 4])
        assert np.all(tab.coords[:, :3] == 0.0)

    def test_level_major_layout(self):
        tab = level_major_positions((1, 2, 2), n=3)
        assert len(tab) == 12
        np.testing.assert_array_equal(tab.coords[:, 3], np.repeat([1, 2, 3], 4))
        # patch coords repeat identically per level
        np.testing.assert_array_equal(tab.coords[:4, :3], tab.coords[4:8, :3])


class TestRope:
    def test_head_dim_divisibility_enforced(self):
        tab = latent_level_positions(2)
        with pytest.raises(ValueError, match="multiple of 8"):
            rope_tables(tab, head_dim=12)

    def test_norm_preserved(self):
        rng = np.random.default_rng(0)
        tab = PositionTable(rng.random((6, 4)) * 4)
        x = rng.standard_normal((6, 16))
        out = rope_rotate(Tensor(x, dtype=np.float64), tab).data
        np.testing.assert_allclose(np.linalg.norm(out, axis=-1),
                                   np.linalg.norm(x, axis=-1), atol=1e-12)

    def test_zero_coords_identity(self):
        rng = np.random.default_rng(1)
        tab = PositionTable(np.zeros((5, 4)))
        x = rng.standard_normal((5, 8))
        out = rope_rotate(Tensor(x, dtype=np.float64), tab).data
        np.testing.assert_allclose(out, x, atol=1e-15)

    def test_relative_shift_property(self):
        # dot products of rotated tokens depend only on coordinate deltas:
        # shifting every token by the same offset leaves q . k unchanged
        rng = np.random.default_rng(2)
        coords = rng.integers(0, 8, size=(7, 4)).astype(np.float64)
        shift = rng.random(4) * 3
        q = rng.standard_normal((7, 16))
        k = rng.standard_normal((7, 16))
        qa = rope_rotate(Tensor(q, dtype=np.float64), PositionTable(coords)).data
        ka = rope_rotate(Tensor(k, dtype=np.float64), PositionTable(coords)).data
        qb = rope_rotate(Tensor(q, dtype=np.float64), PositionTable(coords + shift)).data
        kb = rope_rotate(Tensor(k, dtype=np.float64), PositionTable(coords + shift)).data
        np.testing.assert_allclose(qa @ ka.T, qb @ kb.T, atol=1e-4)

    def test_distinct_levels_get_distinct_rotations(self):
        tab = latent_level_positions(3)
        x = np.ones((3, 8))
        out = rope_rotate(Tensor(x, dtype=np.float64), tab).data
        assert not np.allclose(out[0], out[1])
        assert not np.allclose(out[1], out[2])
