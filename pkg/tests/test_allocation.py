import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from levelflow.allocation import (
    AllocationGrid,
    AllocationParams,
    EntropyMap,
    allocate,
    allocate_for,
    allocation_rd_report,
    patch_entropy,
)
from levelflow.data import Sample, make_corpus, render
from levelflow.geometry import ScaleSpec, patch_sizes
from levelflow.tokenizer import Tokenizer, TokenizerConfig


def flat_map(values, grid=None):
    values = np.asarray(values, dtype=np.float64)
    return EntropyMap(values, grid or (1, 1, values.size))


class TestEntropyMap:
    def test_validates_range_and_shape(self):
        with pytest.raises(ValueError, match=r"\[0, 8\]"):
            flat_map([9.0])
        with pytest.raises(ValueError, match="grid"):
            EntropyMap(np.zeros(3), (1, 2, 2))


class TestPatchEntropy:
    def test_constant_image_zero(self):
        img = Sample(np.full((1, 16, 16, 3), 0.37, dtype=np.float32),
                     ScaleSpec(16, 16, 1, 1))
        geom = patch_sizes(img.scale, k=2, k_t=1)
        e = patch_entropy(img, geom)
        assert e.grid == (1, 2, 2)
        np.testing.assert_array_equal(e.values, 0.0)

    def test_two_equal_values_one_bit(self):
        pix = np.zeros((1, 8, 8, 3), dtype=np.float32)
        pix[:, ::2] = 0.2
        pix[:, 1::2] = 0.8
        e = patch_entropy(Sample(pix, ScaleSpec(8, 8, 1, 1)),
                          patch_sizes(ScaleSpec(8, 8, 1, 1), k=1, k_t=1))
        assert e.values.shape == (1,)
        assert e.values[0] == pytest.approx(1.0)

    def test_uniform_random_patch_band(self):
        for seed in range(5):
            rng = np.random.default_rng(seed)
            pix = np.repeat(rng.uniform(size=(1, 16, 16, 1)), 3, axis=3).astype(np.float32)
            e = patch_entropy(Sample(pix, ScaleSpec(16, 16, 1, 1)),
                              patch_sizes(ScaleSpec(16, 16, 1, 1), k=1, k_t=1))
            assert 6.5 <= e.values[0] <= 8.0

    def test_per_patch_independence(self):
        # one busy quadrant, three flat ones
        pix = np.full((1, 8, 8, 3), 0.5, dtype=np.float32)
        pix[0, :4, :4] = np.random.default_rng(0).uniform(size=(4, 4, 3))
        e = patch_entropy(Sample(pix, ScaleSpec(8, 8, 1, 1)),
                          patch_sizes(ScaleSpec(8, 8, 1, 1), k=2, k_t=1))
        assert e.values[0] > 1.0
        np.testing.assert_array_equal(e.values[1:], 0.0)

    def test_geometry_mismatch_raises(self):
        img = Sample(np.zeros((1, 8, 8, 3), dtype=np.float32), ScaleSpec(8, 8, 1, 1))
        geom = patch_sizes(ScaleSpec(16, 16, 1, 1), k=2, k_t=1)
        with pytest.raises(ValueError, match="tile"):
            patch_entropy(img, geom)

    def test_luma_weights(self):
        # pure blue carries least luma: blue-vs-black split still counts as
        # two values, but a blue field is darker than a green one
        blue = np.zeros((1, 4, 4, 3), dtype=np.float32)
        blue[..., 2] = 1.0
        green = np.zeros((1, 4, 4, 3), dtype=np.float32)
        green[..., 1] = 1.0
        geom = patch_sizes(ScaleSpec(4, 4, 1, 1), k=1, k_t=1)
        for img in (blue, green):
            e = patch_entropy(Sample(img, ScaleSpec(4, 4, 1, 1)), geom)
            assert e.values[0] == 0.0


class TestAllocationParams:
    def test_defaults(self):
        p = AllocationParams()
        assert (p.n, p.m, p.M, p.K, p.theta1, p.theta2) == (2.0, 1, 3, 10, 0.995, 0.999)

    def test_validation(self):
        with pytest.raises(ValueError, match="m <= n <= M"):
            AllocationParams(n=4.0, m=1, M=3)
        with pytest.raises(ValueError, match="theta1"):
            AllocationParams(theta1=1.0)
        with pytest.raises(ValueError, match="K"):
            AllocationParams(K=0)
        with pytest.raises(ValueError, match="at least 1"):
            AllocationParams(n=0.5, m=0, M=3)


class TestAllocateHandTraces:
    def test_all_equal_midpoint(self):
        g = allocate(flat_map([3.3] * 6), AllocationParams(n=2.0, m=1, M=3))
        np.testing.assert_array_equal(g.counts, 2)

    def test_extremes_get_bounds(self):
        g = allocate(flat_map([0.0, 8.0]), AllocationParams(n=2.0, m=1, M=3))
        np.testing.assert_array_equal(g.counts, [1, 3])

    def test_single_patch(self):
        g = allocate(flat_map([5.0]), AllocationParams(n=2.0, m=1, M=3))
        assert g.counts.tolist() == [2]

    def test_all_zero_and_all_max(self):
        for v in (0.0, 8.0):
            g = allocate(flat_map([v] * 9), AllocationParams(n=2.0, m=1, M=3))
            np.testing.assert_array_equal(g.counts, 2)


class TestAllocateProperties:
    def _check(self, e: np.ndarray, params: AllocationParams):
        g = allocate(flat_map(e), params)
        assert g.counts.min() >= params.m
        assert g.counts.max() <= params.M
        assert g.counts.mean() <= params.n + 1e-12
        order = np.argsort(e, kind="stable")
        assert np.all(np.diff(g.counts[order]) >= 0), "rank monotonicity"
        again = allocate(flat_map(e), params)
        np.testing.assert_array_equal(g.counts, again.counts)
        return g

    def test_thousand_random_maps(self):
        rng = np.random.default_rng(0)
        param_pool = [AllocationParams(n=2.0, m=1, M=3),
                      AllocationParams(n=2.5, m=1, M=4),
                      AllocationParams(n=3.0, m=2, M=4),
                      AllocationParams(n=1.0, m=1, M=1)]
        for i in range(1000):
            size = int(rng.integers(1, 65))
            e = rng.uniform(0, 8, size=size)
            if i % 3 == 0:  # inject ties
                e = np.round(e * 2) / 2
            self._check(e, param_pool[i % len(param_pool)])

    @settings(max_examples=200, deadline=None)
    @given(st.lists(st.floats(min_value=0.0, max_value=8.0, allow_nan=False),
                    min_size=1, max_size=40),
           st.sampled_from([(2.0, 1, 3), (2.5, 1, 4), (1.5, 1, 2)]))
    def test_property_bounds_and_monotonicity(self, values, nmm):
        n, m, M = nmm
        self._check(np.asarray(values), AllocationParams(n=n, m=m, M=M))

    def test_equal_entropies_equal_counts(self):
        e = np.array([2.0, 5.0, 2.0, 5.0, 7.0])
        g = allocate(flat_map(e), AllocationParams(n=2.0, m=1, M=3))
        assert g.counts[0] == g.counts[2]
        assert g.counts[1] == g.counts[3]

    def test_grid_shape_carried(self):
        e = np.linspace(0, 8, 12)
        g = allocate(EntropyMap(e, (1, 3, 4)), AllocationParams())
        assert g.as_grid().shape == (1, 3, 4)
        assert g.as_budget(4).per_patch.tolist() == g.counts.tolist()


TINY_TOK = TokenizerConfig(k=2, k_t=1, n=2, latent_dim=4, patch_hidden=16,
                           patch_heads=2, patch_layers=1, grid_hidden=16,
                           grid_heads=2, grid_layers=1, ffn_ratio=1.0)


class TestRdReport:
    def _images(self, count, complexity):
        return [render(s, ScaleSpec(8, 8, 1, 1))
                for s in make_corpus(count, complexity=complexity, seed=3)]

    def test_equal_entropy_zero_delta(self):
        tok = Tokenizer(TINY_TOK, seed=0)
        images = [Sample(np.full((1, 8, 8, 3), 0.4, dtype=np.float32),
                         ScaleSpec(8, 8, 1, 1))]
        rep = allocation_rd_report(tok, images, AllocationParams(n=2.0, m=1, M=2))
        assert rep["delta_db"] == 0.0
        assert rep["uniform_psnr"] == rep["allocated_psnr"]

    def test_report_shape_and_mean_bound(self):
        tok = Tokenizer(TINY_TOK, seed=0)
        rep = allocation_rd_report(tok, self._images(6, (0, 4)),
                                   AllocationParams(n=2.0, m=1, M=2))
        assert set(rep) == {"images", "uniform_budget", "uniform_psnr",
                            "allocated_psnr", "delta_db", "mean_levels", "params"}
        assert rep["images"] == 6
        assert rep["uniform_budget"] == 2
        assert rep["mean_levels"] <= 2.0
        assert np.isfinite(rep["delta_db"])

    def test_rejects_bounds_beyond_model(self):
        tok = Tokenizer(TINY_TOK, seed=0)
        with pytest.raises(ValueError, match="exceeds"):
            allocation_rd_report(tok, self._images(1, (1, 1)),
                                 AllocationParams(n=2.0, m=1, M=3))

    def test_rejects_empty(self):
        with pytest.raises(ValueError, match="at least one"):
            allocation_rd_report(Tokenizer(TINY_TOK, seed=0), [], AllocationParams())


class TestAllocateFor:
    def test_busy_patch_gets_more(self):
        pix = np.full((1, 8, 8, 3), 0.5, dtype=np.float32)
        pix[0, :4, :4] = np.random.default_rng(1).uniform(size=(4, 4, 3))
        geom = patch_sizes(ScaleSpec(8, 8, 1, 1), k=2, k_t=1)
        g = allocate_for(Sample(pix, ScaleSpec(8, 8, 1, 1)), geom,
                         AllocationParams(n=2.0, m=1, M=3))
        assert g.counts[0] == g.counts.max()
        assert g.counts[0] > g.counts[1]
