import numpy as np
import pytest

from splatlab.densify import (
    SPLIT_SCALE_DIVISOR,
    MutationRecord,
    average_gradients,
    densify_and_prune,
    sample_split_children,
)
from splatlab.gaussians import GaussianCloud, inverse_sigmoid, rotation_matrices


def make_cloud(n=6, seed=0, opacity=0.9):
    rng = np.random.default_rng(seed)
    return GaussianCloud(
        positions=rng.uniform(-1, 1, (n, 3)),
        log_scales=rng.uniform(np.log(0.01), np.log(0.05), (n, 3)),
        rotations=rng.standard_normal((n, 4)),
        opacity_logits=np.full(n, inverse_sigmoid(opacity)),
        colors=rng.uniform(-1, 1, (n, 3)),
    )


def run_densify(cloud, grads, extent=1.0, threshold=2e-4, floor=0.005, size_fraction=0.01, cap=10_000, seed=0):
    return densify_and_prune(
        cloud, grads, threshold, floor, extent, size_fraction, np.random.default_rng(seed), cap
    )


class TestAverageGradients:
    def test_zero_when_unobserved(self):
        cloud = make_cloud(3)
        cloud.grad_accum = np.array([1.0, 0.5, 0.2])
        cloud.obs_count = np.array([4, 0, 1])
        np.testing.assert_allclose(average_gradients(cloud), [0.25, 0.0, 0.2])


class TestDensifyAndPrune:
    def test_quiet_cloud_unchanged(self):
        cloud = make_cloud(5)
        before = cloud.positions.copy()
        stats, record = run_densify(cloud, np.zeros(5))
        assert (stats.clones, stats.splits, stats.pruned) == (0, 0, 0)
        assert cloud.count == 5
        np.testing.assert_array_equal(cloud.positions, before)
        assert record.parents.size == 0

    def test_small_hot_gaussian_cloned(self):
        cloud = make_cloud(4)
        grads = np.array([0.0, 1e-3, 0.0, 0.0])
        stats, _ = run_densify(cloud, grads, extent=10.0)  # size limit 0.1 > all scales
        assert stats.clones == 1 and stats.splits == 0
        assert cloud.count == 5
        np.testing.assert_array_equal(cloud.positions[4], cloud.positions[1])

    def test_large_hot_gaussian_split(self):
        cloud = make_cloud(4)
        cloud.log_scales[2] = np.log(0.5)  # above 1% of extent=1
        grads = np.array([0.0, 0.0, 1e-3, 0.0])
        parent_scale = np.exp(cloud.log_scales[2]).copy()
        parent_pos = cloud.positions[2].copy()
        parent_rot = cloud.rotations[2].copy()
        stats, record = run_densify(cloud, grads, extent=1.0, seed=11)
        assert stats.splits == 1 and stats.clones == 0
        assert cloud.count == 5  # 4 - 1 parent + 2 children
        children_scales = np.exp(cloud.log_scales[3:])
        np.testing.assert_allclose(
            children_scales, np.tile(parent_scale / SPLIT_SCALE_DIVISOR, (2, 1)), rtol=1e-12
        )
        # children positions follow the parent's density with the same seed
        rng = np.random.default_rng(11)
        z = rng.standard_normal((2, 3))
        R = rotation_matrices(parent_rot[None])[0]
        expected = parent_pos + (R @ (parent_scale * z).T).T
        np.testing.assert_allclose(cloud.positions[3:], expected, rtol=1e-10)
        np.testing.assert_array_equal(record.parents, [2, 2])

    def test_low_opacity_pruned(self):
        cloud = make_cloud(4)
        cloud.opacity_logits[1] = inverse_sigmoid(0.001)
        stats, record = run_densify(cloud, np.zeros(4))
        assert stats.pruned == 1
        assert cloud.count == 3
        np.testing.assert_array_equal(record.keep_mask, [True, False, True, True])

    def test_cap_blocks_growth(self):
        cloud = make_cloud(4)
        grads = np.full(4, 1e-3)
        stats, _ = run_densify(cloud, grads, extent=10.0, cap=5)
        assert cloud.count <= 5

    def test_misaligned_grads_rejected(self):
        cloud = make_cloud(4)
        with pytest.raises(ValueError):
            run_densify(cloud, np.zeros(3))

    def test_aux_arrays_follow(self):
        cloud = make_cloud(4)
        cloud.grad_accum[:] = [1.0, 2.0, 3.0, 4.0]
        cloud.obs_count[:] = 7
        grads = np.array([0.0, 1e-3, 0.0, 0.0])
        run_densify(cloud, grads, extent=10.0)
        assert cloud.grad_accum.shape == (5,)
        assert cloud.grad_accum[4] == 0.0  # fresh statistics for the clone
        cloud.validate()


class TestMutationRecord:
    def test_remap_inherit(self):
        record = MutationRecord(
            keep_mask=np.array([True, False, True, True]),
            parents=np.array([0, 2]),
        )
        values = np.array([10.0, 20.0, 30.0, 40.0])
        np.testing.assert_array_equal(record.remap(values), [10.0, 30.0, 40.0, 10.0, 30.0])
        np.testing.assert_array_equal(
            record.remap(values, inherit=False), [10.0, 30.0, 40.0, 0.0, 0.0]
        )

    def test_remap_2d(self):
        record = MutationRecord(keep_mask=np.array([True, True]), parents=np.array([1]))
        values = np.array([[1.0, 2.0], [3.0, 4.0]])
        np.testing.assert_array_equal(record.remap(values), [[1, 2], [3, 4], [3, 4]])


class TestSampleSplitChildren:
    def test_deterministic_given_seed(self):
        cloud = make_cloud(5, seed=3)
        a = sample_split_children(cloud, np.array([1, 3]), np.random.default_rng(9))
        b = sample_split_children(cloud, np.array([1, 3]), np.random.default_rng(9))
        np.testing.assert_array_equal(a["positions"], b["positions"])

    def test_children_near_parent(self):
        cloud = make_cloud(5, seed=4)
        out = sample_split_children(cloud, np.array([0]), np.random.default_rng(1))
        parent_scale = np.exp(cloud.log_scales[0]).max()
        dist = np.linalg.norm(out["positions"] - cloud.positions[0], axis=1)
        assert np.all(dist < 6.0 * parent_scale)
