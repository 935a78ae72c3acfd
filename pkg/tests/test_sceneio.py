import numpy as np
import pytest

from splatlab.gaussians import SH_C0, GaussianCloud, inverse_sigmoid
from splatlab.metrics import psnr
from splatlab.rasterizer import render
from splatlab.sceneio import (
    SceneBundle,
    SceneFormatError,
    SceneSpec,
    build_initial_cloud,
    generate_synthetic_scene,
    inject_noise,
    load_image,
    load_ply,
    load_scene,
    quantize_image,
    resample_init,
    save_image,
    save_ply,
    write_scene,
)

SMALL_SPEC = SceneSpec(
    seed=3, object_count=2, gaussians_per_object=(15, 25), resolution=48, n_train=3, n_test=1
)


def random_cloud(n=20, seed=0, with_sh1=False):
    rng = np.random.default_rng(seed)
    return GaussianCloud(
        positions=rng.uniform(-2, 2, (n, 3)),
        log_scales=rng.uniform(-4, -1, (n, 3)),
        rotations=rng.standard_normal((n, 4)),
        opacity_logits=rng.uniform(-3, 3, n),
        colors=rng.uniform(-1.5, 1.5, (n, 3)),
        sh1=rng.uniform(-0.3, 0.3, (n, 9)) if with_sh1 else None,
    )


class TestPly:
    @pytest.mark.parametrize("with_sh1", [False, True])
    def test_roundtrip_bitwise_at_f32(self, tmp_path, with_sh1):
        cloud = random_cloud(100, seed=1, with_sh1=with_sh1)
        path = tmp_path / "cloud.ply"
        save_ply(cloud, path)
        loaded = load_ply(path)
        for name in ("positions", "log_scales", "rotations", "opacity_logits", "colors"):
            np.testing.assert_array_equal(
                getattr(loaded, name), getattr(cloud, name).astype(np.float32).astype(np.float64)
            )
        if with_sh1:
            np.testing.assert_array_equal(loaded.sh1, cloud.sh1.astype(np.float32).astype(np.float64))
        else:
            assert loaded.sh1 is None

    def test_second_save_identical_bytes(self, tmp_path):
        cloud = random_cloud(30, seed=2)
        p1, p2 = tmp_path / "a.ply", tmp_path / "b.ply"
        save_ply(cloud, p1)
        save_ply(load_ply(p1), p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_empty_cloud(self, tmp_path):
        path = tmp_path / "empty.ply"
        save_ply(GaussianCloud.empty(), path)
        loaded = load_ply(path)
        assert loaded.count == 0

    def test_missing_property_named(self, tmp_path):
        cloud = random_cloud(5, seed=3)
        path = tmp_path / "broken.ply"
        save_ply(cloud, path)
        raw = path.read_bytes()
        raw = raw.replace(b"property float rot_3\n", b"")
        path.write_bytes(raw)
        with pytest.raises(SceneFormatError, match="rot_3"):
            load_ply(path)

    def test_truncated_body(self, tmp_path):
        cloud = random_cloud(50, seed=4)
        path = tmp_path / "trunc.ply"
        save_ply(cloud, path)
        raw = path.read_bytes()
        path.write_bytes(raw[: len(raw) - 64])
        with pytest.raises(SceneFormatError, match="truncated"):
            load_ply(path)

    def test_not_a_ply(self, tmp_path):
        path = tmp_path / "nope.ply"
        path.write_bytes(b"hello world")
        with pytest.raises(SceneFormatError):
            load_ply(path)

    def test_property_order(self, tmp_path):
        path = tmp_path / "order.ply"
        save_ply(random_cloud(1, seed=5, with_sh1=True), path)
        header = path.read_bytes().split(b"end_header")[0].decode()
        names = [line.split()[-1] for line in header.splitlines() if line.startswith("property")]
        expected = (
            ["x", "y", "z", "nx", "ny", "nz", "f_dc_0", "f_dc_1", "f_dc_2"]
            + [f"f_rest_{i}" for i in range(9)]
            + ["opacity", "scale_0", "scale_1", "scale_2", "rot_0", "rot_1", "rot_2", "rot_3"]
        )
        assert names == expected


class TestImages:
    def test_png_roundtrip_quantization(self, tmp_path):
        rng = np.random.default_rng(6)
        img = rng.uniform(0, 1, (32, 40, 3))
        path = tmp_path / "img.png"
        save_image(img, path)
        loaded = load_image(path)
        np.testing.assert_array_equal(loaded, quantize_image(img))


class TestInitialCloud:
    def test_knn_scales_reflect_density(self):
        rng = np.random.default_rng(7)
        tight = rng.normal(0, 0.01, (50, 3))
        loose = rng.normal(0, 1.0, (50, 3)) + 10.0
        cloud = build_initial_cloud(np.concatenate([tight, loose]), np.full((100, 3), 0.5))
        tight_scale = np.exp(cloud.log_scales[:50]).mean()
        loose_scale = np.exp(cloud.log_scales[50:]).mean()
        assert tight_scale < loose_scale

    def test_initial_opacity(self):
        cloud = build_initial_cloud(np.zeros((2, 3)) + [[0, 0, 0], [1, 1, 1]], np.full((2, 3), 0.5))
        np.testing.assert_allclose(cloud.opacities, 0.1, rtol=1e-12)

    def test_color_coefficients_invert_palette(self):
        rgb = np.array([[0.25, 0.5, 0.75]])
        cloud = build_initial_cloud(np.zeros((1, 3)), rgb)
        np.testing.assert_allclose(0.5 + SH_C0 * cloud.colors, rgb, rtol=1e-12)

    def test_rejects_empty(self):
        with pytest.raises(ValueError):
            build_initial_cloud(np.zeros((0, 3)), np.zeros((0, 3)))


class TestInjectNoise:
    def test_zero_intensity_identity(self):
        cloud = random_cloud(10, seed=8)
        out = inject_noise(cloud, "scales", 0.0, seed=1)
        np.testing.assert_array_equal(out.log_scales, cloud.log_scales)
        np.testing.assert_array_equal(out.positions, cloud.positions)

    def test_increasing_intensity_increases_displacement(self):
        cloud = random_cloud(200, seed=9)
        sizes = []
        for k in (1.0, 2.0, 3.0):
            out = inject_noise(cloud, "coordinates", k, seed=5, extent=10.0)
            sizes.append(np.mean(np.abs(out.positions - cloud.positions)))
        assert sizes[0] < sizes[1] < sizes[2]

    def test_coordinate_noise_std_matches_unit(self):
        cloud = random_cloud(10_000, seed=10)
        extent = 8.0
        k = 2.0
        out = inject_noise(cloud, "coordinates", k, seed=6, extent=extent)
        std = np.std(out.positions - cloud.positions)
        assert std == pytest.approx(k * 0.01 * extent, rel=0.05)

    def test_scale_noise_std_matches_unit(self):
        cloud = random_cloud(10_000, seed=11)
        out = inject_noise(cloud, "scales", 1.0, seed=7)
        std = np.std(out.log_scales - cloud.log_scales)
        assert std == pytest.approx(np.log(2.0) / 2.0, rel=0.05)

    def test_disjoint_seeds_uncorrelated(self):
        cloud = random_cloud(10_000, seed=12)
        a = inject_noise(cloud, "coordinates", 1.0, seed=100, extent=5.0)
        b = inject_noise(cloud, "coordinates", 1.0, seed=101, extent=5.0)
        da = (a.positions - cloud.positions).reshape(-1)
        db = (b.positions - cloud.positions).reshape(-1)
        corr = np.corrcoef(da, db)[0, 1]
        assert abs(corr) < 0.05

    def test_negative_intensity_rejected(self):
        with pytest.raises(ValueError):
            inject_noise(random_cloud(3), "scales", -1.0, seed=0)

    def test_unknown_target_rejected(self):
        with pytest.raises(ValueError):
            inject_noise(random_cloud(3), "colors", 1.0, seed=0)

    def test_bundle_coordinate_noise(self):
        bundle, _ = generate_synthetic_scene(SMALL_SPEC)
        noisy = inject_noise(bundle, "coordinates", 1.0, seed=3)
        assert noisy.init_positions.shape == bundle.init_positions.shape
        assert not np.array_equal(noisy.init_positions, bundle.init_positions)
        with pytest.raises(ValueError):
            inject_noise(bundle, "scales", 1.0, seed=3)


class TestResampleInit:
    def test_factor_one_unchanged(self):
        pts = np.random.default_rng(13).uniform(-1, 1, (40, 3))
        np.testing.assert_array_equal(resample_init(pts, 1, seed=0, extent=5.0), pts)

    def test_count_multiplies(self):
        pts = np.random.default_rng(14).uniform(-1, 1, (40, 3))
        assert resample_init(pts, 3, seed=0, extent=5.0).shape == (120, 3)

    def test_jitter_bound(self):
        pts = np.random.default_rng(15).uniform(-1, 1, (5000, 3))
        extent = 5.0
        out = resample_init(pts, 3, seed=1, extent=extent)
        copies = out[5000:]
        sources = np.repeat(pts, 2, axis=0)  # copies follow repeat order
        dist = np.linalg.norm(copies - sources, axis=1)
        frac = np.mean(dist <= 3.0 * 0.005 * extent)
        assert frac >= 0.99

    def test_invalid_factor(self):
        with pytest.raises(ValueError):
            resample_init(np.zeros((3, 3)), 0, seed=0, extent=1.0)


class TestSyntheticScene:
    def test_deterministic(self):
        a, gta = generate_synthetic_scene(SMALL_SPEC)
        b, gtb = generate_synthetic_scene(SMALL_SPEC)
        np.testing.assert_array_equal(gta.positions, gtb.positions)
        np.testing.assert_array_equal(a.init_positions, b.init_positions)
        for cam in a.train_cameras:
            np.testing.assert_array_equal(a.images[cam.id], b.images[cam.id])

    def test_ground_truth_render_matches_targets_bitwise(self):
        bundle, gt = generate_synthetic_scene(SMALL_SPEC)
        for cam in bundle.train_cameras + bundle.test_cameras:
            image = render(gt, cam, bundle.background)
            np.testing.assert_array_equal(quantize_image(image.rgb), bundle.images[cam.id])
            assert psnr(quantize_image(image.rgb), bundle.images[cam.id]) == np.inf

    def test_camera_splits_disjoint_and_sized(self):
        bundle, _ = generate_synthetic_scene(SMALL_SPEC)
        assert len(bundle.train_cameras) == 3
        assert len(bundle.test_cameras) == 1
        train_ids = {c.id for c in bundle.train_cameras}
        test_ids = {c.id for c in bundle.test_cameras}
        assert not (train_ids & test_ids)

    def test_single_test_slot_rule(self):
        # an orbit of 9 slots with one held out: the test camera is slot 0
        spec = SceneSpec(seed=1, object_count=2, gaussians_per_object=(10, 15), resolution=32, n_train=8, n_test=1)
        bundle, _ = generate_synthetic_scene(spec)
        assert bundle.test_cameras[0].id == "cam00"

    def test_validation(self):
        with pytest.raises(ValueError):
            SceneSpec(n_train=1)
        with pytest.raises(ValueError):
            SceneSpec(n_test=0)
        with pytest.raises(ValueError):
            SceneSpec(layout="grid")

    def test_deep_cluster_has_lower_sampling_rate(self):
        from splatlab.cameras import sampling_rates

        bundle, gt = generate_synthetic_scene(SMALL_SPEC)
        cams = bundle.train_cameras
        rates = sampling_rates(gt.positions, cams)
        deep = gt.positions[:, 1] < -1.5  # cluster 0 sits far below the orbit
        assert deep.any() and (~deep).any()
        assert np.median(rates[deep]) < np.median(rates[~deep])


class TestSceneDirectory:
    def test_write_load_roundtrip(self, tmp_path):
        bundle, gt = generate_synthetic_scene(SMALL_SPEC)
        manifest = write_scene(bundle, tmp_path / "scene", gt_cloud=gt)
        loaded = load_scene(manifest)
        assert loaded.extent == pytest.approx(bundle.extent)
        assert [c.id for c in loaded.train_cameras] == [c.id for c in bundle.train_cameras]
        assert [c.id for c in loaded.test_cameras] == [c.id for c in bundle.test_cameras]
        for cam in bundle.train_cameras:
            np.testing.assert_array_equal(loaded.images[cam.id], bundle.images[cam.id])
        # init positions survive the f32 PLY storage
        np.testing.assert_allclose(loaded.init_positions, bundle.init_positions, atol=1e-6)

    def test_load_by_directory(self, tmp_path):
        bundle, _ = generate_synthetic_scene(SMALL_SPEC)
        write_scene(bundle, tmp_path / "scene")
        loaded = load_scene(tmp_path / "scene")
        assert loaded.extent == pytest.approx(bundle.extent)

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(SceneFormatError):
            load_scene(tmp_path / "missing" / "manifest.json")


class TestSceneBundleInvariants:
    def test_needs_train_camera(self):
        bundle, _ = generate_synthetic_scene(SMALL_SPEC)
        with pytest.raises(ValueError):
            SceneBundle(
                train_cameras=[],
                test_cameras=bundle.test_cameras,
                images=bundle.images,
                init_positions=bundle.init_positions,
                init_colors=bundle.init_colors,
                extent=bundle.extent,
            )

    def test_rejects_overlapping_ids(self):
        bundle, _ = generate_synthetic_scene(SMALL_SPEC)
        with pytest.raises(ValueError, match="overlap"):
            SceneBundle(
                train_cameras=bundle.train_cameras,
                test_cameras=bundle.train_cameras[:1],
                images=bundle.images,
                init_positions=bundle.init_positions,
                init_colors=bundle.init_colors,
                extent=bundle.extent,
            )
