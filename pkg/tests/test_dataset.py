import numpy as np
import pytest

from s2wmamba.dataset import (
    FormatError,
    SceneSpec,
    Triplet,
    blur_decimate,
    degrade_pan,
    gaussian_kernel,
    generate_scenes,
    load_split,
    read_image,
    read_triplet,
    wald_degrade,
    write_image,
    write_pgm,
    write_triplet,
)


class TestGenerateScenes:
    def test_deterministic(self):
        spec = SceneSpec(c=4, size=32, count=3, seed=9)
        a = generate_scenes(spec)
        b = generate_scenes(spec)
        for x, y in zip(a, b):
            assert np.array_equal(x, y)

    def test_shapes_and_range(self):
        scenes = generate_scenes(SceneSpec(c=8, size=64, count=64, seed=7))
        assert len(scenes) == 64
        for s in scenes[:4]:
            assert s.shape == (8, 64, 64)
            assert s.min() >= 0.0 and s.max() <= 1.0

    def test_band_variance(self):
        for scene in generate_scenes(SceneSpec(c=8, size=32, count=8, seed=3)):
            var = scene.reshape(8, -1).var(axis=1)
            assert np.all(var > 1e-4)

    def test_contains_step_edges(self):
        for scene in generate_scenes(SceneSpec(c=4, size=32, count=4, seed=5)):
            dx = np.abs(np.diff(scene, axis=2)).max()
            dy = np.abs(np.diff(scene, axis=1)).max()
            assert max(dx, dy) > 0.05


class TestWaldDegrade:
    def test_constant_scene(self):
        gt = np.full((4, 16, 16), 0.42)
        t = wald_degrade(gt, 4)
        assert np.allclose(t.lrms, 0.42, atol=1e-12)
        assert np.allclose(t.pan, 0.42, atol=1e-12)

    def test_wv3_shapes(self):
        gt = np.random.default_rng(0).uniform(size=(8, 64, 64))
        t = wald_degrade(gt, 4)
        assert t.lrms.shape == (8, 16, 16)
        assert t.pan.shape == (1, 64, 64)
        assert t.gt.shape == (8, 64, 64)

    def test_kernel_normalized(self):
        for sigma in (0.5, 1.0, 2.0, 4.0):
            assert abs(gaussian_kernel(sigma).sum() - 1.0) < 1e-12

    def test_linear_in_gt(self):
        rng = np.random.default_rng(1)
        a = rng.uniform(size=(4, 16, 16))
        b = rng.uniform(size=(4, 16, 16))
        lhs = blur_decimate(2.0 * a + 0.5 * b, 4)
        rhs = 2.0 * blur_decimate(a, 4) + 0.5 * blur_decimate(b, 4)
        assert np.abs(lhs - rhs).max() < 1e-12

    def test_pan_is_weighted_average(self):
        gt = np.random.default_rng(2).uniform(size=(4, 8, 8))
        t = wald_degrade(gt, 2)
        assert np.allclose(t.pan[0], gt.mean(axis=0), atol=1e-14)
        w = np.array([1.0, 2.0, 3.0, 4.0])
        t2 = wald_degrade(gt, 2, pan_weights=w)
        assert np.allclose(t2.pan[0], np.tensordot(w / w.sum(), gt, axes=(0, 0)), atol=1e-14)

    def test_degrade_pan_matches_lrms_path(self):
        gt = np.random.default_rng(3).uniform(size=(2, 16, 16))
        t = wald_degrade(gt, 4)
        assert degrade_pan(t.pan, 4).shape == (1, 4, 4)

    def test_divisibility(self):
        with pytest.raises(FormatError):
            wald_degrade(np.ones((2, 10, 10)), 4)


class TestImageFiles:
    def test_roundtrip_bitwise(self, tmp_path):
        img = np.random.default_rng(4).uniform(size=(3, 8, 8)).astype(np.float32)
        path = tmp_path / "x.s2wt"
        write_image(path, img)
        back = read_image(path)
        assert np.array_equal(back, img)
        write_image(tmp_path / "y.s2wt", back)
        assert (tmp_path / "y.s2wt").read_bytes() == path.read_bytes()

    def test_file_size_arithmetic(self, tmp_path):
        img = np.zeros((8, 64, 64), dtype=np.float32)
        path = tmp_path / "z.s2wt"
        write_image(path, img)
        assert path.stat().st_size == 16 + 8 * 64 * 64 * 4

    def test_corrupted_magic(self, tmp_path):
        path = tmp_path / "bad.s2wt"
        write_image(path, np.zeros((1, 2, 2), dtype=np.float32))
        raw = bytearray(path.read_bytes())
        raw[:4] = b"NOPE"
        path.write_bytes(bytes(raw))
        with pytest.raises(FormatError):
            read_image(path)

    def test_truncated_payload(self, tmp_path):
        path = tmp_path / "trunc.s2wt"
        write_image(path, np.zeros((1, 4, 4), dtype=np.float32))
        path.write_bytes(path.read_bytes()[:-8])
        with pytest.raises(FormatError):
            read_image(path)

    def test_triplet_split_io(self, tmp_path):
        gt = np.random.default_rng(5).uniform(size=(4, 16, 16))
        t = wald_degrade(gt, 4)
        write_triplet(tmp_path, "train", 0, t)
        write_triplet(tmp_path, "train", 1, t)
        back = read_triplet(tmp_path, "train", 0)
        assert np.allclose(back.gt, t.gt.astype(np.float32), atol=0)
        assert len(load_split(tmp_path, "train")) == 2
        with pytest.raises(FormatError):
            load_split(tmp_path, "val")

    def test_pgm_preview(self, tmp_path):
        band = np.random.default_rng(6).uniform(size=(5, 7))
        path = tmp_path / "p.pgm"
        write_pgm(path, band)
        raw = path.read_bytes()
        assert raw.startswith(b"P5\n7 5\n255\n")
        assert len(raw) == len(b"P5\n7 5\n255\n") + 35
