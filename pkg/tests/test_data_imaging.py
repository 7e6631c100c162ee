"""Image IO, body masking, and augmentation tests."""

import numpy as np
import pytest

from cnct.data.imaging import (
    AugmentationConfig,
    apply_body_mask,
    augment_sample,
    find_body_region,
    horizontal_flip,
    load_image,
    rng_for_sample,
    save_image_png,
)
from cnct.errors import DataError


def disk_image(res=64, center=None, radius=None, level=0.5):
    if center is None:
        center = (res / 2, res / 2)
    if radius is None:
        radius = res * 0.3
    yy, xx = np.mgrid[0:res, 0:res].astype(np.float32)
    img = np.zeros((res, res), np.float32)
    img[(yy - center[0]) ** 2 + (xx - center[1]) ** 2 <= radius ** 2] = level
    return img


def disk_with_table(res=64):
    """Bright disk plus a detached bright bar near the bottom edge."""
    img = disk_image(res)
    img[int(0.92 * res):int(0.97 * res), int(0.2 * res):int(0.8 * res)] = 0.8
    return img


class TestImageIO:
    def test_png_roundtrip_exact_on_8bit_grid(self, tmp_path):
        rng = np.random.default_rng(0)
        img = np.round(rng.random((32, 32)) * 255) / 255.0
        path = tmp_path / "x.png"
        save_image_png(path, img.astype(np.float32))
        back = load_image(path)
        np.testing.assert_allclose(back, img, atol=1e-7)

    def test_sixteen_bit_png(self, tmp_path):
        from PIL import Image
        data = (np.arange(16, dtype=np.uint16).reshape(4, 4) * 4096)
        Image.fromarray(data).save(tmp_path / "x.png")
        img = load_image(tmp_path / "x.png")
        assert img.dtype == np.float32
        assert img.max() <= 1.0
        assert img[3, 3] == pytest.approx(15 * 4096 / 65535, abs=1e-6)

    def test_resize_on_load(self, tmp_path):
        img = disk_image(64)
        path = tmp_path / "d.png"
        save_image_png(path, img)
        small = load_image(path, resolution=(32, 32))
        assert small.shape == (32, 32)
        assert small.max() > 0.4

    def test_unreadable_file_raises(self, tmp_path):
        path = tmp_path / "junk.png"
        path.write_bytes(b"not a png at all")
        with pytest.raises(DataError, match="cannot read"):
            load_image(path)


class TestBodyMask:
    def test_table_removed_body_untouched(self):
        img = disk_with_table()
        body = disk_image() > 0
        masked = apply_body_mask(img)
        # every pixel outside the body region is exactly zero
        assert np.all(masked[~body] == 0.0)
        # every body pixel is bit-identical to the input
        np.testing.assert_array_equal(masked[body], img[body])

    def test_idempotent(self):
        img = disk_with_table()
        once = apply_body_mask(img)
        twice = apply_body_mask(once)
        np.testing.assert_array_equal(once, twice)

    def test_holes_belong_to_body(self):
        # a dark interior (lung) must survive masking as part of the body
        img = disk_image(64, level=0.6)
        img[28:36, 28:36] = 0.0  # hole
        mask, found = find_body_region(img)
        assert found
        assert mask[31, 31]  # the hole is filled
        masked = apply_body_mask(img)
        assert masked[31, 31] == 0.0  # value untouched (still dark)

    def test_empty_image_warns_and_passes_through(self):
        img = np.full((16, 16), 0.01, np.float32)
        with pytest.warns(UserWarning, match="no foreground"):
            out = apply_body_mask(img)
        np.testing.assert_array_equal(out, img)

    def test_largest_component_wins(self):
        img = np.zeros((32, 32), np.float32)
        img[2:6, 2:6] = 0.5      # small blob
        img[10:30, 10:30] = 0.5  # big blob
        mask, found = find_body_region(img)
        assert found
        assert mask[15, 15] and not mask[3, 3]

    def test_diagonal_pixels_are_connected(self):
        # 8-connectivity: a diagonal chain is one component
        img = np.zeros((8, 8), np.float32)
        for i in range(5):
            img[i, i] = 0.9
        img[6:8, 0:2] = 0.5  # separate 4-pixel blob
        mask, _ = find_body_region(img)
        assert mask[0, 0] and mask[4, 4]
        assert not mask[7, 0]


def identity_config():
    return AugmentationConfig(
        enabled=True, body_mask=False, crop_jitter=0.0, rotation_degrees=0.0,
        shear_degrees=0.0, hflip_prob=0.0, intensity_scale=(1.0, 1.0),
        intensity_shift=0.0)


class TestAugmentation:
    def test_identity_config_is_bitwise_identity(self):
        img = disk_image(48)
        out = augment_sample(img, identity_config(), np.random.default_rng(0))
        assert out is img or np.array_equal(out, img)
        np.testing.assert_array_equal(out, img)

    def test_disabled_is_identity_too(self):
        img = disk_image(48)
        out = augment_sample(img, AugmentationConfig.disabled(),
                             np.random.default_rng(5))
        np.testing.assert_array_equal(out, img)

    def test_double_flip_restores_input(self):
        img = disk_image(32, center=(10, 20))
        np.testing.assert_array_equal(horizontal_flip(horizontal_flip(img)), img)
        cfg = identity_config()
        cfg.hflip_prob = 1.0
        once = augment_sample(img, cfg, np.random.default_rng(0))
        twice = augment_sample(once, cfg, np.random.default_rng(1))
        assert not np.array_equal(once, img)
        np.testing.assert_array_equal(twice, img)

    def test_deterministic_for_fixed_stream(self):
        img = disk_image(48)
        cfg = AugmentationConfig()
        a = augment_sample(img, cfg, rng_for_sample(3, 1, 7))
        b = augment_sample(img, cfg, rng_for_sample(3, 1, 7))
        np.testing.assert_array_equal(a, b)
        c = augment_sample(img, cfg, rng_for_sample(3, 1, 8))
        assert not np.array_equal(a, c)

    def test_output_in_unit_range_and_same_shape(self):
        img = disk_image(48, level=0.9)
        cfg = AugmentationConfig(intensity_scale=(1.2, 1.4),
                                 intensity_shift=0.3)
        for i in range(5):
            out = augment_sample(img, cfg, rng_for_sample(0, 0, i))
            assert out.shape == img.shape
            assert out.dtype == np.float32
            assert out.min() >= 0.0 and out.max() <= 1.0

    def test_body_mask_removes_table_before_geometry(self):
        # with masking on, an image with a scanner table must augment to
        # exactly what the table-free image augments to: the mask erases
        # the artifact before any geometry runs
        cfg = AugmentationConfig(body_mask=True)
        with_table = augment_sample(disk_with_table(64), cfg,
                                    rng_for_sample(0, 0, 0))
        without = augment_sample(disk_image(64), cfg, rng_for_sample(0, 0, 0))
        np.testing.assert_array_equal(with_table, without)

    def test_rotation_moves_mass(self):
        img = disk_image(48, center=(12, 24))  # off-center disk
        cfg = identity_config()
        cfg.rotation_degrees = 25.0
        out = augment_sample(img, cfg, np.random.default_rng(11))
        assert not np.array_equal(out, img)
        # intensity is preserved approximately (no scale/shift configured)
        assert abs(float(out.sum()) - float(img.sum())) / float(img.sum()) < 0.25

    def test_crop_jitter_keeps_shape_and_content(self):
        img = disk_image(64)
        cfg = identity_config()
        cfg.crop_jitter = 0.1
        cfg.body_mask = True
        out = augment_sample(img, cfg, np.random.default_rng(2))
        assert out.shape == img.shape
        assert out.max() > 0.4  # body still visible

    def test_non_2d_input_rejected(self):
        with pytest.raises(DataError, match="h, w"):
            augment_sample(np.zeros((4, 4, 1), np.float32),
                           AugmentationConfig(), np.random.default_rng(0))

    def test_input_never_mutated(self):
        img = disk_image(48)
        ref = img.copy()
        augment_sample(img, AugmentationConfig(), rng_for_sample(1, 2, 3))
        np.testing.assert_array_equal(img, ref)


class TestSampleRng:
    def test_same_keys_same_stream(self):
        a = rng_for_sample(1, 2, 3).random(4)
        b = rng_for_sample(1, 2, 3).random(4)
        np.testing.assert_array_equal(a, b)

    def test_any_key_change_changes_stream(self):
        base = rng_for_sample(1, 2, 3).random(4)
        for key in [(2, 2, 3), (1, 3, 3), (1, 2, 4)]:
            assert not np.array_equal(base, rng_for_sample(*key).random(4))
