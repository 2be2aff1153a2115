import os

import numpy as np
import pytest

from eyerefine import core
from eyerefine.core import (
    InvalidParams,
    InvalidWeight,
    MissingFile,
    MissingImage,
    ParseError,
    RefinerConfig,
    ShapeError,
    angular_degrees,
    config_with,
    derive_seed,
    load_config,
    make_rng,
    vector_to_yaw_pitch,
    yaw_pitch_to_vector,
)


class TestSeeds:
    def test_derive_seed_deterministic(self):
        assert derive_seed(7, "a", 1) == derive_seed(7, "a", 1)

    def test_derive_seed_tag_sensitivity(self):
        seen = {derive_seed(7), derive_seed(7, "a"), derive_seed(7, "b"),
                derive_seed(8, "a"), derive_seed(7, "a", 0)}
        assert len(seen) == 5

    def test_make_rng_reproducible(self):
        a = make_rng(3, "x").random(4)
        b = make_rng(3, "x").random(4)
        assert np.array_equal(a, b)


class TestGazeGeometry:
    def test_forward_reference_directions(self):
        assert np.allclose(yaw_pitch_to_vector(0.0, 0.0), [0, 0, 1])
        v = yaw_pitch_to_vector(np.pi / 2, 0.0)
        assert np.allclose(v, [1, 0, 0], atol=1e-12)
        v = yaw_pitch_to_vector(0.0, np.pi / 2)
        assert np.allclose(v, [0, 1, 0], atol=1e-12)

    def test_round_trip(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            yaw, pitch = rng.uniform(-1.0, 1.0, 2)
            v = yaw_pitch_to_vector(yaw, pitch)
            assert abs(np.linalg.norm(v) - 1.0) < 1e-12
            y2, p2 = vector_to_yaw_pitch(v)
            assert abs(y2 - yaw) < 1e-10 and abs(p2 - pitch) < 1e-10

    def test_angular_degrees(self):
        assert angular_degrees(yaw_pitch_to_vector(0, 0),
                               yaw_pitch_to_vector(0, 0)) < 1e-12
        d = angular_degrees([0, 0, 1], [1, 0, 0])
        assert abs(d - 90.0) < 1e-10


class TestValidation:
    def test_validate_image_shape(self):
        with pytest.raises(ShapeError):
            core.validate_image(np.zeros((8, 8), np.float32))

    def test_validate_image_min_side(self):
        with pytest.raises(ShapeError):
            core.validate_image(np.zeros((4, 64, 3), np.float32))

    def test_validate_image_range(self):
        bad = np.full((8, 8, 3), 1.5, np.float32)
        with pytest.raises(ShapeError):
            core.validate_image(bad)

    def test_validate_mask_classes(self):
        bad = np.full((8, 8), 7, np.uint8)
        with pytest.raises(ShapeError):
            core.validate_mask(bad)

    def test_validate_mask_pairing(self):
        img = np.zeros((8, 8, 3), np.float32)
        with pytest.raises(core.MaskMismatch):
            core.validate_mask(np.zeros((4, 4), np.uint8), img)


class TestImageIO:
    def test_png_round_trip_8bit(self, tmp_path):
        rng = np.random.default_rng(0)
        img = (rng.integers(0, 256, (16, 16, 3)) / 255.0).astype(np.float32)
        path = tmp_path / "a.png"
        core.save_image(img, path)
        back = core.load_image(path)
        assert np.abs(back - img).max() <= 1 / 255.0 + 1e-7

    def test_png_round_trip_16bit(self, tmp_path):
        rng = np.random.default_rng(1)
        img = rng.random((16, 16, 3)).astype(np.float32)
        path = tmp_path / "b.png"
        core.save_image(img, path, bit_depth=16)
        back = core.load_image(path)
        assert np.abs(back - img).max() <= 1 / 65535.0 + 1e-7

    def test_mask_round_trip(self, tmp_path):
        mask = np.random.default_rng(2).integers(0, 3, (16, 16)).astype(np.uint8)
        path = tmp_path / "m.png"
        core.save_mask(mask, path)
        assert np.array_equal(core.load_mask(path), mask)

    def test_load_missing(self, tmp_path):
        with pytest.raises(MissingImage):
            core.load_image(tmp_path / "nope.png")


class TestManifest:
    def test_round_trip(self, tmp_path):
        rows = [{"image_path": "a.png", "mask_path": "", "yaw_deg": "1.25",
                 "pitch_deg": "-3.5", "domain": "synthetic"}]
        path = tmp_path / "manifest.csv"
        core.write_manifest(path, rows)
        back = core.read_manifest(path)
        assert back[0]["yaw_deg"] == "1.25"
        assert back[0]["domain"] == "synthetic"

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(MissingFile):
            core.read_manifest(tmp_path / "none.csv")


class TestConfig:
    def test_defaults_follow_published_values(self):
        cfg = RefinerConfig()
        assert cfg.style_weight == 1e2
        assert cfg.reg_weight == 1e4
        assert cfg.content_weight == 1e2
        assert cfg.local_content_layer == "conv4_2"
        assert cfg.global_content_layer == "conv3_2"
        assert cfg.local_style_layers == (
            "conv1_1", "conv2_1", "conv3_1", "conv4_1", "conv5_1")
        assert cfg.global_style_layers == (
            "conv1_2", "conv2_2", "conv3_3", "conv4_3", "conv5_3")

    def test_style_layer_weights_uniform(self):
        cfg = RefinerConfig()
        w = cfg.style_layer_weights("local")
        assert len(w) == 5
        assert all(abs(v - 0.2) < 1e-12 for v in w.values())

    def test_negative_weight_rejected(self):
        with pytest.raises(InvalidWeight):
            RefinerConfig(style_weight=-1.0)

    def test_unknown_layer_rejected(self):
        with pytest.raises(core.UnknownLayer):
            RefinerConfig(local_content_layer="conv9_9")

    def test_config_file_round_trip(self, tmp_path):
        path = tmp_path / "c.cfg"
        path.write_text("eta = 5\ntrain_resolution=32\n# comment\n\n")
        cfg = load_config(path)
        assert cfg.style_weight == 5.0
        assert cfg.train_resolution == 32

    def test_config_unknown_key(self, tmp_path):
        path = tmp_path / "c.cfg"
        path.write_text("no_such_key = 1\n")
        with pytest.raises(ParseError):
            load_config(path)

    def test_config_missing_file(self, tmp_path):
        with pytest.raises(MissingFile):
            load_config(tmp_path / "absent.cfg")

    def test_config_with_override(self):
        cfg = config_with(RefinerConfig(), seed=9, train_resolution=32)
        assert cfg.seed == 9 and cfg.train_resolution == 32

    def test_content_layers_deduplicate(self):
        cfg = config_with(RefinerConfig(), global_content_layer="conv4_2")
        assert cfg.content_layers() == ("conv4_2",)
