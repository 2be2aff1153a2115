import numpy as np
import pytest
import torch

from eyerefine import percept
from eyerefine.core import (
    InvalidWeight, MissingFile, MissingLayer, PERCEPT_LAYERS, ShapeError,
    UnknownLayer, UnsupportedFormat,
)

from conftest import render_toys


class TestTopology:
    def test_sixteen_layers(self):
        assert len(percept.LAYER_TABLE) == 16
        assert tuple(percept.LAYER_TABLE) == PERCEPT_LAYERS
        assert list(percept.LAYER_TABLE)[0] == "conv1_1"
        assert list(percept.LAYER_TABLE)[-1] == "conv5_4"

    def test_channel_counts(self):
        assert percept.layer_channels("conv1_1", 64) == 64
        assert percept.layer_channels("conv2_2", 64) == 128
        assert percept.layer_channels("conv3_2", 64) == 256
        assert percept.layer_channels("conv4_2", 64) == 512
        assert percept.layer_channels("conv5_4", 64) == 512
        assert percept.layer_channels("conv3_1", 8) == 32

    def test_scales_double_per_module(self):
        for m in range(1, 6):
            assert percept.layer_scale(f"conv{m}_1") == 2 ** (m - 1)

    def test_unknown_layer(self):
        with pytest.raises(UnknownLayer):
            percept.layer_channels("conv6_1")
        with pytest.raises(UnknownLayer):
            percept.layer_scale("relu1_1")

    def test_feature_map_shapes(self, small_percept):
        x = torch.rand(2, 3, 32, 48)
        maps = small_percept.feature_maps(x, ["conv1_2", "conv3_1", "conv4_2"])
        w = small_percept.width
        assert maps["conv1_2"].shape == (2, w, 32, 48)
        assert maps["conv3_1"].shape == (2, 4 * w, 8, 12)
        assert maps["conv4_2"].shape == (2, 8 * w, 4, 6)

    def test_feature_maps_empty_request(self, small_percept):
        assert small_percept.feature_maps(torch.rand(1, 3, 8, 8), []) == {}

    def test_frozen_parameters(self, small_percept):
        assert all(not p.requires_grad for p in small_percept.parameters())


class TestExtractFeatures:
    def test_deterministic_across_instances(self):
        img = np.random.default_rng(0).random((24, 24, 3)).astype(np.float32)
        a = percept.extract_features(percept.PerceptualNet(width=8, seed=5), img, ["conv2_1"])
        b = percept.extract_features(percept.PerceptualNet(width=8, seed=5), img, ["conv2_1"])
        assert np.array_equal(a["conv2_1"], b["conv2_1"])

    def test_seed_changes_weights(self):
        img = np.random.default_rng(0).random((16, 16, 3)).astype(np.float32)
        a = percept.extract_features(percept.PerceptualNet(width=8, seed=5), img, ["conv1_1"])
        b = percept.extract_features(percept.PerceptualNet(width=8, seed=6), img, ["conv1_1"])
        assert np.abs(a["conv1_1"] - b["conv1_1"]).max() > 1e-4

    def test_min_side_per_layer(self, small_percept):
        img = np.random.default_rng(1).random((8, 8, 3)).astype(np.float32)
        feats = percept.extract_features(small_percept, img, ["conv4_1"])
        assert feats["conv4_1"].shape[1:] == (1, 1)
        with pytest.raises(ShapeError):
            percept.extract_features(small_percept, img, ["conv5_1"])

    def test_flip_equivariance_conv1(self):
        # conv(flip(x), mirror(w)) == flip(conv(x, w)) holds exactly under
        # symmetric zero padding; ReLU commutes with the flip
        net = percept.PerceptualNet(width=8, seed=3)
        mirrored = percept.PerceptualNet(width=8, seed=3)
        with torch.no_grad():
            k = net.convs["conv1_1"].weight
            mirrored.convs["conv1_1"].weight.copy_(torch.flip(k, dims=[-1]))
        img = np.random.default_rng(2).random((20, 28, 3)).astype(np.float32)
        a = percept.extract_features(net, img, ["conv1_1"])["conv1_1"]
        b = percept.extract_features(mirrored, img[:, ::-1].copy(), ["conv1_1"])["conv1_1"]
        assert np.abs(a[:, :, 1:-1] - b[:, :, ::-1][:, :, 1:-1]).max() <= 1e-5


class TestInstancePool:
    def test_binary_mask_oracle(self):
        rng = np.random.default_rng(0)
        feat = rng.random((4, 6, 6)).astype(np.float32)
        hard = rng.integers(0, 3, (6, 6))
        masks = np.stack([(hard == 1), (hard == 2)], axis=-1).astype(np.float32)
        pooled = percept.instance_average_pool({"l": feat}, {"l": masks})["l"]
        for c, cls in enumerate([1, 2]):
            region = hard == cls
            if region.any():
                mean = feat[:, region].mean(axis=1)
                assert np.abs(pooled[:, region] - mean[:, None]).max() < 1e-6
        outside = hard == 0
        assert np.array_equal(pooled[:, outside], feat[:, outside])

    def test_idempotent_fractional(self):
        rng = np.random.default_rng(1)
        feat = rng.random((3, 8, 8)).astype(np.float32)
        masks = rng.random((8, 8, 2)).astype(np.float32) * 0.9
        once = percept.instance_average_pool({"l": feat}, {"l": masks})["l"]
        twice = percept.instance_average_pool({"l": once}, {"l": masks})["l"]
        assert np.abs(once - twice).max() <= 1e-6

    def test_layer_without_mask_passthrough(self):
        feat = np.random.default_rng(2).random((2, 4, 4)).astype(np.float32)
        out = percept.instance_average_pool({"l": feat}, {})
        assert np.array_equal(out["l"], feat)
        assert out["l"] is not feat

    def test_zero_mask_passthrough(self):
        feat = np.random.default_rng(3).random((2, 4, 4)).astype(np.float32)
        masks = np.zeros((4, 4, 2), dtype=np.float32)
        out = percept.instance_average_pool({"l": feat}, {"l": masks})["l"]
        assert np.array_equal(out, feat)

    def test_shape_mismatch(self):
        feat = np.zeros((2, 4, 4), dtype=np.float32)
        with pytest.raises(ShapeError):
            percept.instance_average_pool({"l": feat}, {"l": np.zeros((3, 4, 2))})


class TestWeightIO:
    def test_round_trip_bitwise(self, tmp_path, small_percept):
        path = tmp_path / "net.weights"
        percept.save_weights(small_percept, path)
        loaded = percept.load_weights(path)
        assert loaded.width == small_percept.width
        for (n1, p1), (n2, p2) in zip(
                small_percept.named_parameters(), loaded.named_parameters()):
            assert n1 == n2
            assert torch.equal(p1, p2)

    def test_loaded_features_match(self, tmp_path, small_percept):
        path = tmp_path / "net.weights"
        percept.save_weights(small_percept, path)
        loaded = percept.load_weights(path)
        img = np.random.default_rng(4).random((16, 16, 3)).astype(np.float32)
        a = percept.extract_features(small_percept, img, ["conv3_2"])
        b = percept.extract_features(loaded, img, ["conv3_2"])
        assert np.array_equal(a["conv3_2"], b["conv3_2"])

    def test_missing_file(self, tmp_path):
        with pytest.raises(MissingFile):
            percept.load_weights(tmp_path / "absent.weights")

    def test_corrupt_rank(self, tmp_path):
        import struct
        path = tmp_path / "bad.weights"
        name = b"conv1_1.weight"
        with open(path, "wb") as fh:
            fh.write(struct.pack("<I", len(name)) + name)
            fh.write(struct.pack("<I", 99))
        with pytest.raises(UnsupportedFormat):
            percept.load_weights(path)

    def test_truncated_payload(self, tmp_path):
        import struct
        path = tmp_path / "trunc.weights"
        name = b"conv1_1.weight"
        with open(path, "wb") as fh:
            fh.write(struct.pack("<I", len(name)) + name)
            fh.write(struct.pack("<I", 1))
            fh.write(struct.pack("<I", 100))
            fh.write(b"\x00" * 40)
        with pytest.raises(UnsupportedFormat):
            percept.load_weights(path)

    def test_incomplete_parameter_set(self, tmp_path):
        path = tmp_path / "partial.weights"
        arr = np.zeros((4, 3, 3, 3), dtype="<f4")
        percept._write_records(
            [("conv1_1.weight", arr), ("conv1_1.bias", np.zeros(4, dtype="<f4"))], path)
        with pytest.raises(InvalidWeight):
            percept.load_weights(path)

    def test_first_layer_missing(self, tmp_path):
        path = tmp_path / "headless.weights"
        percept._write_records([("conv1_2.weight", np.zeros((4, 4, 3, 3), "<f4"))], path)
        with pytest.raises(InvalidWeight):
            percept.load_weights(path)

    def test_torchvision_conversion(self, tmp_path):
        width = 4
        shapes = percept._expected_shapes(width)
        state = {}
        rng = np.random.default_rng(7)
        for name, idx in percept.TORCHVISION_VGG19_INDEX.items():
            for kind in ("weight", "bias"):
                arr = rng.standard_normal(shapes[f"{name}.{kind}"]).astype(np.float32)
                state[f"features.{idx}.{kind}"] = torch.from_numpy(arr)
        out = tmp_path / "converted.weights"
        percept.convert_torchvision_vgg19(state, out)
        net = percept.load_weights(out)
        assert net.width == width
        got = net.convs["conv2_1"].weight.detach().numpy()
        ref = state[f"features.{percept.TORCHVISION_VGG19_INDEX['conv2_1']}.weight"].numpy()
        assert np.array_equal(got, ref)

    def test_torchvision_missing_key(self, tmp_path):
        with pytest.raises(InvalidWeight):
            percept.convert_torchvision_vgg19({}, tmp_path / "x.weights")


class TestDecoder:
    def test_default_taps(self):
        assert percept.DEFAULT_DECODER_TAPS == (
            "conv5_4", "conv4_4", "conv3_4", "conv2_2", "conv1_2")

    def test_taps_sorted_coarse_to_fine(self):
        net = percept.DecoderNet(taps=("conv1_2", "conv3_4", "conv5_4"), percept_width=8)
        assert net.taps == ("conv5_4", "conv3_4", "conv1_2")

    def test_zero_stack_decodes_to_half_gray(self):
        dec = percept.DecoderNet(width=8, percept_width=8)
        feats = {"conv5_4": torch.zeros(1, percept.layer_channels("conv5_4", 8), 2, 2)}
        with torch.no_grad():
            img = dec(feats)
        assert img.shape == (1, 3, 32, 32)
        assert torch.abs(img - 0.5).max() < 1e-6

    def test_missing_coarsest_tap(self):
        dec = percept.DecoderNet(width=8, percept_width=8)
        with pytest.raises(MissingLayer):
            dec({"conv1_2": torch.zeros(1, 8, 32, 32)})

    def test_reconstruction_training(self, small_percept):
        images = [s.image for s in render_toys(6, seed=31, size=32)]
        dec = percept.DecoderNet(width=16, percept_width=small_percept.width, seed=0)
        hist = percept.train_decoder(dec, small_percept, images, iters=150, seed=0)
        assert np.mean(hist[-20:]) < 0.7 * np.mean(hist[:20])
        feats = percept.extract_features(small_percept, images[0], dec.taps)
        recon = percept.decode_features(dec, feats)
        assert recon.shape == images[0].shape
        assert np.abs(recon - images[0]).mean() <= 0.15
