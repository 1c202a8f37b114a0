"""Unit tests for dataset ingestion, the synthetic generator,
checkpoints, and feature-map export."""

import numpy as np
import pytest
from PIL import Image

from bregnext import autodiff as ad
from bregnext import builder as bd
from bregnext import data as dio

FER_HEADER = "emotion,pixels,Usage\n"


def fer_row(label, value, usage="Training"):
    pixels = " ".join([str(value)] * 2304)
    return f"{label},{pixels},{usage}\n"


def small_model(seed=0):
    from bregnext.mappings import MappingKind
    cfg = bd.NetworkConfig(
        name="tiny", stem_channels=8, stem_stride=1,
        stages=(bd.StageConfig(1, 8, False), bd.StageConfig(1, 16, True)),
        head="categorical", bypass=MappingKind.adaptive())
    return bd.build_network(cfg, seed=seed, input_hw=(8, 8))


class TestFer2013Loader:
    def test_zero_row_gives_zero_image(self, tmp_path):
        path = tmp_path / "fer.csv"
        path.write_text(FER_HEADER + fer_row(3, 0))
        ds = dio.load_fer2013(path)
        assert len(ds) == 1
        assert ds.images[0].shape == (64, 64, 3)
        np.testing.assert_array_equal(ds.images[0], 0.0)
        assert ds.class_labels[0] == 3

    def test_constant_row_scaling(self, tmp_path):
        path = tmp_path / "fer.csv"
        path.write_text(FER_HEADER + fer_row(0, 128, "PublicTest"))
        ds = dio.load_fer2013(path)
        np.testing.assert_allclose(ds.images[0], 128.0 / 255.0, atol=1e-6)
        assert ds.splits[0] == "validation"

    def test_grayscale_replicated_across_channels(self, tmp_path):
        rng = np.random.default_rng(0)
        pixels = " ".join(str(v) for v in rng.integers(0, 256, 2304))
        path = tmp_path / "fer.csv"
        path.write_text(FER_HEADER + f"1,{pixels},PrivateTest\n")
        ds = dio.load_fer2013(path)
        img = ds.images[0]
        np.testing.assert_array_equal(img[:, :, 0], img[:, :, 1])
        np.testing.assert_array_equal(img[:, :, 0], img[:, :, 2])

    def test_bad_pixel_count_rejected_with_row(self, tmp_path):
        path = tmp_path / "fer.csv"
        path.write_text(FER_HEADER + "0,1 2 3,Training\n")
        with pytest.raises(dio.DatasetError, match="row 2"):
            dio.load_fer2013(path)

    def test_bad_label_rejected(self, tmp_path):
        path = tmp_path / "fer.csv"
        path.write_text(FER_HEADER + fer_row(9, 0))
        with pytest.raises(dio.DatasetError):
            dio.load_fer2013(path)

    def test_bad_header_rejected(self, tmp_path):
        path = tmp_path / "fer.csv"
        path.write_text("a,b,c\n" + fer_row(0, 0))
        with pytest.raises(dio.DatasetError):
            dio.load_fer2013(path)

    def test_missing_file_rejected(self, tmp_path):
        with pytest.raises(dio.DatasetError):
            dio.load_fer2013(tmp_path / "nope.csv")

    def test_expected_histogram_bookkeeping(self):
        # Table-style totals for the canonical file, kept as module data.
        assert sum(dio.FER2013_EXPECTED_COUNTS.values()) == 35887
        assert set(dio.FER2013_EXPECTED_COUNTS) == set(
            dio.FER2013_CLASS_NAMES)

    def test_histogram_of_synthetic_file(self, tmp_path):
        path = tmp_path / "fer.csv"
        rows = [fer_row(0, 10), fer_row(0, 20), fer_row(6, 30)]
        path.write_text(FER_HEADER + "".join(rows))
        hist = dio.fer2013_table_histogram(dio.load_fer2013(path))
        assert hist["anger"] == 2 and hist["neutral"] == 1


class TestSynthBlobs:
    def test_deterministic_per_seed(self):
        a = dio.synth_blobs(4, 3, seed=7)
        b = dio.synth_blobs(4, 3, seed=7)
        np.testing.assert_array_equal(a.images, b.images)
        np.testing.assert_array_equal(a.va_labels, b.va_labels)

    def test_different_seeds_differ(self):
        a = dio.synth_blobs(4, 3, seed=7)
        b = dio.synth_blobs(4, 3, seed=8)
        assert not np.array_equal(a.images, b.images)

    def test_balanced_labels_and_shapes(self):
        ds = dio.synth_blobs(2, 8, seed=0)
        assert len(ds) == 16
        assert ds.images.shape == (16, 64, 64, 3)
        np.testing.assert_array_equal(np.bincount(ds.class_labels), [8, 8])
        assert ds.images.min() >= 0.0 and ds.images.max() <= 1.0

    def test_va_labels_in_unit_square(self):
        ds = dio.synth_blobs(8, 4, seed=1)
        assert np.abs(ds.va_labels).max() <= 1.0

    def test_nearest_centroid_separability(self):
        ds = dio.synth_blobs(4, 24, seed=3)
        flat = ds.images.reshape(len(ds), -1)
        centroids = np.stack([flat[ds.class_labels == k].mean(axis=0)
                              for k in range(4)])
        d = ((flat[:, None, :] - centroids[None]) ** 2).sum(axis=2)
        acc = np.mean(d.argmin(axis=1) == ds.class_labels)
        assert acc >= 0.8

    def test_class_count_limit(self):
        with pytest.raises(ValueError):
            dio.synth_blobs(9, 2, seed=0)


class TestCheckpoints:
    def test_round_trip_bitwise(self, tmp_path):
        model = small_model(seed=1)
        # make BN running stats non-trivial before saving
        x = np.random.default_rng(0).random((4, 8, 8, 3), dtype=np.float32)
        ad.evaluate([model.outputs], {model.input.name: x}, training=True)
        path = tmp_path / "m.bngx"
        dio.save_checkpoint(model, path)
        loaded = dio.load_checkpoint(path)
        for name in model.store.names():
            np.testing.assert_array_equal(loaded.store[name].value,
                                          model.store[name].value)
        a = ad.evaluate([model.outputs], {model.input.name: x},
                        training=False)[model.outputs.name]
        b = ad.evaluate([loaded.outputs], {loaded.input.name: x},
                        training=False)[loaded.outputs.name]
        np.testing.assert_array_equal(a, b)

    def test_truncated_file_rejected(self, tmp_path):
        model = small_model()
        path = tmp_path / "m.bngx"
        dio.save_checkpoint(model, path)
        raw = path.read_bytes()
        path.write_bytes(raw[:len(raw) - 64])
        with pytest.raises(dio.CheckpointError, match="truncated"):
            dio.load_checkpoint(path)

    def test_not_a_checkpoint_rejected(self, tmp_path):
        path = tmp_path / "m.bngx"
        path.write_bytes(b"definitely not a checkpoint")
        with pytest.raises(dio.CheckpointError):
            dio.load_checkpoint(path)

    def test_version_mismatch_rejected(self, tmp_path):
        model = small_model()
        path = tmp_path / "m.bngx"
        dio.save_checkpoint(model, path)
        raw = bytearray(path.read_bytes())
        raw[4] = 99  # corrupt the version field
        path.write_bytes(bytes(raw))
        with pytest.raises(dio.CheckpointError, match="version"):
            dio.load_checkpoint(path)

    def test_arch_mismatch_rejected(self, tmp_path):
        model = small_model()
        path = tmp_path / "m.bngx"
        dio.save_checkpoint(model, path)
        with pytest.raises(dio.CheckpointError, match="tiny"):
            dio.load_checkpoint(path, expected_arch="breg-next-50")

    def test_optimizer_state_round_trip(self, tmp_path):
        from bregnext.training import OptimizerState
        model = small_model()
        path = tmp_path / "m.bngx"
        state = OptimizerState(step=17)
        dio.save_checkpoint(model, path, optimizer_state=state)
        doc = dio.load_checkpoint_optimizer(path)
        assert doc["step"] == 17 and doc["base_lr"] == pytest.approx(1e-4)


class TestFeatureMaps:
    def test_empty_selector_list(self, tmp_path):
        model = small_model()
        out = dio.dump_feature_maps(model, np.zeros((8, 8, 3)), [], tmp_path)
        assert out == []

    def test_unknown_selector_rejected(self, tmp_path):
        model = small_model()
        with pytest.raises(KeyError):
            dio.dump_feature_maps(model, np.zeros((8, 8, 3)), ["s9u9"],
                                  tmp_path)

    def test_writes_png_grid(self, tmp_path):
        model = small_model(seed=2)
        img = np.random.default_rng(1).random((8, 8, 3)).astype(np.float32)
        # record BN stats so inference mode works
        batch = np.repeat(img[None], 4, axis=0)
        ad.evaluate([model.outputs], {model.input.name: batch},
                    training=True)
        written = dio.dump_feature_maps(model, img, ["s1u1", 2], tmp_path)
        assert len(written) == 2
        grid = np.asarray(Image.open(written[0]))
        # s1u1 emits 8x8 spatial maps with 8 channels -> 3x3 tile grid
        assert grid.shape == (24, 24)
        assert grid.dtype == np.uint8

    def test_constant_maps_render_midgray(self, tmp_path):
        model = small_model(seed=3)
        for name in model.store.names():
            if "conv" in name:
                model.store[name].value[...] = 0.0
        batch = np.zeros((4, 8, 8, 3), dtype=np.float32)
        ad.evaluate([model.outputs], {model.input.name: batch},
                    training=True)
        written = dio.dump_feature_maps(model, np.zeros((8, 8, 3)),
                                        ["s1u1"], tmp_path)
        grid = np.asarray(Image.open(written[0]))
        assert (grid == 128).all()


class TestChannelStats:
    def test_round_trip(self, tmp_path):
        ds = dio.synth_blobs(2, 2, seed=0)
        path = tmp_path / "stats.json"
        dio.save_channel_stats(ds, path)
        means = dio.load_channel_stats(path)
        np.testing.assert_allclose(means, ds.channel_means(), atol=1e-7)
