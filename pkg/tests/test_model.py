import numpy as np
import pytest

from crossview import counters, model
from crossview import tensor as tl
from crossview.errors import BadMagicError, BadVersionError, TruncatedFileError
from crossview.losses import LossWeights


def cfg(**kw):
    base = dict(
        epochs=1,
        batch_size=8,
        learning_rate=1e-3,
        seed=0,
        weights=LossWeights(0.1, 0.1, 0.05, temperature=0.05),
        match_temp=0.05,
    )
    base.update(kw)
    return model.TrainConfig(**base)


class TestEncode:
    def test_zero_weights_zero_outputs(self):
        params = model.EncoderParams.initialize(seed=0)
        for k in params.kernels:
            k.data[:] = 0
        imgs = np.random.default_rng(0).random((2, 16, 16, 1)).astype(np.float32)
        fmap, f = model.encode(None, params, imgs)
        assert np.all(fmap.data == 0)
        assert np.all(f.data == 0)  # zero rows stay zero under the eps guard

    def test_identical_images_identical_outputs(self):
        params = model.EncoderParams.initialize(seed=1)
        img = np.random.default_rng(1).random((1, 16, 32, 1)).astype(np.float32)
        pair = np.concatenate([img, img])
        fmap, f = model.encode(None, params, pair)
        assert np.array_equal(fmap.data[0], fmap.data[1])
        assert np.array_equal(f.data[0], f.data[1])

    def test_unit_norm_embeddings(self):
        params = model.EncoderParams.initialize(seed=2)
        imgs = np.random.default_rng(2).random((5, 16, 16, 1)).astype(np.float32)
        _, f = model.encode(None, params, imgs)
        norms = np.linalg.norm(f.data.astype(np.float64), axis=1)
        np.testing.assert_allclose(norms, 1.0, atol=1e-5)

    def test_weight_sharing_across_roles(self):
        # "street", "bev" and "aerial" are the same function of the
        # same parameters; only inputs differ
        params = model.EncoderParams.initialize(seed=3)
        img = np.random.default_rng(3).random((1, 16, 16, 1)).astype(np.float32)
        outs = [model.encode(None, params, img)[1].data for _ in range(3)]
        assert np.array_equal(outs[0], outs[1])
        assert np.array_equal(outs[1], outs[2])

    def test_indivisible_dims_rejected(self):
        params = model.EncoderParams.initialize(seed=0)
        with pytest.raises(ValueError):
            model.encode(None, params, np.zeros((1, 12, 16, 1)))

    def test_spatial_reduction_is_eight(self):
        params = model.EncoderParams.initialize(seed=4)
        fmap, _ = model.encode(None, params, np.zeros((1, 64, 128, 1), np.float32))
        assert fmap.shape == (1, 8, 16, 32)


class TestPositionPrior:
    def test_tile_center_maps_to_map_center(self):
        p = model.position_prior(0.0, 0.0, 100.0, 8, 8)
        assert p.x == pytest.approx(3.5)
        assert p.y == pytest.approx(3.5)

    def test_north_east_offset_moves_up_right(self):
        p = model.position_prior(25.0, 25.0, 100.0, 8, 8)
        assert p.x == pytest.approx(5.5)
        assert p.y == pytest.approx(1.5)

    def test_clipped_to_regressable_hull(self):
        p = model.position_prior(-50.0, 50.0, 100.0, 8, 8)
        assert p.x == 0.0
        assert p.y == 0.0


class TestTrain:
    def test_zero_learning_rate_keeps_params_bit_identical(self, toy_dataset):
        c = cfg(learning_rate=0.0, max_steps=1)
        init = model.EncoderParams.initialize(c.seed, channels=c.channels)
        before = {k: t.data.copy() for k, t in init.named().items()}
        ck = model.train(toy_dataset, c)
        for name, t in ck.encoder().named().items():
            assert np.array_equal(t.data, before[name])

    def test_fixed_seed_identical_trace(self, toy_dataset):
        a = model.train(toy_dataset, cfg(max_steps=5))
        b = model.train(toy_dataset, cfg(max_steps=5))
        assert a.loss_trace == b.loss_trace

    def test_insufficient_data_rejected(self, toy_dataset):
        with pytest.raises(ValueError):
            model.train(toy_dataset, cfg(batch_size=4096))

    def test_batch_size_floor(self):
        with pytest.raises(ValueError):
            cfg(batch_size=1)

    def test_baseline_skips_bev_entirely(self, toy_dataset):
        counters.reset()
        model.train(toy_dataset, cfg(weights=LossWeights(0, 0, 0), max_steps=2))
        assert counters.get("pano_to_bev") == 0
        assert counters.get("pcm_loss") == 0

    def test_smoothed_loss_decreases_over_200_steps(self, toy_dataset):
        ck = model.train(toy_dataset, cfg(epochs=40, max_steps=200))
        losses = [row["total"] for row in ck.loss_trace]
        assert len(losses) == 200
        smooth = np.convolve(losses, np.ones(20) / 20, mode="valid")
        assert smooth[-1] < smooth[0]

    def test_learnable_temperature_moves(self, toy_dataset):
        c = cfg(learnable_temperature=True, max_steps=8)
        ck = model.train(toy_dataset, c)
        assert "log_temp" in ck.params
        assert ck.temperature() != pytest.approx(c.weights.temperature, abs=1e-9)


class TestCheckpointIO:
    def test_round_trip_bit_exact(self, toy_dataset, tmp_path):
        ck = model.train(toy_dataset, cfg(max_steps=3))
        p1 = tmp_path / "a.cvck"
        p2 = tmp_path / "b.cvck"
        model.save_checkpoint(ck, p1)
        loaded = model.load_checkpoint(p1)
        model.save_checkpoint(loaded, p2)
        assert p1.read_bytes() == p2.read_bytes()
        for name, t in ck.params.items():
            assert np.array_equal(t.data, loaded.params[name].data)
        assert loaded.config.to_dict() == ck.config.to_dict()
        assert loaded.loss_trace == ck.loss_trace

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "x.cvck"
        path.write_bytes(b"NOPE" + b"\x00" * 32)
        with pytest.raises(BadMagicError):
            model.load_checkpoint(path)

    def test_bad_version(self, tmp_path, toy_dataset):
        ck = model.train(toy_dataset, cfg(max_steps=1))
        path = tmp_path / "x.cvck"
        model.save_checkpoint(ck, path)
        raw = bytearray(path.read_bytes())
        raw[4] = 99
        path.write_bytes(bytes(raw))
        with pytest.raises(BadVersionError):
            model.load_checkpoint(path)

    def test_truncation(self, tmp_path, toy_dataset):
        ck = model.train(toy_dataset, cfg(max_steps=1))
        path = tmp_path / "x.cvck"
        model.save_checkpoint(ck, path)
        raw = path.read_bytes()
        path.write_bytes(raw[: len(raw) // 2])
        with pytest.raises(TruncatedFileError):
            model.load_checkpoint(path)


class TestEmbedAll:
    @pytest.fixture(scope="class")
    @staticmethod
    def ckpt(toy_dataset):
        return model.train(toy_dataset, cfg(max_steps=4))

    def test_reference_rows_unit_norm(self, ckpt, toy_dataset):
        db = model.embed_all(ckpt, toy_dataset, "references")
        norms = np.linalg.norm(db.matrix.astype(np.float64), axis=1)
        np.testing.assert_allclose(norms, 1.0, atol=1e-5)

    def test_rerun_bit_identical(self, ckpt, toy_dataset):
        a = model.embed_all(ckpt, toy_dataset, "queries", split="test")
        b = model.embed_all(ckpt, toy_dataset, "queries", split="test")
        assert np.array_equal(a.matrix, b.matrix)
        assert a.ids == b.ids

    def test_identical_inputs_identical_rows(self, ckpt, toy_dataset, tmp_path):
        # duplicate one tile image under another id: rows must agree
        import shutil

        from crossview.worldgen import DatasetManifest

        root = tmp_path / "dup"
        shutil.copytree(toy_dataset.root, root)
        m = DatasetManifest.load(root / "manifest.json")
        src = m.tiles[0]
        dst = m.tiles[1]
        shutil.copyfile(root / src.file, root / dst.file)
        db = model.embed_all(ckpt, m, "references")
        assert np.array_equal(db.matrix[0], db.matrix[1])

    def test_no_bev_and_no_position_loss_at_inference(self, ckpt, toy_dataset):
        counters.reset()
        model.embed_all(ckpt, toy_dataset, "references")
        model.embed_all(ckpt, toy_dataset, "queries", split="test")
        assert counters.get("pano_to_bev") == 0
        assert counters.get("pcm_loss") == 0

    def test_missing_file_reported(self, ckpt, toy_dataset, tmp_path):
        import shutil

        from crossview.worldgen import DatasetManifest

        root = tmp_path / "broken"
        shutil.copytree(toy_dataset.root, root)
        m = DatasetManifest.load(root / "manifest.json")
        (root / m.tiles[0].file).unlink()
        with pytest.raises(FileNotFoundError):
            model.embed_all(ckpt, m, "references")


class TestHeatmap:
    def test_shape_and_range(self, toy_dataset):
        ck = model.train(toy_dataset, cfg(max_steps=2))
        from crossview.images import load_png

        pano = load_png(toy_dataset.root / toy_dataset.panos[0].file)
        tile = load_png(toy_dataset.root / toy_dataset.tiles[0].file)
        heat = model.similarity_heatmap(ck, pano, tile)
        assert heat.shape == tile.shape[:2]
        assert heat.min() >= 0.0
        assert heat.max() <= 1.0
