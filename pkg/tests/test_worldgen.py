import numpy as np
import pytest

from crossview import geometry as geo
from crossview import grid as gridlab
from crossview import worldgen
from crossview.images import load_png


def ncc(a, b):
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    a = a - a.mean()
    b = b - b.mean()
    return float((a * b).sum() / np.sqrt((a * a).sum() * (b * b).sum()))


class TestMakeWorld:
    def test_deterministic(self):
        a = worldgen.make_world(seed=7, extent=100.0, texel_res=0.5)
        b = worldgen.make_world(seed=7, extent=100.0, texel_res=0.5)
        assert np.array_equal(a.texture, b.texture)

    def test_seeds_differ(self):
        diffs = []
        for s in range(10):
            a = worldgen.make_world(seed=s, extent=80.0, texel_res=1.0)
            b = worldgen.make_world(seed=s + 100, extent=80.0, texel_res=1.0)
            diffs.append(np.abs(a.texture - b.texture).mean())
        assert min(diffs) > 0.01

    def test_values_in_unit_interval(self):
        w = worldgen.make_world(seed=1, extent=60.0, texel_res=0.5)
        assert w.texture.min() >= 0.0
        assert w.texture.max() <= 1.0

    def test_bad_args(self):
        with pytest.raises(ValueError):
            worldgen.make_world(seed=0, extent=-5.0)
        with pytest.raises(ValueError):
            worldgen.make_world(seed=0, extent=10.0, texel_res=0.0)


class TestRenderAerial:
    def grid(self, extent=200.0, t=40.0, o=0.5):
        return gridlab.build_grid(gridlab.Rect(0, 0, extent, extent), t, o)

    def test_constant_world_constant_tile(self):
        w = worldgen.make_world(seed=0, extent=200.0, texel_res=1.0)
        w.texture[:] = 0.4
        img = worldgen.render_aerial(w, self.grid().tile(0), 32, 40.0)
        np.testing.assert_allclose(img, 0.4, atol=1e-6)

    def test_identical_footprints_identical_images(self):
        w = worldgen.make_world(seed=2, extent=200.0, texel_res=0.5)
        g = self.grid()
        a = worldgen.render_aerial(w, g.tile(5), 32, 40.0)
        b = worldgen.render_aerial(w, g.tile(5), 32, 40.0)
        assert np.array_equal(a, b)

    def test_one_stride_shift_moves_content(self):
        # stride 20 m at 32 px over 40 m -> exactly 16 px of shift
        w = worldgen.make_world(seed=3, extent=200.0, texel_res=0.5)
        g = self.grid()
        left = worldgen.render_aerial(w, g.tile(0), 32, 40.0)
        right = worldgen.render_aerial(w, g.tile(1), 32, 40.0)
        assert ncc(left[:, 16:, 0], right[:, :16, 0]) > 0.99

    def test_tile_outside_world_rejected(self):
        w = worldgen.make_world(seed=0, extent=30.0, texel_res=1.0)
        bad = gridlab.Tile(id=0, row=0, col=0, cx=28.0, cy=15.0)
        with pytest.raises(ValueError):
            worldgen.render_aerial(w, bad, 16, 10.0)


class TestRenderPano:
    def test_nadir_row_samples_camera_footprint(self):
        # constant ground -> the rho->0 limit is exact
        w = worldgen.make_world(seed=4, extent=100.0, texel_res=0.5)
        w.texture[:] = 0.37
        pano = worldgen.render_pano(w, 50.0, 50.0, h=2.0, width=256, height=128)
        np.testing.assert_allclose(pano.data[-1, :, 0], 0.37, atol=1e-6)

    def test_ground_pixels_sample_exact_ray_intersections(self):
        w = worldgen.make_world(seed=4, extent=100.0, texel_res=0.5)
        x, y = 50.0, 50.0
        pano = worldgen.render_pano(w, x, y, h=2.0, width=256, height=128)
        rng = np.random.default_rng(0)
        for _ in range(20):
            u = int(rng.integers(0, 256))
            v = int(rng.integers(65, 128))  # strictly below horizon
            c = geo.pixel_to_sphere(u, v, 256, 128)
            gx, gy = geo.sphere_to_ground(c, 2.0)
            expected = float(w.sample(x + gx, y + gy))
            assert pano.data[v, u, 0] == pytest.approx(expected, abs=1e-6)

    def test_bright_road_due_north_hits_center_column(self):
        w = worldgen.make_world(seed=5, extent=100.0, texel_res=0.5)
        w.texture[:] = 0.0
        n = w.texture.shape[0]
        xc = (np.arange(n) + 0.5) * 0.5
        col_mask = np.abs(xc - 50.0) < 1.5
        yc = 100.0 - (np.arange(n) + 0.5) * 0.5
        row_mask = yc > 50.0
        w.texture[np.ix_(row_mask, col_mask)] = 1.0
        pano = worldgen.render_pano(w, 50.0, 45.0, h=2.0, width=256, height=128)
        ground = pano.data[70:, :, 0]  # well below horizon
        brightest = ground.mean(axis=0).argmax()
        assert abs(brightest - 128) <= 1

    def test_sky_above_horizon(self):
        w = worldgen.make_world(seed=6, extent=60.0, texel_res=0.5)
        pano = worldgen.render_pano(w, 30.0, 30.0, h=2.0, width=128, height=64)
        sky = pano.data[: 32, :, 0]
        assert sky.std() < 0.2
        assert sky.min() >= worldgen.SKY_HORIZON - 1e-6

    def test_location_outside_world_rejected(self):
        w = worldgen.make_world(seed=0, extent=50.0, texel_res=1.0)
        with pytest.raises(ValueError):
            worldgen.render_pano(w, 60.0, 10.0, h=2.0, width=64, height=32)

    def test_bev_round_trip_recovers_ground(self):
        w = worldgen.make_world(seed=8, extent=300.0, texel_res=0.5)
        h = 2.0
        pano = worldgen.render_pano(w, 150.0, 150.0, h, width=1024, height=512)
        bev = geo.pano_to_bev(pano, h=h, size=64, ground_res=0.5)
        gt = worldgen.ground_truth_bev(w, 150.0, 150.0, size=64, ground_res=0.5)
        sel = bev.valid_mask
        assert np.abs(bev.data[:, :, 0][sel] - gt[:, :, 0][sel]).mean() < 0.05


class TestCrossViewConsistency:
    def resample_aerial_window(self, tile_img, tile, tile_size, gx, gy):
        """Bilinear sample of an aerial tile image at world coordinates."""
        out_px = tile_img.shape[0]
        px = tile_size / out_px
        col = (gx - (tile.cx - tile_size / 2)) / px - 0.5
        row = ((tile.cy + tile_size / 2) - gy) / px - 0.5
        col = np.clip(col, 0, out_px - 1)
        row = np.clip(row, 0, out_px - 1)
        c0 = np.floor(col).astype(int)
        r0 = np.floor(row).astype(int)
        c1 = np.minimum(c0 + 1, out_px - 1)
        r1 = np.minimum(r0 + 1, out_px - 1)
        fc, fr = col - c0, row - r0
        d = tile_img[:, :, 0]
        top = d[r0, c0] * (1 - fc) + d[r0, c1] * fc
        bot = d[r1, c0] * (1 - fc) + d[r1, c1] * fc
        return top * (1 - fr) + bot * fr

    def test_bev_matches_aerial_subwindow(self):
        # same world, no noise: co-visible content must correlate > 0.95
        extent, t = 400.0, 100.0
        w = worldgen.make_world(seed=9, extent=extent, texel_res=0.5)
        g = gridlab.build_grid(gridlab.Rect(0, 0, extent, extent), t, 0.125)
        rng = np.random.default_rng(10)
        h, size, res = 2.0, 64, 0.5
        for _ in range(3):
            hb = g.hit_bounds()
            x = float(rng.uniform(hb.x0 + 20, hb.x0 + hb.width - 20))
            y = float(rng.uniform(hb.y0 + 20, hb.y0 + hb.height - 20))
            tile = gridlab.best_match(g, x, y)
            tile_img = worldgen.render_aerial(w, tile, 64, t)
            pano = worldgen.render_pano(w, x, y, h, width=1024, height=512)
            bev = geo.pano_to_bev(pano, h=h, size=size, ground_res=res)

            i, j = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
            gx = x + (j - size / 2 + 0.5) * res
            gy = y + (size / 2 - i - 0.5) * res
            dist = np.hypot(gx - x, gy - y)
            inside_tile = (np.abs(gx - tile.cx) <= t / 2) & (np.abs(gy - tile.cy) <= t / 2)
            sel = bev.valid_mask & inside_tile & (dist < 8 * h)
            window = self.resample_aerial_window(tile_img, tile, t, gx, gy)
            assert ncc(bev.data[:, :, 0][sel], window[sel]) > 0.95


class TestBuildDataset:
    def world_and_grid(self, extent=300.0, t=50.0, o=0.0):
        w = worldgen.make_world(seed=11, extent=extent, texel_res=1.0)
        g = gridlab.build_grid(gridlab.Rect(0, 0, extent, extent), t, o)
        return w, g

    def test_split_partitions(self):
        w, g = self.world_and_grid()
        m = worldgen.build_dataset(w, g, n_panos=200, seed=0, split_ratio=0.5)
        n_train = sum(1 for p in m.panos if p.split == "train")
        n_test = sum(1 for p in m.panos if p.split == "test")
        assert n_train + n_test == 200

    def test_deterministic_manifest(self):
        w, g = self.world_and_grid()
        a = worldgen.build_dataset(w, g, n_panos=50, seed=3)
        b = worldgen.build_dataset(w, g, n_panos=50, seed=3)
        assert a.to_dict() == b.to_dict()

    def test_subset_proportions_approach_ring_areas(self):
        w, g = self.world_and_grid()
        m = worldgen.build_dataset(w, g, n_panos=20000, seed=1)
        counts = {s: 0 for s in gridlab.SUBSETS}
        for p in m.panos:
            counts[p.subset] += 1
        for k, sub in enumerate(gridlab.SUBSETS, start=1):
            assert counts[sub] / 20000 == pytest.approx((2 * k - 1) / 16.0, abs=0.02)

    def test_every_pano_within_hit_area(self):
        w, g = self.world_and_grid(o=0.125)
        m = worldgen.build_dataset(w, g, n_panos=500, seed=2)
        assert all(p.d_norm <= 1.0 + 1e-9 for p in m.panos)

    def test_grid_outside_world_rejected(self):
        w = worldgen.make_world(seed=0, extent=100.0, texel_res=1.0)
        g = gridlab.build_grid(gridlab.Rect(0, 0, 200.0, 200.0), 50.0, 0.0)
        with pytest.raises(ValueError):
            worldgen.build_dataset(w, g, n_panos=10, seed=0)


class TestWriteDataset:
    def test_layout_and_reload(self, tmp_path):
        w = worldgen.make_world(seed=12, extent=120.0, texel_res=1.0)
        g = gridlab.build_grid(gridlab.Rect(0, 0, 120.0, 120.0), 60.0, 0.0)
        m = worldgen.build_dataset(
            w, g, n_panos=4, seed=0, pano_height_px=32, aerial_px=32
        )
        worldgen.write_dataset(w, m, tmp_path / "ds")
        loaded = worldgen.DatasetManifest.load(tmp_path / "ds" / "manifest.json")
        assert loaded.root == tmp_path / "ds"
        assert len(loaded.tiles) == 4
        assert len(loaded.panos) == 4
        img = load_png(tmp_path / "ds" / loaded.tiles[0].file)
        assert img.shape == (32, 32, 1)
        pano = load_png(tmp_path / "ds" / loaded.panos[0].file)
        assert pano.shape == (32, 64, 1)
        assert loaded.to_dict() == m.to_dict()

    def test_thread_count_does_not_change_pixels(self, tmp_path):
        w = worldgen.make_world(seed=13, extent=120.0, texel_res=1.0)
        g = gridlab.build_grid(gridlab.Rect(0, 0, 120.0, 120.0), 60.0, 0.0)
        m1 = worldgen.build_dataset(w, g, n_panos=3, seed=1, pano_height_px=16, aerial_px=16)
        m2 = worldgen.build_dataset(w, g, n_panos=3, seed=1, pano_height_px=16, aerial_px=16)
        worldgen.write_dataset(w, m1, tmp_path / "a", threads=1)
        worldgen.write_dataset(w, m2, tmp_path / "b", threads=4)
        for rel in [t.file for t in m1.tiles] + [p.file for p in m1.panos]:
            assert np.array_equal(load_png(tmp_path / "a" / rel), load_png(tmp_path / "b" / rel))
