import math

import numpy as np
import pytest

from crossview import geometry as geo
from crossview import worldgen


class TestGroundToSphere:
    def test_45_degrees_north(self):
        c = geo.ground_to_sphere(0.0, 3.0, 3.0)
        assert float(c.azimuth) == pytest.approx(0.0)
        assert float(c.elevation) == pytest.approx(-math.pi / 4)

    def test_due_east(self):
        c = geo.ground_to_sphere(5.0, 0.0, 5.0)
        assert float(c.azimuth) == pytest.approx(math.pi / 2)
        assert float(c.elevation) == pytest.approx(-math.pi / 4)

    def test_due_south_wraps_to_minus_pi(self):
        c = geo.ground_to_sphere(0.0, -1.0, 1e-6)
        assert float(c.azimuth) == pytest.approx(-math.pi)
        assert float(c.elevation) == pytest.approx(0.0, abs=1e-5)
        assert float(c.elevation) < 0

    def test_origin_rejected(self):
        with pytest.raises(ValueError):
            geo.ground_to_sphere(0.0, 0.0, 2.0)

    def test_bad_height(self):
        with pytest.raises(ValueError):
            geo.ground_to_sphere(1.0, 1.0, 0.0)


class TestPixelMapping:
    def test_reference_point(self):
        u, v = geo.sphere_to_pixel(
            geo.SphericalCoord(0.0, -math.pi / 4), 2048, 1024
        )
        assert float(u) == pytest.approx(1024.0)
        assert float(v) == pytest.approx(768.0)

    def test_seam_and_zenith(self):
        u, _ = geo.sphere_to_pixel(geo.SphericalCoord(-math.pi, 0.0), 2048, 1024)
        assert float(u) == pytest.approx(0.0)
        _, v = geo.sphere_to_pixel(geo.SphericalCoord(0.0, math.pi / 2), 2048, 1024)
        assert float(v) == pytest.approx(0.0)

    def test_round_trip_recovers_ground_points(self):
        rng = np.random.default_rng(0)
        h = 2.0
        r = rng.uniform(0.5, 100.0, size=500)
        ang = rng.uniform(-np.pi, np.pi, size=500)
        x, y = r * np.sin(ang), r * np.cos(ang)
        c = geo.ground_to_sphere(x, y, h)
        u, v = geo.sphere_to_pixel(c, 2048, 1024)
        c2 = geo.pixel_to_sphere(u, v, 2048, 1024)
        x2, y2 = geo.sphere_to_ground(c2, h)
        np.testing.assert_allclose(x2, x, atol=1e-4)
        np.testing.assert_allclose(y2, y, atol=1e-4)


class TestBilinearSample:
    def make_img(self, seed=0, h=8):
        rng = np.random.default_rng(seed)
        return geo.EquirectImage(rng.random((h, 2 * h, 1)))

    def test_integer_coords_exact(self):
        img = self.make_img()
        val = geo.bilinear_sample(img, 5.0, 3.0)
        assert val[0] == pytest.approx(img.data[3, 5, 0])

    def test_wraps_across_seam(self):
        img = self.make_img()
        w = img.width
        val = geo.bilinear_sample(img, w - 0.5, 2.0)
        expected = 0.5 * (img.data[2, w - 1, 0] + img.data[2, 0, 0])
        assert val[0] == pytest.approx(expected, abs=1e-6)

    def test_constant_image_constant(self):
        img = geo.EquirectImage(np.full((4, 8, 1), 0.3))
        rng = np.random.default_rng(1)
        u = rng.uniform(-10, 20, size=50)
        v = rng.uniform(-2, 10, size=50)
        vals = geo.bilinear_sample(img, u, v)
        np.testing.assert_allclose(vals, 0.3, atol=1e-6)


class TestPanoToBev:
    def test_center_pixel_masked_for_odd_size(self):
        img = geo.EquirectImage(np.full((16, 32, 1), 0.5))
        bev = geo.pano_to_bev(img, h=2.0, size=9, ground_res=0.5)
        assert not bev.valid_mask[4, 4]
        assert bev.valid_mask.sum() == 9 * 9 - 1

    def test_even_size_all_valid(self):
        img = geo.EquirectImage(np.full((16, 32, 1), 0.5))
        bev = geo.pano_to_bev(img, h=2.0, size=8, ground_res=0.5)
        assert bev.valid_mask.all()

    def test_valid_fraction_pure_function_of_size(self):
        img_a = geo.EquirectImage(np.random.default_rng(2).random((16, 32, 1)))
        img_b = geo.EquirectImage(np.random.default_rng(3).random((64, 128, 1)))
        for size in (7, 8):
            m_a = geo.pano_to_bev(img_a, 1.0, size, 0.3).valid_mask
            m_b = geo.pano_to_bev(img_b, 5.0, size, 2.0).valid_mask
            assert m_a.sum() == m_b.sum()

    def test_scale_invariance_in_h_and_res(self):
        img = geo.EquirectImage(np.random.default_rng(4).random((32, 64, 1)))
        a = geo.pano_to_bev(img, h=2.0, size=16, ground_res=0.5)
        b = geo.pano_to_bev(img, h=4.0, size=16, ground_res=1.0)
        np.testing.assert_allclose(a.data, b.data, atol=1e-6)

    def test_rotationally_symmetric_pano_gives_symmetric_bev(self):
        # columns all equal -> BEV depends only on radius
        col = np.linspace(0.1, 0.9, 32)[:, None]
        img = geo.EquirectImage(np.repeat(col, 64, axis=1)[:, :, None])
        bev = geo.pano_to_bev(img, h=2.0, size=16, ground_res=0.5)
        d = bev.data[:, :, 0]
        np.testing.assert_allclose(d, d[::-1, :], atol=1e-6)
        np.testing.assert_allclose(d, d[:, ::-1], atol=1e-6)
        np.testing.assert_allclose(d, d.T, atol=1e-6)

    def test_north_alignment_bright_column_points_up(self):
        h, w = 64, 128
        data = np.zeros((h, w, 1))
        data[:, w // 2, 0] = 1.0  # bright ray due North
        img = geo.EquirectImage(data)
        bev = geo.pano_to_bev(img, h=2.0, size=33, ground_res=0.5)
        top = bev.data[: 16, 16, 0]  # column through center, above center
        bottom = bev.data[17:, 16, 0]
        assert top.mean() > 0.2
        assert bottom.mean() < 1e-3

    def test_bad_args(self):
        img = geo.EquirectImage(np.zeros((8, 16, 1)))
        for kwargs in (
            dict(h=0.0, size=8, ground_res=0.5),
            dict(h=2.0, size=0, ground_res=0.5),
            dict(h=2.0, size=8, ground_res=0.0),
        ):
            with pytest.raises(ValueError):
                geo.pano_to_bev(img, **kwargs)


class TestBevRoundTrip:
    def checker_world(self, extent=120.0, square=8.0, res=0.25):
        w = worldgen.make_world(seed=0, extent=extent, texel_res=res)
        n = w.texture.shape[0]
        xc = (np.arange(n) + 0.5) * res
        yc = extent - (np.arange(n) + 0.5) * res
        gx, gy = np.meshgrid(xc, yc)
        w.texture = ((np.floor(gx / square) + np.floor(gy / square)) % 2).astype(float)
        return w

    def test_recovers_checkerboard_ground(self):
        world = self.checker_world()
        h = 2.0
        cx = cy = 60.0
        pano = worldgen.render_pano(world, cx, cy, h, width=2048, height=1024)
        bev = geo.pano_to_bev(pano, h=h, size=128, ground_res=0.25)
        gt = worldgen.ground_truth_bev(world, cx, cy, size=128, ground_res=0.25)

        i, j = np.meshgrid(np.arange(128), np.arange(128), indexing="ij")
        dist = np.hypot((j - 63.5) * 0.25, (63.5 - i) * 0.25)
        sel = bev.valid_mask & (dist < 8 * h)
        mae = np.abs(bev.data[:, :, 0][sel] - gt[:, :, 0][sel]).mean()
        assert mae < 0.05


class TestEquirectInvariants:
    def test_rejects_non_2to1(self):
        with pytest.raises(ValueError):
            geo.EquirectImage(np.zeros((10, 30, 1)))

    def test_rejects_out_of_range(self):
        with pytest.raises(ValueError):
            geo.EquirectImage(np.full((4, 8, 1), 1.5))
