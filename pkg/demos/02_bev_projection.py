"""Panorama -> bird's-eye view, checked against the true ground.

Renders a panorama of a checkerboard ground plane, projects it back to
a top-down view with the inverse perspective mapping, and reports the
mean absolute error against the actual checkerboard inside the
well-sampled disk (ground distance below 8x the camera height).
Outputs land in demos/out/02/.
"""

from pathlib import Path

import numpy as np

from crossview import geometry as geo
from crossview import worldgen
from crossview.images import save_png

OUT = Path(__file__).parent / "out" / "02"


def main():
    res, h, size, extent = 0.25, 2.0, 128, 120.0
    world = worldgen.make_world(seed=0, extent=extent, texel_res=res)
    n = world.texture.shape[0]
    xc = (np.arange(n) + 0.5) * res
    yc = extent - (np.arange(n) + 0.5) * res
    gx, gy = np.meshgrid(xc, yc)
    world.texture = ((np.floor(gx / 8.0) + np.floor(gy / 8.0)) % 2).astype(float)

    cx = cy = extent / 2
    pano = worldgen.render_pano(world, cx, cy, h, width=2048, height=1024)
    bev = geo.pano_to_bev(pano, h=h, size=size, ground_res=res)
    gt = worldgen.ground_truth_bev(world, cx, cy, size=size, ground_res=res)

    i, j = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
    dist = np.hypot((j - (size - 1) / 2) * res, ((size - 1) / 2 - i) * res)
    sel = bev.valid_mask & (dist < 8 * h)
    mae = np.abs(bev.data[:, :, 0][sel] - gt[:, :, 0][sel]).mean()
    print(f"BEV round-trip MAE over {sel.sum()} pixels within {8*h:.0f} m: {mae:.4f}")

    save_png(OUT / "panorama.png", pano.data)
    save_png(OUT / "bev_projected.png", bev.data)
    save_png(OUT / "bev_truth.png", gt)
    save_png(OUT / "abs_error.png", np.abs(bev.data - gt))
    print(f"wrote 4 images to {OUT}")


if __name__ == "__main__":
    main()
