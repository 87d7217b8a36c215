"""Render one synthetic world from three viewpoints.

Builds a procedural ground texture (value noise plus roads), lays a
reference tile grid over it, and renders the three views the package
revolves around: an aerial tile, a street-view panorama at a sampled
location, and the ground-truth top-down crop around that camera.
Outputs land in demos/out/01/.
"""

from pathlib import Path

from crossview import grid as gridlab
from crossview import worldgen
from crossview.images import save_png

OUT = Path(__file__).parent / "out" / "01"


def main():
    extent = 600.0
    world = worldgen.make_world(seed=7, extent=extent, texel_res=0.5)
    tile_grid = gridlab.build_grid(
        gridlab.Rect(0, 0, extent, extent), tile_size=100.0, overlap=0.125
    )
    print(f"world {extent:.0f} m, {tile_grid.rows}x{tile_grid.cols} reference tiles")

    x, y = 295.0, 310.0
    tile = gridlab.best_match(tile_grid, x, y)
    rec = gridlab.decentrality(tile, x, y, tile_grid.stride)
    print(
        f"camera at ({x:.0f}, {y:.0f}) -> tile {tile.id} "
        f"offset ({rec.dx:+.1f}, {rec.dy:+.1f}) m, d_norm {rec.d_norm:.2f} ({rec.subset})"
    )

    aerial = worldgen.render_aerial(world, tile, out_px=128, tile_size=100.0)
    pano = worldgen.render_pano(world, x, y, h=2.0, width=1024, height=512)
    top_down = worldgen.ground_truth_bev(world, x, y, size=128, ground_res=0.25)

    save_png(OUT / "aerial_tile.png", aerial)
    save_png(OUT / "panorama.png", pano.data)
    save_png(OUT / "ground_truth_bev.png", top_down)
    print(f"wrote 3 images to {OUT}")


if __name__ == "__main__":
    main()
