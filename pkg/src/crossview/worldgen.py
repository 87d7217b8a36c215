"""Procedural flat-ground worlds and consistent cross-view renderings.

A ``World`` is a square patch of textured ground: multi-octave value
noise with a handful of bright road segments, stored on a texel lattice.
From one world we render mutually consistent views with geo-tags:

* aerial tiles (area-resampled top-down crops),
* street panoramas (equirectangular, North-aligned, flat-ground rays),
* ground-truth BEV crops (top-down window around a camera).

World frame: x meters East in [0, extent], y meters North in
[0, extent]; texture row 0 is the North edge, matching image layout.
Everything is deterministic given the seed.
"""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from crossview import grid as gridlab
from crossview.geometry import (
    EquirectImage,
    SphericalCoord,
    pixel_to_sphere,
    sphere_to_ground,
)
from crossview.images import save_png

__all__ = [
    "World",
    "PanoRecord",
    "ManifestPano",
    "ManifestTile",
    "DatasetManifest",
    "make_world",
    "render_aerial",
    "render_pano",
    "ground_truth_bev",
    "build_dataset",
    "write_dataset",
]

SKY_HORIZON = 0.55
SKY_ZENITH = 0.9


@dataclass
class World:
    seed: int
    extent: float
    texel_res: float
    texture: np.ndarray  # [n, n], row 0 = North edge, values in [0, 1]
    road_segments: list  # (x0, y0, x1, y1, width)

    def sample(self, x, y) -> np.ndarray:
        """Bilinear texture lookup at world coordinates, clamped at edges."""
        n = self.texture.shape[0]
        col = np.asarray(x, dtype=np.float64) / self.texel_res - 0.5
        row = (self.extent - np.asarray(y, dtype=np.float64)) / self.texel_res - 0.5
        col = np.clip(col, 0.0, n - 1.0)
        row = np.clip(row, 0.0, n - 1.0)
        c0 = np.floor(col).astype(np.int64)
        r0 = np.floor(row).astype(np.int64)
        c1 = np.minimum(c0 + 1, n - 1)
        r1 = np.minimum(r0 + 1, n - 1)
        fc = col - c0
        fr = row - r0
        t = self.texture
        top = t[r0, c0] * (1 - fc) + t[r0, c1] * fc
        bot = t[r1, c0] * (1 - fc) + t[r1, c1] * fc
        return top * (1 - fr) + bot * fr

    def contains(self, x: float, y: float) -> bool:
        return 0.0 <= x <= self.extent and 0.0 <= y <= self.extent


@dataclass
class PanoRecord:
    """A rendered street-view sample with its geo-tag."""

    id: int
    x: float
    y: float
    cam_height: float
    image: EquirectImage


def _smoothstep(t: np.ndarray) -> np.ndarray:
    return t * t * (3.0 - 2.0 * t)


def _value_noise(rng, n_tex: int, texel_res: float, cell_m: float) -> np.ndarray:
    """One octave of 2-D value noise sampled on the texel lattice."""
    extent = n_tex * texel_res
    n_lat = int(np.ceil(extent / cell_m)) + 2
    lattice = rng.random((n_lat, n_lat))
    pos = (np.arange(n_tex) + 0.5) * texel_res / cell_m
    i0 = np.floor(pos).astype(np.int64)
    f = _smoothstep(pos - i0)
    r0, c0 = i0[:, None], i0[None, :]
    fr, fc = f[:, None], f[None, :]
    top = lattice[r0, c0] * (1 - fc) + lattice[r0, c0 + 1] * fc
    bot = lattice[r0 + 1, c0] * (1 - fc) + lattice[r0 + 1, c0 + 1] * fc
    return top * (1 - fr) + bot * fr


def make_world(seed: int, extent: float, texel_res: float = 0.5) -> World:
    """Noise-plus-roads ground texture, deterministic per seed."""
    if extent <= 0:
        raise ValueError(f"extent must be positive, got {extent}")
    if texel_res <= 0:
        raise ValueError(f"texel_res must be positive, got {texel_res}")
    rng = np.random.default_rng(seed)
    n_tex = max(int(round(extent / texel_res)), 2)

    base = np.zeros((n_tex, n_tex))
    amp_total = 0.0
    for cell_m, amp in ((64.0, 1.0), (32.0, 0.55), (16.0, 0.3), (8.0, 0.15)):
        cell = min(cell_m, extent / 2.0)
        base += amp * _value_noise(rng, n_tex, texel_res, cell)
        amp_total += amp
    base /= amp_total
    lo, hi = base.min(), base.max()
    texture = 0.1 + 0.6 * (base - lo) / max(hi - lo, 1e-9)

    xc = (np.arange(n_tex) + 0.5) * texel_res
    yc = extent - (np.arange(n_tex) + 0.5) * texel_res
    gx, gy = np.meshgrid(xc, yc)  # gy rows run North -> South

    n_roads = max(3, int(extent / 250.0))
    segments = []
    for _ in range(n_roads):
        x0, y0, x1, y1 = rng.uniform(0.0, extent, size=4)
        width = rng.uniform(2.5, 5.0)
        brightness = rng.uniform(0.85, 1.0)
        segments.append((x0, y0, x1, y1, width))
        vx, vy = x1 - x0, y1 - y0
        norm2 = vx * vx + vy * vy
        if norm2 == 0:
            continue
        t = np.clip(((gx - x0) * vx + (gy - y0) * vy) / norm2, 0.0, 1.0)
        dist = np.hypot(gx - (x0 + t * vx), gy - (y0 + t * vy))
        # half-texel soft edge keeps the rasterization resolution-stable
        cover = np.clip((width / 2.0 + texel_res / 2.0 - dist) / texel_res, 0.0, 1.0)
        texture = np.maximum(texture, brightness * cover)

    return World(
        seed=seed,
        extent=extent,
        texel_res=texel_res,
        texture=np.clip(texture, 0.0, 1.0),
        road_segments=segments,
    )


def render_aerial(world: World, tile: gridlab.Tile, out_px: int, tile_size: float) -> np.ndarray:
    """Area-resampled crop of the world over the tile footprint, [S,S,1].

    Each output pixel averages a 2x2 supersample of its footprint.
    """
    half = tile_size / 2.0
    if not (
        world.contains(tile.cx - half, tile.cy - half)
        and world.contains(tile.cx + half, tile.cy + half)
    ):
        raise ValueError(f"tile {tile.id} footprint outside the world")
    px = tile_size / out_px
    base = np.arange(out_px) * px
    acc = np.zeros((out_px, out_px))
    for ox in (0.25, 0.75):
        for oy in (0.25, 0.75):
            xs = tile.cx - half + base + ox * px
            ys = tile.cy + half - base - oy * px
            gx, gy = np.meshgrid(xs, ys)  # rows North -> South
            acc += world.sample(gx, gy)
    return (acc / 4.0).astype(np.float32)[:, :, None]


def render_pano(
    world: World, x: float, y: float, h: float, width: int, height: int
) -> EquirectImage:
    """North-aligned equirectangular render of the flat ground plane.

    Pixel (row v, col u) carries the ray at theta = u/W*2pi - pi,
    phi = pi/2 - v/H*pi (pixel centers at integer coordinates, matching
    geometry.pixel_to_sphere); below-horizon rays sample the ground at
    their intersection, the rest get a fixed sky gradient.
    """
    if not world.contains(x, y):
        raise ValueError(f"camera ({x}, {y}) outside the world")
    if h <= 0:
        raise ValueError(f"camera height must be positive, got {h}")
    u, v = np.meshgrid(np.arange(width), np.arange(height), indexing="xy")
    coord = pixel_to_sphere(u, v, width, height)
    ground = coord.elevation < 0

    data = np.empty((height, width), dtype=np.float64)
    sky_t = np.clip(coord.elevation[~ground], 0.0, np.pi / 2) / (np.pi / 2)
    data[~ground] = SKY_HORIZON + (SKY_ZENITH - SKY_HORIZON) * sky_t

    gx, gy = sphere_to_ground(
        SphericalCoord(coord.azimuth[ground], coord.elevation[ground]), h
    )
    data[ground] = world.sample(x + gx, y + gy)
    return EquirectImage(data[:, :, None])


def ground_truth_bev(
    world: World, x: float, y: float, size: int, ground_res: float
) -> np.ndarray:
    """Top-down texture crop on the same pixel grid pano_to_bev uses."""
    i, j = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
    gx = x + (j - size / 2.0 + 0.5) * ground_res
    gy = y + (size / 2.0 - i - 0.5) * ground_res
    return world.sample(gx, gy).astype(np.float32)[:, :, None]


@dataclass
class ManifestPano:
    id: int
    x: float
    y: float
    cam_height: float
    tile_id: int
    dx: float
    dy: float
    d_norm: float
    subset: str
    split: str
    file: str = ""


@dataclass
class ManifestTile:
    id: int
    row: int
    col: int
    cx: float
    cy: float
    file: str = ""


@dataclass
class DatasetManifest:
    """Single JSON document tying a rendered dataset together."""

    world_seed: int
    world_extent: float
    texel_res: float
    aoi: gridlab.Rect
    tile_size: float
    overlap: float
    cam_height: float
    pano_height_px: int
    aerial_px: int
    seed: int
    split_ratio: float
    tiles: list
    panos: list
    root: Optional[Path] = None  # set on load/write, not serialized

    def grid(self) -> gridlab.TileGrid:
        return gridlab.build_grid(self.aoi, self.tile_size, self.overlap)

    def pano_records(self):
        """Decentrality view over the pano rows."""
        return [
            gridlab.DecentralityRecord(
                pano_id=p.id,
                tile_id=p.tile_id,
                dx=p.dx,
                dy=p.dy,
                d_norm=p.d_norm,
                subset=p.subset,
            )
            for p in self.panos
        ]

    def to_dict(self) -> dict:
        d = {
            "world_seed": self.world_seed,
            "world_extent": self.world_extent,
            "texel_res": self.texel_res,
            "aoi": asdict(self.aoi),
            "tile_size": self.tile_size,
            "overlap": self.overlap,
            "cam_height": self.cam_height,
            "pano_height_px": self.pano_height_px,
            "aerial_px": self.aerial_px,
            "seed": self.seed,
            "split_ratio": self.split_ratio,
            "tiles": [asdict(t) for t in self.tiles],
            "panos": [asdict(p) for p in self.panos],
        }
        return d

    @classmethod
    def from_dict(cls, d: dict, root: Optional[Path] = None) -> "DatasetManifest":
        return cls(
            world_seed=d["world_seed"],
            world_extent=d["world_extent"],
            texel_res=d["texel_res"],
            aoi=gridlab.Rect(**d["aoi"]),
            tile_size=d["tile_size"],
            overlap=d["overlap"],
            cam_height=d["cam_height"],
            pano_height_px=d["pano_height_px"],
            aerial_px=d["aerial_px"],
            seed=d["seed"],
            split_ratio=d["split_ratio"],
            tiles=[ManifestTile(**t) for t in d["tiles"]],
            panos=[ManifestPano(**p) for p in d["panos"]],
            root=root,
        )

    def save(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=1))

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        path = Path(path)
        return cls.from_dict(json.loads(path.read_text()), root=path.parent)


def build_dataset(
    world: World,
    tile_grid: gridlab.TileGrid,
    n_panos: int,
    seed: int,
    split_ratio: float = 0.5,
    cam_height: float = 2.0,
    pano_height_px: int = 64,
    aerial_px: int = 64,
) -> DatasetManifest:
    """Sample pano locations and assign tiles, subsets and splits.

    Locations are uniform over the union of hit areas, so every pano has
    d_norm <= 1 and the expected subset mass is exactly (1,3,5,7)/16.
    No images are rendered here; see write_dataset.
    """
    if n_panos <= 0:
        raise ValueError(f"n_panos must be positive, got {n_panos}")
    fp = tile_grid.footprint_bounds()
    if not (
        world.contains(fp.x0, fp.y0)
        and world.contains(fp.x0 + fp.width, fp.y0 + fp.height)
    ):
        raise ValueError("tile grid extends outside the world")

    hb = tile_grid.hit_bounds()
    rng = np.random.default_rng(seed)
    xs = rng.uniform(hb.x0, hb.x0 + hb.width, size=n_panos)
    ys = rng.uniform(hb.y0, hb.y0 + hb.height, size=n_panos)

    panos = []
    for pid in range(n_panos):
        tile = gridlab.best_match(tile_grid, xs[pid], ys[pid])
        rec = gridlab.decentrality(tile, xs[pid], ys[pid], tile_grid.stride, pano_id=pid)
        panos.append(
            ManifestPano(
                id=pid,
                x=float(xs[pid]),
                y=float(ys[pid]),
                cam_height=cam_height,
                tile_id=tile.id,
                dx=rec.dx,
                dy=rec.dy,
                d_norm=rec.d_norm,
                subset=rec.subset,
                split=gridlab.stable_split(pid, split_ratio),
            )
        )

    tiles = [
        ManifestTile(id=t.id, row=t.row, col=t.col, cx=t.cx, cy=t.cy)
        for t in tile_grid.tiles()
    ]
    return DatasetManifest(
        world_seed=world.seed,
        world_extent=world.extent,
        texel_res=world.texel_res,
        aoi=tile_grid.aoi,
        tile_size=tile_grid.tile_size,
        overlap=tile_grid.overlap,
        cam_height=cam_height,
        pano_height_px=pano_height_px,
        aerial_px=aerial_px,
        seed=seed,
        split_ratio=split_ratio,
        tiles=tiles,
        panos=panos,
    )


def write_dataset(
    world: World,
    manifest: DatasetManifest,
    out_dir,
    threads: int = 1,
) -> DatasetManifest:
    """Render every tile and pano to PNG and write manifest.json.

    Layout: {out_dir}/aerial/{tile_id}.png, {out_dir}/pano/{pano_id}.png.
    Rendering is per-image independent, so the thread count never
    changes pixel values.
    """
    out_dir = Path(out_dir)
    (out_dir / "aerial").mkdir(parents=True, exist_ok=True)
    (out_dir / "pano").mkdir(parents=True, exist_ok=True)
    tile_grid = manifest.grid()

    def do_tile(t: ManifestTile):
        img = render_aerial(world, tile_grid.tile(t.id), manifest.aerial_px, manifest.tile_size)
        t.file = f"aerial/{t.id}.png"
        save_png(out_dir / t.file, img)

    def do_pano(p: ManifestPano):
        img = render_pano(
            world, p.x, p.y, p.cam_height, 2 * manifest.pano_height_px, manifest.pano_height_px
        )
        p.file = f"pano/{p.id}.png"
        save_png(out_dir / p.file, img.data)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            list(pool.map(do_tile, manifest.tiles))
            list(pool.map(do_pano, manifest.panos))
    else:
        for t in manifest.tiles:
            do_tile(t)
        for p in manifest.panos:
            do_pano(p)

    manifest.root = out_dir
    manifest.save(out_dir / "manifest.json")
    return manifest
