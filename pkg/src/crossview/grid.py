"""Reference tile grids, decentrality bands and database-size statistics.

A grid of square reference tiles (side ``t`` meters) covers an AOI with
per-axis overlap ``o``, giving center spacing ``s = t * (1 - o)``. The
*hit area* of a tile is the side-``s`` square around its center: the
region whose best-matched tile it is. Decentrality of a point is its
Chebyshev offset from the matched center, normalized by s/2, banded
into four nested square rings S1..S4 whose areas are 1:3:5:7.
"""

from __future__ import annotations

import csv
import hashlib
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

__all__ = [
    "Rect",
    "Tile",
    "TileGrid",
    "DecentralityRecord",
    "OverlapStats",
    "SUBSETS",
    "build_grid",
    "best_match",
    "best_match_many",
    "decentrality",
    "subset_of",
    "db_stats",
    "subset_census",
    "write_decentrality_csv",
    "stable_split",
]

SUBSETS = ("S1", "S2", "S3", "S4")

# Guard against float rounding when (side - t) is an exact multiple of s.
_COUNT_EPS = 1e-9


@dataclass(frozen=True)
class Rect:
    """Axis-aligned rectangle: origin corner plus extents, meters."""

    x0: float
    y0: float
    width: float
    height: float


@dataclass(frozen=True)
class Tile:
    """One reference tile; ids are row-major over the grid."""

    id: int
    row: int
    col: int
    cx: float
    cy: float


@dataclass(frozen=True)
class TileGrid:
    aoi: Rect
    tile_size: float
    overlap: float
    stride: float
    rows: int
    cols: int
    origin_x: float  # center of tile (row 0, col 0)
    origin_y: float

    @property
    def n_tiles(self) -> int:
        return self.rows * self.cols

    def tile(self, tile_id: int) -> Tile:
        if not 0 <= tile_id < self.n_tiles:
            raise ValueError(f"tile id {tile_id} out of range")
        row, col = divmod(tile_id, self.cols)
        return Tile(
            id=tile_id,
            row=row,
            col=col,
            cx=self.origin_x + col * self.stride,
            cy=self.origin_y + row * self.stride,
        )

    def tiles(self) -> Iterable[Tile]:
        for tid in range(self.n_tiles):
            yield self.tile(tid)

    def footprint_bounds(self) -> Rect:
        """Union of tile footprints (side tile_size)."""
        t2 = self.tile_size / 2.0
        return Rect(
            x0=self.origin_x - t2,
            y0=self.origin_y - t2,
            width=(self.cols - 1) * self.stride + self.tile_size,
            height=(self.rows - 1) * self.stride + self.tile_size,
        )

    def hit_bounds(self) -> Rect:
        """Union of hit areas (side stride around each center)."""
        s2 = self.stride / 2.0
        return Rect(
            x0=self.origin_x - s2,
            y0=self.origin_y - s2,
            width=(self.cols - 1) * self.stride + self.stride,
            height=(self.rows - 1) * self.stride + self.stride,
        )


@dataclass(frozen=True)
class DecentralityRecord:
    pano_id: int
    tile_id: int
    dx: float  # pano minus tile center, meters East
    dy: float  # meters North
    d_norm: float  # max(|dx|,|dy|) / (s/2)
    subset: str


@dataclass(frozen=True)
class OverlapStats:
    overlap: float
    tile_count: int
    ratio: float  # vs the first overlap in the request
    analytic_ratio: float  # ((1-o_base)/(1-o))^2


def build_grid(aoi: Rect, tile_size: float, overlap: float) -> TileGrid:
    """Lay out tile centers from aoi edge + t/2 with spacing s = t(1-o)."""
    if not 0 <= overlap < 1:
        raise ValueError(f"overlap must be in [0,1), got {overlap}")
    if tile_size <= 0:
        raise ValueError(f"tile size must be positive, got {tile_size}")
    if aoi.width < tile_size or aoi.height < tile_size:
        raise ValueError(
            f"aoi {aoi.width}x{aoi.height} smaller than one {tile_size} m tile"
        )
    stride = tile_size * (1.0 - overlap)
    cols = int(np.floor((aoi.width - tile_size) / stride + _COUNT_EPS)) + 1
    rows = int(np.floor((aoi.height - tile_size) / stride + _COUNT_EPS)) + 1
    return TileGrid(
        aoi=aoi,
        tile_size=tile_size,
        overlap=overlap,
        stride=stride,
        rows=rows,
        cols=cols,
        origin_x=aoi.x0 + tile_size / 2.0,
        origin_y=aoi.y0 + tile_size / 2.0,
    )


def _axis_index(p, first: float, stride: float, count: int) -> np.ndarray:
    """Nearest lattice index with midpoint ties resolved downward."""
    k = np.ceil((np.asarray(p, dtype=np.float64) - first) / stride - 0.5)
    return np.clip(k, 0, count - 1).astype(np.int64)


def _lowest_feasible(p: float, first: float, stride: float, k0: int, dist: float) -> int:
    """Smallest lattice index whose center is within ``dist`` of p."""
    k = k0
    while k > 0 and abs(p - (first + (k - 1) * stride)) <= dist:
        k -= 1
    return k


def best_match(grid: TileGrid, x: float, y: float) -> Tile:
    """Tile whose center minimizes Chebyshev distance; ties to smaller id.

    The minimizing tiles form a rectangle of grid indices (every row
    within the optimal distance of y crossed with every such column),
    so the smallest id is the lowest feasible row, then column.
    """
    fp = grid.footprint_bounds()
    if not (fp.x0 <= x <= fp.x0 + fp.width and fp.y0 <= y <= fp.y0 + fp.height):
        raise ValueError(f"point ({x}, {y}) outside tile coverage")
    col = int(_axis_index(x, grid.origin_x, grid.stride, grid.cols))
    row = int(_axis_index(y, grid.origin_y, grid.stride, grid.rows))
    best = max(
        abs(x - (grid.origin_x + col * grid.stride)),
        abs(y - (grid.origin_y + row * grid.stride)),
    )
    row = _lowest_feasible(y, grid.origin_y, grid.stride, row, best)
    col = _lowest_feasible(x, grid.origin_x, grid.stride, col, best)
    return grid.tile(row * grid.cols + col)


def best_match_many(grid: TileGrid, xs, ys) -> np.ndarray:
    """Vectorized per-axis nearest center; returns tile ids.

    Fast path for bulk statistics: skips the degenerate-tie refinement
    of best_match (ties live on measure-zero midlines) and the coverage
    check.
    """
    cols = _axis_index(xs, grid.origin_x, grid.stride, grid.cols)
    rows = _axis_index(ys, grid.origin_y, grid.stride, grid.rows)
    return rows * grid.cols + cols


def subset_of(d_norm: float) -> str:
    """Band Sk for d_norm in ((k-1)/4, k/4]; 0 maps to S1."""
    k = int(np.ceil(d_norm * 4.0))
    return SUBSETS[min(max(k, 1), 4) - 1]


def decentrality(
    tile: Tile, x: float, y: float, stride: float, pano_id: int = -1
) -> DecentralityRecord:
    """Offset of a point against its best-matched tile center."""
    dx = x - tile.cx
    dy = y - tile.cy
    d_norm = max(abs(dx), abs(dy)) / (stride / 2.0)
    return DecentralityRecord(
        pano_id=pano_id,
        tile_id=tile.id,
        dx=dx,
        dy=dy,
        d_norm=d_norm,
        subset=subset_of(d_norm),
    )


def db_stats(
    aoi: Rect, tile_size: float, overlaps: Sequence[float]
) -> list[OverlapStats]:
    """Tile counts and relative database sizes for several overlap levels.

    The measured ratio approaches ((1-o_base)/(1-o))^2 as the AOI grows;
    both are reported because real counts include boundary effects.
    """
    if not overlaps:
        raise ValueError("need at least one overlap level")
    counts = [build_grid(aoi, tile_size, o).n_tiles for o in overlaps]
    base_count = counts[0]
    base_o = overlaps[0]
    out = []
    for o, n in zip(overlaps, counts):
        out.append(
            OverlapStats(
                overlap=o,
                tile_count=n,
                ratio=n / base_count,
                analytic_ratio=((1.0 - base_o) / (1.0 - o)) ** 2,
            )
        )
    return out


def subset_census(records: Iterable, splits: Iterable[str] = ("train", "test")):
    """Counts per subset per split.

    ``records`` holds objects (or dicts) with ``subset`` and ``split``
    attributes; returns {split: {subset: count}} with every cell present.
    """
    census = {sp: {sub: 0 for sub in SUBSETS} for sp in splits}
    for rec in records:
        subset = rec["subset"] if isinstance(rec, dict) else rec.subset
        split = rec["split"] if isinstance(rec, dict) else rec.split
        if split not in census:
            census[split] = {sub: 0 for sub in SUBSETS}
        census[split][subset] += 1
    return census


def write_decentrality_csv(path, records: Iterable, splits: dict) -> None:
    """Per-pano decentrality dump: pano_id,tile_id,dx_m,dy_m,d_norm,subset,split."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["pano_id", "tile_id", "dx_m", "dy_m", "d_norm", "subset", "split"])
        for rec in records:
            w.writerow(
                [
                    rec.pano_id,
                    rec.tile_id,
                    f"{rec.dx:.6f}",
                    f"{rec.dy:.6f}",
                    f"{rec.d_norm:.6f}",
                    rec.subset,
                    splits.get(rec.pano_id, ""),
                ]
            )


def stable_split(pano_id: int, train_fraction: float) -> str:
    """Deterministic, platform-stable train/test assignment by id hash."""
    digest = hashlib.md5(f"pano:{pano_id}".encode()).digest()
    frac = int.from_bytes(digest[:8], "big") / 2**64
    return "train" if frac < train_fraction else "test"
