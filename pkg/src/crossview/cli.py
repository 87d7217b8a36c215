"""Operator surface: subcommands over the library, file outputs only.

Exit codes: 0 ok, 2 bad arguments, 3 bad input file, 4 numerical
divergence. Every command is deterministic given its config/seed; the
effective config is echoed next to each output. ``--threads`` (or the
CROSSVIEW_THREADS environment variable) caps render workers and never
changes results.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from pathlib import Path

import numpy as np

from crossview import grid as gridlab
from crossview import model, retrieval, worldgen
from crossview.config import RunConfig
from crossview.errors import ConfigError, CrossviewError, DivergenceError, FormatError
from crossview.geometry import EquirectImage, pano_to_bev
from crossview.images import load_png, save_png

EXIT_OK = 0
EXIT_BAD_ARGS = 2
EXIT_BAD_INPUT = 3
EXIT_DIVERGED = 4


def _threads(args) -> int:
    if args.threads is not None:
        return max(1, args.threads)
    env = os.environ.get("CROSSVIEW_THREADS")
    return max(1, int(env)) if env else 1


def _load_config(path) -> RunConfig:
    if path is None:
        return RunConfig()
    if not Path(path).exists():
        raise FileNotFoundError(f"config file not found: {path}")
    return RunConfig.load(path)


def _echo_config(cfg: RunConfig, target: Path) -> None:
    """Drop the effective config next to an output file or directory."""
    if target.suffix:
        cfg.save(target.parent / (target.name + ".config.json"))
    else:
        cfg.save(target / "config.json")


def cmd_gen_data(args) -> int:
    cfg = _load_config(args.config)
    if args.seed is not None:
        cfg.world.seed = args.seed
        cfg.dataset.seed = args.seed + 1
    if args.n_panos is not None:
        cfg.dataset.n_panos = args.n_panos
    out = Path(args.out)
    world = worldgen.make_world(cfg.world.seed, cfg.world.extent, cfg.world.texel_res)
    tile_grid = gridlab.build_grid(
        gridlab.Rect(0.0, 0.0, cfg.world.extent, cfg.world.extent),
        cfg.grid.tile_size,
        cfg.grid.overlap,
    )
    manifest = worldgen.build_dataset(
        world,
        tile_grid,
        n_panos=cfg.dataset.n_panos,
        seed=cfg.dataset.seed,
        split_ratio=cfg.dataset.split_ratio,
        cam_height=cfg.dataset.cam_height,
        pano_height_px=cfg.dataset.pano_height_px,
        aerial_px=cfg.dataset.aerial_px,
    )
    worldgen.write_dataset(world, manifest, out, threads=_threads(args))
    _echo_config(cfg, out)
    print(f"wrote {len(manifest.tiles)} tiles, {len(manifest.panos)} panos -> {out}")
    return EXIT_OK


def cmd_bev(args) -> int:
    pano = EquirectImage(load_png(args.pano))
    bev = pano_to_bev(pano, h=args.height, size=args.size, ground_res=args.res)
    out = Path(args.out)
    save_png(out, bev.data)
    mask_path = out.with_name(out.stem + "_mask.png")
    save_png(mask_path, bev.valid_mask.astype(np.float64))
    print(f"wrote {out} and {mask_path}")
    return EXIT_OK


def cmd_grid_stats(args) -> int:
    overlaps = [float(tok) for tok in args.overlaps.split(",") if tok]
    aoi = gridlab.Rect(0.0, 0.0, args.aoi, args.aoi)
    stats = gridlab.db_stats(aoi, args.tile, overlaps)
    rows = [["overlap", "tiles", "ratio", "analytic_ratio"]]
    rows += [
        [f"{s.overlap:g}", str(s.tile_count), f"{s.ratio:.4f}", f"{s.analytic_ratio:.4f}"]
        for s in stats
    ]
    text = "\n".join(",".join(r) for r in rows) + "\n"
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text)
        print(f"wrote {args.out}")
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_decentrality_report(args) -> int:
    manifest = worldgen.DatasetManifest.load(args.manifest)
    census = gridlab.subset_census(
        [{"subset": p.subset, "split": p.split} for p in manifest.panos]
    )
    rows = [["split"] + list(gridlab.SUBSETS) + ["total"]]
    for split in ("train", "test"):
        counts = census.get(split, {s: 0 for s in gridlab.SUBSETS})
        rows.append(
            [split]
            + [str(counts[s]) for s in gridlab.SUBSETS]
            + [str(sum(counts.values()))]
        )
    text = "\n".join(",".join(r) for r in rows) + "\n"
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text)
        print(f"wrote {args.out}")
    else:
        sys.stdout.write(text)
    if args.per_pano:
        splits = {p.id: p.split for p in manifest.panos}
        Path(args.per_pano).parent.mkdir(parents=True, exist_ok=True)
        gridlab.write_decentrality_csv(args.per_pano, manifest.pano_records(), splits)
        print(f"wrote {args.per_pano}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _load_config(args.config)
    if args.seed is not None:
        cfg.train.seed = args.seed
    if args.max_steps is not None:
        cfg.train.max_steps = args.max_steps
    for name in ("lambda_bev_street", "lambda_bev_aerial", "lambda_position"):
        v = getattr(args, name)
        if v is not None:
            setattr(cfg.train, name, v)
    manifest = worldgen.DatasetManifest.load(Path(args.data) / "manifest.json")
    ckpt = model.train(manifest, cfg.train.to_train_config())
    out = Path(args.out)
    model.save_checkpoint(ckpt, out)
    _echo_config(cfg, out)
    trace_path = out.with_name(out.stem + "_loss.csv")
    with open(trace_path, "w", newline="") as fh:
        writer = csv.DictWriter(
            fh,
            fieldnames=["step", "total", "street_aerial", "bev_street", "bev_aerial", "position"],
        )
        writer.writeheader()
        writer.writerows(ckpt.loss_trace)
    final = ckpt.loss_trace[-1]["total"] if ckpt.loss_trace else float("nan")
    print(f"wrote {out} ({len(ckpt.loss_trace)} steps, final loss {final:.4f})")
    return EXIT_OK


def cmd_embed(args) -> int:
    ckpt = model.load_checkpoint(args.ckpt)
    manifest = worldgen.DatasetManifest.load(Path(args.data) / "manifest.json")
    db = model.embed_all(ckpt, manifest, args.which, split=args.split)
    retrieval.save_db(db, args.out)
    print(f"wrote {args.out} ({db.n} x {db.dim} {db.kind})")
    return EXIT_OK


def cmd_eval(args) -> int:
    queries = retrieval.load_db(args.queries)
    refs = retrieval.load_db(args.refs)
    report = retrieval.stratified_eval(refs, queries)
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(report.to_csv())
        print(f"wrote {args.out}")
    print(report.format_table())
    return EXIT_OK


def cmd_heatmap(args) -> int:
    ckpt = model.load_checkpoint(args.ckpt)
    pano = load_png(args.pano)
    tile = load_png(args.tile)
    heat = model.similarity_heatmap(ckpt, pano, tile)
    gray = tile[:, :, 0]
    overlay = np.stack(
        [
            0.45 * gray + 0.55 * heat,
            0.45 * gray + 0.55 * 0.15 * heat,
            0.45 * gray + 0.55 * (1.0 - heat),
        ],
        axis=2,
    )
    save_png(args.out, np.clip(overlay, 0.0, 1.0))
    print(f"wrote {args.out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="crossview",
        description="Synthetic cross-view geo-localization pipeline",
    )
    p.add_argument(
        "--threads",
        type=int,
        default=None,
        help="render worker cap (default: CROSSVIEW_THREADS or 1); never changes results",
    )
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic dataset directory")
    g.add_argument("--config", help="RunConfig JSON (defaults apply when omitted)")
    g.add_argument("--out", required=True, help="output dataset directory")
    g.add_argument("--seed", type=int, help="override world/dataset seeds")
    g.add_argument("--n-panos", type=int, dest="n_panos", help="override pano count")
    g.set_defaults(fn=cmd_gen_data)

    b = sub.add_parser("bev", help="project a panorama PNG to a BEV PNG")
    b.add_argument("--pano", required=True, help="equirectangular PNG (2:1)")
    b.add_argument("--height", type=float, default=2.0, help="camera height, m (default 2.0)")
    b.add_argument("--size", type=int, default=128, help="BEV side, px (default 128)")
    b.add_argument("--res", type=float, default=0.25, help="ground res, m/px (default 0.25)")
    b.add_argument("--out", required=True, help="output PNG; mask written alongside")
    b.set_defaults(fn=cmd_bev)

    s = sub.add_parser("grid-stats", help="tile counts and ratios per overlap level")
    s.add_argument("--aoi", type=float, required=True, help="square AOI side, m")
    s.add_argument("--tile", type=float, required=True, help="tile side, m")
    s.add_argument("--overlaps", required=True, help="comma list, e.g. 0.125,0.5")
    s.add_argument("--out", help="CSV path (default: stdout)")
    s.set_defaults(fn=cmd_grid_stats)

    d = sub.add_parser("decentrality-report", help="subset counts per split")
    d.add_argument("--manifest", required=True, help="dataset manifest.json")
    d.add_argument("--out", help="census CSV path (default: stdout)")
    d.add_argument("--per-pano", dest="per_pano", help="also dump per-pano records CSV")
    d.set_defaults(fn=cmd_decentrality_report)

    t = sub.add_parser("train", help="train the shared encoder")
    t.add_argument("--config", help="RunConfig JSON")
    t.add_argument("--data", required=True, help="dataset directory")
    t.add_argument("--out", required=True, help="checkpoint path (.cvck)")
    t.add_argument("--seed", type=int, help="override training seed")
    t.add_argument("--max-steps", type=int, dest="max_steps", help="cap optimizer steps")
    t.add_argument("--lambda-bev-street", type=float, dest="lambda_bev_street")
    t.add_argument("--lambda-bev-aerial", type=float, dest="lambda_bev_aerial")
    t.add_argument("--lambda-position", type=float, dest="lambda_position")
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("embed", help="encode queries or references to a CVGE file")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True, help="dataset directory")
    e.add_argument("--which", required=True, choices=["queries", "references"])
    e.add_argument("--split", choices=["train", "test"], help="restrict query panos")
    e.add_argument("--out", required=True, help="output CVGE path")
    e.set_defaults(fn=cmd_embed)

    v = sub.add_parser("eval", help="retrieval metrics from two CVGE files")
    v.add_argument("--queries", required=True)
    v.add_argument("--refs", required=True)
    v.add_argument("--out", help="CSV path (default: table to stdout only)")
    v.set_defaults(fn=cmd_eval)

    h = sub.add_parser("heatmap", help="street-over-aerial similarity overlay PNG")
    h.add_argument("--ckpt", required=True)
    h.add_argument("--pano", required=True, help="query panorama PNG")
    h.add_argument("--tile", required=True, help="aerial tile PNG")
    h.add_argument("--out", required=True, help="output overlay PNG")
    h.set_defaults(fn=cmd_heatmap)

    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except DivergenceError as e:
        print(f"error[{type(e).__name__}]: {e}", file=sys.stderr)
        return EXIT_DIVERGED
    except (FileNotFoundError, FormatError, ConfigError, json.JSONDecodeError, KeyError) as e:
        print(f"error[{type(e).__name__}]: {e}", file=sys.stderr)
        return EXIT_BAD_INPUT
    except (ValueError, CrossviewError) as e:
        print(f"error[{type(e).__name__}]: {e}", file=sys.stderr)
        return EXIT_BAD_ARGS


if __name__ == "__main__":
    sys.exit(main())
