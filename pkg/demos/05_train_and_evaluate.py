"""End-to-end: dataset, baseline-vs-full training, stratified retrieval.

A scaled-down version of the ablation the acceptance suite runs (one
tenth the data, a few minutes of CPU): generates a world and dataset,
trains the plain contrastive baseline and the full objective with the
BEV-intermediary and position-constraint terms, and evaluates R@K plus
R@1 per decentrality subset on the held-out queries. Expect noisier
numbers than the acceptance run, same direction.

Outputs (dataset, checkpoints, heatmap PNG) land in demos/out/05/.
"""

import time
from pathlib import Path

from crossview import grid as gridlab
from crossview import model, retrieval, worldgen
from crossview.images import load_png, save_png
from crossview.losses import LossWeights

OUT = Path(__file__).parent / "out" / "05"


def run(manifest, name, weights):
    cfg = model.TrainConfig(
        epochs=12,
        batch_size=32,
        learning_rate=1e-3,
        seed=0,
        weights=weights,
        match_temp=0.05,
        bev_size=64,
        bev_res=0.5,
    )
    t0 = time.time()
    ckpt = model.train(manifest, cfg)
    refs = model.embed_all(ckpt, manifest, "references")
    queries = model.embed_all(ckpt, manifest, "queries", split="test")
    rep = retrieval.stratified_eval(refs, queries)
    print(
        f"{name:<10} R@1 {rep.r_at_1:5.2f}  R@5 {rep.r_at_5:5.2f}  "
        f"hit {rep.hit_rate:5.2f}  "
        f"S1 {rep.subset_r1['S1']:5.2f}  S4 {rep.subset_r1['S4']:5.2f}  "
        f"[{time.time() - t0:.0f}s]"
    )
    return ckpt


def main():
    extent = 700.0
    world = worldgen.make_world(seed=11, extent=extent, texel_res=0.5)
    tile_grid = gridlab.build_grid(
        gridlab.Rect(0, 0, extent, extent), tile_size=100.0, overlap=0.125
    )
    manifest = worldgen.build_dataset(
        world, tile_grid, n_panos=400, seed=12, split_ratio=0.65
    )
    worldgen.write_dataset(world, manifest, OUT / "dataset", threads=4)
    n_train = sum(1 for p in manifest.panos if p.split == "train")
    print(
        f"dataset: {len(manifest.tiles)} tiles, {n_train} train / "
        f"{len(manifest.panos) - n_train} test panos\n"
    )

    run(manifest, "baseline", LossWeights(0.0, 0.0, 0.0, temperature=0.05))
    full = run(manifest, "full", LossWeights(0.1, 0.1, 0.05, temperature=0.05))

    model.save_checkpoint(full, OUT / "full.cvck")
    pano = manifest.panos[0]
    tile = next(t for t in manifest.tiles if t.id == pano.tile_id)
    heat = model.similarity_heatmap(
        full,
        load_png(OUT / "dataset" / pano.file),
        load_png(OUT / "dataset" / tile.file),
    )
    save_png(OUT / "heatmap.png", heat)
    print(f"\nwrote checkpoint and street-over-aerial heatmap to {OUT}")


if __name__ == "__main__":
    main()
