import pytest

from crossview import grid as gridlab
from crossview import worldgen


@pytest.fixture(scope="session")
def toy_dataset(tmp_path_factory):
    """Small rendered dataset shared by model-level tests."""
    root = tmp_path_factory.mktemp("toy_ds")
    world = worldgen.make_world(seed=1, extent=500.0, texel_res=0.5)
    tile_grid = gridlab.build_grid(gridlab.Rect(0, 0, 500.0, 500.0), 100.0, 0.125)
    manifest = worldgen.build_dataset(
        world, tile_grid, n_panos=150, seed=2, split_ratio=0.7
    )
    worldgen.write_dataset(world, manifest, root)
    return manifest
