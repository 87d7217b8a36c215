"""Single-document run configuration with strict key validation.

One JSON file covers world generation, the tile grid, dataset sampling,
training and evaluation. Every field has a default; unknown keys are
rejected so typos fail loudly; the effective (fully defaulted) config is
echoed next to every output the CLI produces.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from crossview.errors import ConfigError
from crossview.losses import LossWeights
from crossview.model import TrainConfig

__all__ = [
    "WorldConfig",
    "GridConfig",
    "DatasetConfig",
    "TrainSection",
    "EvalConfig",
    "RunConfig",
]


def _from_dict(cls, d: dict):
    if not isinstance(d, dict):
        raise ConfigError(f"{cls.__name__} section must be a mapping")
    known = {f.name for f in fields(cls)}
    unknown = set(d) - known
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    return cls(**d)


@dataclass
class WorldConfig:
    seed: int = 0          # texture / road RNG seed
    extent: float = 2000.0  # square world side, meters
    texel_res: float = 0.5  # texture resolution, meters per texel


@dataclass
class GridConfig:
    tile_size: float = 100.0  # reference tile side, meters
    overlap: float = 0.125    # per-axis overlap fraction


@dataclass
class DatasetConfig:
    n_panos: int = 3000
    seed: int = 1
    split_ratio: float = 0.65  # train fraction of the id-hash split
    cam_height: float = 2.0    # street camera height, meters
    pano_height_px: int = 64   # pano is 2x this wide
    aerial_px: int = 64


@dataclass
class TrainSection:
    epochs: int = 3
    batch_size: int = 16
    learning_rate: float = 1e-3
    seed: int = 0
    match_temp: float = 0.05
    temperature: float = 0.05
    learnable_temperature: bool = False
    lambda_bev_street: float = 0.1
    lambda_bev_aerial: float = 0.1
    lambda_position: float = 0.05
    channels: list = field(default_factory=lambda: [8, 16, 32])
    bev_size: int = 64
    bev_res: float = 0.5
    max_steps: int | None = None

    def to_train_config(self) -> TrainConfig:
        return TrainConfig(
            epochs=self.epochs,
            batch_size=self.batch_size,
            learning_rate=self.learning_rate,
            seed=self.seed,
            weights=LossWeights(
                lambda_bev_street=self.lambda_bev_street,
                lambda_bev_aerial=self.lambda_bev_aerial,
                lambda_position=self.lambda_position,
                temperature=self.temperature,
            ),
            match_temp=self.match_temp,
            learnable_temperature=self.learnable_temperature,
            channels=tuple(self.channels),
            bev_size=self.bev_size,
            bev_res=self.bev_res,
            max_steps=self.max_steps,
        )


@dataclass
class EvalConfig:
    split: str = "test"  # which pano split forms the query set


@dataclass
class RunConfig:
    world: WorldConfig = field(default_factory=WorldConfig)
    grid: GridConfig = field(default_factory=GridConfig)
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    train: TrainSection = field(default_factory=TrainSection)
    eval: EvalConfig = field(default_factory=EvalConfig)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config sections: {sorted(unknown)}")
        return cls(
            world=_from_dict(WorldConfig, d.get("world", {})),
            grid=_from_dict(GridConfig, d.get("grid", {})),
            dataset=_from_dict(DatasetConfig, d.get("dataset", {})),
            train=_from_dict(TrainSection, d.get("train", {})),
            eval=_from_dict(EvalConfig, d.get("eval", {})),
        )

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            doc = json.loads(Path(path).read_text())
        except json.JSONDecodeError as e:
            raise ConfigError(f"config is not valid JSON: {e}") from e
        return cls.from_dict(doc)

    def to_dict(self) -> dict:
        return asdict(self)

    def save(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=1) + "\n")
