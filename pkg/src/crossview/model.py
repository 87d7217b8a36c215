"""Weight-shared tiny encoder, training loop and embedding extraction.

One stack of three stride-2 3x3 conv stages (channels 8, 16, C) with
ReLU encodes every view; the coarse embedding is the L2-normalized
global average of the last feature map. The street, BEV and aerial
branches differ only in their input, never in parameters.

Training renders BEV images from the street panoramas on the fly and
optimizes the composite objective with Adam. Inference (embed_all)
touches neither the BEV transform nor the position loss; the
instrumentation counters prove it.

Checkpoint file (CVCK): magic ``CVCK``, u32 version, length-prefixed
JSON (config, epoch, loss trace), u32 param count, then per parameter
a length-prefixed name, u32 ndim + dims, and raw float32 LE data.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from crossview import tensor as tl
from crossview.errors import (
    BadMagicError,
    BadVersionError,
    ConfigError,
    DivergenceError,
    NonFiniteError,
    TruncatedFileError,
)
from crossview.geometry import EquirectImage, pano_to_bev
from crossview.images import load_png, resize_bilinear
from crossview.losses import LossWeights, PositionPrior, similarity_pyramid, total_loss
from crossview.retrieval import EmbeddingDatabase, build_database
from crossview.worldgen import DatasetManifest

__all__ = [
    "EncoderParams",
    "TrainConfig",
    "Checkpoint",
    "Adam",
    "encode",
    "position_prior",
    "train",
    "embed_all",
    "similarity_heatmap",
    "save_checkpoint",
    "load_checkpoint",
]

MAGIC = b"CVCK"
VERSION = 1


@dataclass
class EncoderParams:
    """Conv kernels and biases, shared by all three view branches."""

    kernels: list
    biases: list

    @classmethod
    def initialize(cls, seed: int, in_channels: int = 1, channels=(8, 16, 32)):
        rng = np.random.default_rng(seed)
        kernels, biases = [], []
        cin = in_channels
        for cout in channels:
            std = np.sqrt(2.0 / (9 * cin))
            kernels.append(tl.Tensor(rng.normal(0.0, std, size=(3, 3, cin, cout))))
            biases.append(tl.Tensor(np.zeros(cout)))
            cin = cout
        return cls(kernels=kernels, biases=biases)

    @property
    def n_stages(self) -> int:
        return len(self.kernels)

    def named(self) -> dict:
        out = {}
        for i, (k, b) in enumerate(zip(self.kernels, self.biases)):
            out[f"stage{i}.kernel"] = k
            out[f"stage{i}.bias"] = b
        return out

    @classmethod
    def from_named(cls, named: dict) -> "EncoderParams":
        kernels, biases = [], []
        i = 0
        while f"stage{i}.kernel" in named:
            kernels.append(named[f"stage{i}.kernel"])
            biases.append(named[f"stage{i}.bias"])
            i += 1
        if not kernels:
            raise ValueError("no encoder stages found in parameters")
        return cls(kernels=kernels, biases=biases)


@dataclass
class TrainConfig:
    epochs: int = 3
    batch_size: int = 16
    learning_rate: float = 1e-3
    seed: int = 0
    weights: LossWeights = field(default_factory=LossWeights)
    match_temp: float = 0.05
    learnable_temperature: bool = False
    channels: tuple = (8, 16, 32)
    bev_size: int = 64
    bev_res: float = 0.5
    max_steps: Optional[int] = None

    def __post_init__(self):
        if self.batch_size < 2:
            raise ValueError("batch size must be >= 2 for in-batch negatives")
        self.channels = tuple(self.channels)
        if isinstance(self.weights, dict):
            self.weights = LossWeights(**self.weights)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channels"] = list(self.channels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class Checkpoint:
    params: dict  # name -> Tensor, encoder stages plus optional log_temp
    config: TrainConfig
    epoch: int
    loss_trace: list

    def encoder(self) -> EncoderParams:
        return EncoderParams.from_named(self.params)

    def temperature(self) -> float:
        if "log_temp" in self.params:
            return float(np.exp(self.params["log_temp"].data[0]))
        return self.config.weights.temperature


def encode(tape, params: EncoderParams, images: np.ndarray):
    """Images [B,H,W,C] -> (fine features F [B,H/8,W/8,C'], unit rows f [B,C']).

    F is the activation of the last stage; f is its L2-normalized
    global average. Deterministic.
    """
    arr = np.asarray(images, dtype=np.float32)
    if arr.ndim != 4:
        raise ValueError(f"expected [B,H,W,C] images, got {arr.shape}")
    div = 2 ** len(params.kernels)
    if arr.shape[1] % div or arr.shape[2] % div:
        raise ValueError(
            f"image dims {arr.shape[1]}x{arr.shape[2]} not divisible by {div}"
        )
    x = tl.Tensor(arr)
    for k, b in zip(params.kernels, params.biases):
        x = tl.relu(tape, tl.bias_add(tape, tl.conv2d(tape, x, k, stride=2), b))
    f = tl.l2_normalize(tape, tl.global_avg_pool(tape, x))
    return x, f


class Adam:
    """Adam with fixed betas 0.9/0.999 and eps 1e-8; float64 state."""

    def __init__(self, params: dict, lr: float):
        self.params = params
        self.lr = lr
        self.beta1, self.beta2, self.eps = 0.9, 0.999, 1e-8
        self.t = 0
        self._m = {k: np.zeros(p.shape, dtype=np.float64) for k, p in params.items()}
        self._v = {k: np.zeros(p.shape, dtype=np.float64) for k, p in params.items()}

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    def step(self):
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for name, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad.astype(np.float64)
            m = self._m[name]
            v = self._v[name]
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            update = self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.data = (p.data.astype(np.float64) - update).astype(np.float32)


def position_prior(
    dx: float, dy: float, tile_size: float, fw: int, fh: int
) -> PositionPrior:
    """Map a metric offset from the tile center to feature-map pixels.

    Feature cell k covers ground [k, k+1) * t/fw from the West edge, so
    a ground offset maps to cell-center coordinate off/t * fw - 0.5;
    rows grow southward from the North edge. Clipped to the soft-argmax
    hull [0, fw-1].
    """
    px = (dx + tile_size / 2.0) / tile_size * fw - 0.5
    py = (tile_size / 2.0 - dy) / tile_size * fh - 0.5
    return PositionPrior(
        x=float(np.clip(px, 0.0, fw - 1)), y=float(np.clip(py, 0.0, fh - 1))
    )


def _load_images(manifest: DatasetManifest, records, expect_hw):
    if manifest.root is None:
        raise ValueError("manifest has no root directory; render the dataset first")
    out = np.empty((len(records), expect_hw[0], expect_hw[1], 1), dtype=np.float32)
    for i, rec in enumerate(records):
        if not rec.file:
            raise FileNotFoundError(f"record {rec.id} has no rendered image")
        img = load_png(Path(manifest.root) / rec.file)
        if img.shape[:2] != expect_hw:
            raise ValueError(
                f"{rec.file}: expected {expect_hw}, found {img.shape[:2]}"
            )
        out[i] = img[:, :, :1]
    return out


def train(manifest: DatasetManifest, config: TrainConfig) -> Checkpoint:
    """Optimize the shared encoder on the manifest's train split.

    Per step: sample B matched (street, aerial) pairs, derive BEV views
    from the panoramas when the weights demand them, encode all views
    with the same parameters, and take one Adam step on the composite
    loss. Deterministic given the seed.
    """
    panos = [p for p in manifest.panos if p.split == "train"]
    if len(panos) < config.batch_size:
        raise ValueError(
            f"insufficient training data: {len(panos)} panos < batch {config.batch_size}"
        )
    hp = manifest.pano_height_px
    street_imgs = _load_images(manifest, panos, (hp, 2 * hp))
    tile_by_id = {t.id: t for t in manifest.tiles}
    tiles_needed = sorted({p.tile_id for p in panos})
    ap = manifest.aerial_px
    aerial_imgs = _load_images(
        manifest, [tile_by_id[t] for t in tiles_needed], (ap, ap)
    )
    aerial_row = {tid: i for i, tid in enumerate(tiles_needed)}

    params = EncoderParams.initialize(config.seed, in_channels=1, channels=config.channels)
    named = params.named()
    if config.learnable_temperature:
        named["log_temp"] = tl.Tensor([np.log(config.weights.temperature)])
    opt = Adam(named, lr=config.learning_rate)

    div = 2 ** len(config.channels)
    fw = fh = ap // div
    priors = [
        position_prior(p.dx, p.dy, manifest.tile_size, fw, fh) for p in panos
    ]
    use_bev = (
        config.weights.lambda_bev_street > 0
        or config.weights.lambda_bev_aerial > 0
        or config.weights.lambda_position > 0
    )
    use_pos = config.weights.lambda_position > 0

    bev_cache = {}

    def bev_image(idx: int) -> np.ndarray:
        if idx not in bev_cache:
            pano = EquirectImage(street_imgs[idx])
            bev = pano_to_bev(
                pano, panos[idx].cam_height, config.bev_size, config.bev_res
            )
            bev_cache[idx] = bev.data
        return bev_cache[idx]

    rng = np.random.default_rng(config.seed)
    steps_per_epoch = len(panos) // config.batch_size
    trace = []
    step = 0
    done = False
    for _epoch in range(config.epochs):
        if done:
            break
        order = rng.permutation(len(panos))
        for bi in range(steps_per_epoch):
            idx = order[bi * config.batch_size : (bi + 1) * config.batch_size]
            try:
                tape = tl.Tape()
                street = street_imgs[idx]
                aerial = aerial_imgs[[aerial_row[panos[i].tile_id] for i in idx]]
                fmap_a, f_a = encode(tape, params, aerial)
                _, f_s = encode(tape, params, street)
                f_bev = None
                if use_bev:
                    bev = np.stack([bev_image(int(i)) for i in idx])
                    _, f_bev = encode(tape, params, bev)
                temp = None
                if config.learnable_temperature:
                    temp = tl.exp(tape, named["log_temp"])
                loss, parts = total_loss(
                    tape,
                    f_s,
                    f_a,
                    config.weights,
                    f_bev=f_bev,
                    fmap_aerial=fmap_a if use_pos else None,
                    priors=[priors[int(i)] for i in idx] if use_pos else None,
                    match_temp=config.match_temp,
                    temperature=temp,
                )
                opt.zero_grad()
                tape.backward(loss)
                opt.step()
            except NonFiniteError as e:
                raise DivergenceError(step, str(e)) from e
            trace.append({"step": step, "total": loss.item(), **parts})
            step += 1
            if config.max_steps is not None and step >= config.max_steps:
                done = True
                break

    return Checkpoint(params=named, config=config, epoch=config.epochs, loss_trace=trace)


def embed_all(
    ckpt: Checkpoint,
    manifest: DatasetManifest,
    which: str,
    split: Optional[str] = None,
    batch: int = 64,
) -> EmbeddingDatabase:
    """Encode references (aerial tiles) or queries (street panoramas).

    The straight inference path: images through the shared encoder,
    nothing else. No BEV transform, no position loss.
    """
    params = ckpt.encoder()
    if which == "references":
        records = list(manifest.tiles)
        size = (manifest.aerial_px, manifest.aerial_px)
        metadata = {
            "tile_size": manifest.tile_size,
            "tiles": {str(t.id): [t.cx, t.cy] for t in records},
        }
    elif which == "queries":
        records = [p for p in manifest.panos if split is None or p.split == split]
        hp = manifest.pano_height_px
        size = (hp, 2 * hp)
        metadata = {
            "panos": {
                str(p.id): {
                    "x": p.x,
                    "y": p.y,
                    "tile_id": p.tile_id,
                    "subset": p.subset,
                    "split": p.split,
                }
                for p in records
            }
        }
    else:
        raise ValueError(f"which must be queries or references, got {which!r}")

    imgs = _load_images(manifest, records, size)
    rows = []
    for lo in range(0, len(records), batch):
        _, f = encode(None, params, imgs[lo : lo + batch])
        rows.append(f.data)
    matrix = np.concatenate(rows, axis=0) if rows else np.zeros((0, 1), np.float32)
    return build_database(
        matrix,
        [r.id for r in records],
        kind=which,
        metadata=metadata,
        normalize=False,
    )


def similarity_heatmap(
    ckpt: Checkpoint, pano_img: np.ndarray, tile_img: np.ndarray
) -> np.ndarray:
    """Level-1 cosine map of a street embedding over an aerial tile.

    Returned upsampled to the tile's pixel size and min-max scaled to
    [0, 1] for rendering.
    """
    params = ckpt.encoder()
    _, f_s = encode(None, params, pano_img[None])
    fmap_a, _ = encode(None, params, tile_img[None])
    pyr = similarity_pyramid(
        tl.Tensor(f_s.data[0]), tl.Tensor(fmap_a.data[0])
    )
    m = pyr.levels[0]
    heat = resize_bilinear(m, tile_img.shape[0], tile_img.shape[1])
    lo, hi = heat.min(), heat.max()
    return (heat - lo) / max(hi - lo, 1e-9)


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    names = sorted(ckpt.params)
    header = json.dumps(
        {
            "config": ckpt.config.to_dict(),
            "epoch": ckpt.epoch,
            "loss_trace": ckpt.loss_trace,
            "param_names": names,
        }
    ).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        fh.write(struct.pack("<I", len(names)))
        for name in names:
            t = ckpt.params[name]
            nb = name.encode()
            fh.write(struct.pack("<I", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<I", t.data.ndim))
            fh.write(struct.pack(f"<{t.data.ndim}I", *t.data.shape))
            fh.write(np.ascontiguousarray(t.data, dtype="<f4").tobytes())


def _read_exact(fh, n: int) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise TruncatedFileError(f"expected {n} bytes, file ended after {len(buf)}")
    return buf


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        magic = _read_exact(fh, 4)
        if magic != MAGIC:
            raise BadMagicError(MAGIC, magic)
        (version,) = struct.unpack("<I", _read_exact(fh, 4))
        if version != VERSION:
            raise BadVersionError(f"unsupported CVCK version {version}")
        (hlen,) = struct.unpack("<I", _read_exact(fh, 4))
        header = json.loads(_read_exact(fh, hlen))
        (n_params,) = struct.unpack("<I", _read_exact(fh, 4))
        params = {}
        for _ in range(n_params):
            (nlen,) = struct.unpack("<I", _read_exact(fh, 4))
            name = _read_exact(fh, nlen).decode()
            (ndim,) = struct.unpack("<I", _read_exact(fh, 4))
            shape = struct.unpack(f"<{ndim}I", _read_exact(fh, 4 * ndim))
            count = int(np.prod(shape)) if shape else 1
            data = np.frombuffer(_read_exact(fh, 4 * count), dtype="<f4").reshape(shape)
            params[name] = tl.Tensor(data.copy())
    config = TrainConfig.from_dict(header["config"])
    return Checkpoint(
        params=params,
        config=config,
        epoch=header["epoch"],
        loss_trace=header["loss_trace"],
    )
