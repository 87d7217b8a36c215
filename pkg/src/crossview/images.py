"""8-bit PNG read/write around a float [0,1] in-memory representation."""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image


def save_png(path, arr: np.ndarray) -> None:
    """Write [H,W], [H,W,1] or [H,W,3] float data in [0,1] as 8-bit PNG."""
    a = np.asarray(arr, dtype=np.float64)
    if a.ndim == 3 and a.shape[2] == 1:
        a = a[:, :, 0]
    if a.ndim not in (2, 3):
        raise ValueError(f"cannot write array of shape {arr.shape} as PNG")
    q = np.clip(np.rint(a * 255.0), 0, 255).astype(np.uint8)
    mode = "L" if q.ndim == 2 else "RGB"
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(q, mode=mode).save(path)


def resize_bilinear(arr: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize of a 2-D array with pixel-center alignment."""
    h, w = arr.shape
    vi = np.clip((np.arange(out_h) + 0.5) * h / out_h - 0.5, 0, h - 1)
    ui = np.clip((np.arange(out_w) + 0.5) * w / out_w - 0.5, 0, w - 1)
    v0 = np.floor(vi).astype(int)
    u0 = np.floor(ui).astype(int)
    v1 = np.minimum(v0 + 1, h - 1)
    u1 = np.minimum(u0 + 1, w - 1)
    fv = (vi - v0)[:, None]
    fu = (ui - u0)[None, :]
    top = arr[np.ix_(v0, u0)] * (1 - fu) + arr[np.ix_(v0, u1)] * fu
    bot = arr[np.ix_(v1, u0)] * (1 - fu) + arr[np.ix_(v1, u1)] * fu
    return top * (1 - fv) + bot * fv


def load_png(path) -> np.ndarray:
    """Read a PNG as float [H,W,C] in [0,1], C = 1 (grayscale) or 3."""
    with Image.open(path) as im:
        if im.mode not in ("L", "RGB"):
            im = im.convert("RGB" if im.mode in ("RGBA", "P", "CMYK") else "L")
        a = np.asarray(im, dtype=np.float32) / 255.0
    if a.ndim == 2:
        a = a[:, :, None]
    return a
