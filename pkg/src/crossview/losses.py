"""Training objectives with hand-written gradients.

Three pairwise symmetric InfoNCE terms couple the street, BEV and
aerial embeddings (the BEV view acts as the intermediary that splits
"cross-view with offset" into a pure cross-view problem and a pure
offset problem), and a multi-level position-regression term pins the
query's location on the aerial feature map:

    loss = L_street/aerial
         + lambda_bev_street  * L_bev/street
         + lambda_bev_aerial  * L_bev/aerial
         + lambda_position    * mean_batch(position loss)

The position loss builds an average-pooling pyramid (factors 1, 2, 4)
over the aerial feature map, computes the cosine similarity of each
coarse embedding against every pyramid pixel, soft-argmaxes the map
into a continuous position, and penalizes the Euclidean distance to the
geo-tag prior at that level. None of this adds learnable components.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence, Union

import numpy as np

from crossview import counters
from crossview.tensor import (
    Tape,
    Tensor,
    _make,
    avg_pool2d,
    batch_item,
    weighted_sum,
)

__all__ = [
    "LossWeights",
    "PositionPrior",
    "SimilarityPyramid",
    "RegressedPosition",
    "info_nce_symmetric",
    "similarity_map",
    "soft_match",
    "euclidean_distance",
    "pcm_loss",
    "total_loss",
    "similarity_pyramid",
    "regress_positions",
    "PYRAMID_FACTORS",
]

PYRAMID_FACTORS = (1, 2, 4)


@dataclass
class LossWeights:
    """Balancing weights of the composite objective plus the temperature."""

    lambda_bev_street: float = 0.1
    lambda_bev_aerial: float = 0.1
    lambda_position: float = 0.05
    temperature: float = 0.05

    def __post_init__(self):
        if min(self.lambda_bev_street, self.lambda_bev_aerial, self.lambda_position) < 0:
            raise ValueError("loss weights must be non-negative")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")


@dataclass(frozen=True)
class PositionPrior:
    """Query location in level-1 feature-map pixels; scaled per level."""

    x: float
    y: float

    def at_level(self, level_index: int) -> np.ndarray:
        return np.array([self.x, self.y], dtype=np.float64) / 2.0**level_index


@dataclass
class SimilarityPyramid:
    """Cosine maps of one embedding against pooled feature maps."""

    levels: list  # np arrays [H_i, W_i], values in [-1, 1]
    factors: tuple = PYRAMID_FACTORS


@dataclass(frozen=True)
class RegressedPosition:
    x: float
    y: float
    factor: int


def _temp_value(temp: Union[float, Tensor]) -> float:
    if isinstance(temp, Tensor):
        return temp.item()
    return float(temp)


def info_nce_symmetric(
    tape: Optional[Tape],
    fq: Tensor,
    fr: Tensor,
    temp: Union[float, Tensor],
) -> Tensor:
    """Mean of row-wise and column-wise InfoNCE on S = fq @ fr.T.

    Diagonal pairs are the positives; the rest of the batch are the
    negatives. Rows are expected L2-normalized so dot products are
    cosines. ``temp`` may be a scalar tensor, in which case it receives
    gradient too.
    """
    if fq.data.ndim != 2 or fq.shape != fr.shape:
        raise ValueError(f"embedding shapes must match: {fq.shape} vs {fr.shape}")
    b = fq.shape[0]
    if b == 0:
        raise ValueError("empty batch")
    tau = _temp_value(temp)
    if tau <= 0:
        raise ValueError(f"temperature must be positive, got {tau}")

    fq64 = fq.data64 if fq.data64 is not None else fq.data.astype(np.float64)
    fr64 = fr.data64 if fr.data64 is not None else fr.data.astype(np.float64)
    scores = fq64 @ fr64.T
    z = scores / tau
    zmax_r = z.max(axis=1, keepdims=True)
    lse_r = zmax_r[:, 0] + np.log(np.exp(z - zmax_r).sum(axis=1))
    zmax_c = z.max(axis=0, keepdims=True)
    lse_c = zmax_c[0, :] + np.log(np.exp(z - zmax_c).sum(axis=0))
    diag = np.diag(z)
    value = 0.5 * ((lse_r - diag).mean() + (lse_c - diag).mean())

    out = _make(value, "info_nce_symmetric", scalar64=float(value))

    if tape is not None:
        def backward():
            g = float(out.grad.reshape(-1)[0])
            p_row = np.exp(z - lse_r[:, None])
            p_col = np.exp(z - lse_c[None, :])
            eye = np.eye(b)
            dz = g * ((p_row - eye) + (p_col - eye)) / (2.0 * b)
            fq.add_grad(dz @ fr64 / tau)
            fr.add_grad(dz.T @ fq64 / tau)
            if isinstance(temp, Tensor):
                temp.add_grad(
                    np.full(temp.shape, -(dz * scores).sum() / tau**2, dtype=np.float64)
                )

        tape.record(backward)
    return out


def similarity_map(
    tape: Optional[Tape],
    f: Tensor,
    fmap: Tensor,
    eps: float = 1e-12,
) -> Tensor:
    """Cosine of one embedding f [C] against every pixel of fmap [H,W,C].

    Parameter-free by design: the map is pure geometry over the
    representation space.
    """
    if f.data.ndim != 1 or fmap.data.ndim != 3 or fmap.shape[2] != f.shape[0]:
        raise ValueError(f"similarity_map shapes: f {f.shape}, fmap {fmap.shape}")
    f64 = f.data64 if f.data64 is not None else f.data.astype(np.float64)
    g64 = fmap.data64 if fmap.data64 is not None else fmap.data.astype(np.float64)
    nf = max(float(np.sqrt((f64 * f64).sum())), eps)
    ng = np.maximum(np.sqrt((g64 * g64).sum(axis=2)), eps)
    m = (g64 @ f64) / (nf * ng)

    out = _make(m, "similarity_map")

    if tape is not None:
        def backward():
            gm = out.grad.astype(np.float64)
            w = gm / (nf * ng)
            df = np.einsum("hw,hwc->c", w, g64)
            if nf > eps:
                df -= (f64 / nf**2) * (gm * m).sum()
            dg = w[:, :, None] * f64[None, None, :]
            live = ng > eps
            coef = np.where(live, gm * m / ng**2, 0.0)
            dg -= coef[:, :, None] * g64
            f.add_grad(df)
            fmap.add_grad(dg)

        tape.record(backward)
    return out


def soft_match(tape: Optional[Tape], m: Tensor, match_temp: float) -> Tensor:
    """Soft-argmax of a similarity map: softmax-weighted grid centroid.

    Returns a length-2 tensor (x, y) in continuous pixel coordinates of
    the map's own grid; always inside the convex hull [0, W-1]x[0, H-1].
    """
    if match_temp <= 0:
        raise ValueError(f"match temperature must be positive, got {match_temp}")
    if m.data.ndim != 2:
        raise ValueError(f"soft_match expects [H,W], got {m.shape}")
    h, w = m.shape
    m64 = m.data64 if m.data64 is not None else m.data.astype(np.float64)
    z = (m64 - m64.max()) / match_temp
    wts = np.exp(z)
    wts /= wts.sum()
    cols, rows = np.meshgrid(np.arange(w), np.arange(h))
    x_hat = float((wts * cols).sum())
    y_hat = float((wts * rows).sum())

    out = _make(np.array([x_hat, y_hat]), "soft_match")

    if tape is not None:
        def backward():
            gx, gy = float(out.grad[0]), float(out.grad[1])
            dm = wts * (gx * (cols - x_hat) + gy * (rows - y_hat)) / match_temp
            m.add_grad(dm)

        tape.record(backward)
    return out


def euclidean_distance(tape: Optional[Tape], pred: Tensor, target) -> Tensor:
    """||pred - target||_2 for a length-2 position, guarded at zero."""
    if pred.data.ndim != 1 or pred.shape[0] != 2:
        raise ValueError(f"expected a length-2 position, got {pred.shape}")
    t = np.asarray(target, dtype=np.float64).reshape(2)
    p64 = pred.data64 if pred.data64 is not None else pred.data.astype(np.float64)
    delta = p64 - t
    d = float(np.sqrt((delta * delta).sum() + 1e-18))

    out = _make(d, "euclidean_distance", scalar64=d)

    if tape is not None:
        def backward():
            g = float(out.grad.reshape(-1)[0])
            pred.add_grad(g * delta / d)

        tape.record(backward)
    return out


def pcm_loss(
    tape: Optional[Tape],
    f_street: Tensor,
    f_bev: Tensor,
    fmap_aerial: Tensor,
    prior: PositionPrior,
    match_temp: float,
) -> Tensor:
    """Multi-level position regression of one sample against its prior.

    For each pyramid level (pool factors 1, 2, 4) and each of the two
    coarse embeddings: similarity map -> soft match -> Euclidean
    distance to the prior scaled to that level; summed over all six
    terms.
    """
    if fmap_aerial.data.ndim != 3:
        raise ValueError(f"expected [H,W,C] aerial features, got {fmap_aerial.shape}")
    h, w, _ = fmap_aerial.shape
    top = max(PYRAMID_FACTORS)
    if h % top or w % top:
        raise ValueError(f"feature map {h}x{w} not divisible by {top}")
    if not (-1e-6 <= prior.x <= w - 1 + 1e-6 and -1e-6 <= prior.y <= h - 1 + 1e-6):
        raise ValueError(
            f"position prior ({prior.x}, {prior.y}) outside the {h}x{w} map"
        )
    counters.increment("pcm_loss")

    terms = []
    for level_index, factor in enumerate(PYRAMID_FACTORS):
        level = avg_pool2d(tape, fmap_aerial, factor)
        pos = prior.at_level(level_index)
        for branch in (f_street, f_bev):
            m = similarity_map(tape, branch, level)
            reg = soft_match(tape, m, match_temp)
            terms.append(euclidean_distance(tape, reg, pos))
    return weighted_sum(tape, terms, [1.0] * len(terms))


def total_loss(
    tape: Optional[Tape],
    f_street: Tensor,
    f_aerial: Tensor,
    weights: LossWeights,
    f_bev: Optional[Tensor] = None,
    fmap_aerial: Optional[Tensor] = None,
    priors: Optional[Sequence[PositionPrior]] = None,
    match_temp: float = 0.05,
    temperature: Union[float, Tensor, None] = None,
):
    """Composite objective; returns (scalar loss, component values).

    Terms with zero weight are skipped entirely, so the all-zero
    configuration is bit-for-bit the plain street-aerial InfoNCE
    baseline. The position term is averaged over the batch.
    """
    if f_street.shape != f_aerial.shape:
        raise ValueError(
            f"batch mismatch: street {f_street.shape}, aerial {f_aerial.shape}"
        )
    b = f_street.shape[0]
    temp = temperature if temperature is not None else weights.temperature

    use_bev = weights.lambda_bev_street > 0 or weights.lambda_bev_aerial > 0
    use_pos = weights.lambda_position > 0
    if (use_bev or use_pos) and f_bev is None:
        raise ValueError("BEV embeddings required by the configured weights")
    if f_bev is not None and f_bev.shape != f_street.shape:
        raise ValueError(f"batch mismatch: bev {f_bev.shape}, street {f_street.shape}")

    l_sa = info_nce_symmetric(tape, f_street, f_aerial, temp)
    terms, coefs = [l_sa], [1.0]
    parts = {
        "street_aerial": l_sa.item(),
        "bev_street": 0.0,
        "bev_aerial": 0.0,
        "position": 0.0,
    }

    if weights.lambda_bev_street > 0:
        l_bs = info_nce_symmetric(tape, f_bev, f_street, temp)
        terms.append(l_bs)
        coefs.append(weights.lambda_bev_street)
        parts["bev_street"] = l_bs.item()
    if weights.lambda_bev_aerial > 0:
        l_ba = info_nce_symmetric(tape, f_bev, f_aerial, temp)
        terms.append(l_ba)
        coefs.append(weights.lambda_bev_aerial)
        parts["bev_aerial"] = l_ba.item()
    if use_pos:
        if fmap_aerial is None or priors is None:
            raise ValueError("position term requires aerial feature maps and priors")
        if len(priors) != b or fmap_aerial.shape[0] != b:
            raise ValueError("priors and aerial maps must cover the whole batch")
        sample_losses = [
            pcm_loss(
                tape,
                batch_item(tape, f_street, i),
                batch_item(tape, f_bev, i),
                batch_item(tape, fmap_aerial, i),
                priors[i],
                match_temp,
            )
            for i in range(b)
        ]
        l_pos = weighted_sum(tape, sample_losses, [1.0 / b] * b)
        terms.append(l_pos)
        coefs.append(weights.lambda_position)
        parts["position"] = l_pos.item()

    loss = weighted_sum(tape, terms, coefs)
    return loss, parts


def similarity_pyramid(f: Tensor, fmap: Tensor) -> SimilarityPyramid:
    """Gradient-free cosine pyramid, for inspection and heatmaps."""
    maps = []
    for factor in PYRAMID_FACTORS:
        level = avg_pool2d(None, fmap, factor)
        maps.append(similarity_map(None, f, level).data.copy())
    return SimilarityPyramid(levels=maps, factors=PYRAMID_FACTORS)


def regress_positions(pyr: SimilarityPyramid, match_temp: float):
    """Gradient-free soft-argmax of every pyramid level."""
    out = []
    for m, factor in zip(pyr.levels, pyr.factors):
        xy = soft_match(None, Tensor(m), match_temp)
        out.append(RegressedPosition(x=float(xy.data[0]), y=float(xy.data[1]), factor=factor))
    return out
