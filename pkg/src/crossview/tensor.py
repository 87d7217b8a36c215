"""float32 tensors with tape-recorded reverse-mode gradients.

The operation set is exactly what the tiny encoder and the training
objectives need: affine maps, odd-kernel strided convolution, average
pooling, row normalization, tempered softmax and elementwise basics.
Forward arithmetic runs in float64 and results are stored as float32;
scalar results additionally keep their float64 value (``Tensor.scalar64``)
so finite-difference checks are not dominated by float32 rounding of the
objective.

A ``Tape`` records one backward closure per op in execution order and
replays them in reverse. Passing ``tape=None`` to any op skips recording
(the pure inference path). One tape is single-threaded; independent
tapes may run concurrently.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence, Union

import numpy as np

from crossview.errors import NonFiniteError

__all__ = [
    "Tensor",
    "Tape",
    "GradCheckReport",
    "linear",
    "conv2d",
    "avg_pool2d",
    "global_avg_pool",
    "l2_normalize",
    "softmax",
    "relu",
    "exp",
    "add",
    "mul",
    "bias_add",
    "sum_all",
    "weighted_sum",
    "batch_item",
    "finite_diff_check",
]


class Tensor:
    """Dense row-major float32 array with an optional gradient buffer.

    Op results keep their float64 accumulator array in ``data64`` so
    that chained ops and finite-difference checks see full precision;
    ``data`` is always the float32 storage buffer. Leaf tensors (user
    constructed, parameters) have no ``data64``.
    """

    __slots__ = ("data", "data64", "grad", "scalar64")

    def __init__(self, data, check: bool = True):
        arr = np.ascontiguousarray(np.asarray(data, dtype=np.float32))
        if check and not np.all(np.isfinite(arr)):
            raise NonFiniteError("tensor constructed with non-finite entries")
        self.data = arr
        self.data64: Optional[np.ndarray] = None
        self.grad: Optional[np.ndarray] = None
        self.scalar64: Optional[float] = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    def item(self) -> float:
        """Scalar value, at float64 precision when the producing op kept it."""
        if self.data.size != 1:
            raise ValueError(f"item() on tensor of shape {self.data.shape}")
        if self.scalar64 is not None:
            return self.scalar64
        return float(self.data.reshape(-1)[0])

    def add_grad(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += np.asarray(g, dtype=np.float32)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={tuple(self.data.shape)})"


class Tape:
    """Execution-ordered record of backward closures.

    ``backward`` seeds the scalar output's gradient with 1 and replays
    the closures in reverse; call it at most once per tape.
    """

    def __init__(self):
        self._ops: list = []

    def record(self, backward_fn: Callable[[], None]) -> None:
        self._ops.append(backward_fn)

    def __len__(self) -> int:
        return len(self._ops)

    def backward(self, out: Tensor) -> None:
        if out.data.size != 1:
            raise ValueError("backward requires a scalar output")
        out.add_grad(np.ones_like(out.data))
        for fn in reversed(self._ops):
            fn()


def _make(arr64, op: str, scalar64: Optional[float] = None) -> Tensor:
    a64 = np.ascontiguousarray(np.asarray(arr64, dtype=np.float64))
    out = Tensor(a64.astype(np.float32), check=False)
    if not np.all(np.isfinite(out.data)):
        raise NonFiniteError(f"non-finite values produced by {op}")
    out.data64 = a64
    out.scalar64 = scalar64
    return out


def _f64(t: Tensor) -> np.ndarray:
    if t.data64 is not None:
        return t.data64
    return t.data.astype(np.float64)


def linear(tape: Optional[Tape], x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """y = x @ w + b for x [B, Cin], w [Cin, Cout], b [Cout]."""
    if x.data.ndim != 2 or w.data.ndim != 2 or b.data.ndim != 1:
        raise ValueError("linear expects x [B,Cin], w [Cin,Cout], b [Cout]")
    if x.shape[1] != w.shape[0] or w.shape[1] != b.shape[0]:
        raise ValueError(
            f"linear shape mismatch: x {x.shape}, w {w.shape}, b {b.shape}"
        )
    x64, w64, b64 = _f64(x), _f64(w), _f64(b)
    out = _make(x64 @ w64 + b64, "linear")

    if tape is not None:
        def backward():
            g = out.grad.astype(np.float64)
            x.add_grad(g @ w64.T)
            w.add_grad(x64.T @ g)
            b.add_grad(g.sum(axis=0))

        tape.record(backward)
    return out


def conv2d(tape: Optional[Tape], x: Tensor, k: Tensor, stride: int = 1) -> Tensor:
    """Cross-correlation of x [B,H,W,Cin] with k [kh,kw,Cin,Cout].

    Zero padding of kh//2 per side, so stride 1 preserves the spatial
    size (the correspondence the position losses rely on).
    """
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    if x.data.ndim != 4 or k.data.ndim != 4:
        raise ValueError("conv2d expects x [B,H,W,Cin] and k [kh,kw,Cin,Cout]")
    kh, kw, cin, cout = k.shape
    if kh != kw or kh % 2 == 0:
        raise ValueError(f"kernel must be square with odd size, got {kh}x{kw}")
    b, h, w, cx = x.shape
    if cx != cin:
        raise ValueError(f"channel mismatch: input {cx}, kernel {cin}")
    if h < kh or w < kw:
        raise ValueError(f"input {h}x{w} smaller than kernel {kh}")
    p = kh // 2
    ho = (h + 2 * p - kh) // stride + 1
    wo = (w + 2 * p - kw) // stride + 1

    xp = np.zeros((b, h + 2 * p, w + 2 * p, cin), dtype=np.float64)
    xp[:, p : p + h, p : p + w, :] = _f64(x)
    k64 = _f64(k)
    acc = np.zeros((b, ho, wo, cout), dtype=np.float64)
    for di in range(kh):
        for dj in range(kw):
            patch = xp[:, di : di + stride * ho : stride, dj : dj + stride * wo : stride, :]
            acc += patch @ k64[di, dj]
    out = _make(acc, "conv2d")

    if tape is not None:
        def backward():
            g = out.grad.astype(np.float64)
            gk = np.zeros_like(k64)
            gxp = np.zeros_like(xp)
            for di in range(kh):
                for dj in range(kw):
                    si = slice(di, di + stride * ho, stride)
                    sj = slice(dj, dj + stride * wo, stride)
                    gk[di, dj] = np.einsum("bhwc,bhwd->cd", xp[:, si, sj, :], g)
                    gxp[:, si, sj, :] += g @ k64[di, dj].T
            x.add_grad(gxp[:, p : p + h, p : p + w, :])
            k.add_grad(gk)

        tape.record(backward)
    return out


def avg_pool2d(tape: Optional[Tape], x: Tensor, factor: int) -> Tensor:
    """Non-overlapping window means over the two spatial axes.

    Accepts [B,H,W,C] or a single sample [H,W,C].
    """
    if factor < 1:
        raise ValueError(f"pool factor must be >= 1, got {factor}")
    arr = _f64(x)
    if arr.ndim not in (3, 4):
        raise ValueError("avg_pool2d expects [B,H,W,C] or [H,W,C]")
    h, w = arr.shape[-3], arr.shape[-2]
    if h % factor or w % factor:
        raise ValueError(f"spatial dims {h}x{w} not divisible by {factor}")
    if factor == 1:
        out = _make(arr, "avg_pool2d")
        if tape is not None:
            tape.record(lambda: x.add_grad(out.grad))
        return out
    lead = arr.shape[:-3]
    c = arr.shape[-1]
    shaped = arr.reshape(*lead, h // factor, factor, w // factor, factor, c)
    out = _make(shaped.mean(axis=(-4, -2), dtype=np.float64), "avg_pool2d")

    if tape is not None:
        def backward():
            g = out.grad.astype(np.float64) / (factor * factor)
            g = np.repeat(np.repeat(g, factor, axis=-3), factor, axis=-2)
            x.add_grad(g)

        tape.record(backward)
    return out


def global_avg_pool(tape: Optional[Tape], x: Tensor) -> Tensor:
    """Mean over the full spatial extent: [B,H,W,C] -> [B,C]."""
    if x.data.ndim != 4:
        raise ValueError("global_avg_pool expects [B,H,W,C]")
    _, h, w, _ = x.shape
    out = _make(_f64(x).mean(axis=(1, 2)), "global_avg_pool")

    if tape is not None:
        def backward():
            g = out.grad.astype(np.float64) / (h * w)
            x.add_grad(np.broadcast_to(g[:, None, None, :], x.shape))

        tape.record(backward)
    return out


def l2_normalize(tape: Optional[Tape], x: Tensor, eps: float = 1e-12) -> Tensor:
    """Divide each row of x [B,C] by max(||row||_2, eps)."""
    if x.data.ndim != 2:
        raise ValueError("l2_normalize expects [B,C]")
    x64 = _f64(x)
    norms = np.sqrt((x64 * x64).sum(axis=1))
    denom = np.maximum(norms, eps)
    out = _make(x64 / denom[:, None], "l2_normalize")

    if tape is not None:
        def backward():
            g = out.grad.astype(np.float64)
            gx = g / denom[:, None]
            live = norms >= eps  # below eps the denominator is constant
            dot = (g * x64).sum(axis=1)
            gx[live] -= x64[live] * (dot[live] / denom[live] ** 3)[:, None]
            x.add_grad(gx)

        tape.record(backward)
    return out


def softmax(tape: Optional[Tape], x: Tensor, temp: float = 1.0) -> Tensor:
    """Tempered softmax of a 1-D tensor, max-subtracted for stability."""
    if temp <= 0:
        raise ValueError(f"softmax temperature must be > 0, got {temp}")
    if x.data.ndim != 1:
        raise ValueError("softmax expects a 1-D tensor")
    z = (_f64(x) - float(x.data.max())) / temp
    e = np.exp(z)
    y64 = e / e.sum()
    out = _make(y64, "softmax")

    if tape is not None:
        def backward():
            g = out.grad.astype(np.float64)
            x.add_grad((y64 * (g - (g * y64).sum())) / temp)

        tape.record(backward)
    return out


def relu(tape: Optional[Tape], x: Tensor) -> Tensor:
    x64 = _f64(x)
    mask = x64 > 0
    out = _make(np.where(mask, x64, 0.0), "relu")
    if tape is not None:
        tape.record(lambda: x.add_grad(np.where(mask, out.grad, 0.0)))
    return out


def exp(tape: Optional[Tape], x: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        y64 = np.exp(_f64(x))
    s64 = float(y64.reshape(-1)[0]) if y64.size == 1 else None
    out = _make(y64, "exp", scalar64=s64)
    if tape is not None:
        tape.record(lambda: x.add_grad(out.grad.astype(np.float64) * y64))
    return out


def add(tape: Optional[Tape], a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ValueError(f"add shape mismatch: {a.shape} vs {b.shape}")
    out = _make(_f64(a) + _f64(b), "add")
    if tape is not None:
        def backward():
            a.add_grad(out.grad)
            b.add_grad(out.grad)

        tape.record(backward)
    return out


def mul(tape: Optional[Tape], a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ValueError(f"mul shape mismatch: {a.shape} vs {b.shape}")
    a64, b64 = _f64(a), _f64(b)
    y64 = a64 * b64
    s64 = float(y64.reshape(-1)[0]) if y64.size == 1 else None
    out = _make(y64, "mul", scalar64=s64)
    if tape is not None:
        def backward():
            g = out.grad.astype(np.float64)
            a.add_grad(g * b64)
            b.add_grad(g * a64)

        tape.record(backward)
    return out


def bias_add(tape: Optional[Tape], x: Tensor, b: Tensor) -> Tensor:
    """Add a per-channel bias b [C] to x [..., C]."""
    if b.data.ndim != 1 or x.shape[-1] != b.shape[0]:
        raise ValueError(f"bias_add channel mismatch: x {x.shape}, b {b.shape}")
    out = _make(_f64(x) + _f64(b), "bias_add")

    if tape is not None:
        def backward():
            x.add_grad(out.grad)
            axes = tuple(range(out.grad.ndim - 1))
            b.add_grad(out.grad.astype(np.float64).sum(axis=axes))

        tape.record(backward)
    return out


def sum_all(tape: Optional[Tape], x: Tensor) -> Tensor:
    """Sum of all entries, kept at float64 precision."""
    s = float(_f64(x).sum())
    out = _make(s, "sum_all", scalar64=s)
    if tape is not None:
        def backward():
            g = float(out.grad.reshape(-1)[0])
            x.add_grad(np.full(x.shape, g, dtype=np.float64))

        tape.record(backward)
    return out


def weighted_sum(
    tape: Optional[Tape],
    terms: Sequence[Tensor],
    weights: Sequence[float],
) -> Tensor:
    """Weighted sum of scalar tensors (float64 accumulation)."""
    if len(terms) != len(weights):
        raise ValueError("terms and weights differ in length")
    if not terms:
        raise ValueError("weighted_sum of nothing")
    for t in terms:
        if t.data.size != 1:
            raise ValueError("weighted_sum terms must be scalars")
    s = float(sum(w * t.item() for t, w in zip(terms, weights)))
    out = _make(s, "weighted_sum", scalar64=s)

    if tape is not None:
        def backward():
            g = float(out.grad.reshape(-1)[0])
            for t, w in zip(terms, weights):
                t.add_grad(np.full(t.shape, w * g, dtype=np.float64))

        tape.record(backward)
    return out


def batch_item(tape: Optional[Tape], x: Tensor, index: int) -> Tensor:
    """Select sample ``index`` along the leading axis."""
    if not 0 <= index < x.shape[0]:
        raise ValueError(f"index {index} out of range for batch {x.shape[0]}")
    out = _make(_f64(x)[index].copy(), "batch_item")

    if tape is not None:
        def backward():
            if x.grad is None:
                x.grad = np.zeros_like(x.data)
            x.grad[index] += out.grad

        tape.record(backward)
    return out


@dataclass
class GradCheckReport:
    """Worst relative disagreement between tape and central differences."""

    op_name: str
    max_rel_error: float
    eps: float


def _scalar_value(t: Union[Tensor, float]) -> float:
    if isinstance(t, Tensor):
        return t.item()
    return float(t)


def finite_diff_check(
    op_closure: Callable[[Optional[Tape]], Tensor],
    inputs: Sequence[Tensor],
    eps: float = 1e-3,
    op_name: str = "op",
) -> GradCheckReport:
    """Compare tape gradients of a scalar-valued closure with central differences.

    ``op_closure(tape)`` must rebuild the computation from the current
    contents of ``inputs`` and return a scalar. Every entry of every
    input is perturbed by +-eps; the divisor is the perturbation that
    was actually realized in float32 storage, which keeps the check
    meaningful at float32 resolution.
    """
    for p in inputs:
        p.zero_grad()
    tape = Tape()
    out = op_closure(tape)
    if out.data.size != 1:
        raise ValueError("gradient check requires a scalar objective")
    tape.backward(out)
    analytic = [
        np.zeros_like(p.data, dtype=np.float64)
        if p.grad is None
        else p.grad.astype(np.float64).copy()
        for p in inputs
    ]

    worst = 0.0
    for p, ga in zip(inputs, analytic):
        flat = p.data.reshape(-1)
        gflat = ga.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            hi = np.float32(float(orig) + eps)
            lo = np.float32(float(orig) - eps)
            flat[i] = hi
            f_hi = _scalar_value(op_closure(None))
            flat[i] = lo
            f_lo = _scalar_value(op_closure(None))
            flat[i] = orig
            numeric = (f_hi - f_lo) / (float(hi) - float(lo))
            rel = abs(gflat[i] - numeric) / max(abs(numeric), 1e-8)
            worst = max(worst, rel)
    return GradCheckReport(op_name=op_name, max_rel_error=worst, eps=eps)
