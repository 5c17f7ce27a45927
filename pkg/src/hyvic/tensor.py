"""Dense float64 tensors with tape-based reverse-mode differentiation.

Only the operations the codec needs are provided.  Binary elementwise ops
require identical shapes; there is no broadcasting.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

__all__ = [
    "ShapeError",
    "Tensor",
    "Parameter",
    "Tape",
    "backward",
    "make_op",
    "no_record",
    "add",
    "sub",
    "mul",
    "scale",
    "add_scalar",
    "square",
    "exp",
    "log2",
    "clamp_min",
    "tensor_sum",
    "mean",
    "channel_slice",
    "conv2d",
    "conv_transpose2d",
    "leaky_relu",
    "conv_output_size",
    "conv_transpose_output_size",
]


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible with an operation."""


class Tensor:
    """A float64 array, optionally tracked for differentiation."""

    __slots__ = ("data", "requires_grad", "grad", "name", "_is_leaf")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.ascontiguousarray(np.asarray(data, dtype=np.float64))
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name
        self._is_leaf = True

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _not_scalar(self)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        if isinstance(other, Tensor):
            return add(self, other)
        return add_scalar(self, float(other))

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, Tensor):
            return sub(self, other)
        return add_scalar(self, -float(other))

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)


class Parameter(Tensor):
    """A named trainable leaf tensor."""

    __slots__ = ()

    def __init__(self, data, name: str):
        super().__init__(data, requires_grad=True, name=name)


def _not_scalar(t: Tensor):
    raise ShapeError(f"expected a single-element tensor, got shape {t.shape}")


class _Record:
    __slots__ = ("out", "inputs", "backward_fn")

    def __init__(self, out, inputs, backward_fn):
        self.out = out
        self.inputs = inputs
        self.backward_fn = backward_fn


_TAPES: list["Tape"] = []
_SUSPENDED = [0]


class Tape:
    """Ordered record of differentiable operations.

    Operations executed inside ``with Tape() as tape:`` whose inputs require
    gradients are appended in execution order.
    """

    def __init__(self):
        self.records: list[_Record] = []

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPES.remove(self)

    def __len__(self) -> int:
        return len(self.records)


class no_record:
    """Context manager that suspends tape recording."""

    def __enter__(self):
        _SUSPENDED[0] += 1

    def __exit__(self, *exc):
        _SUSPENDED[0] -= 1


def make_op(
    out_data: np.ndarray,
    inputs: Sequence[Tensor],
    backward_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]],
) -> Tensor:
    """Wrap ``out_data`` as the result of an op and record it when tracking.

    ``backward_fn`` maps the output gradient to one gradient per input (or
    ``None`` for inputs that receive no gradient).
    """
    out = Tensor(out_data)
    out._is_leaf = False
    if _TAPES and not _SUSPENDED[0] and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        _TAPES[-1].records.append(_Record(out, tuple(inputs), backward_fn))
    return out


def backward(loss: Tensor, tape: Tape) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf."""
    if loss.data.size != 1:
        raise ShapeError(f"backward requires a scalar loss, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for rec in reversed(tape.records):
        g = grads.pop(id(rec.out), None)
        if g is None:
            continue
        for inp, gi in zip(rec.inputs, rec.backward_fn(g)):
            if gi is None or not inp.requires_grad:
                continue
            if inp._is_leaf:
                inp.grad = gi.copy() if inp.grad is None else inp.grad + gi
            else:
                key = id(inp)
                grads[key] = gi if key not in grads else grads[key] + gi
    if loss._is_leaf and loss.requires_grad:
        loss.grad = np.ones_like(loss.data) if loss.grad is None else loss.grad + 1.0


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# elementwise -----------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "add")
    return make_op(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "sub")
    return make_op(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return make_op(ad * bd, (a, b), lambda g: (g * bd, g * ad))


def scale(a: Tensor, c: float) -> Tensor:
    return make_op(a.data * c, (a,), lambda g: (g * c,))


def add_scalar(a: Tensor, c: float) -> Tensor:
    return make_op(a.data + c, (a,), lambda g: (g,))


def square(a: Tensor) -> Tensor:
    ad = a.data
    return make_op(ad * ad, (a,), lambda g: (2.0 * g * ad,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return make_op(out, (a,), lambda g: (g * out,))


def log2(a: Tensor) -> Tensor:
    ad = a.data
    return make_op(np.log2(ad), (a,), lambda g: (g / (ad * np.log(2.0)),))


def clamp_min(a: Tensor, floor: float) -> Tensor:
    """max(a, floor); gradient passes only where a > floor."""
    ad = a.data
    mask = ad > floor
    return make_op(np.where(mask, ad, floor), (a,), lambda g: (g * mask,))


def _scalar(g: np.ndarray) -> float:
    return float(np.asarray(g).reshape(-1)[0])


def tensor_sum(a: Tensor) -> Tensor:
    shape = a.shape
    return make_op(np.array(a.data.sum()), (a,), lambda g: (np.full(shape, _scalar(g)),))


def mean(a: Tensor) -> Tensor:
    shape, n = a.shape, a.data.size
    return make_op(np.array(a.data.mean()), (a,), lambda g: (np.full(shape, _scalar(g) / n),))


def channel_slice(a: Tensor, start: int, stop: int) -> Tensor:
    """Channels ``start:stop`` of a rank-4 tensor."""
    if a.ndim != 4 or not 0 <= start < stop <= a.shape[1]:
        raise ShapeError(f"channel_slice [{start}:{stop}] invalid for shape {a.shape}")
    shape = a.shape

    def bwd(g):
        full = np.zeros(shape)
        full[:, start:stop] = g
        return (full,)

    return make_op(a.data[:, start:stop].copy(), (a,), bwd)


def leaky_relu(a: Tensor, slope: float = 0.01) -> Tensor:
    if not 0.0 < slope < 1.0:
        raise ValueError(f"slope must lie in (0, 1), got {slope}")
    ad = a.data
    pos = ad >= 0
    # subgradient at exactly 0 is taken as `slope`
    dmask = np.where(ad > 0, 1.0, slope)
    return make_op(np.where(pos, ad, slope * ad), (a,), lambda g: (g * dmask,))


# convolution -------------------------------------------------------------------


def conv_output_size(n: int, k: int, stride: int, padding: int) -> int:
    return (n + 2 * padding - k) // stride + 1


def conv_transpose_output_size(n: int, k: int, stride: int, padding: int, output_padding: int) -> int:
    return (n - 1) * stride - 2 * padding + k + output_padding


def _conv_forward(x: np.ndarray, w: np.ndarray, stride: int, padding: int) -> np.ndarray:
    """Cross-correlation of x (B,I,H,W) with w (O,I,k,k)."""
    b, _, h, wd = x.shape
    o, _, k, _ = w.shape
    ho = conv_output_size(h, k, stride, padding)
    wo = conv_output_size(wd, k, stride, padding)
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x
    out = np.zeros((b, o, ho, wo))
    for i in range(k):
        for j in range(k):
            patch = xp[:, :, i : i + stride * (ho - 1) + 1 : stride, j : j + stride * (wo - 1) + 1 : stride]
            out += np.einsum("bihw,oi->bohw", patch, w[:, :, i, j], optimize=True)
    return out


def _conv_adjoint(g: np.ndarray, w: np.ndarray, stride: int, padding: int, in_hw: tuple[int, int]) -> np.ndarray:
    """Adjoint of `_conv_forward` w.r.t. its input; g is (B,O,Ho,Wo)."""
    b, _, ho, wo = g.shape
    _, ci, k, _ = w.shape
    h, wd = in_hw
    hp = max(h + 2 * padding, stride * (ho - 1) + k)
    wp = max(wd + 2 * padding, stride * (wo - 1) + k)
    full = np.zeros((b, ci, hp, wp))
    for i in range(k):
        for j in range(k):
            full[:, :, i : i + stride * (ho - 1) + 1 : stride, j : j + stride * (wo - 1) + 1 : stride] += np.einsum(
                "bohw,oi->bihw", g, w[:, :, i, j], optimize=True
            )
    return full[:, :, padding : padding + h, padding : padding + wd]


def _conv_weight_grad(x: np.ndarray, g: np.ndarray, k: int, stride: int, padding: int) -> np.ndarray:
    """d/dw of <g, conv(x, w)>; returns (O,I,k,k)."""
    _, _, ho, wo = g.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x
    gw = np.empty((g.shape[1], x.shape[1], k, k))
    for i in range(k):
        for j in range(k):
            patch = xp[:, :, i : i + stride * (ho - 1) + 1 : stride, j : j + stride * (wo - 1) + 1 : stride]
            gw[:, :, i, j] = np.einsum("bohw,bihw->oi", g, patch, optimize=True)
    return gw


def _check_conv_args(x: Tensor, w: Tensor, b: Tensor | None, stride: int, in_axis: int, op: str) -> None:
    if x.ndim != 4:
        raise ShapeError(f"{op}: input must be rank 4 (B,C,H,W), got shape {x.shape}")
    if w.ndim != 4 or w.shape[2] != w.shape[3]:
        raise ShapeError(f"{op}: weight must be (a,b,k,k), got shape {w.shape}")
    if x.shape[1] != w.shape[in_axis]:
        raise ShapeError(
            f"{op}: input channel dimension is {x.shape[1]} but weight expects {w.shape[in_axis]}"
        )
    out_ch = w.shape[1 - in_axis]
    if b is not None and b.shape != (out_ch,):
        raise ShapeError(f"{op}: bias must have shape ({out_ch},), got {b.shape}")
    if stride not in (1, 2):
        raise ValueError(f"{op}: stride must be 1 or 2, got {stride}")


def _bias_add(out: np.ndarray, b: Tensor | None) -> np.ndarray:
    if b is not None:
        out += b.data[None, :, None, None]
    return out


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D convolution; weight shape (out_ch, in_ch, k, k)."""
    _check_conv_args(x, w, b, stride, 1, "conv2d")
    k = w.shape[2]
    h, wd = x.shape[2:]
    if conv_output_size(h, k, stride, padding) < 1 or conv_output_size(wd, k, stride, padding) < 1:
        raise ShapeError(f"conv2d: spatial extent {h}x{wd} too small for kernel {k} with padding {padding}")
    xd, wdat = x.data, w.data
    out = _bias_add(_conv_forward(xd, wdat, stride, padding), b)

    def bwd(g):
        gx = _conv_adjoint(g, wdat, stride, padding, (h, wd))
        gw = _conv_weight_grad(xd, g, k, stride, padding)
        gb = g.sum(axis=(0, 2, 3)) if b is not None else None
        return gx, gw, gb

    inputs = (x, w) if b is None else (x, w, b)
    return make_op(out, inputs, bwd)


def conv_transpose2d(
    x: Tensor,
    w: Tensor,
    b: Tensor | None = None,
    stride: int = 2,
    padding: int = 0,
    output_padding: int = 0,
) -> Tensor:
    """Transposed convolution; weight shape (in_ch, out_ch, k, k).

    This is the exact adjoint of `conv2d` with the same weight, stride and
    padding, with `output_padding` extra rows/columns on the high side.
    """
    _check_conv_args(x, w, b, stride, 0, "conv_transpose2d")
    k = w.shape[2]
    if not 0 <= output_padding < stride:
        raise ShapeError(f"conv_transpose2d: output_padding {output_padding} must lie in [0, stride)")
    h, wd = x.shape[2:]
    ho = conv_transpose_output_size(h, k, stride, padding, output_padding)
    wo = conv_transpose_output_size(wd, k, stride, padding, output_padding)
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv_transpose2d: geometry yields empty output {ho}x{wo}")
    xd, wdat = x.data, w.data
    out = _bias_add(_conv_adjoint(xd, wdat, stride, padding, (ho, wo)), b)

    def bwd(g):
        gx = _conv_forward(g, wdat, stride, padding)
        gw = _conv_weight_grad(g, xd, k, stride, padding)
        gb = g.sum(axis=(0, 2, 3)) if b is not None else None
        return gx, gw, gb

    inputs = (x, w) if b is None else (x, w, b)
    return make_op(out, inputs, bwd)
