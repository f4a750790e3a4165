"""Differentiable operations used by the backbone and the losses.

Shapes must match exactly; the only broadcast is the bias of :func:`dense`.
Convolutions run per sample as blocked im2col + gemm; the gather is compiled
with numba so a block is built and consumed while still in cache.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numba
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import DegenerateInputError, DimensionError, InputError, UsageError
from .tensor import Tensor, make_result

_AXES = ("depth", "height", "width")
# im2col block size in elements
_CHUNK_ELEMENTS = 1 << 18


def _triple(value, what: str) -> tuple[int, int, int]:
    if isinstance(value, (int, np.integer)):
        out = (int(value),) * 3
    else:
        out = tuple(int(v) for v in value)
    if len(out) != 3:
        raise DimensionError(f"{what} needs 3 components, got {value!r}")
    return out  # type: ignore[return-value]


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def same_padding(extent: int, kernel: int, stride: int) -> tuple[int, int]:
    """(low, high) padding for 'same' output ceil(extent/stride); odd remainder goes high."""
    out = -(-extent // stride)
    total = max((out - 1) * stride + kernel - extent, 0)
    return total // 2, total - total // 2


def conv_output_extent(extent: int, kernel: int, stride: int, padding: str) -> int:
    if padding == "same":
        return -(-extent // stride)
    return (extent - kernel) // stride + 1


@numba.njit(cache=True, nogil=True)
def _im2col_rows(xp, kernel, stride, out_hw, r0, r1, out):  # pragma: no cover - compiled
    """Fill ``out[:r1-r0]`` with the receptive fields of output cells r0..r1 (row-major d,h,w)."""
    kd, kh, kw = kernel
    sd, sh, sw = stride
    ho, wo = out_hw
    channels = xp.shape[0]
    plane = ho * wo
    for row in range(r0, r1):
        d = row // plane
        rem = row - d * plane
        h = rem // wo
        w = rem - h * wo
        col = 0
        for c in range(channels):
            for a in range(kd):
                for b in range(kh):
                    src = xp[c, d * sd + a, h * sh + b]
                    base = w * sw
                    for e in range(kw):
                        out[row - r0, col] = src[base + e]
                        col += 1


def _geometry(xp_shape, kernel, stride):
    dims = tuple((n - k) // s + 1 for n, k, s in zip(xp_shape[1:], kernel, stride))
    return dims, dims[0] * dims[1] * dims[2]


def _chunk_rows(k: int) -> int:
    # keep one im2col block cache-resident for the gemm that consumes it
    return max(64, _CHUNK_ELEMENTS // k)


def _correlate(xp: np.ndarray, w: np.ndarray, stride: tuple[int, int, int]) -> np.ndarray:
    """Valid cross-correlation of one padded sample (C,D,H,W) with w (F,C,kd,kh,kw)."""
    f, c, kd, kh, kw = w.shape
    kernel = (kd, kh, kw)
    dtype = np.result_type(xp, w)
    xp = np.ascontiguousarray(xp, dtype=dtype)
    (d, h, wd), cells = _geometry(xp.shape, kernel, stride)
    k = c * kd * kh * kw
    wt = np.ascontiguousarray(w.reshape(f, k).T, dtype=dtype)
    res = np.empty((cells, f), dtype=dtype)
    rows = _chunk_rows(k)
    buf = np.empty((min(rows, cells), k), dtype=dtype)
    for r0 in range(0, cells, rows):
        r1 = min(cells, r0 + rows)
        _im2col_rows(xp, kernel, stride, (h, wd), r0, r1, buf)
        np.matmul(buf[: r1 - r0], wt, out=res[r0:r1])
    return np.ascontiguousarray(res.T).reshape(f, d, h, wd)


def _kernel_grad(xp: np.ndarray, g: np.ndarray, wshape, stride) -> np.ndarray:
    f, c, kd, kh, kw = wshape
    kernel = (kd, kh, kw)
    dtype = np.result_type(xp, g)
    xp = np.ascontiguousarray(xp, dtype=dtype)
    (d, h, wd), cells = _geometry(xp.shape, kernel, stride)
    k = c * kd * kh * kw
    gt = np.ascontiguousarray(g.reshape(f, cells).T, dtype=dtype)
    dwt = np.zeros((k, f), dtype=dtype)
    rows = _chunk_rows(k)
    buf = np.empty((min(rows, cells), k), dtype=dtype)
    for r0 in range(0, cells, rows):
        r1 = min(cells, r0 + rows)
        _im2col_rows(xp, kernel, stride, (h, wd), r0, r1, buf)
        dwt += buf[: r1 - r0].T @ gt[r0:r1]
    return np.ascontiguousarray(dwt.T).reshape(wshape)


def _input_grad(g: np.ndarray, w: np.ndarray, padded_shape, stride) -> np.ndarray:
    """Transposed convolution: full correlation of the dilated gradient with the flipped kernel."""
    f, c, kd, kh, kw = w.shape
    kernel = (kd, kh, kw)
    dilated_shape = tuple((n - 1) * s + 1 for n, s in zip(g.shape[1:], stride))
    dil = np.zeros((f,) + dilated_shape, dtype=g.dtype)
    dil[:, :: stride[0], :: stride[1], :: stride[2]] = g
    pads = [(0, 0)]
    for n, kk, xs in zip(dilated_shape, kernel, padded_shape[1:]):
        pads.append((kk - 1, xs - n))
    flipped = np.ascontiguousarray(w[:, :, ::-1, ::-1, ::-1].transpose(1, 0, 2, 3, 4))
    return _correlate(np.pad(dil, pads), flipped, (1, 1, 1))


def conv3d(input: Tensor, kernel: Tensor, stride=1, padding: str = "same") -> Tensor:
    """3D cross-correlation of ``input`` [N,C,D,H,W] with ``kernel`` [F,C,kd,kh,kw].

    ``padding="same"`` yields ceil(extent/stride) per axis; ``"valid"`` yields
    floor((extent-k)/stride)+1.
    """
    input, kernel = _as_tensor(input), _as_tensor(kernel)
    stride = _triple(stride, "stride")
    if padding not in ("same", "valid"):
        raise UsageError(f"padding must be 'same' or 'valid', got {padding!r}")
    if input.ndim != 5:
        raise DimensionError(f"conv3d input must be [N,C,D,H,W], got shape {input.shape}")
    if kernel.ndim != 5:
        raise DimensionError(f"conv3d kernel must be [F,C,kd,kh,kw], got shape {kernel.shape}")
    if any(s < 1 for s in stride):
        raise DimensionError(f"stride components must be >= 1, got {stride}")
    n, c = input.shape[:2]
    if kernel.shape[1] != c:
        raise DimensionError(
            f"channel axis mismatch: input has {c} channels, kernel expects {kernel.shape[1]}"
        )
    ksize = kernel.shape[2:]
    pads = [(0, 0), (0, 0)]
    for axis, extent, k, s in zip(_AXES, input.shape[2:], ksize, stride):
        if padding == "same":
            pads.append(same_padding(extent, k, s))
            if k > extent + pads[-1][0] + pads[-1][1]:
                raise DimensionError(f"{axis} axis: kernel {k} exceeds padded extent")
        else:
            pads.append((0, 0))
            if k > extent:
                raise DimensionError(f"{axis} axis: kernel {k} exceeds input extent {extent}")

    x = input.data
    w = kernel.data
    xp = np.pad(x, pads) if any(p != (0, 0) for p in pads) else x
    out = np.stack([_correlate(xp[i], w, stride) for i in range(n)])

    def backward_fn(g):
        dx = dw = None
        if kernel.requires_grad:
            dw = np.zeros_like(w)
            for i in range(n):
                dw += _kernel_grad(xp[i], g[i], w.shape, stride)
        if input.requires_grad:
            dxp = np.stack([_input_grad(g[i], w, xp.shape[1:], stride) for i in range(n)])
            sl = tuple(slice(lo, dxp.shape[ax] - hi) for ax, (lo, hi) in enumerate(pads))
            dx = np.ascontiguousarray(dxp[sl])
        return dx, dw

    return make_result(out, (input, kernel), backward_fn)


def maxpool3d(input: Tensor, window, stride=None) -> Tensor:
    """Valid 3D max pooling; gradient goes to the lowest-index maximum of each window."""
    input = _as_tensor(input)
    window = _triple(window, "window")
    stride = window if stride is None else _triple(stride, "stride")
    if input.ndim != 5:
        raise DimensionError(f"maxpool3d input must be [N,C,D,H,W], got shape {input.shape}")
    for axis, extent, k in zip(_AXES, input.shape[2:], window):
        if k > extent:
            raise DimensionError(f"{axis} axis: window {k} exceeds input extent {extent}")
    if any(s < 1 for s in stride):
        raise DimensionError(f"stride components must be >= 1, got {stride}")
    x = input.data
    win = sliding_window_view(x, window, axis=(2, 3, 4))
    win = win[:, :, :: stride[0], :: stride[1], :: stride[2]]
    out_shape = win.shape[:5]
    flat = win.reshape(out_shape + (-1,))
    arg = np.argmax(flat, axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def backward_fn(g):
        dx = np.zeros_like(x)
        od, oh, ow = out_shape[2:]
        offset = 0
        for a in range(window[0]):
            for b in range(window[1]):
                for e in range(window[2]):
                    hit = arg == offset
                    offset += 1
                    if not hit.any():
                        continue
                    dst = dx[
                        :,
                        :,
                        a : a + stride[0] * (od - 1) + 1 : stride[0],
                        b : b + stride[1] * (oh - 1) + 1 : stride[1],
                        e : e + stride[2] * (ow - 1) + 1 : stride[2],
                    ]
                    dst += np.where(hit, g, 0)
        return (dx,)

    return make_result(np.ascontiguousarray(out), (input,), backward_fn)


@dataclass
class BatchNormState:
    """Running moments of one batch-norm layer."""

    channels: int
    momentum: float = 0.1
    running_mean: np.ndarray = field(default=None)  # type: ignore[assignment]
    running_var: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        if self.running_mean is None:
            self.running_mean = np.zeros(self.channels, dtype=np.float32)
        if self.running_var is None:
            self.running_var = np.ones(self.channels, dtype=np.float32)


def batchnorm(
    input: Tensor,
    gamma: Tensor,
    beta: Tensor,
    eps: float = 1e-5,
    mode: str = "train",
    state: Optional[BatchNormState] = None,
) -> Tensor:
    """Per-channel normalisation over every axis except axis 1.

    Train mode uses batch statistics (biased variance) and folds them into
    ``state``; infer mode reads the running moments from ``state``.
    """
    input, gamma, beta = _as_tensor(input), _as_tensor(gamma), _as_tensor(beta)
    if mode not in ("train", "infer"):
        raise UsageError(f"mode must be 'train' or 'infer', got {mode!r}")
    if input.ndim < 2:
        raise DimensionError(f"batchnorm needs [N,C,...], got shape {input.shape}")
    if input.data.size == 0 or input.shape[0] == 0:
        raise InputError("batchnorm received an empty batch")
    c = input.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise DimensionError(
            f"channel axis: gamma/beta must have length {c}, got {gamma.shape} and {beta.shape}"
        )
    x = input.data
    axes = (0,) + tuple(range(2, x.ndim))
    bshape = (1, c) + (1,) * (x.ndim - 2)
    count = x.size // c

    if mode == "train":
        mean = x.mean(axis=axes, dtype=np.float64)
        var = np.maximum(x.var(axis=axes, dtype=np.float64), 0.0)
        if state is not None:
            m = state.momentum
            unbiased = var * count / (count - 1) if count > 1 else var
            state.running_mean = ((1 - m) * state.running_mean + m * mean).astype(np.float32)
            state.running_var = ((1 - m) * state.running_var + m * unbiased).astype(np.float32)
    else:
        if state is None:
            raise UsageError("infer-mode batchnorm needs running moments")
        mean = state.running_mean.astype(np.float64)
        var = state.running_var.astype(np.float64)

    inv_std = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    xhat = (x - mean.astype(x.dtype).reshape(bshape)) * inv_std.reshape(bshape)
    out = xhat * gamma.data.reshape(bshape) + beta.data.reshape(bshape)
    train = mode == "train"

    def backward_fn(g):
        dgamma = (g * xhat).sum(axis=axes) if gamma.requires_grad else None
        dbeta = g.sum(axis=axes) if beta.requires_grad else None
        dx = None
        if input.requires_grad:
            dxhat = g * gamma.data.reshape(bshape)
            if train:
                mean_d = dxhat.mean(axis=axes, keepdims=True)
                mean_dx = (dxhat * xhat).mean(axis=axes, keepdims=True)
                dx = (dxhat - mean_d - xhat * mean_dx) * inv_std.reshape(bshape)
            else:
                dx = dxhat * inv_std.reshape(bshape)
        return dx, dgamma, dbeta

    return make_result(out, (input, gamma, beta), backward_fn)


def global_avg_pool3d(input: Tensor) -> Tensor:
    """Mean over the depth, height and width axes: [N,C,D,H,W] -> [N,C]."""
    input = _as_tensor(input)
    if input.ndim != 5:
        raise DimensionError(f"global_avg_pool3d needs [N,C,D,H,W], got shape {input.shape}")
    if min(input.shape[2:]) < 1:
        raise DimensionError(f"spatial extents must be >= 1, got {input.shape[2:]}")
    x = input.data
    cells = x.shape[2] * x.shape[3] * x.shape[4]
    out = x.mean(axis=(2, 3, 4))

    def backward_fn(g):
        dx = np.broadcast_to((g / cells)[:, :, None, None, None], x.shape)
        return (np.ascontiguousarray(dx),)

    return make_result(out, (input,), backward_fn)


def dense(input: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """Affine map ``input @ weight.T + bias`` with weight [dout, din]."""
    input, weight = _as_tensor(input), _as_tensor(weight)
    if input.ndim != 2 or weight.ndim != 2:
        raise DimensionError(f"dense needs 2D input and weight, got {input.shape} and {weight.shape}")
    if input.shape[1] != weight.shape[1]:
        raise DimensionError(
            f"inner axis mismatch: input has {input.shape[1]} features, weight expects {weight.shape[1]}"
        )
    parents = [input, weight]
    out = input.data @ weight.data.T
    if bias is not None:
        bias = _as_tensor(bias)
        if bias.shape != (weight.shape[0],):
            raise DimensionError(f"bias must have shape ({weight.shape[0]},), got {bias.shape}")
        out = out + bias.data
        parents.append(bias)
    x, w = input.data, weight.data

    def backward_fn(g):
        dx = g @ w if input.requires_grad else None
        dw = g.T @ x if weight.requires_grad else None
        if bias is None:
            return dx, dw
        return dx, dw, g.sum(axis=0)

    return make_result(np.ascontiguousarray(out), parents, backward_fn)


def relu(input: Tensor) -> Tensor:
    input = _as_tensor(input)
    x = input.data
    active = x > 0
    out = np.where(active, x, 0).astype(x.dtype)
    return make_result(out, (input,), lambda g: (np.where(active, g, 0).astype(g.dtype),))


def concat_channels(inputs: Sequence[Tensor]) -> Tensor:
    """Join tensors along axis 1; every other axis must agree."""
    inputs = [_as_tensor(t) for t in inputs]
    if not inputs:
        raise InputError("concat_channels needs at least one tensor")
    ref = inputs[0].shape
    for t in inputs[1:]:
        if t.ndim != len(ref) or t.shape[:1] + t.shape[2:] != ref[:1] + ref[2:]:
            raise DimensionError(f"cannot concatenate {t.shape} with {ref} along channels")
    sizes = [t.shape[1] for t in inputs]
    out = np.concatenate([t.data for t in inputs], axis=1)
    bounds = np.cumsum([0] + sizes)

    def backward_fn(g):
        return [np.ascontiguousarray(g[:, bounds[i] : bounds[i + 1]]) for i in range(len(inputs))]

    return make_result(out, inputs, backward_fn)


def l2_normalize(input: Tensor, eps: float = 1e-12) -> Tensor:
    """Scale each row (last axis) of a 2D tensor to unit Euclidean norm."""
    input = _as_tensor(input)
    if input.ndim != 2:
        raise DimensionError(f"l2_normalize expects [N,d], got shape {input.shape}")
    x = input.data
    norms = np.sqrt(np.sum(x.astype(np.float64) ** 2, axis=1, keepdims=True))
    if np.any(norms < eps):
        bad = int(np.argmax(norms[:, 0] < eps))
        raise DegenerateInputError(f"row {bad} has norm below {eps}; cannot normalise")
    y64 = x / norms
    out = y64.astype(x.dtype)

    def backward_fn(g):
        dot = np.sum(g * y64, axis=1, keepdims=True)
        return (((g - y64 * dot) / norms).astype(x.dtype),)

    return make_result(out, (input,), backward_fn)


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of ``labels`` under softmax(logits)."""
    logits = _as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise DimensionError(f"logits {logits.shape} and labels {labels.shape} disagree")
    z = logits.data.astype(np.float64)
    zmax = z.max(axis=1, keepdims=True)
    lse = zmax[:, 0] + np.log(np.exp(z - zmax).sum(axis=1))
    rows = np.arange(z.shape[0])
    loss = np.mean(lse - z[rows, labels])

    def backward_fn(g):
        p = np.exp(z - lse[:, None])
        p[rows, labels] -= 1.0
        return ((p * (float(np.reshape(g, -1)[0]) / z.shape[0])).astype(logits.dtype),)

    return make_result(np.asarray(loss, dtype=logits.dtype), (logits,), backward_fn)


def _check_same(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op} needs identical shapes, got {a.shape} and {b.shape}")


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_same(a, b, "add")
    return make_result(a.data + b.data, (a, b), lambda g: (g, g))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_same(a, b, "mul")
    x, y = a.data, b.data
    return make_result(x * y, (a, b), lambda g: (g * y, g * x))


def scale(a, factor: float) -> Tensor:
    a = _as_tensor(a)
    c = a.data.dtype.type(factor)
    return make_result(a.data * c, (a,), lambda g: (g * c,))


def sum(a) -> Tensor:  # noqa: A001 - mirrors numpy naming
    a = _as_tensor(a)
    shape = a.shape
    out = np.asarray(a.data.sum(dtype=np.float64), dtype=a.dtype)
    return make_result(out, (a,), lambda g: (np.full(shape, g, dtype=a.dtype),))


def mean(a) -> Tensor:
    a = _as_tensor(a)
    n = a.data.size
    return scale(sum(a), 1.0 / n)


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    src = a.shape
    return make_result(a.data.reshape(shape), (a,), lambda g: (g.reshape(src),))
