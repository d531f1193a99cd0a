"""Rank-4 tensor engine with taped reverse-mode differentiation.

Feature maps and weights live in :class:`Tensor`, a thin wrapper around a
dense NumPy array in batch/channel/height/width order. Primitives are plain
functions; passing a :class:`GradTape` records enough saved state to replay
the computation in reverse and accumulate gradients.

Forward math runs in 32-bit floats by default. Tensors built with float64
data keep that precision end to end, which is what the finite-difference
gradient checks rely on.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

_FLOAT_DTYPES = (np.float32, np.float64)


class ShapeError(ValueError):
    """Operand extents do not fit the requested operation."""


class Tensor:
    """Dense numeric array; float32 unless constructed from float64 data."""

    __slots__ = ("data", "grad", "name")

    def __init__(self, data, dtype=None, name=None):
        arr = np.asarray(data)
        if dtype is None:
            dtype = arr.dtype if arr.dtype in _FLOAT_DTYPES else np.float32
        # asarray with order="C", unlike ascontiguousarray, keeps 0-d scalars 0-d
        self.data = np.asarray(arr, dtype=dtype, order="C")
        self.grad = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    @property
    def ndim(self):
        return self.data.ndim

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.data.shape}, dtype={self.data.dtype})"


def _require_rank4(t, what):
    if t.ndim != 4:
        raise ShapeError(f"{what} must be rank 4 (n, c, h, w), got shape {t.shape}")


class GradTape:
    """Ordered record of executed primitives for reverse-mode replay.

    Each record holds the op's output, its differentiable inputs, and a
    closure producing input gradients from the output gradient. Replaying
    in reverse visits every record once; gradients accumulate additively
    when a tensor feeds several consumers.
    """

    def __init__(self):
        self._records = []

    def __len__(self):
        return len(self._records)

    def record(self, output, inputs, backward_fn):
        self._records.append((output, tuple(inputs), backward_fn))

    def backward(self, loss, parameters=()):
        """Seed from a scalar loss and fill ``.grad`` on every tensor reached.

        Parameters listed in ``parameters`` but never touched by the tape
        receive an explicit zero gradient.
        """
        if loss.size != 1:
            raise ShapeError(f"backward seed must be a scalar, got shape {loss.shape}")
        grads = {id(loss): np.ones_like(loss.data)}
        reached = {id(loss): loss}
        for output, inputs, backward_fn in reversed(self._records):
            gout = grads.get(id(output))
            if gout is None:
                continue
            for tensor, gin in zip(inputs, backward_fn(gout)):
                if gin is None:
                    continue
                key = id(tensor)
                reached[key] = tensor
                if key in grads:
                    grads[key] = grads[key] + gin
                else:
                    grads[key] = gin
        for key, tensor in reached.items():
            tensor.grad = grads[key]
        for param in parameters:
            if id(param) not in reached:
                param.grad = np.zeros_like(param.data)
        return grads


def backward(tape, loss, parameters=()):
    """Reverse-replay ``tape`` from scalar ``loss``; see :meth:`GradTape.backward`."""
    return tape.backward(loss, parameters)


@dataclass(frozen=True)
class ConvSpec:
    """Kernel geometry for one convolution (cross-correlation, no flip)."""

    kernel_h: int
    kernel_w: int
    in_channels: int
    out_channels: int
    dilation: int = 1
    stride: int = 1
    padding_h: int = 0
    padding_w: int = 0
    has_bias: bool = False

    def __post_init__(self):
        for name in ("kernel_h", "kernel_w", "in_channels", "out_channels",
                     "dilation", "stride"):
            if getattr(self, name) < 1:
                raise ValueError(f"ConvSpec.{name} must be >= 1, got {getattr(self, name)}")
        if self.padding_h < 0 or self.padding_w < 0:
            raise ValueError("ConvSpec padding must be non-negative")

    @classmethod
    def same(cls, kernel_h, kernel_w, in_channels, out_channels, dilation=1,
             has_bias=False):
        """Stride-1 spec whose zero padding preserves the spatial extents."""
        return cls(kernel_h, kernel_w, in_channels, out_channels,
                   dilation=dilation,
                   padding_h=dilation * (kernel_h - 1) // 2,
                   padding_w=dilation * (kernel_w - 1) // 2,
                   has_bias=has_bias)

    @property
    def effective_kernel(self):
        """Dilated footprint per axis: dilation * (kernel - 1) + 1."""
        return (self.dilation * (self.kernel_h - 1) + 1,
                self.dilation * (self.kernel_w - 1) + 1)

    def output_hw(self, h, w):
        eh, ew = self.effective_kernel
        oh = (h + 2 * self.padding_h - eh) // self.stride + 1
        ow = (w + 2 * self.padding_w - ew) // self.stride + 1
        if oh < 1 or ow < 1:
            raise ShapeError(
                f"effective kernel {eh}x{ew} does not fit input {h}x{w} "
                f"with padding ({self.padding_h}, {self.padding_w})")
        return oh, ow


def conv2d(x, weights, bias, spec, tape=None):
    """Dilated strided cross-correlation.

    ``weights`` is shaped (out_channels, in_channels, kernel_h, kernel_w).
    Implemented as one small matmul per kernel tap, which stays memory-light
    even at 1024x2048 inputs.
    """
    _require_rank4(x, "conv2d input")
    expect_w = (spec.out_channels, spec.in_channels, spec.kernel_h, spec.kernel_w)
    if weights.shape != expect_w:
        raise ShapeError(f"conv2d weights shaped {weights.shape}, spec requires {expect_w}")
    if x.shape[1] != spec.in_channels:
        raise ShapeError(
            f"conv2d input has {x.shape[1]} channels, spec requires {spec.in_channels}")
    if bias is not None and bias.shape != (spec.out_channels,):
        raise ShapeError(
            f"conv2d bias shaped {bias.shape}, spec requires ({spec.out_channels},)")

    n, _, h, w = x.shape
    oh, ow = spec.output_hw(h, w)
    dt = np.result_type(x.dtype, weights.dtype)
    xp = np.pad(x.data, ((0, 0), (0, 0),
                         (spec.padding_h, spec.padding_h),
                         (spec.padding_w, spec.padding_w))).astype(dt, copy=False)
    wd = weights.data.astype(dt, copy=False)
    s, d = spec.stride, spec.dilation

    out = np.zeros((n, spec.out_channels, oh, ow), dtype=dt)
    for i in range(spec.kernel_h):
        for j in range(spec.kernel_w):
            patch = xp[:, :, i * d: i * d + s * oh: s, j * d: j * d + s * ow: s]
            out += np.einsum("nchw,oc->nohw", patch, wd[:, :, i, j], optimize=True)
    if bias is not None:
        out += bias.data.astype(dt, copy=False)[None, :, None, None]
    y = Tensor(out, dtype=dt)

    if tape is not None:
        inputs = [x, weights] + ([bias] if bias is not None else [])

        def backward_fn(gy):
            gxp = np.zeros_like(xp)
            gw = np.zeros_like(wd)
            for ki in range(spec.kernel_h):
                for kj in range(spec.kernel_w):
                    sl = (slice(None), slice(None),
                          slice(ki * d, ki * d + s * oh, s),
                          slice(kj * d, kj * d + s * ow, s))
                    gw[:, :, ki, kj] = np.einsum("nohw,nchw->oc", gy, xp[sl],
                                                 optimize=True)
                    gxp[sl] += np.einsum("nohw,oc->nchw", gy, wd[:, :, ki, kj],
                                         optimize=True)
            gx = gxp[:, :, spec.padding_h: spec.padding_h + h,
                     spec.padding_w: spec.padding_w + w]
            grads = [np.ascontiguousarray(gx), gw]
            if bias is not None:
                grads.append(gy.sum(axis=(0, 2, 3)))
            return grads

        tape.record(y, inputs, backward_fn)
    return y


def maxpool2x2(x, tape=None):
    """Stride-2 window-2 max per channel; trailing odd row/column is dropped."""
    _require_rank4(x, "maxpool2x2 input")
    n, c, h, w = x.shape
    if h < 2 or w < 2:
        raise ShapeError(f"maxpool2x2 needs spatial extents >= 2, got {h}x{w}")
    oh, ow = h // 2, w // 2
    win = x.data[:, :, :2 * oh, :2 * ow].reshape(n, c, oh, 2, ow, 2)
    flat = win.transpose(0, 1, 2, 4, 3, 5).reshape(n, c, oh, ow, 4)
    idx = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]
    y = Tensor(out, dtype=x.dtype)

    if tape is not None:
        def backward_fn(gy):
            gflat = np.zeros((n, c, oh, ow, 4), dtype=gy.dtype)
            np.put_along_axis(gflat, idx[..., None], gy[..., None], axis=-1)
            gwin = gflat.reshape(n, c, oh, ow, 2, 2).transpose(0, 1, 2, 4, 3, 5)
            gx = np.zeros((n, c, h, w), dtype=gy.dtype)
            gx[:, :, :2 * oh, :2 * ow] = gwin.reshape(n, c, 2 * oh, 2 * ow)
            return [gx]

        tape.record(y, [x], backward_fn)
    return y


def avgpool(x, factor, tape=None):
    """Non-overlapping factor x factor mean per channel."""
    _require_rank4(x, "avgpool input")
    if factor < 1:
        raise ValueError(f"avgpool factor must be >= 1, got {factor}")
    n, c, h, w = x.shape
    if h % factor or w % factor:
        raise ShapeError(f"avgpool factor {factor} does not divide extents {h}x{w}")
    oh, ow = h // factor, w // factor
    out = x.data.reshape(n, c, oh, factor, ow, factor).mean(axis=(3, 5),
                                                            dtype=x.dtype)
    y = Tensor(out, dtype=x.dtype)

    if tape is not None:
        def backward_fn(gy):
            gx = np.repeat(np.repeat(gy, factor, axis=2), factor, axis=3)
            return [gx / (factor * factor)]

        tape.record(y, [x], backward_fn)
    return y


def _bilinear_axis(in_size, factor, dtype):
    out_size = in_size * factor
    src = (np.arange(out_size, dtype=np.float64) + 0.5) / factor - 0.5
    lo = np.floor(src).astype(np.int64)
    frac = (src - lo).astype(dtype)
    hi = np.clip(lo + 1, 0, max(in_size - 1, 0))
    lo = np.clip(lo, 0, max(in_size - 1, 0))
    return lo, hi, frac


def bilinear_upsample(x, factor, tape=None):
    """Integer-factor bilinear upsampling, align-corners-false convention."""
    _require_rank4(x, "bilinear_upsample input")
    if factor < 1:
        raise ValueError(f"bilinear_upsample factor must be >= 1, got {factor}")
    n, c, h, w = x.shape
    y0, y1, fy = _bilinear_axis(h, factor, x.dtype)
    x0, x1, fx = _bilinear_axis(w, factor, x.dtype)
    d = x.data
    rows = d[:, :, y0, :] * (1 - fy)[None, None, :, None] \
        + d[:, :, y1, :] * fy[None, None, :, None]
    out = rows[:, :, :, x0] * (1 - fx) + rows[:, :, :, x1] * fx
    y = Tensor(out, dtype=x.dtype)

    if tape is not None:
        def backward_fn(gy):
            grows = np.zeros((n, c, h * factor, w), dtype=gy.dtype)
            gcols = np.moveaxis(grows, 3, 0)
            np.add.at(gcols, x0, np.moveaxis(gy * (1 - fx), 3, 0))
            np.add.at(gcols, x1, np.moveaxis(gy * fx, 3, 0))
            gx = np.zeros((n, c, h, w), dtype=gy.dtype)
            gr = np.moveaxis(gx, 2, 0)
            wy0 = grows * (1 - fy)[None, None, :, None]
            wy1 = grows * fy[None, None, :, None]
            np.add.at(gr, y0, np.moveaxis(wy0, 2, 0))
            np.add.at(gr, y1, np.moveaxis(wy1, 2, 0))
            return [gx]

        tape.record(y, [x], backward_fn)
    return y


def prelu(x, alpha, tape=None):
    """Channel-wise parametric ReLU: x if x >= 0 else alpha_c * x."""
    _require_rank4(x, "prelu input")
    c = x.shape[1]
    if alpha.ndim != 1 or alpha.shape[0] != c:
        raise ShapeError(f"prelu alpha shaped {alpha.shape}, input has {c} channels")
    a = alpha.data.astype(x.dtype, copy=False)[None, :, None, None]
    pos = x.data >= 0
    out = np.where(pos, x.data, a * x.data)
    y = Tensor(out, dtype=x.dtype)

    if tape is not None:
        def backward_fn(gy):
            gx = gy * np.where(pos, np.asarray(1, dtype=gy.dtype), a)
            ga = (gy * np.where(pos, np.asarray(0, dtype=gy.dtype), x.data)) \
                .sum(axis=(0, 2, 3))
            return [gx, ga.astype(alpha.dtype, copy=False)]

        tape.record(y, [x, alpha], backward_fn)
    return y


def batch_norm(x, gamma, beta, running_mean, running_var, mode="infer",
               epsilon=1e-5, momentum=0.1, tape=None):
    """Per-channel normalization with learned affine.

    Train mode normalizes with batch statistics over (n, h, w) and updates
    the running statistics in place by exponential moving average; infer
    mode uses the running statistics. Variances are biased (divide by m).
    """
    _require_rank4(x, "batch_norm input")
    if mode not in ("train", "infer"):
        raise ValueError(f"batch_norm mode must be 'train' or 'infer', got {mode!r}")
    n, c, h, w = x.shape
    for name, arr in (("gamma", gamma.data), ("beta", beta.data),
                      ("running_mean", running_mean), ("running_var", running_var)):
        if arr.shape != (c,):
            raise ShapeError(f"batch_norm {name} shaped {arr.shape}, input has {c} channels")

    if mode == "train":
        m = n * h * w
        if m == 0:
            raise ShapeError("batch_norm train mode needs at least one element per channel")
        mean = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        running_mean *= 1.0 - momentum
        running_mean += momentum * mean.astype(running_mean.dtype, copy=False)
        running_var *= 1.0 - momentum
        running_var += momentum * var.astype(running_var.dtype, copy=False)
    else:
        mean = running_mean.astype(x.dtype, copy=False)
        var = running_var.astype(x.dtype, copy=False)

    invstd = 1.0 / np.sqrt(var + epsilon)
    xhat = (x.data - mean[None, :, None, None]) * invstd[None, :, None, None]
    out = gamma.data.astype(x.dtype, copy=False)[None, :, None, None] * xhat \
        + beta.data.astype(x.dtype, copy=False)[None, :, None, None]
    y = Tensor(out, dtype=x.dtype)

    if tape is not None:
        scale = (gamma.data.astype(x.dtype, copy=False) * invstd)[None, :, None, None]

        def backward_fn(gy):
            dgamma = (gy * xhat).sum(axis=(0, 2, 3)).astype(gamma.dtype, copy=False)
            dbeta = gy.sum(axis=(0, 2, 3)).astype(beta.dtype, copy=False)
            if mode == "train":
                gmean = gy.mean(axis=(0, 2, 3))[None, :, None, None]
                gdot = (gy * xhat).mean(axis=(0, 2, 3))[None, :, None, None]
                gx = scale * (gy - gmean - xhat * gdot)
            else:
                gx = scale * gy
            return [gx, dgamma, dbeta]

        tape.record(y, [x, gamma, beta], backward_fn)
    return y


def concat_channels(inputs, tape=None):
    """Concatenate along the channel axis, order preserved."""
    if not inputs:
        raise ShapeError("concat_channels needs at least one input")
    for t in inputs:
        _require_rank4(t, "concat_channels input")
    ref = inputs[0].shape
    for t in inputs[1:]:
        if t.shape[0] != ref[0] or t.shape[2:] != ref[2:]:
            raise ShapeError(
                f"concat_channels batch/spatial mismatch: {ref} vs {t.shape}")
    out = np.concatenate([t.data for t in inputs], axis=1)
    y = Tensor(out)

    if tape is not None:
        widths = [t.shape[1] for t in inputs]

        def backward_fn(gy):
            grads = []
            start = 0
            for width in widths:
                grads.append(np.ascontiguousarray(gy[:, start: start + width]))
                start += width
            return grads

        tape.record(y, list(inputs), backward_fn)
    return y


def channel_slice(x, start, stop, tape=None):
    """Contiguous channel range [start, stop); inverse of concat_channels."""
    _require_rank4(x, "channel_slice input")
    c = x.shape[1]
    if not (0 <= start <= stop <= c):
        raise ShapeError(f"channel_slice [{start}, {stop}) out of range for {c} channels")
    y = Tensor(x.data[:, start:stop].copy(), dtype=x.dtype)

    if tape is not None:
        def backward_fn(gy):
            gx = np.zeros_like(x.data)
            gx[:, start:stop] = gy
            return [gx]

        tape.record(y, [x], backward_fn)
    return y


def add(x, y, tape=None):
    """Elementwise addition of two equally shaped tensors (residual path)."""
    if x.shape != y.shape:
        raise ShapeError(f"add shape mismatch: {x.shape} vs {y.shape}")
    out = Tensor(x.data + y.data)

    if tape is not None:
        def backward_fn(gy):
            return [gy, gy]

        tape.record(out, [x, y], backward_fn)
    return out


def tensor_sum(x, tape=None):
    """Scalar sum of all elements, accumulated in 64-bit."""
    total = x.data.sum(dtype=np.float64)
    y = Tensor(np.asarray(total), dtype=x.dtype if x.dtype == np.float64 else np.float32)

    if tape is not None:
        def backward_fn(gy):
            return [np.full(x.shape, gy, dtype=x.dtype)]

        tape.record(y, [x], backward_fn)
    return y


def spatial_pick(x, batch, channel, row, col, tape=None):
    """Single element of a rank-4 tensor as a scalar tensor."""
    _require_rank4(x, "spatial_pick input")
    n, c, h, w = x.shape
    if not (0 <= batch < n and 0 <= channel < c and 0 <= row < h and 0 <= col < w):
        raise IndexError(
            f"spatial_pick position ({batch}, {channel}, {row}, {col}) "
            f"out of range for shape {x.shape}")
    y = Tensor(np.asarray(x.data[batch, channel, row, col]), dtype=x.dtype)

    if tape is not None:
        def backward_fn(gy):
            gx = np.zeros_like(x.data)
            gx[batch, channel, row, col] = gy
            return [gx]

        tape.record(y, [x], backward_fn)
    return y
