"""Dense tensor ops with hand-written backward passes.

Only the layer set a U-Net needs is covered: "same" convolution, 2x2/stride-2
transposed convolution, 2x2 max-pooling, batch normalization, channel
concatenation, and the ReLU / sigmoid / channel-softmax activations.

The public functions take and return NCHW arrays. Each is a thin wrapper over
a channels-last (NHWC) kernel with the ``_nhwc`` suffix; the model calls the
kernels directly to avoid transposing between every layer. Forward functions
are pure, backward functions return gradients instead of accumulating them,
and all arithmetic is float64.
"""

from dataclasses import dataclass, field
from typing import Optional, Tuple

import numpy as np

from .errors import ConfigError, ShapeError

DTYPE = np.float64

# im2col buffers are built per batch chunk so that one chunk stays cache-sized.
_COL_BUDGET_BYTES = 4 * 2**20

_TINY = np.finfo(DTYPE).tiny
_ONE_MINUS = 1.0 - np.finfo(DTYPE).epsneg


@dataclass
class Tensor:
    """A float64 array plus an optional same-shape gradient buffer."""

    data: np.ndarray
    grad: Optional[np.ndarray] = None
    requires_grad: bool = True

    def __post_init__(self):
        self.data = np.ascontiguousarray(self.data, dtype=DTYPE)
        if self.grad is not None and self.grad.shape != self.data.shape:
            raise ShapeError(f"grad shape {self.grad.shape} != data shape {self.data.shape}")

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def __array__(self, dtype=None, copy=None):
        return self.data if dtype is None else self.data.astype(dtype)


@dataclass
class LayerParams:
    """Weights and bias of a convolution or transposed convolution."""

    weight: Tensor
    bias: Tensor

    @property
    def kernel_size(self) -> int:
        return self.weight.shape[-1]

    def tensors(self):
        return [("weight", self.weight), ("bias", self.bias)]


@dataclass
class BatchNormParams:
    """Per-channel affine parameters and running statistics.

    The running statistics never receive gradients but are stored (and
    counted) alongside the learnable scale and shift.
    """

    scale: Tensor
    shift: Tensor
    running_mean: Tensor = field(default=None)
    running_var: Tensor = field(default=None)

    def __post_init__(self):
        c = self.scale.shape[0]
        if self.shift.shape != (c,):
            raise ShapeError(f"shift shape {self.shift.shape} != scale shape {(c,)}")
        if self.running_mean is None:
            self.running_mean = Tensor(np.zeros(c), requires_grad=False)
        if self.running_var is None:
            self.running_var = Tensor(np.ones(c), requires_grad=False)

    @classmethod
    def identity(cls, channels: int) -> "BatchNormParams":
        return cls(Tensor(np.ones(channels)), Tensor(np.zeros(channels)))

    @property
    def channels(self) -> int:
        return self.scale.shape[0]

    def tensors(self):
        return [
            ("scale", self.scale),
            ("shift", self.shift),
            ("running_mean", self.running_mean),
            ("running_var", self.running_var),
        ]


def _as_array(t) -> np.ndarray:
    return t.data if isinstance(t, Tensor) else np.asarray(t, dtype=DTYPE)


def _check_4d(x: np.ndarray, what: str = "input") -> None:
    if x.ndim != 4:
        raise ShapeError(f"{what} must be 4-D, got shape {x.shape}")


def to_nhwc(x: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(x.transpose(0, 2, 3, 1))


def to_nchw(x: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(x.transpose(0, 3, 1, 2))


def same_padding(k: int) -> Tuple[int, int]:
    """(before, after) zero padding that keeps spatial size for a k x k kernel.

    Even kernels put the extra row/column at the bottom/right.
    """
    if k < 1:
        raise ConfigError(f"kernel size must be >= 1, got {k}")
    before = (k - 1) // 2
    return before, k - 1 - before


# -- convolution -------------------------------------------------------------
#
# The padded image gets one spare zero row so that, flattened to
# (rows * padded_width, C), every kernel tap (i, j) is the contiguous slice
# starting at i * padded_width + j. The GEMM then runs on a grid that is
# padded_width wide, and the k - 1 junk columns are cropped afterwards.


def _tap_columns(x: np.ndarray, k: int, lo: int, hi: int) -> np.ndarray:
    n, h, w, c = x.shape
    wp = w + lo + hi
    xp = np.zeros((n, h + lo + hi + 1, wp, c), dtype=DTYPE)
    xp[:, lo : lo + h, lo : lo + w] = x
    xf = xp.reshape(n, -1, c)
    cols = np.empty((n, h * wp, k * k * c), dtype=DTYPE)
    for i in range(k):
        for j in range(k):
            t, off = i * k + j, i * wp + j
            cols[:, :, t * c : (t + 1) * c] = xf[:, off : off + h * wp]
    return cols.reshape(-1, k * k * c)


def _chunk(n_floats_per_sample: int) -> int:
    return max(1, _COL_BUDGET_BYTES // (8 * n_floats_per_sample))


def _correlate(x: np.ndarray, wm: np.ndarray, k: int, lo: int, hi: int) -> np.ndarray:
    """Stride-1 cross-correlation of NHWC ``x`` with tap-major weights ``wm``."""
    n, h, w, c = x.shape
    wp = w + lo + hi
    out = np.empty((n, h, w, wm.shape[1]), dtype=DTYPE)
    step = _chunk(h * wp * k * k * c)
    for s in range(0, n, step):
        cols = _tap_columns(x[s : s + step], k, lo, hi)
        out[s : s + step] = (cols @ wm).reshape(-1, h, wp, wm.shape[1])[:, :, :w]
    return out


def _tap_major(w: np.ndarray) -> np.ndarray:
    # (O, C, k, k) -> (k * k * C, O), rows ordered tap first then channel.
    o, c, k, _ = w.shape
    return np.ascontiguousarray(w.transpose(2, 3, 1, 0)).reshape(k * k * c, o)


def _conv_check(x: np.ndarray, w: np.ndarray, channel_axis: int) -> int:
    _check_4d(x)
    if w.ndim != 4 or w.shape[2] != w.shape[3]:
        raise ShapeError(f"conv weight must be (out, in, k, k), got {w.shape}")
    k = w.shape[2]
    if k < 1:
        raise ConfigError(f"kernel size must be >= 1, got {k}")
    if w.shape[1] != x.shape[channel_axis]:
        raise ShapeError(
            f"conv weight expects {w.shape[1]} input channels, input has {x.shape[channel_axis]}"
        )
    return k


def conv2d_nhwc(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    k = _conv_check(x, w, 3)
    lo, hi = same_padding(k)
    out = _correlate(x, _tap_major(w), k, lo, hi)
    out += b
    return out


def conv2d_backward_nhwc(x: np.ndarray, w: np.ndarray, g: np.ndarray):
    k = _conv_check(x, w, 3)
    n, h, wd, c = x.shape
    o = w.shape[0]
    if g.shape != (n, h, wd, o):
        raise ShapeError(f"upstream gradient shape {g.shape} != output shape {(n, h, wd, o)}")
    lo, hi = same_padding(k)
    # Input gradient is a "same" correlation of g with the flipped,
    # in/out-swapped kernel; the padding sides swap as well.
    w_flip = w.transpose(1, 0, 2, 3)[:, :, ::-1, ::-1]
    dx = _correlate(g, _tap_major(w_flip), k, hi, lo)
    wp = wd + lo + hi
    dwm = np.zeros((k * k * c, o), dtype=DTYPE)
    step = _chunk(h * wp * k * k * c)
    for s in range(0, n, step):
        gs = g[s : s + step]
        gp = np.zeros((gs.shape[0], h, wp, o), dtype=DTYPE)
        gp[:, :, :wd] = gs
        dwm += _tap_columns(x[s : s + step], k, lo, hi).T @ gp.reshape(-1, o)
    dw = dwm.reshape(k, k, c, o).transpose(3, 2, 0, 1)
    return dx, np.ascontiguousarray(dw), g.sum(axis=(0, 1, 2))


def conv2d(x, params: LayerParams) -> np.ndarray:
    """Stride-1 "same" convolution ``W * x + b`` with zero padding.

    Parameters
    ----------
    x : ndarray or Tensor, shape (N, C_in, H, W)
    params : LayerParams
        ``weight`` shaped (C_out, C_in, k, k), ``bias`` shaped (C_out,).

    Returns
    -------
    ndarray, shape (N, C_out, H, W)
    """
    x = _as_array(x)
    _conv_check(x, params.weight.data, 1)
    return to_nchw(conv2d_nhwc(to_nhwc(x), params.weight.data, params.bias.data))


def conv2d_backward(
    x, params: LayerParams, grad_out: np.ndarray
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients of :func:`conv2d` w.r.t. input, weight and bias."""
    x = _as_array(x)
    _conv_check(x, params.weight.data, 1)
    expected = (x.shape[0], params.weight.shape[0]) + x.shape[2:]
    if grad_out.shape != expected:
        raise ShapeError(f"upstream gradient shape {grad_out.shape} != output shape {expected}")
    dx, dw, db = conv2d_backward_nhwc(to_nhwc(x), params.weight.data, to_nhwc(grad_out))
    return to_nchw(dx), dw, db


# -- transposed convolution (2x2, stride 2) -----------------------------------


def _tconv_check(x: np.ndarray, w: np.ndarray, channel_axis: int) -> None:
    _check_4d(x)
    if w.ndim != 4 or w.shape[2:] != (2, 2):
        raise ShapeError(f"transposed conv weight must be (in, out, 2, 2), got {w.shape}")
    if w.shape[0] != x.shape[channel_axis]:
        raise ShapeError(
            f"transposed conv weight expects {w.shape[0]} input channels, "
            f"input has {x.shape[channel_axis]}"
        )


def transposed_conv2_nhwc(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    _tconv_check(x, w, 3)
    n, h, wd, c = x.shape
    o = w.shape[1]
    wm = w.transpose(0, 2, 3, 1).reshape(c, 4 * o)
    y = (x.reshape(-1, c) @ wm).reshape(n, h, wd, 2, 2, o)
    y = y.transpose(0, 1, 3, 2, 4, 5).reshape(n, 2 * h, 2 * wd, o)
    y += b
    return y


def transposed_conv2_backward_nhwc(x: np.ndarray, w: np.ndarray, g: np.ndarray):
    _tconv_check(x, w, 3)
    n, h, wd, c = x.shape
    o = w.shape[1]
    if g.shape != (n, 2 * h, 2 * wd, o):
        raise ShapeError(f"upstream gradient shape {g.shape} != output shape {(n, 2 * h, 2 * wd, o)}")
    gm = g.reshape(n, h, 2, wd, 2, o).transpose(0, 1, 3, 2, 4, 5).reshape(n * h * wd, 4 * o)
    xm = x.reshape(-1, c)
    dw = (xm.T @ gm).reshape(c, 2, 2, o).transpose(0, 3, 1, 2)
    dx = (gm @ w.transpose(0, 2, 3, 1).reshape(c, 4 * o).T).reshape(n, h, wd, c)
    return dx, np.ascontiguousarray(dw), g.sum(axis=(0, 1, 2))


def transposed_conv2(x, params: LayerParams) -> np.ndarray:
    """2x2 stride-2 transposed convolution; doubles height and width.

    Windows do not overlap at this stride, so output pixel ``(2i + di, 2j + dj)``
    is ``sum_c x[c, i, j] * W[c, o, di, dj] + b[o]``.
    """
    x = _as_array(x)
    _tconv_check(x, params.weight.data, 1)
    return to_nchw(transposed_conv2_nhwc(to_nhwc(x), params.weight.data, params.bias.data))


def transposed_conv2_backward(
    x, params: LayerParams, grad_out: np.ndarray
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    x = _as_array(x)
    _tconv_check(x, params.weight.data, 1)
    expected = (x.shape[0], params.weight.shape[1], 2 * x.shape[2], 2 * x.shape[3])
    if grad_out.shape != expected:
        raise ShapeError(f"upstream gradient shape {grad_out.shape} != output shape {expected}")
    dx, dw, db = transposed_conv2_backward_nhwc(to_nhwc(x), params.weight.data, to_nhwc(grad_out))
    return to_nchw(dx), dw, db


# -- pooling -----------------------------------------------------------------


def maxpool2_nhwc(x: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    _check_4d(x)
    n, h, w, c = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2 needs even height and width, got {h}x{w}")
    # Window cells in row-major order: (0,0), (0,1), (1,0), (1,1).
    win = np.stack([x[:, 0::2, 0::2], x[:, 0::2, 1::2], x[:, 1::2, 0::2], x[:, 1::2, 1::2]], axis=-1)
    idx = win.argmax(axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
    return out, idx.astype(np.int8)


def maxpool2_backward_nhwc(g: np.ndarray, idx: np.ndarray) -> np.ndarray:
    if g.shape != idx.shape:
        raise ShapeError(f"gradient shape {g.shape} != index map shape {idx.shape}")
    n, h2, w2, c = g.shape
    dx = np.zeros((n, h2, 2, w2, 2, c), dtype=DTYPE)
    for t in range(4):
        dx[:, :, t // 2, :, t % 2, :] = np.where(idx == t, g, 0.0)
    return dx.reshape(n, 2 * h2, 2 * w2, c)


def maxpool2(x) -> Tuple[np.ndarray, np.ndarray]:
    """2x2 stride-2 max-pool over an NCHW array.

    Returns the pooled map and, per window, the row-major index (0..3) of the
    winning cell. Ties go to the first cell in scan order.
    """
    x = _as_array(x)
    _check_4d(x)
    out, idx = maxpool2_nhwc(to_nhwc(x))
    return to_nchw(out), to_nchw(idx)


def maxpool2_backward(grad_out: np.ndarray, argmax: np.ndarray) -> np.ndarray:
    """Route each upstream value to its window's winning cell."""
    return to_nchw(maxpool2_backward_nhwc(to_nhwc(grad_out), to_nhwc(argmax)))


# -- concatenation -----------------------------------------------------------


def concat_channels(a, b, axis: int = 1) -> np.ndarray:
    """Stack ``a`` then ``b`` along the channel axis (1 for NCHW, -1 for NHWC)."""
    a, b = _as_array(a), _as_array(b)
    _check_4d(a, "first operand")
    _check_4d(b, "second operand")
    ax = axis % 4
    other = [d for d in range(4) if d != ax]
    if any(a.shape[d] != b.shape[d] for d in other):
        raise ShapeError(f"cannot concatenate {a.shape} with {b.shape}: batch/spatial mismatch")
    return np.concatenate([a, b], axis=ax)


def split_channels(x: np.ndarray, first: int, axis: int = 1) -> Tuple[np.ndarray, np.ndarray]:
    """Inverse of :func:`concat_channels`; also its backward pass."""
    ax = axis % x.ndim
    if not 0 <= first <= x.shape[ax]:
        raise ShapeError(f"split point {first} outside 0..{x.shape[ax]}")
    return np.split(x, [first], axis=ax)


# -- batch normalization -----------------------------------------------------


@dataclass
class BatchNormCache:
    xhat: np.ndarray
    inv_std: np.ndarray
    train: bool


def batchnorm_nhwc(x, params: BatchNormParams, mode="train", momentum=0.1, eps=1e-5):
    x = _as_array(x)
    _check_4d(x)
    if eps <= 0:
        raise ConfigError(f"batchnorm epsilon must be > 0, got {eps}")
    if mode not in ("train", "infer"):
        raise ConfigError(f"mode must be 'train' or 'infer', got {mode!r}")
    c = x.shape[-1]
    if params.channels != c:
        raise ShapeError(f"batchnorm has {params.channels} channels, input has {c}")
    if mode == "train":
        mean = x.mean(axis=(0, 1, 2))
        centered = x - mean
        var = np.mean(centered * centered, axis=(0, 1, 2))
        m = x.size // c
        rm, rv = params.running_mean.data, params.running_var.data
        rm *= 1 - momentum
        rm += momentum * mean
        rv *= 1 - momentum
        rv += momentum * var * (m / max(m - 1, 1))
    else:
        centered = x - params.running_mean.data
        var = params.running_var.data
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std
    out = xhat * params.scale.data + params.shift.data
    return out, BatchNormCache(xhat, inv_std, mode == "train")


def batchnorm_backward_nhwc(g: np.ndarray, params: BatchNormParams, cache: BatchNormCache):
    xhat = cache.xhat
    if g.shape != xhat.shape:
        raise ShapeError(f"upstream gradient shape {g.shape} != {xhat.shape}")
    dscale = (g * xhat).sum(axis=(0, 1, 2))
    dshift = g.sum(axis=(0, 1, 2))
    gain = params.scale.data * cache.inv_std
    if not cache.train:
        return g * gain, dscale, dshift
    m = xhat.size // xhat.shape[-1]
    dx = gain * (g - dshift / m - xhat * (dscale / m))
    return dx, dscale, dshift


def batchnorm(
    x,
    params: BatchNormParams,
    mode: str = "train",
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tuple[np.ndarray, BatchNormCache]:
    """Per-channel batch normalization of an NCHW array over (N, H, W).

    In ``"train"`` mode the batch statistics normalize the input and the
    running statistics move toward them by ``momentum`` (running variance uses
    the unbiased estimate). ``"infer"`` mode normalizes with the running
    statistics and leaves them untouched. The returned cache is channels-last
    and belongs to :func:`batchnorm_backward`.
    """
    x = _as_array(x)
    _check_4d(x)
    out, cache = batchnorm_nhwc(to_nhwc(x), params, mode, momentum, eps)
    return to_nchw(out), cache


def batchnorm_backward(
    grad_out: np.ndarray, params: BatchNormParams, cache: BatchNormCache
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Returns (input grad, scale grad, shift grad)."""
    dx, dscale, dshift = batchnorm_backward_nhwc(to_nhwc(grad_out), params, cache)
    return to_nchw(dx), dscale, dshift


# -- activations -------------------------------------------------------------


def relu(x) -> np.ndarray:
    return np.maximum(_as_array(x), 0.0)


def relu_backward(grad_out: np.ndarray, out: np.ndarray) -> np.ndarray:
    """Subgradient 0 at the kink."""
    return np.where(out > 0, grad_out, 0.0)


def sigmoid(x) -> np.ndarray:
    x = _as_array(x)
    # Split by sign so exp never overflows.
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    # Keep the codomain open: |x| > ~37 would otherwise round to exactly 0 or 1.
    return np.clip(out, _TINY, _ONE_MINUS, out=out)


def sigmoid_backward(grad_out: np.ndarray, out: np.ndarray) -> np.ndarray:
    return grad_out * out * (1.0 - out)


def softmax_channels(x, axis: int = 1) -> np.ndarray:
    """Softmax over the channel axis at every pixel."""
    x = _as_array(x)
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def softmax_channels_backward(grad_out: np.ndarray, out: np.ndarray, axis: int = 1) -> np.ndarray:
    return out * (grad_out - (grad_out * out).sum(axis=axis, keepdims=True))
