"""Parametric U-Net: build from a (filters, kernel, learning rate) triple.

Layout per resolution level is ``[conv k x k -> batchnorm -> ReLU] x 2``.
Encoder levels are followed by 2x2 max-pooling; decoder levels start with a
2x2 stride-2 transposed convolution whose output is concatenated (upsampled
block first) with the mirror encoder output. A 1x1 convolution plus sigmoid
produces the single-channel probability map.

The paper behind this package gives no depth, normalization or upsampling
details. The reconstruction used here (depth 5, batch norm after every k x k
convolution, transposed-conv upsampling, conv biases kept) is inferred from
its reported parameter count: with 32 base filters and 3 x 3 kernels it gives
exactly 7,771,873 parameters when each normalized channel contributes scale,
shift, running mean and running variance.
"""

import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Tuple, Union

import numpy as np

from . import tensor as T
from .errors import CheckpointError, ConfigError, ShapeError
from .tensor import BatchNormParams, LayerParams, Tensor

FILTER_VALUES = (8, 16, 32, 64)
KERNEL_RANGE = (3, 5)
LR_RANGE = (0.0001, 0.01)

BN_MOMENTUM = 0.1
BN_EPS = 1e-5


@dataclass(frozen=True)
class UNetConfig:
    filters: int = 32
    kernel_size: int = 3
    learning_rate: float = 0.006756673
    depth: int = 5
    in_channels: int = 3
    out_channels: int = 1

    def validate(self) -> "UNetConfig":
        if self.filters not in FILTER_VALUES:
            raise ConfigError(f"filters must be one of {FILTER_VALUES}, got {self.filters}")
        lo, hi = KERNEL_RANGE
        if not lo <= self.kernel_size <= hi:
            raise ConfigError(f"kernel_size must be in [{lo}, {hi}], got {self.kernel_size}")
        lo, hi = LR_RANGE
        if not lo <= self.learning_rate <= hi:
            raise ConfigError(f"learning_rate must be in [{lo}, {hi}], got {self.learning_rate}")
        if self.depth < 2:
            raise ConfigError(f"depth must be >= 2, got {self.depth}")
        if self.in_channels < 1:
            raise ConfigError(f"in_channels must be >= 1, got {self.in_channels}")
        if self.out_channels != 1:
            raise ConfigError("only a single-channel sigmoid head is supported")
        return self

    def level_channels(self) -> List[int]:
        return [self.filters * 2**i for i in range(self.depth)]

    def check_spatial(self, h: int, w: int) -> None:
        m = 2 ** (self.depth - 1)
        if h % m or w % m:
            raise ShapeError(f"spatial size {h}x{w} not divisible by 2^(depth-1) = {m}")


def _kaiming_uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


def _conv_params(rng, c_in: int, c_out: int, k: int) -> LayerParams:
    w = _kaiming_uniform(rng, (c_out, c_in, k, k), c_in * k * k)
    return LayerParams(Tensor(w), Tensor(np.zeros(c_out)))


def _tconv_params(rng, c_in: int, c_out: int) -> LayerParams:
    # Each output pixel sees exactly c_in inputs (one kernel tap per channel).
    w = _kaiming_uniform(rng, (c_in, c_out, 2, 2), c_in)
    return LayerParams(Tensor(w), Tensor(np.zeros(c_out)))


class ConvBlock:
    """Two ``conv -> batchnorm -> ReLU`` stages."""

    def __init__(self, rng, c_in: int, c_out: int, k: int):
        self.convs = [_conv_params(rng, c_in, c_out, k), _conv_params(rng, c_out, c_out, k)]
        self.norms = [BatchNormParams.identity(c_out), BatchNormParams.identity(c_out)]
        self._cache = None

    @property
    def out_channels(self) -> int:
        return self.convs[1].weight.shape[0]

    def forward(self, x: np.ndarray, mode: str) -> np.ndarray:
        cache = []
        for conv, bn in zip(self.convs, self.norms):
            z = T.conv2d_nhwc(x, conv.weight.data, conv.bias.data)
            y, bn_cache = T.batchnorm_nhwc(z, bn, mode, BN_MOMENTUM, BN_EPS)
            out = T.relu(y)
            cache.append((x, bn_cache, out))
            x = out
        self._cache = cache
        return x

    def backward(self, grad: np.ndarray) -> np.ndarray:
        for (x, bn_cache, out), conv, bn in zip(
            reversed(self._cache), reversed(self.convs), reversed(self.norms)
        ):
            grad = T.relu_backward(grad, out)
            grad, dscale, dshift = T.batchnorm_backward_nhwc(grad, bn, bn_cache)
            bn.scale.grad += dscale
            bn.shift.grad += dshift
            grad, dw, db = T.conv2d_backward_nhwc(x, conv.weight.data, grad)
            conv.weight.grad += dw
            conv.bias.grad += db
        self._cache = None
        return grad

    def named_tensors(self, prefix: str) -> Iterator[Tuple[str, Tensor]]:
        for i, (conv, bn) in enumerate(zip(self.convs, self.norms)):
            for name, t in conv.tensors():
                yield f"{prefix}.conv{i}.{name}", t
            for name, t in bn.tensors():
                yield f"{prefix}.bn{i}.{name}", t


class UNetModel:
    """Encoder blocks, bottleneck, decoder blocks and a sigmoid head.

    ``encoders[-1]`` is the bottleneck. ``ups[i]`` and ``decoders[i]`` rebuild
    resolution level ``i`` (0 = full resolution).
    """

    def __init__(self, config: UNetConfig, seed: int = 0):
        self.config = config.validate()
        rng = np.random.default_rng(seed)
        chans = config.level_channels()
        k = config.kernel_size
        self.encoders: List[ConvBlock] = []
        c_prev = config.in_channels
        for c in chans:
            self.encoders.append(ConvBlock(rng, c_prev, c, k))
            c_prev = c
        self.ups: List[LayerParams] = [None] * (config.depth - 1)
        self.decoders: List[ConvBlock] = [None] * (config.depth - 1)
        for i in reversed(range(config.depth - 1)):
            self.ups[i] = _tconv_params(rng, chans[i + 1], chans[i])
            self.decoders[i] = ConvBlock(rng, 2 * chans[i], chans[i], k)
        self.head = _conv_params(rng, chans[0], config.out_channels, 1)
        self._cache = None
        self.zero_grad()

    # -- parameters ----------------------------------------------------------

    def named_tensors(self) -> Iterator[Tuple[str, Tensor]]:
        for i, block in enumerate(self.encoders):
            yield from block.named_tensors(f"enc{i}")
        for i in reversed(range(self.config.depth - 1)):
            for name, t in self.ups[i].tensors():
                yield f"up{i}.{name}", t
            yield from self.decoders[i].named_tensors(f"dec{i}")
        for name, t in self.head.tensors():
            yield f"head.{name}", t

    def trainable(self) -> List[Tuple[str, Tensor]]:
        return [(n, t) for n, t in self.named_tensors() if t.requires_grad]

    def zero_grad(self) -> None:
        for _, t in self.named_tensors():
            t.zero_grad()

    def param_count(self) -> int:
        return sum(t.size for _, t in self.named_tensors())

    def trainable_param_count(self) -> int:
        return sum(t.size for _, t in self.trainable())

    def normalized_channels(self) -> int:
        blocks = self.encoders + self.decoders
        return sum(bn.channels for b in blocks for bn in b.norms)

    # -- passes --------------------------------------------------------------

    def forward(self, x, mode: str = "infer") -> np.ndarray:
        """Probability map (N, 1, H, W) for a batch (N, C_in, H, W).

        ``mode="train"`` normalizes with batch statistics and updates the
        running statistics; ``"infer"`` uses the running statistics.
        """
        x = np.asarray(x, dtype=T.DTYPE)
        if x.ndim != 4 or x.shape[1] != self.config.in_channels:
            raise ShapeError(
                f"expected batch (N, {self.config.in_channels}, H, W), got {x.shape}"
            )
        self.config.check_spatial(*x.shape[2:])
        x = T.to_nhwc(x)
        skips, pools = [], []
        for i, block in enumerate(self.encoders):
            x = block.forward(x, mode)
            if i < self.config.depth - 1:
                skips.append(x)
                x, idx = T.maxpool2_nhwc(x)
                pools.append(idx)
        up_inputs = [None] * (self.config.depth - 1)
        for i in reversed(range(self.config.depth - 1)):
            up_inputs[i] = x
            u = T.transposed_conv2_nhwc(x, self.ups[i].weight.data, self.ups[i].bias.data)
            if u.shape[1:3] != skips[i].shape[1:3]:
                raise ShapeError(f"skip misalignment at level {i}: {u.shape} vs {skips[i].shape}")
            x = self.decoders[i].forward(T.concat_channels(u, skips[i], axis=-1), mode)
        head_in = x
        probs = T.sigmoid(T.conv2d_nhwc(x, self.head.weight.data, self.head.bias.data))
        self._cache = (pools, up_inputs, head_in, probs)
        return T.to_nchw(probs)

    __call__ = forward

    def backward(self, grad_probs: np.ndarray) -> np.ndarray:
        """Accumulate parameter gradients from dLoss/dProbs; returns dLoss/dInput."""
        if self._cache is None:
            raise RuntimeError("backward() called without a preceding forward()")
        pools, up_inputs, head_in, probs = self._cache
        g = T.sigmoid_backward(T.to_nhwc(grad_probs), probs)
        g, dw, db = T.conv2d_backward_nhwc(head_in, self.head.weight.data, g)
        self.head.weight.grad += dw
        self.head.bias.grad += db
        skip_grads = [None] * (self.config.depth - 1)
        for i in range(self.config.depth - 1):
            g = self.decoders[i].backward(g)
            g_up, skip_grads[i] = T.split_channels(g, self.ups[i].weight.shape[1], axis=-1)
            g, dw, db = T.transposed_conv2_backward_nhwc(up_inputs[i], self.ups[i].weight.data, g_up)
            self.ups[i].weight.grad += dw
            self.ups[i].bias.grad += db
        for i in reversed(range(self.config.depth)):
            if i < self.config.depth - 1:
                g = T.maxpool2_backward_nhwc(g, pools[i]) + skip_grads[i]
            g = self.encoders[i].backward(g)
        self._cache = None
        return T.to_nchw(g)

    # -- persistence ---------------------------------------------------------

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self.named_tensors()}

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        own = dict(self.named_tensors())
        missing = set(own) - set(state)
        extra = set(state) - set(own)
        if missing or extra:
            raise CheckpointError(
                f"checkpoint does not match model: missing {sorted(missing)[:3]}, "
                f"unexpected {sorted(extra)[:3]}"
            )
        for name, t in own.items():
            if state[name].shape != t.shape:
                raise CheckpointError(f"{name}: checkpoint shape {state[name].shape} != {t.shape}")
            t.data[...] = state[name]


def build(config: UNetConfig, seed: int = 0) -> UNetModel:
    """Instantiate a model with Kaiming-uniform weights and zero biases."""
    return UNetModel(config, seed=seed)


def param_count(model: UNetModel, trainable_only: bool = False) -> int:
    return model.trainable_param_count() if trainable_only else model.param_count()


# -- checkpoint file ----------------------------------------------------------
#
# Layout: b"SWSEG1\n", uint32-LE header length, UTF-8 JSON header, then the
# tensors back to back as little-endian float64 in header order.

MAGIC = b"SWSEG1\n"


def save_checkpoint(model: UNetModel, path: Union[str, Path], extra: Optional[dict] = None) -> None:
    tensors, offset = [], 0
    for name, t in model.named_tensors():
        tensors.append({"name": name, "shape": list(t.shape), "offset": offset})
        offset += t.size
    header = {"format": "SWSEG1", "config": asdict(model.config), "tensors": tensors}
    if extra:
        header["extra"] = extra
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for _, t in model.named_tensors():
            fh.write(t.data.astype("<f8").tobytes())


def read_checkpoint(path: Union[str, Path]) -> Tuple[dict, Dict[str, np.ndarray]]:
    raw = Path(path).read_bytes()
    if not raw.startswith(MAGIC):
        raise CheckpointError(f"{path}: not an SWSEG1 checkpoint (bad magic header)")
    pos = len(MAGIC)
    try:
        (n,) = struct.unpack_from("<I", raw, pos)
        header = json.loads(raw[pos + 4 : pos + 4 + n])
    except (struct.error, ValueError) as exc:
        raise CheckpointError(f"{path}: corrupt checkpoint header") from exc
    data = np.frombuffer(raw, dtype="<f8", offset=pos + 4 + n)
    state = {}
    for entry in header["tensors"]:
        size = int(np.prod(entry["shape"]))
        start = entry["offset"]
        if start + size > data.size:
            raise CheckpointError(f"{path}: truncated data for {entry['name']}")
        state[entry["name"]] = data[start : start + size].reshape(entry["shape"]).astype(T.DTYPE)
    return header, state


def load_checkpoint(path: Union[str, Path]) -> UNetModel:
    header, state = read_checkpoint(path)
    try:
        config = UNetConfig(**header["config"])
    except (KeyError, TypeError) as exc:
        raise CheckpointError(f"{path}: header has no usable config") from exc
    model = build(config)
    model.load_state_dict(state)
    return model
