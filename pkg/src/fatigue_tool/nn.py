"""3D convolution, pooling, normalization, linear and residual building blocks.

All layers take N x C x T x H x W tensors. Convolution is cross-correlation
(no kernel flip). Parameter containers are plain dataclasses holding trainable
Tensors; batch-norm running statistics are numpy buffers updated in train mode.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Literal

import numpy as np
import numpy.typing as npt
from numpy.lib.stride_tricks import sliding_window_view

from fatigue_tool.exceptions import ContractViolationError
from fatigue_tool.tensor import GradArray, Tensor, _record, add, mean, relu

Triple = tuple[int, int, int]
Mode = Literal["train", "eval"]

BN_MOMENTUM = 0.1
BN_EPSILON = 1e-5


def _triple(value: int | Triple) -> Triple:
    if isinstance(value, int):
        return (value, value, value)
    t, h, w = value
    return (int(t), int(h), int(w))


def _out_extent(size: int, pad: int, kernel: int, stride: int) -> int:
    return (size + 2 * pad - kernel) // stride + 1


def _output_extents(
    op: str, spatial: tuple[int, ...], kernel: Triple, stride: Triple, padding: Triple
) -> Triple:
    extents = tuple(
        _out_extent(s, p, k, st)
        for s, p, k, st in zip(spatial, padding, kernel, stride, strict=True)
    )
    if any(e < 1 for e in extents):
        raise ContractViolationError(
            f"{op}: non-positive output extent {extents} for input {spatial}, "
            f"kernel {kernel}, stride {stride}, padding {padding}"
        )
    return (extents[0], extents[1], extents[2])


@dataclass
class Conv3dParams:
    weights: Tensor
    bias: Tensor | None = None
    stride: Triple = (1, 1, 1)
    padding: Triple = (0, 0, 0)

    def __post_init__(self) -> None:
        if self.weights.ndim != 5:
            raise ContractViolationError(f"conv weights must be 5-D, got {self.weights.shape}")
        if any(s < 1 for s in self.stride) or any(p < 0 for p in self.padding):
            raise ContractViolationError(f"bad stride {self.stride} or padding {self.padding}")
        if self.bias is not None and self.bias.shape != (self.out_channels,):
            raise ContractViolationError(f"bias shape {self.bias.shape} != ({self.out_channels},)")

    @property
    def out_channels(self) -> int:
        return self.weights.shape[0]

    @property
    def in_channels(self) -> int:
        return self.weights.shape[1]

    @property
    def kernel(self) -> Triple:
        _, _, t, h, w = self.weights.shape
        return (t, h, w)

    def output_shape(self, shape: tuple[int, ...]) -> tuple[int, ...]:
        n, c, *spatial = shape
        if c != self.in_channels:
            raise ContractViolationError(
                f"conv3d: input has {c} channels, kernel expects {self.in_channels}"
            )
        extents = _output_extents(
            "conv3d", tuple(spatial), self.kernel, self.stride, self.padding
        )
        return (n, self.out_channels, *extents)


@dataclass
class BatchNorm3dParams:
    gamma: Tensor
    beta: Tensor
    running_mean: npt.NDArray[np.float32]
    running_var: npt.NDArray[np.float32]
    momentum: float = BN_MOMENTUM
    epsilon: float = BN_EPSILON

    def __post_init__(self) -> None:
        c = self.gamma.shape
        if self.beta.shape != c or self.running_mean.shape != c or self.running_var.shape != c:
            raise ContractViolationError("batch norm parameters must share one channel extent")
        if np.any(self.running_var < 0):
            raise ContractViolationError("running_var must be nonnegative")

    @property
    def channels(self) -> int:
        return self.gamma.shape[0]


@dataclass
class ResidualBlock3d:
    conv1: Conv3dParams
    bn1: BatchNorm3dParams
    conv2: Conv3dParams
    bn2: BatchNorm3dParams
    downsample: tuple[Conv3dParams, BatchNorm3dParams] | None = None

    def output_shape(self, shape: tuple[int, ...]) -> tuple[int, ...]:
        main = self.conv2.output_shape(self.conv1.output_shape(shape))
        short = self.downsample[0].output_shape(shape) if self.downsample else shape
        if main != short:
            raise ContractViolationError(f"residual paths disagree: {main} vs {short}")
        return main


@dataclass
class Linear:
    weights: Tensor
    bias: Tensor

    def __post_init__(self) -> None:
        if self.weights.ndim != 2 or self.bias.shape != (self.weights.shape[1],):
            raise ContractViolationError(
                f"linear: weights {self.weights.shape} and bias {self.bias.shape} disagree"
            )


def conv3d(x: Tensor, p: Conv3dParams) -> Tensor:
    """Strided, zero-padded 3D cross-correlation.

    Accumulates one channel-mixing product per kernel offset, which keeps
    memory at the size of the padded input instead of a full patch matrix.
    """
    if x.ndim != 5:
        raise ContractViolationError(f"conv3d expects N x C x T x H x W, got {x.shape}")
    n, c, t_in, h_in, w_in = x.shape
    if c != p.in_channels:
        raise ContractViolationError(
            f"conv3d: input has {c} channels, kernel expects {p.in_channels}"
        )
    kt, kh, kw = p.kernel
    st, sh, sw = p.stride
    pt, ph, pw = p.padding
    to, ho, wo = _output_extents("conv3d", (t_in, h_in, w_in), p.kernel, p.stride, p.padding)

    # channel-major layout C x N x T x H x W keeps every offset a single tensordot
    xp = np.pad(
        x.data.astype(np.float64).transpose(1, 0, 2, 3, 4),
        ((0, 0), (0, 0), (pt, pt), (ph, ph), (pw, pw)),
    )
    w64 = p.weights.data.astype(np.float64)

    def window(a: int, b: int, d: int) -> tuple[slice, slice, slice, slice, slice]:
        return (
            slice(None),
            slice(None),
            slice(a, a + st * (to - 1) + 1, st),
            slice(b, b + sh * (ho - 1) + 1, sh),
            slice(d, d + sw * (wo - 1) + 1, sw),
        )

    offsets = [(a, b, d) for a in range(kt) for b in range(kh) for d in range(kw)]
    out = np.zeros((p.out_channels, n, to, ho, wo), dtype=np.float64)
    for a, b, d in offsets:
        out += np.tensordot(w64[:, :, a, b, d], xp[window(a, b, d)], axes=([1], [0]))
    if p.bias is not None:
        out += p.bias.data.astype(np.float64)[:, None, None, None, None]

    def vjp(g: GradArray) -> tuple[GradArray | None, ...]:
        g_cm = g.transpose(1, 0, 2, 3, 4)
        gx = np.zeros_like(xp)
        gw = np.zeros_like(w64)
        for a, b, d in offsets:
            sl = window(a, b, d)
            gw[:, :, a, b, d] = np.tensordot(g_cm, xp[sl], axes=([1, 2, 3, 4], [1, 2, 3, 4]))
            gx[sl] += np.tensordot(w64[:, :, a, b, d], g_cm, axes=([0], [0]))
        gx = gx[:, :, pt : pt + t_in, ph : ph + h_in, pw : pw + w_in].transpose(1, 0, 2, 3, 4)
        if p.bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3, 4))

    inputs = (x, p.weights) if p.bias is None else (x, p.weights, p.bias)
    return _record("conv3d", out.transpose(1, 0, 2, 3, 4), inputs, vjp)


def maxpool3d(
    x: Tensor,
    kernel: int | Triple,
    stride: int | Triple | None = None,
    padding: int | Triple = 0,
) -> Tensor:
    """Windowed maximum; backward routes each window's gradient to its first argmax."""
    if x.ndim != 5:
        raise ContractViolationError(f"maxpool3d expects N x C x T x H x W, got {x.shape}")
    k = _triple(kernel)
    s = _triple(stride) if stride is not None else k
    pad = _triple(padding)
    n, c, t_in, h_in, w_in = x.shape
    to, ho, wo = _output_extents("maxpool3d", (t_in, h_in, w_in), k, s, pad)

    xp = np.pad(
        x.data,
        ((0, 0), (0, 0), (pad[0], pad[0]), (pad[1], pad[1]), (pad[2], pad[2])),
        constant_values=-np.inf,
    )
    windows = sliding_window_view(xp, k, axis=(2, 3, 4))[
        :,
        :,
        : s[0] * (to - 1) + 1 : s[0],
        : s[1] * (ho - 1) + 1 : s[1],
        : s[2] * (wo - 1) + 1 : s[2],
    ]
    flat = windows.reshape(n, c, to, ho, wo, -1)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    da, db, dd = np.unravel_index(arg, k)
    grid_t, grid_h, grid_w = np.meshgrid(
        np.arange(to) * s[0], np.arange(ho) * s[1], np.arange(wo) * s[2], indexing="ij"
    )
    rows_t = da + grid_t
    rows_h = db + grid_h
    rows_w = dd + grid_w
    idx_n = np.arange(n)[:, None, None, None, None]
    idx_c = np.arange(c)[None, :, None, None, None]

    def vjp(g: GradArray) -> tuple[GradArray | None, ...]:
        gx = np.zeros(xp.shape, dtype=np.float64)
        np.add.at(gx, (idx_n, idx_c, rows_t, rows_h, rows_w), g)
        return (
            gx[:, :, pad[0] : pad[0] + t_in, pad[1] : pad[1] + h_in, pad[2] : pad[2] + w_in],
        )

    return _record("maxpool3d", out, (x,), vjp)


def batch_norm3d(x: Tensor, p: BatchNorm3dParams, mode: Mode = "train") -> Tensor:
    """Per-channel normalization over (N, T, H, W).

    Train mode uses batch statistics and folds them into the running buffers
    (unbiased variance); eval mode uses the running buffers.
    """
    if x.ndim != 5 or x.shape[1] != p.channels:
        raise ContractViolationError(f"batch_norm3d: input {x.shape} vs {p.channels} channels")
    axes = (0, 2, 3, 4)
    x64 = x.data.astype(np.float64)
    gamma = p.gamma.data.astype(np.float64)
    beta = p.beta.data.astype(np.float64)

    def per_channel(v: npt.NDArray[np.float64]) -> npt.NDArray[np.float64]:
        return v.reshape(1, -1, 1, 1, 1)

    if mode == "train":
        count = x.size // p.channels
        if count < 2:
            raise ContractViolationError(
                "batch_norm3d: train mode needs at least 2 values per channel"
            )
        mu = x64.mean(axis=axes)
        var = x64.var(axis=axes)
        p.running_mean[:] = (1 - p.momentum) * p.running_mean + p.momentum * mu
        p.running_var[:] = (1 - p.momentum) * p.running_var + p.momentum * var * count / (count - 1)
        inv_std = 1.0 / np.sqrt(var + p.epsilon)
        xhat = (x64 - per_channel(mu)) * per_channel(inv_std)

        def vjp(g: GradArray) -> tuple[GradArray | None, ...]:
            dxhat = g * per_channel(gamma)
            dx = per_channel(inv_std / count) * (
                count * dxhat
                - per_channel(dxhat.sum(axis=axes))
                - xhat * per_channel((dxhat * xhat).sum(axis=axes))
            )
            return dx, (g * xhat).sum(axis=axes), g.sum(axis=axes)

    else:
        inv_std = 1.0 / np.sqrt(p.running_var.astype(np.float64) + p.epsilon)
        xhat = (x64 - per_channel(p.running_mean.astype(np.float64))) * per_channel(inv_std)

        def vjp(g: GradArray) -> tuple[GradArray | None, ...]:
            return g * per_channel(gamma * inv_std), (g * xhat).sum(axis=axes), g.sum(axis=axes)

    out = xhat * per_channel(gamma) + per_channel(beta)
    return _record("batch_norm3d", out, (x, p.gamma, p.beta), vjp)


def linear(x: Tensor, weights: Tensor, bias: Tensor) -> Tensor:
    """Affine map N x D -> N x D'."""
    if x.ndim != 2 or weights.ndim != 2 or x.shape[1] != weights.shape[0]:
        raise ContractViolationError(f"linear: input {x.shape} vs weights {weights.shape}")
    if bias.shape != (weights.shape[1],):
        raise ContractViolationError(f"linear: bias {bias.shape} vs weights {weights.shape}")
    x64 = x.data.astype(np.float64)
    w64 = weights.data.astype(np.float64)
    out = x64 @ w64 + bias.data.astype(np.float64)

    def vjp(g: GradArray) -> tuple[GradArray | None, ...]:
        return g @ w64.T, x64.T @ g, g.sum(axis=0)

    return _record("linear", out, (x, weights, bias), vjp)


def global_avg_pool3d(x: Tensor) -> Tensor:
    """N x C x T x H x W -> N x C."""
    return mean(x, axis=(2, 3, 4))


def residual_forward(
    x: Tensor,
    block: ResidualBlock3d,
    mode: Mode = "train",
    taps: dict[str, Tensor] | None = None,
) -> Tensor:
    """relu(bn2(conv2(relu(bn1(conv1(x))))) + shortcut(x)).

    When ``taps`` is given, the conv1 and conv2 outputs are stored under
    "conv1" and "conv2".
    """
    h1 = conv3d(x, block.conv1)
    h = relu(batch_norm3d(h1, block.bn1, mode))
    h2 = conv3d(h, block.conv2)
    if taps is not None:
        taps["conv1"] = h1
        taps["conv2"] = h2
    h = batch_norm3d(h2, block.bn2, mode)
    if block.downsample is not None:
        conv, bn = block.downsample
        shortcut = batch_norm3d(conv3d(x, conv), bn, mode)
    else:
        shortcut = x
    if h.shape != shortcut.shape:
        raise ContractViolationError(f"residual paths disagree: {h.shape} vs {shortcut.shape}")
    return relu(add(h, shortcut))


def init_conv3d(
    rng: np.random.Generator,
    c_out: int,
    c_in: int,
    kernel: int | Triple,
    stride: int | Triple = 1,
    padding: int | Triple = 0,
    bias: bool = False,
) -> Conv3dParams:
    """He-normal initialised convolution."""
    k = _triple(kernel)
    fan_in = c_in * k[0] * k[1] * k[2]
    weights = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(c_out, c_in, *k))
    return Conv3dParams(
        weights=Tensor(weights, requires_grad=True),
        bias=Tensor(np.zeros(c_out), requires_grad=True) if bias else None,
        stride=_triple(stride),
        padding=_triple(padding),
    )


def init_batch_norm3d(channels: int) -> BatchNorm3dParams:
    return BatchNorm3dParams(
        gamma=Tensor(np.ones(channels), requires_grad=True),
        beta=Tensor(np.zeros(channels), requires_grad=True),
        running_mean=np.zeros(channels, dtype=np.float32),
        running_var=np.ones(channels, dtype=np.float32),
    )


def init_linear(rng: np.random.Generator, d_in: int, d_out: int) -> Linear:
    bound = 1.0 / np.sqrt(d_in)
    return Linear(
        weights=Tensor(rng.uniform(-bound, bound, size=(d_in, d_out)), requires_grad=True),
        bias=Tensor(np.zeros(d_out), requires_grad=True),
    )


def init_residual_block(
    rng: np.random.Generator,
    c_in: int,
    c_out: int,
    stride: Triple,
    temporal_kernel: int = 3,
) -> ResidualBlock3d:
    kt = temporal_kernel
    pad = (kt // 2, 1, 1)
    downsample = None
    if stride != (1, 1, 1) or c_in != c_out:
        downsample = (init_conv3d(rng, c_out, c_in, 1, stride=stride), init_batch_norm3d(c_out))
    return ResidualBlock3d(
        conv1=init_conv3d(rng, c_out, c_in, (kt, 3, 3), stride=stride, padding=pad),
        bn1=init_batch_norm3d(c_out),
        conv2=init_conv3d(rng, c_out, c_out, (kt, 3, 3), padding=pad),
        bn2=init_batch_norm3d(c_out),
        downsample=downsample,
    )


@dataclass
class ParamGroup:
    """Named trainable tensors plus named non-trainable buffers."""

    params: dict[str, Tensor] = field(default_factory=dict)
    buffers: dict[str, npt.NDArray[np.float32]] = field(default_factory=dict)

    def add_conv(self, name: str, p: Conv3dParams) -> None:
        self.params[f"{name}.weight"] = p.weights
        if p.bias is not None:
            self.params[f"{name}.bias"] = p.bias

    def add_bn(self, name: str, p: BatchNorm3dParams) -> None:
        self.params[f"{name}.gamma"] = p.gamma
        self.params[f"{name}.beta"] = p.beta
        self.buffers[f"{name}.running_mean"] = p.running_mean
        self.buffers[f"{name}.running_var"] = p.running_var

    def add_residual(self, name: str, block: ResidualBlock3d) -> None:
        self.add_conv(f"{name}.conv1", block.conv1)
        self.add_bn(f"{name}.bn1", block.bn1)
        self.add_conv(f"{name}.conv2", block.conv2)
        self.add_bn(f"{name}.bn2", block.bn2)
        if block.downsample is not None:
            self.add_conv(f"{name}.downsample.conv", block.downsample[0])
            self.add_bn(f"{name}.downsample.bn", block.downsample[1])

    def add_linear(self, name: str, p: Linear) -> None:
        self.params[f"{name}.weight"] = p.weights
        self.params[f"{name}.bias"] = p.bias
