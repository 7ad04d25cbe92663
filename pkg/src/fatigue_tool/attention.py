"""Embedded-Gaussian non-local attention with a zero-initialised residual gate.

For input x with L = T*H*W positions:

    s_ij = u(x_i) . v(x_j)            u, v: 1x1x1 convs C -> C_b
    a_ij = softmax_j(s_ij)
    y_i  = A(sum_j a_ij g(x_j))       g: 1x1x1 conv C -> C_b, A identity or relu
    z_i  = gamma_z * W_z(y_i) + x_i   W_z: 1x1x1 conv C_b -> C

The L x L affinity matrix is materialised densely.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import TYPE_CHECKING, Literal

import numpy as np

from fatigue_tool.exceptions import ContractViolationError
from fatigue_tool.nn import Conv3dParams, conv3d, init_conv3d
from fatigue_tool.tensor import Tensor, add, matmul, permute, relu, reshape, scale, softmax

if TYPE_CHECKING:
    from fatigue_tool.model import ModelGraph

Activation = Literal["identity", "relu"]
AttentionPosition = Literal["after_block3", "after_block4", "none"]
ATTENTION_POSITIONS: tuple[AttentionPosition, ...] = ("after_block3", "after_block4", "none")


@dataclass
class NonLocalBlock:
    w_u: Conv3dParams
    w_v: Conv3dParams
    w_g: Conv3dParams
    w_z: Conv3dParams
    gamma_z: Tensor
    activation: Activation = "identity"

    def __post_init__(self) -> None:
        for name in ("w_u", "w_v", "w_g", "w_z"):
            kernel = getattr(self, name).kernel
            if kernel != (1, 1, 1):
                raise ContractViolationError(f"{name} must be a 1x1x1 convolution, got {kernel}")
        c = self.w_u.in_channels
        if self.w_v.in_channels != c or self.w_g.in_channels != c:
            raise ContractViolationError("w_u, w_v, w_g must share the input channel count")
        if self.w_u.out_channels != self.w_v.out_channels:
            raise ContractViolationError("w_u and w_v must embed into the same width")
        if self.w_z.in_channels != self.w_g.out_channels or self.w_z.out_channels != c:
            raise ContractViolationError("w_z must map the bottleneck back to the input channels")
        if self.gamma_z.size != 1:
            raise ContractViolationError("gamma_z must be a single scalar")

    @property
    def channels(self) -> int:
        return self.w_u.in_channels

    @property
    def bottleneck(self) -> int:
        return self.w_g.out_channels

    def parameters(self) -> dict[str, Tensor]:
        params: dict[str, Tensor] = {}
        for name in ("w_u", "w_v", "w_g", "w_z"):
            conv: Conv3dParams = getattr(self, name)
            params[f"{name}.weight"] = conv.weights
            if conv.bias is not None:
                params[f"{name}.bias"] = conv.bias
        params["gamma_z"] = self.gamma_z
        return params


def init_nonlocal_block(
    rng: np.random.Generator,
    channels: int,
    bottleneck_ratio: float = 0.5,
    activation: Activation = "identity",
) -> NonLocalBlock:
    bottleneck = max(1, int(channels * bottleneck_ratio))
    return NonLocalBlock(
        w_u=init_conv3d(rng, bottleneck, channels, 1, bias=True),
        w_v=init_conv3d(rng, bottleneck, channels, 1, bias=True),
        w_g=init_conv3d(rng, bottleneck, channels, 1, bias=True),
        w_z=init_conv3d(rng, channels, bottleneck, 1, bias=True),
        gamma_z=Tensor(np.zeros(1), requires_grad=True),
        activation=activation,
    )


def _flatten_positions(x: Tensor, conv: Conv3dParams) -> Tensor:
    """N x C x T x H x W -> N x C_b x L."""
    h = conv3d(x, conv)
    n, c, t, hh, ww = h.shape
    return reshape(h, (n, c, t * hh * ww))


def attention_weights(x: Tensor, block: NonLocalBlock) -> Tensor:
    """N x L x L matrix whose row i is softmax_j(u(x_i) . v(x_j))."""
    if x.ndim != 5:
        raise ContractViolationError(f"attention expects N x C x T x H x W, got {x.shape}")
    u = _flatten_positions(x, block.w_u)
    v = _flatten_positions(x, block.w_v)
    scores = matmul(permute(u, (0, 2, 1)), v)
    return softmax(scores, axis=2)


def nonlocal_forward(x: Tensor, block: NonLocalBlock) -> Tensor:
    if x.ndim != 5 or x.shape[1] != block.channels:
        raise ContractViolationError(f"non-local block for {block.channels} channels got {x.shape}")
    n, _, t, h, w = x.shape
    alpha = attention_weights(x, block)
    g = _flatten_positions(x, block.w_g)
    y = matmul(alpha, permute(g, (0, 2, 1)))
    if block.activation == "relu":
        y = relu(y)
    y = reshape(permute(y, (0, 2, 1)), (n, block.bottleneck, t, h, w))
    return add(scale(conv3d(y, block.w_z), block.gamma_z), x)


def insert_attention(
    model: ModelGraph,
    position: AttentionPosition,
    block: NonLocalBlock | None = None,
    rng: np.random.Generator | None = None,
) -> ModelGraph:
    """Return a copy of ``model`` with a non-local block at ``position``.

    A fresh block sized to the feature channels at that position is created
    unless ``block`` is supplied, in which case its channel count must match.
    """
    if position not in ATTENTION_POSITIONS:
        raise ContractViolationError(f"unknown attention position {position!r}")
    if position == "none":
        return model
    channels = model.channels_at(position)
    if block is None:
        block = init_nonlocal_block(
            rng if rng is not None else np.random.default_rng(0),
            channels,
            bottleneck_ratio=model.bottleneck_ratio,
            activation=model.activation,
        )
    elif block.channels != channels:
        raise ContractViolationError(
            f"attention block has {block.channels} channels but {position} carries {channels}"
        )
    return model.with_attention(position, block)
