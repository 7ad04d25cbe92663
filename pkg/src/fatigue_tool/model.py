"""3D ResNet-18 assembly, shape tracing, kernel inflation and weight files.

Layer plan (3D backbone, input 32 x 3 x S x S):

    stem    conv (5, 7, 7) stride (1, 2, 2) + bn + relu   -> w  x 32 x S/2 x S/2
    pool    max (3, 3, 3) stride (2, 2, 2) pad 1          -> w  x 16 x S/4 x S/4
    stage1  2 blocks, stride (1, 1, 1)                    -> w  x 16 x S/4 x S/4
    stage2  2 blocks, stride (2, 2, 2)                    -> 2w x  8 x S/8 x S/8
    stage3  2 blocks, stride (2, 2, 2)                    -> 4w x  4 x S/16 x S/16
    stage4  2 blocks, stride (2, 2, 2)                    -> 8w x  2 x ...
    avgpool -> fc1 (8w -> 4w) + relu -> fc2 (4w -> head width)

With the default width w = 64 and S = 224 the stage-3 output is 256 x 4 x 14 x 14.
The 2D backbone runs the same plan per frame with temporal kernels and strides
of 1 and averages the per-frame logits over the clip.
"""

from __future__ import annotations

import struct
from collections.abc import Mapping
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Literal

import numpy as np
import numpy.typing as npt

from fatigue_tool.attention import (
    ATTENTION_POSITIONS,
    Activation,
    AttentionPosition,
    NonLocalBlock,
    init_nonlocal_block,
    nonlocal_forward,
)
from fatigue_tool.config import ModelSettings
from fatigue_tool.exceptions import (
    ContractViolationError,
    WeightFileError,
    WeightMagicError,
    WeightMismatchError,
    WeightTruncatedError,
)
from fatigue_tool.heads import LossConfig
from fatigue_tool.monitoring import get_logger
from fatigue_tool.nn import (
    BatchNorm3dParams,
    Conv3dParams,
    Linear,
    Mode,
    ParamGroup,
    ResidualBlock3d,
    _output_extents,
    batch_norm3d,
    conv3d,
    global_avg_pool3d,
    init_batch_norm3d,
    init_conv3d,
    init_linear,
    init_residual_block,
    linear,
    maxpool3d,
    residual_forward,
)
from fatigue_tool.tensor import Tensor, mean, permute, relu, reshape

log = get_logger("model")

Backbone = Literal["2d", "3d"]
InflationMode = Literal["replicate_divide", "replicate"]
SUPPORTED_INPUT_SIZES = (112, 224)
CLIP_LEN = 32
IN_CHANNELS = 3
WEIGHT_MAGIC = b"NLW1"
GRADCAM_LAYER = "stage4.block1.conv2"


@dataclass(frozen=True)
class LayerPlan:
    channels: tuple[int, int, int, int]
    spatial_strides: tuple[int, int, int, int] = (1, 2, 2, 2)
    temporal_strides: tuple[int, int, int, int] = (1, 2, 2, 2)
    blocks_per_stage: int = 2

    @classmethod
    def for_backbone(cls, backbone: Backbone, width: int) -> LayerPlan:
        channels = (width, 2 * width, 4 * width, 8 * width)
        if backbone == "2d":
            return cls(channels=channels, temporal_strides=(1, 1, 1, 1))
        return cls(channels=channels)


@dataclass
class ModelGraph:
    """Backbone, optional non-local block, two linear layers and the head."""

    input_size: int
    clip_len: int
    backbone: Backbone
    head: LossConfig
    plan: LayerPlan
    stem: Conv3dParams
    stem_bn: BatchNorm3dParams
    pool_kernel: tuple[int, int, int]
    pool_stride: tuple[int, int, int]
    pool_padding: tuple[int, int, int]
    stages: list[list[ResidualBlock3d]]
    fc1: Linear
    fc2: Linear
    attention_position: AttentionPosition = "none"
    attention: NonLocalBlock | None = None
    bottleneck_ratio: float = 0.5
    activation: Activation = "identity"
    _params: ParamGroup = field(default_factory=ParamGroup, init=False, repr=False)

    def __post_init__(self) -> None:
        if (self.attention is None) != (self.attention_position == "none"):
            raise ContractViolationError("attention block and position must be set together")
        group = ParamGroup()
        group.add_conv("stem.conv", self.stem)
        group.add_bn("stem.bn", self.stem_bn)
        for i, blocks in enumerate(self.stages, start=1):
            for j, block in enumerate(blocks):
                group.add_residual(f"stage{i}.block{j}", block)
        if self.attention is not None:
            for name, tensor in self.attention.parameters().items():
                group.params[f"attention.{name}"] = tensor
        group.add_linear("fc1", self.fc1)
        group.add_linear("fc2", self.fc2)
        self._params = group

    def parameters(self) -> dict[str, Tensor]:
        return dict(self._params.params)

    def buffers(self) -> dict[str, npt.NDArray[np.float32]]:
        return dict(self._params.buffers)

    def parameter_count(self) -> int:
        return sum(t.size for t in self._params.params.values())

    def zero_grad(self) -> None:
        for tensor in self._params.params.values():
            tensor.zero_grad()

    def state_dict(self) -> dict[str, npt.NDArray[np.float32]]:
        """Copies of every parameter and buffer, keyed by canonical name."""
        state = {name: t.data.copy() for name, t in self._params.params.items()}
        state.update({name: b.copy() for name, b in self._params.buffers.items()})
        return state

    def load_state(self, state: Mapping[str, npt.ArrayLike]) -> None:
        """Overwrite parameters and buffers in place; names and shapes must match exactly."""
        targets: dict[str, npt.NDArray[np.float32]] = {
            name: t.data for name, t in self._params.params.items()
        }
        targets.update(self._params.buffers)
        missing = sorted(set(targets) - set(state))
        unexpected = sorted(set(state) - set(targets))
        if missing or unexpected:
            raise WeightMismatchError(f"missing {missing[:5]}, unexpected {unexpected[:5]}")
        for name, target in targets.items():
            value = np.asarray(state[name], dtype=np.float32)
            if value.shape != target.shape:
                raise WeightMismatchError(
                    f"{name}: file has {value.shape}, model has {target.shape}"
                )
            target[...] = value

    def channels_at(self, position: AttentionPosition) -> int:
        if position == "after_block3":
            return self.plan.channels[2]
        if position == "after_block4":
            return self.plan.channels[3]
        raise ContractViolationError(f"no feature map at position {position!r}")

    def with_attention(
        self, position: AttentionPosition, block: NonLocalBlock | None
    ) -> ModelGraph:
        return replace(self, attention_position=position, attention=block)

    def _stage_frames(self, x: Tensor) -> Tensor:
        """N x T x C x H x W clips -> N x C x T x H x W (3D) or (N*T) x C x 1 x H x W (2D)."""
        n, t, c, h, w = x.shape
        if self.backbone == "3d":
            return permute(x, (0, 2, 1, 3, 4))
        return reshape(x, (n * t, c, 1, h, w))

    def forward(
        self,
        clips: Tensor,
        mode: Mode = "train",
        taps: dict[str, Tensor] | None = None,
    ) -> Tensor:
        """Logits N x head width for a batch of N x T x C x H x W clips."""
        expected = (self.clip_len, IN_CHANNELS, self.input_size, self.input_size)
        if clips.ndim != 5 or clips.shape[1:] != expected:
            raise ContractViolationError(
                f"expected N x {self.clip_len} x {IN_CHANNELS} x {self.input_size} x "
                f"{self.input_size} clips, got {clips.shape}"
            )
        n = clips.shape[0]
        x = self._stage_frames(clips)
        x = relu(batch_norm3d(conv3d(x, self.stem), self.stem_bn, mode))
        x = maxpool3d(x, self.pool_kernel, self.pool_stride, self.pool_padding)
        for i, blocks in enumerate(self.stages, start=1):
            for j, block in enumerate(blocks):
                block_taps: dict[str, Tensor] | None = {} if taps is not None else None
                x = residual_forward(x, block, mode, block_taps)
                if taps is not None and block_taps is not None:
                    for key, value in block_taps.items():
                        taps[f"stage{i}.block{j}.{key}"] = value
            if taps is not None:
                taps[f"stage{i}"] = x
            if self.attention is not None and self.attention_position == f"after_block{i}":
                x = nonlocal_forward(x, self.attention)
                if taps is not None:
                    taps["attention"] = x
        features = relu(linear(global_avg_pool3d(x), self.fc1.weights, self.fc1.bias))
        logits = linear(features, self.fc2.weights, self.fc2.bias)
        if self.backbone == "2d":
            logits = mean(reshape(logits, (n, self.clip_len, self.head.width)), axis=1)
        return logits


def _validate_build(input_size: int, clip_len: int, attention_position: str, width: int) -> None:
    if input_size not in SUPPORTED_INPUT_SIZES:
        raise ContractViolationError(
            f"input size {input_size} unsupported; choose one of {SUPPORTED_INPUT_SIZES}"
        )
    if clip_len != CLIP_LEN:
        raise ContractViolationError(f"clips must have {CLIP_LEN} frames, got {clip_len}")
    if attention_position not in ATTENTION_POSITIONS:
        raise ContractViolationError(f"unknown attention position {attention_position!r}")
    if width < 1:
        raise ContractViolationError(f"width must be positive, got {width}")


def build_model(  # noqa: PLR0913
    input_size: int,
    clip_len: int = CLIP_LEN,
    attention_position: AttentionPosition = "after_block3",
    head: LossConfig | None = None,
    *,
    backbone: Backbone = "3d",
    width: int = 64,
    stem_temporal: int = 5,
    bottleneck_ratio: float = 0.5,
    activation: Activation = "identity",
    seed: int = 0,
) -> ModelGraph:
    """Assemble a freshly initialised model. Identical arguments give identical weights."""
    _validate_build(input_size, clip_len, attention_position, width)
    head = head if head is not None else LossConfig()
    rng = np.random.default_rng(seed)
    plan = LayerPlan.for_backbone(backbone, width)
    is_3d = backbone == "3d"
    kt = stem_temporal if is_3d else 1

    stem = init_conv3d(
        rng, width, IN_CHANNELS, (kt, 7, 7), stride=(1, 2, 2), padding=(kt // 2, 3, 3)
    )
    stages: list[list[ResidualBlock3d]] = []
    c_in = width
    kernel_t = 3 if is_3d else 1
    for channels, s_stride, t_stride in zip(
        plan.channels, plan.spatial_strides, plan.temporal_strides, strict=True
    ):
        stride = (t_stride, s_stride, s_stride)
        first = init_residual_block(rng, c_in, channels, stride, temporal_kernel=kernel_t)
        rest = [
            init_residual_block(rng, channels, channels, (1, 1, 1), temporal_kernel=kernel_t)
            for _ in range(plan.blocks_per_stage - 1)
        ]
        stages.append([first, *rest])
        c_in = channels

    hidden = plan.channels[3] // 2
    model = ModelGraph(
        input_size=input_size,
        clip_len=clip_len,
        backbone=backbone,
        head=head,
        plan=plan,
        stem=stem,
        stem_bn=init_batch_norm3d(width),
        pool_kernel=(3, 3, 3) if is_3d else (1, 3, 3),
        pool_stride=(2, 2, 2) if is_3d else (1, 2, 2),
        pool_padding=(1, 1, 1) if is_3d else (0, 1, 1),
        stages=stages,
        fc1=init_linear(rng, plan.channels[3], hidden),
        fc2=init_linear(rng, hidden, head.width),
        bottleneck_ratio=bottleneck_ratio,
        activation=activation,
    )
    if attention_position != "none":
        block = init_nonlocal_block(
            rng, model.channels_at(attention_position), bottleneck_ratio, activation
        )
        model = model.with_attention(attention_position, block)
    log.debug(
        "model_built",
        backbone=backbone,
        input_size=input_size,
        width=width,
        attention=attention_position,
        parameters=model.parameter_count(),
    )
    return model


def shape_trace(
    model: ModelGraph, input_shape: tuple[int, ...]
) -> list[tuple[str, tuple[int, ...]]]:
    """Per-clip output shape (C x T x H x W, or features) of every layer, without running it.

    ``input_shape`` is one clip, T x C x H x W.
    """
    if len(input_shape) != 4:
        raise ContractViolationError(f"input: expected T x C x H x W, got {input_shape}")
    t, c, h, w = input_shape
    if t != model.clip_len:
        raise ContractViolationError(f"input: clips must have {model.clip_len} frames, got {t}")
    if c != IN_CHANNELS or h != model.input_size or w != model.input_size:
        raise ContractViolationError(
            f"input: {input_shape} does not match a {model.input_size} model"
        )

    frames = t if model.backbone == "3d" else 1
    shape: tuple[int, ...] = (1, c, frames, h, w)
    trace: list[tuple[str, tuple[int, ...]]] = [("input", (c, t, h, w))]

    try:
        shape = model.stem.output_shape(shape)
    except ContractViolationError as exc:
        raise ContractViolationError(f"stem: {exc}") from exc
    trace.append(("stem", shape[1:]))
    pooled = _output_extents(
        "pool", shape[2:], model.pool_kernel, model.pool_stride, model.pool_padding
    )
    shape = (*shape[:2], *pooled)
    trace.append(("pool", shape[1:]))
    for i, blocks in enumerate(model.stages, start=1):
        for block in blocks:
            shape = _block_shape(f"stage{i}", block, shape)
        trace.append((f"stage{i}", shape[1:]))
        if model.attention is not None and model.attention_position == f"after_block{i}":
            if model.attention.channels != shape[1]:
                raise ContractViolationError(
                    f"attention: block has {model.attention.channels} channels, "
                    f"feature map has {shape[1]}"
                )
            trace.append(("attention", shape[1:]))
    channels = shape[1]
    if channels != model.fc1.weights.shape[0]:
        raise ContractViolationError(
            f"fc1: expects {model.fc1.weights.shape[0]} features, got {channels}"
        )
    trace.append(("avgpool", (channels,)))
    trace.append(("fc1", (model.fc1.weights.shape[1],)))
    trace.append(("fc2", (model.fc2.weights.shape[1],)))
    return trace


def _block_shape(name: str, block: ResidualBlock3d, shape: tuple[int, ...]) -> tuple[int, ...]:
    try:
        return block.output_shape(shape)
    except ContractViolationError as exc:
        raise ContractViolationError(f"{name}: {exc}") from exc


def format_feature_shape(shape: tuple[int, ...]) -> str:
    """C x T x H x W rendered as T×H×W×C; feature vectors render as their width."""
    if len(shape) == 4:
        c, t, h, w = shape
        return f"{t}×{h}×{w}×{c}"
    return "×".join(str(s) for s in shape)


def inflate_2d_to_3d(
    weights2d: Tensor | npt.ArrayLike,
    t: int,
    mode: InflationMode = "replicate_divide",
) -> Tensor:
    """Replicate a C_out x C_in x k x k kernel over ``t`` temporal slices.

    replicate_divide scales each slice by 1/t so a temporally constant input
    produces the 2D response; replicate copies without scaling.
    """
    if t < 1:
        raise ContractViolationError(f"temporal extent must be >= 1, got {t}")
    if isinstance(weights2d, Tensor):
        w2 = weights2d.data
    else:
        w2 = np.asarray(weights2d, dtype=np.float32)
    if w2.ndim == 5 and w2.shape[2] == 1:
        w2 = w2[:, :, 0]
    if w2.ndim != 4:
        raise ContractViolationError(f"expected a 4-D kernel, got shape {w2.shape}")
    inflated = np.repeat(w2[:, :, None], t, axis=2).astype(np.float64)
    if mode == "replicate_divide":
        inflated /= t
    return Tensor(inflated, requires_grad=True)


def inflate_state(
    weights2d: Mapping[str, npt.NDArray[np.float32]],
    model: ModelGraph,
    mode: InflationMode = "replicate_divide",
) -> dict[str, npt.NDArray[np.float32]]:
    """Build a full state for ``model`` from a 2D weight set.

    Convolution kernels are inflated to the model's temporal depth, other
    tensors are copied, and names absent from the 2D set keep the model's
    current values.
    """
    state = model.state_dict()
    inflated = copied = 0
    for name, target in state.items():
        if name not in weights2d:
            continue
        source = np.asarray(weights2d[name], dtype=np.float32)
        if target.ndim == 5 and source.shape != target.shape:
            kernel = source[:, :, 0] if source.ndim == 5 and source.shape[2] == 1 else source
            if kernel.shape != (target.shape[0], target.shape[1], *target.shape[3:]):
                raise WeightMismatchError(
                    f"{name}: 2D kernel {source.shape} cannot inflate to {target.shape}"
                )
            state[name] = inflate_2d_to_3d(kernel, target.shape[2], mode).data
            inflated += 1
        elif source.shape == target.shape:
            state[name] = source.copy()
            copied += 1
        else:
            raise WeightMismatchError(f"{name}: file has {source.shape}, model has {target.shape}")
    kept = len(state) - inflated - copied
    log.info("weights_inflated", inflated=inflated, copied=copied, kept=kept)
    return state


def save_weights(state: ModelGraph | Mapping[str, npt.ArrayLike], path: Path) -> None:
    """Write tensors in the NLW1 layout, sorted by name."""
    tensors = state.state_dict() if isinstance(state, ModelGraph) else state
    chunks = [WEIGHT_MAGIC, struct.pack("<I", len(tensors))]
    for name in sorted(tensors):
        arr = np.asarray(tensors[name], dtype="<f4")
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        chunks.append(arr.tobytes(order="C"))
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(b"".join(chunks))
    log.info("weights_saved", path=str(path), tensors=len(tensors))


class _Reader:
    def __init__(self, blob: bytes, path: Path) -> None:
        self.blob = blob
        self.offset = 0
        self.path = path

    def take(self, size: int) -> bytes:
        end = self.offset + size
        if end > len(self.blob):
            raise WeightTruncatedError(
                f"{self.path}: file ends at byte {len(self.blob)}, needed {end}"
            )
        chunk = self.blob[self.offset : end]
        self.offset = end
        return chunk

    def u32(self) -> int:
        return int(struct.unpack("<I", self.take(4))[0])


def load_weights(path: Path) -> dict[str, npt.NDArray[np.float32]]:
    """Read an NLW1 file into name -> array."""
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise WeightFileError(f"cannot read {path}: {exc}") from exc
    if blob[:4] != WEIGHT_MAGIC:
        raise WeightMagicError(f"{path}: bad magic {blob[:4]!r}, expected {WEIGHT_MAGIC!r}")
    reader = _Reader(blob, path)
    reader.take(4)
    tensors: dict[str, npt.NDArray[np.float32]] = {}
    for _ in range(reader.u32()):
        try:
            name = reader.take(reader.u32()).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise WeightFileError(f"{path}: tensor name is not UTF-8") from exc
        extents = tuple(reader.u32() for _ in range(reader.u32()))
        count = int(np.prod(extents)) if extents else 1
        values = np.frombuffer(reader.take(4 * count), dtype="<f4")
        tensors[name] = values.reshape(extents).astype(np.float32)
    if reader.offset != len(blob):
        raise WeightFileError(f"{path}: {len(blob) - reader.offset} trailing bytes")
    return tensors


def build_from_settings(
    settings: ModelSettings,
    head: LossConfig,
    seed: int,
    *,
    backbone: Backbone | None = None,
    attention_position: AttentionPosition | None = None,
) -> ModelGraph:
    """build_model driven by the ``model.*`` config section; keyword overrides win."""
    return build_model(
        settings.input_size,
        attention_position=(
            attention_position if attention_position is not None else settings.attention_position
        ),
        head=head,
        backbone=backbone if backbone is not None else settings.backbone,
        width=settings.width,
        stem_temporal=settings.stem_temporal,
        bottleneck_ratio=settings.bottleneck_ratio,
        activation=settings.activation,
        seed=seed,
    )
