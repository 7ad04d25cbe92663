"""Grad-CAM, guided backpropagation and heatmap export for trained models."""

from __future__ import annotations

from collections.abc import Callable
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import numpy.typing as npt

from fatigue_tool.data import Clip, write_clip_file
from fatigue_tool.exceptions import ContractViolationError
from fatigue_tool.model import GRADCAM_LAYER, ModelGraph
from fatigue_tool.monitoring import get_logger
from fatigue_tool.tensor import Tensor, backward, guided_relu, mul, reshape

log = get_logger("viz")

MapArray = npt.NDArray[np.float32]
ClipLike = Clip | npt.ArrayLike


@dataclass
class ActivationMap:
    values: MapArray
    layer: str
    target_class: int
    upsampled: MapArray | None = None

    def __post_init__(self) -> None:
        if self.values.ndim != 3:
            raise ContractViolationError(
                f"activation map must be T x H x W, got {self.values.shape}"
            )
        if np.any(self.values < 0):
            raise ContractViolationError("activation map values must be nonnegative")


def _clip_array(clip: ClipLike) -> npt.NDArray[np.float32]:
    return clip.data if isinstance(clip, Clip) else np.asarray(clip, dtype=np.float32)


def _target_score(logits: Tensor, target_class: int) -> Tensor:
    width = logits.shape[-1]
    if not 0 <= target_class < width:
        raise ContractViolationError(f"target class {target_class} outside [0, {width})")
    mask = np.zeros(logits.shape, dtype=np.float32)
    mask[..., target_class] = 1.0
    return mul(logits, Tensor(mask)).sum()


def _as_volume(arr: npt.NDArray[np.float32], model: ModelGraph) -> npt.NDArray[np.float64]:
    """Batch-of-one activation -> C x T x H x W (per-frame 2D maps are restacked over time)."""
    a = arr.astype(np.float64)
    if model.backbone == "2d":
        return a[:, :, 0].transpose(1, 0, 2, 3)
    return a[0]


def cam_from_gradients(activations: npt.ArrayLike, gradients: npt.ArrayLike) -> MapArray:
    """C x T x H x W activations and class-score gradients -> T x H x W Grad-CAM map."""
    acts = np.asarray(activations, dtype=np.float64)
    grads = np.asarray(gradients, dtype=np.float64)
    if acts.ndim != 4 or acts.shape != grads.shape:
        raise ContractViolationError(
            f"expected matching C x T x H x W arrays, got {acts.shape} and {grads.shape}"
        )
    weights = grads.mean(axis=(1, 2, 3))
    cam = np.maximum(np.tensordot(weights, acts, axes=([0], [0])), 0.0)
    return cam.astype(np.float32)


def grad_cam_3d(
    model: ModelGraph,
    clip: ClipLike,
    target_class: int,
    layer: str = GRADCAM_LAYER,
) -> ActivationMap:
    """ReLU(sum_c w_c A_c) with w_c the mean gradient of the class score over A_c."""
    if model.head.head != "categorical":
        raise ContractViolationError("Grad-CAM needs the categorical head")
    data = _clip_array(clip)
    taps: dict[str, Tensor] = {}
    logits = model.forward(Tensor(data[None]), "eval", taps)
    if layer not in taps:
        known = ", ".join(sorted(k for k in taps if "." in k))
        raise ContractViolationError(f"unknown layer {layer!r}; known layers: {known}")
    activation = taps[layer].retain_grad()
    backward(_target_score(logits, target_class))
    grads = activation.grad
    if grads is None:
        grads = np.zeros(activation.shape, np.float32)
    model.zero_grad()

    cam = cam_from_gradients(_as_volume(activation.data, model), _as_volume(grads, model))
    return ActivationMap(values=cam, layer=layer, target_class=target_class)


def _interp_axis(a: npt.NDArray[np.float64], axis: int, size: int) -> npt.NDArray[np.float64]:
    src = a.shape[axis]
    if src == size:
        return a
    if src == 1:
        return np.repeat(a, size, axis=axis)
    pos = np.linspace(0.0, src - 1.0, size)
    i0 = np.minimum(np.floor(pos).astype(int), src - 2)
    frac = pos - i0
    shape = [1] * a.ndim
    shape[axis] = size
    frac = frac.reshape(shape)
    lo = np.take(a, i0, axis=axis)
    hi = np.take(a, i0 + 1, axis=axis)
    return lo * (1.0 - frac) + hi * frac


def upsample_trilinear(values: npt.ArrayLike, target: tuple[int, int, int]) -> MapArray:
    """Separable corner-aligned linear interpolation along T, H and W."""
    a = np.asarray(values, dtype=np.float64)
    if a.ndim != 3 or len(target) != 3:
        raise ContractViolationError(
            f"expected T x H x W map and target, got {a.shape} -> {target}"
        )
    if any(t < s for s, t in zip(a.shape, target, strict=True)):
        raise ContractViolationError(f"target {target} smaller than source {a.shape}")
    for axis, size in enumerate(target):
        a = _interp_axis(a, axis, size)
    return a.astype(np.float32)


def upsample_map(amap: ActivationMap, clip: ClipLike) -> ActivationMap:
    """Attach the map resampled to the clip's T x H x W."""
    data = _clip_array(clip)
    t, _, h, w = data.shape
    amap.upsampled = upsample_trilinear(amap.values, (t, h, w))
    return amap


def guided_backprop(
    model: ModelGraph | Callable[[Tensor], Tensor],
    clip: ClipLike,
    target_class: int,
) -> npt.NDArray[np.float32]:
    """Input gradient of the class score with relu backward gated on positive input and gradient.

    ``model`` may be a ModelGraph (fed a batch of one clip in eval mode) or any
    callable mapping an input Tensor to logits.
    """
    data = _clip_array(clip)
    x = Tensor(data, requires_grad=True)
    if isinstance(model, ModelGraph):
        graph = model
        logits = graph.forward(reshape(x, (1, *data.shape)), "eval")
    else:
        graph = None
        logits = model(x)
    with guided_relu():
        backward(_target_score(logits, target_class))
    if graph is not None:
        graph.zero_grad()
    saliency = x.grad if x.grad is not None else np.zeros(data.shape, dtype=np.float32)
    return saliency.astype(np.float32)


def guided_grad_cam(
    model: ModelGraph,
    clip: ClipLike,
    target_class: int,
    layer: str = GRADCAM_LAYER,
) -> npt.NDArray[np.float32]:
    """Guided-backprop saliency weighted by the upsampled Grad-CAM map, T x C x H x W."""
    data = _clip_array(clip)
    t, _, h, w = data.shape
    cam = upsample_trilinear(grad_cam_3d(model, data, target_class, layer).values, (t, h, w))
    saliency = guided_backprop(model, data, target_class)
    return (saliency * cam[:, None]).astype(np.float32)


def _to_bytes(values: npt.NDArray[np.float64]) -> bytes:
    return np.clip(np.round(values * 255.0), 0, 255).astype(np.uint8).tobytes()


def colorize(v: npt.NDArray[np.float64]) -> npt.NDArray[np.float64]:
    """Blue (0) to red (1): R = v, G = 0, B = 1 - v; returns H x W x 3."""
    return np.stack([v, np.zeros_like(v), 1.0 - v], axis=-1)


def write_ppm(path: Path, rgb: npt.NDArray[np.float64]) -> None:
    h, w, _ = rgb.shape
    path.write_bytes(f"P6\n{w} {h}\n255\n".encode("ascii") + _to_bytes(rgb))


def write_pgm(path: Path, gray: npt.NDArray[np.float64]) -> None:
    h, w = gray.shape
    path.write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + _to_bytes(gray))


def export_heatmaps(
    amap: ActivationMap,
    clip: Clip,
    out_dir: Path,
    sidecar: bool = True,
) -> list[Path]:
    """Per frame: a PPM overlay (0.5 frame + 0.5 colorized map) and a PGM of the map.

    The map is normalized by its maximum over the clip; an all-zero map stays
    zero. With ``sidecar`` the unnormalized map is also written as a VFC1
    file of shape T x 1 x H x W.
    """
    t, _, h, w = clip.data.shape
    if amap.upsampled is None or amap.upsampled.shape != (t, h, w):
        raise ContractViolationError("map must be upsampled to the clip resolution before export")
    raw = amap.upsampled.astype(np.float64)
    peak = raw.max()
    norm = raw / peak if peak > 0 else np.zeros_like(raw)

    out_dir.mkdir(parents=True, exist_ok=True)
    stem = f"{clip.video_id}_{clip.clip_index}"
    written: list[Path] = []
    for f in range(t):
        frame = clip.data[f].astype(np.float64).transpose(1, 2, 0)
        overlay = out_dir / f"{stem}_f{f:02}.ppm"
        write_ppm(overlay, 0.5 * frame + 0.5 * colorize(norm[f]))
        gray = out_dir / f"{stem}_f{f:02}_raw.pgm"
        write_pgm(gray, norm[f])
        written.extend([overlay, gray])
    if sidecar:
        path = out_dir / f"{stem}_map.vfc"
        write_clip_file(path, raw[:, None].astype(np.float32))
        written.append(path)
    log.info("heatmaps_exported", out=str(out_dir), files=len(written), layer=amap.layer)
    return written
