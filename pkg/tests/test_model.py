"""Tests for model assembly, shape tracing, inflation and weight files."""

import struct

import numpy as np
import pytest

from fatigue_tool.exceptions import (
    ContractViolationError,
    WeightFileError,
    WeightMagicError,
    WeightMismatchError,
    WeightTruncatedError,
)
from fatigue_tool.heads import LossConfig
from fatigue_tool.model import (
    WEIGHT_MAGIC,
    build_model,
    format_feature_shape,
    inflate_2d_to_3d,
    inflate_state,
    load_weights,
    save_weights,
    shape_trace,
)
from fatigue_tool.nn import Conv3dParams, conv3d
from fatigue_tool.tensor import Tensor

CLIP_112 = (32, 3, 112, 112)
CLIP_224 = (32, 3, 224, 224)


def random_clips(n, seed=0, size=112):
    return Tensor(np.random.default_rng(seed).uniform(size=(n, 32, 3, size, size)))


# ===== Tests for shape_trace() =====


def test_stage3_shape_at_224():
    trace = dict(shape_trace(build_model(224), CLIP_224))
    assert trace["stage3"] == (256, 4, 14, 14)
    assert format_feature_shape(trace["stage3"]) == "4×14×14×256"
    assert trace["attention"] == (256, 4, 14, 14)


def test_full_trace_at_112():
    trace = shape_trace(build_model(112), CLIP_112)
    names = [name for name, _ in trace]
    assert names == [
        "input", "stem", "pool", "stage1", "stage2", "stage3", "attention",
        "stage4", "avgpool", "fc1", "fc2",
    ]  # fmt: skip
    shapes = dict(trace)
    assert shapes["stem"] == (64, 32, 56, 56)
    assert shapes["pool"] == (64, 16, 28, 28)
    assert format_feature_shape(shapes["stage3"]) == "4×7×7×256"
    assert shapes["stage4"] == (512, 2, 4, 4)
    assert shapes["avgpool"] == (512,)
    assert shapes["fc1"] == (256,)
    assert shapes["fc2"] == (2,)


def test_trace_after_block4():
    trace = shape_trace(build_model(112, attention_position="after_block4", width=2), CLIP_112)
    names = [name for name, _ in trace]
    assert names.index("attention") == names.index("stage4") + 1
    assert dict(trace)["attention"] == (16, 2, 4, 4)


def test_trace_2d_backbone_keeps_single_frame():
    trace = dict(shape_trace(build_model(112, backbone="2d", width=2), CLIP_112))
    assert trace["stage3"] == (8, 1, 7, 7)


def test_trace_rejects_wrong_input():
    model = build_model(112, width=2)
    with pytest.raises(ContractViolationError, match="frames"):
        shape_trace(model, (16, 3, 112, 112))
    with pytest.raises(ContractViolationError, match="does not match"):
        shape_trace(model, CLIP_224)


def test_format_feature_vector():
    assert format_feature_shape((512,)) == "512"


# ===== Tests for build_model() =====


@pytest.mark.parametrize("size", [113, 64, 256])
def test_unsupported_input_size(size):
    with pytest.raises(ContractViolationError, match="unsupported"):
        build_model(size)


def test_clip_length_is_fixed():
    with pytest.raises(ContractViolationError, match="32 frames"):
        build_model(112, clip_len=16)


def test_same_seed_same_weights(make_model):
    a, b = make_model().state_dict(), make_model().state_dict()
    assert a.keys() == b.keys()
    for name in a:
        np.testing.assert_array_equal(a[name], b[name])


def test_different_seed_different_weights(make_model):
    a = make_model(seed=0).parameters()["stem.conv.weight"].data
    b = make_model(seed=1).parameters()["stem.conv.weight"].data
    assert not np.array_equal(a, b)


def test_canonical_parameter_names(make_model):
    params = make_model().parameters()
    for name in (
        "stem.conv.weight",
        "stem.bn.gamma",
        "stage1.block0.conv1.weight",
        "stage2.block0.downsample.conv.weight",
        "stage4.block1.bn2.beta",
        "attention.w_u.weight",
        "attention.gamma_z",
        "fc1.weight",
        "fc2.bias",
    ):
        assert name in params
    assert "stem.bn.running_var" in make_model().buffers()
    assert "stage1.block0.downsample.conv.weight" not in params


def test_head_width_sets_fc2(make_model):
    assert make_model(head=LossConfig(k=5)).fc2.weights.shape == (8, 5)
    assert make_model(head=LossConfig(head="continuous", k=2)).fc2.weights.shape == (8, 1)


def test_forward_logit_shape(make_model):
    model = make_model()
    taps: dict[str, Tensor] = {}
    logits = model.forward(random_clips(2), "eval", taps)
    assert logits.shape == (2, 2)
    assert np.isfinite(logits.data).all()
    assert taps["stage4.block1.conv2"].shape == (2, 16, 2, 4, 4)
    assert taps["attention"].shape == (2, 8, 4, 7, 7)


def test_forward_is_deterministic(make_model):
    clips = random_clips(1, seed=3)
    first = make_model().forward(clips, "eval").data
    second = make_model().forward(clips, "eval").data
    np.testing.assert_array_equal(first, second)


def test_forward_2d_backbone_averages_frames(make_model):
    logits = make_model(backbone="2d").forward(random_clips(1), "eval")
    assert logits.shape == (1, 2)


def test_forward_rejects_bad_clip_shape(make_model):
    with pytest.raises(ContractViolationError, match="clips"):
        make_model().forward(Tensor(np.zeros((1, 16, 3, 112, 112))), "eval")


# ===== Tests for inflation =====


def test_inflate_single_slice_is_identity(rng):
    w2 = rng.normal(size=(4, 3, 3, 3))
    out = inflate_2d_to_3d(w2, 1)
    np.testing.assert_array_equal(out.data[:, :, 0], w2.astype(np.float32))


def test_inflate_replicate_divide_scales(rng):
    w2 = rng.normal(size=(2, 2, 3, 3)).astype(np.float32)
    divided = inflate_2d_to_3d(w2, 4)
    copied = inflate_2d_to_3d(w2, 4, "replicate")
    assert divided.shape == (2, 2, 4, 3, 3)
    np.testing.assert_allclose(divided.data.sum(axis=2), w2, atol=1e-6)
    np.testing.assert_array_equal(copied.data[:, :, 2], w2)


def test_inflated_kernel_reproduces_2d_response(rng):
    w2 = rng.normal(size=(2, 3, 3, 3))
    frame = rng.normal(size=(1, 3, 1, 6, 6))
    clip = np.repeat(frame, 5, axis=2)

    response_2d = conv3d(Tensor(frame), Conv3dParams(Tensor(w2[:, :, None]), padding=(0, 1, 1)))
    response_3d = conv3d(Tensor(clip), Conv3dParams(inflate_2d_to_3d(w2, 3), padding=(1, 1, 1)))
    for t in range(1, 4):
        np.testing.assert_allclose(response_3d.data[:, :, t], response_2d.data[:, :, 0], atol=1e-4)


def test_inflate_rejects_bad_extent(rng):
    with pytest.raises(ContractViolationError):
        inflate_2d_to_3d(rng.normal(size=(2, 2, 3, 3)), 0)
    with pytest.raises(ContractViolationError, match="4-D"):
        inflate_2d_to_3d(rng.normal(size=(2, 3, 3)), 2)


def test_inflate_state_from_2d_model(make_model):
    flat = make_model(backbone="2d", attention_position="none", seed=4)
    target = make_model(attention_position="none")
    state = inflate_state(flat.state_dict(), target)
    target.load_state(state)

    stem = target.parameters()["stem.conv.weight"].data
    assert stem.shape == (2, 3, 5, 7, 7)
    source = flat.parameters()["stem.conv.weight"].data[:, :, 0]
    np.testing.assert_allclose(stem.sum(axis=2), source, atol=1e-6)
    np.testing.assert_array_equal(
        target.parameters()["fc1.weight"].data, flat.parameters()["fc1.weight"].data
    )


def test_inflate_state_keeps_names_missing_from_source(make_model):
    target = make_model()
    before = target.parameters()["attention.gamma_z"].data.copy()
    state = inflate_state(make_model(backbone="2d", attention_position="none").state_dict(), target)
    np.testing.assert_array_equal(state["attention.gamma_z"], before)


def test_inflate_state_rejects_incompatible_kernel(make_model):
    source = make_model(backbone="2d").state_dict()
    source["stem.conv.weight"] = np.zeros((2, 3, 1, 5, 5), dtype=np.float32)
    with pytest.raises(WeightMismatchError, match="stem.conv.weight"):
        inflate_state(source, make_model())


# ===== Tests for weight files =====


def test_weights_round_trip_bit_identical(make_model, tmp_path):
    model = make_model()
    path = tmp_path / "w.nlw"
    save_weights(model, path)
    loaded = load_weights(path)
    state = model.state_dict()
    assert loaded.keys() == state.keys()
    for name, value in state.items():
        assert loaded[name].tobytes() == value.tobytes()

    other = make_model(seed=9)
    other.load_state(loaded)
    clips = random_clips(1)
    np.testing.assert_array_equal(
        other.forward(clips, "eval").data, model.forward(clips, "eval").data
    )


def test_weights_file_layout(tmp_path):
    path = tmp_path / "w.nlw"
    save_weights({"b": np.ones((2,)), "a": np.zeros((1, 1))}, path)
    blob = path.read_bytes()
    assert blob[:4] == WEIGHT_MAGIC
    assert struct.unpack("<I", blob[4:8]) == (2,)
    assert struct.unpack("<I", blob[8:12]) == (1,)
    assert blob[12:13] == b"a"


def test_bad_magic(tmp_path):
    path = tmp_path / "w.nlw"
    path.write_bytes(b"NOPE" + bytes(8))
    with pytest.raises(WeightMagicError, match="magic"):
        load_weights(path)


def test_truncated_file(tmp_path):
    path = tmp_path / "w.nlw"
    save_weights({"a": np.ones((4, 4))}, path)
    path.write_bytes(path.read_bytes()[:-3])
    with pytest.raises(WeightTruncatedError):
        load_weights(path)


def test_trailing_bytes(tmp_path):
    path = tmp_path / "w.nlw"
    save_weights({"a": np.ones(3)}, path)
    path.write_bytes(path.read_bytes() + b"\x00")
    with pytest.raises(WeightFileError, match="trailing"):
        load_weights(path)


def test_missing_weight_file(tmp_path):
    with pytest.raises(WeightFileError, match="cannot read"):
        load_weights(tmp_path / "absent.nlw")


def test_load_state_mismatch(make_model):
    model = make_model()
    state = model.state_dict()
    state.pop("fc2.bias")
    with pytest.raises(WeightMismatchError, match="fc2.bias"):
        model.load_state(state)

    state = model.state_dict()
    state["fc1.weight"] = np.zeros((3, 3), dtype=np.float32)
    with pytest.raises(WeightMismatchError, match="fc1.weight"):
        model.load_state(state)
