import pytest
import torch

from ma2mi.exceptions import HeadNotAttachedError
from ma2mi.miacnet import EncoderConfig, Fusion, MIACNet
from ma2mi.run_config import load_run_config


def _frames(batch=2, size=32, seed=0):
    generator = torch.Generator().manual_seed(seed)
    return torch.rand(batch, 3, size, size, generator=generator), torch.rand(batch, 3, size, size, generator=generator)


def test_tiny_shapes_and_stride():
    model = MIACNet("tiny", cond_dim=16, image_size=32)
    a, b = _frames()
    out = model(a, b)
    assert model.stride == 16
    assert out.condition.shape == (2, 16)
    assert out.position.shape == out.action.shape == (2, 128, 2, 2)


def test_resnet18_preset_has_stride_32():
    model = MIACNet("resnet18", cond_dim=8, image_size=64).eval()
    a, b = _frames(size=64)
    out = model(a, b)
    assert model.stride == 32
    assert out.action.shape == (2, 512, 2, 2)


def test_grid_size_rejects_non_multiples():
    assert EncoderConfig("resnet18").grid_size(256) == 8
    with pytest.raises(ValueError):
        EncoderConfig("tiny").grid_size(40)
    with pytest.raises(ValueError):
        MIACNet("tiny", image_size=40)


def test_wrong_input_size_is_rejected():
    model = MIACNet("tiny", image_size=32)
    a, b = _frames(size=64)
    with pytest.raises(ValueError):
        model(a, b)
    with pytest.raises(ValueError):
        model.action_input(a, b[:, :, :32, :32])


def test_action_branch_sees_normalized_difference():
    model = MIACNet("tiny", image_size=32, mean=(0.5, 0.5, 0.5), std=(0.25, 0.5, 1.0))
    a, b = _frames()
    expected = (b - a) / torch.tensor([0.25, 0.5, 1.0]).view(1, 3, 1, 1)
    assert torch.allclose(model.action_input(a, b), expected)


def test_identical_frames_give_zero_action_input():
    model = MIACNet("tiny", image_size=32)
    a, _ = _frames()
    assert torch.count_nonzero(model.action_input(a, a)) == 0


@pytest.mark.parametrize("fusion", ["sum", "concat", "gated"])
def test_every_fusion_produces_the_condition(fusion):
    model = MIACNet("tiny", cond_dim=12, fusion=fusion, image_size=32)
    a, b = _frames()
    assert model(a, b).condition.shape == (2, 12)


def test_position_free_network():
    model = MIACNet("tiny", cond_dim=8, use_position_encoder=False, image_size=32)
    a, b = _frames()
    out = model(a, b)
    assert out.position is None and out.condition.shape == (2, 8)
    assert list(model.branch_parameters("position_encoder")) == []
    with pytest.raises(RuntimeError):
        model.encode_position(a)


def test_fusion_rejects_mismatched_features():
    fusion = Fusion(4, 8, "sum")
    with pytest.raises(ValueError):
        fusion(torch.randn(1, 4, 2, 2), torch.randn(1, 4, 3, 3))
    with pytest.raises(ValueError):
        Fusion(4, 8, "product")


def test_head_is_zero_initialized_and_required():
    model = MIACNet("tiny", cond_dim=8, image_size=32)
    a, b = _frames()
    with pytest.raises(HeadNotAttachedError):
        model.logits(a, b)
    model.attach_head(5)
    logits = model.logits(a, b)
    assert logits.shape == (2, 5)
    assert torch.count_nonzero(logits) == 0


def test_from_config_reads_model_and_data_sections(test_config_path):
    tree = load_run_config(str(test_config_path)).tree
    model = MIACNet.from_config(tree)
    assert model.image_size == 32 and model.cond_dim == 16
    assert torch.allclose(model.std.flatten(), torch.tensor(tree["data"]["std"]))


def test_gradients_reach_both_branches():
    model = MIACNet("tiny", cond_dim=8, image_size=32)
    a, b = _frames()
    model(a, b).condition.pow(2).sum().backward()
    for branch in ("position_encoder", "action_encoder", "fusion"):
        grads = [p.grad for p in model.branch_parameters(branch)]
        assert any(g is not None and torch.count_nonzero(g) > 0 for g in grads)
