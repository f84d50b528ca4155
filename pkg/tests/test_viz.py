import numpy as np
import pytest
import torch
from PIL import Image

from ma2mi.checkpoint import load_checkpoint
from ma2mi.data import keyframe_pair, load_manifest
from ma2mi.exceptions import CheckpointError
from ma2mi.finetune import run_finetune, train_classifier
from ma2mi.miacnet import MIACNet
from ma2mi.pretrain import run_pretrain
from ma2mi.utils import file_sha256, read_json
from ma2mi.viz import (
    GradCAM,
    argmax_cell_box,
    argmax_cell_center,
    boxes_overlap,
    box_energy_ratio,
    cam_localization_rate,
    normalize_map,
    overlay_heatmap,
    run_viz_cam,
    run_viz_recon,
    viz_cam,
    viz_recon,
)


@pytest.fixture
def classifier():
    torch.manual_seed(0)
    model = MIACNet("tiny", cond_dim=8, image_size=32).eval()
    model.attach_head(3)
    torch.nn.init.normal_(model.head.weight)
    return model


def test_normalize_map_scales_to_unit_range():
    maps = torch.rand(3, 4, 4) * 7.0 + 2.0
    out = normalize_map(maps)
    assert torch.allclose(out.flatten(1).max(dim=1).values, torch.ones(3))
    assert torch.allclose(out.flatten(1).min(dim=1).values, torch.zeros(3))


def test_constant_map_normalizes_to_zeros():
    assert torch.count_nonzero(normalize_map(torch.full((1, 5, 5), 3.0))) == 0


def test_box_energy_ratio():
    energy = np.zeros((4, 4))
    energy[0, 0] = 3.0
    energy[3, 3] = 1.0
    assert box_energy_ratio(energy, (0, 0, 2, 2)) == pytest.approx(0.75)
    assert box_energy_ratio(np.zeros((4, 4)), (0, 0, 4, 4)) == 0.0


def test_argmax_cell_box_overlaps_boxes_smaller_than_a_cell():
    grid = torch.zeros(2, 2)
    grid[1, 1] = 1.0
    cell = argmax_cell_box(grid, 32)
    assert cell == (16.0, 16.0, 32.0, 32.0)
    # contains neither cell centre (8 or 24 px) on either axis
    assert boxes_overlap(cell, (17.0, 17.0, 22.0, 22.0))
    assert not boxes_overlap(cell, (2.0, 2.0, 14.0, 30.0))
    assert not boxes_overlap(cell, (0.0, 0.0, 16.0, 16.0))


def test_argmax_cell_center():
    grid = torch.zeros(2, 2)
    grid[1, 0] = 1.0
    assert argmax_cell_center(grid, 32) == (8.0, 24.0)


def test_grad_cam_maps_are_normalized(classifier):
    a, b = torch.rand(2, 3, 32, 32), torch.rand(2, 3, 32, 32)
    with GradCAM(classifier) as cam:
        result = cam(a, b, class_ids=[0, 2])
    assert result.maps.shape == (2, 32, 32) and result.grid.shape == (2, 2, 2)
    assert float(result.maps.min()) >= 0.0 and float(result.maps.max()) <= 1.0
    assert result.class_ids == [0, 2]
    assert all(p.grad is None for p in classifier.parameters())


def test_grad_cam_defaults_to_predicted_class(classifier):
    a, b = torch.rand(1, 3, 32, 32), torch.rand(1, 3, 32, 32)
    with GradCAM(classifier) as cam:
        result = cam(a, b)
    assert result.class_ids == [int(classifier.logits(a, b).argmax())]


def test_grad_cam_rejects_out_of_range_class(classifier):
    a, b = torch.rand(1, 3, 32, 32), torch.rand(1, 3, 32, 32)
    with GradCAM(classifier) as cam:
        with pytest.raises(ValueError):
            cam(a, b, class_ids=3)


def test_grad_cam_needs_a_head():
    with pytest.raises(CheckpointError):
        GradCAM(MIACNet("tiny", image_size=32))


def test_grad_cam_hook_is_removed(classifier):
    with GradCAM(classifier):
        pass
    assert not classifier.action_encoder.stages[-1]._forward_hooks


def test_overlay_is_uint8_image():
    out = overlay_heatmap(torch.rand(3, 16, 16), torch.rand(16, 16))
    assert out.dtype == np.uint8 and out.shape == (16, 16, 3)


def test_viz_cam_writes_deterministic_png(classifier, corpus_dir, tmp_path):
    clip = load_manifest(corpus_dir / "finetune.jsonl")[0]
    first = viz_cam(classifier, clip, tmp_path / "a.png", target_class=1, config_hash="abc")
    second = viz_cam(classifier, clip, tmp_path / "b.png", target_class=1, config_hash="abc")
    assert first["class"] == 1 and sum(first["probs"]) == pytest.approx(1.0)
    assert file_sha256(first["path"]) == file_sha256(second["path"])
    with Image.open(first["path"]) as image:
        assert image.size == (32, 32)
        assert image.text["config_hash"] == "abc"


def test_localization_rate_counts_correct_clips(classifier, corpus_dir):
    records = load_manifest(corpus_dir / "finetune.jsonl")
    boxes = {r.clip_id: [0.0, 0.0, 32.0, 32.0] for r in records}
    rate, correct = cam_localization_rate(classifier, records, boxes)
    assert correct == 0 or rate == 1.0
    assert 0 <= correct <= len(records)


@pytest.fixture
def pretrained_path(make_run):
    return run_pretrain(make_run(out="pretrain"), torch.device("cpu"))


def test_viz_recon_writes_four_pane_grid(pretrained_path, corpus_dir, tmp_path):
    checkpoint = load_checkpoint(pretrained_path)
    clip = load_manifest(corpus_dir / "finetune.jsonl")[0]
    info = viz_recon(checkpoint, keyframe_pair(clip, 32), tmp_path / "grid.png", box=[0, 0, 32, 32])
    with Image.open(info["path"]) as image:
        assert image.size == (4 * 32, 32)
    assert info["in_box_energy"] == 0.0 or info["in_box_energy"] == pytest.approx(1.0)


def test_viz_recon_needs_a_reconstructor(make_run, pretrained_path, tmp_path):
    finetuned = load_checkpoint(
        run_finetune(make_run(f"finetune.checkpoint={pretrained_path}", out="ft"), torch.device("cpu"))
    )
    clip_pair = keyframe_pair(load_manifest(make_run().tree["data"]["finetune_manifest"])[0], 32)
    with pytest.raises(CheckpointError):
        viz_recon(finetuned, clip_pair, tmp_path / "x.png")


def test_viz_commands(make_run, pretrained_path):
    recon = run_viz_recon(make_run(f"viz.checkpoint={pretrained_path}", out="recon"), torch.device("cpu"))
    assert recon.is_file() and read_json(recon.with_suffix(".json"))["in_box_energy"] is not None

    with pytest.raises(CheckpointError):
        run_viz_cam(make_run(f"viz.checkpoint={pretrained_path}", out="cam0"), torch.device("cpu"))

    finetuned = run_finetune(make_run(f"finetune.checkpoint={pretrained_path}", out="ft"), torch.device("cpu"))
    run = make_run(f"viz.checkpoint={finetuned}", "viz.localization=true", "viz.target_class=2", out="cam")
    cam = run_viz_cam(run, torch.device("cpu"))
    assert cam.is_file()
    assert read_json(cam.with_suffix(".json"))["class"] == 2
    localization = read_json(run.output_dir / "cam_localization.json")
    assert localization["clips"] == 9 and 0.0 <= localization["rate"] <= 1.0


@pytest.mark.slow
def test_desk_cam_lands_on_the_motion_region(desk_run, desk_pretrained, desk_corpus):
    records = load_manifest(desk_corpus / "finetune.jsonl")
    held_out = {"micro_s008", "micro_s009"}
    train = [r for r in records if r.subject_id not in held_out]
    test = [r for r in records if r.subject_id in held_out]
    assert len(test) == 40

    model = train_classifier(
        desk_run().tree, train, load_checkpoint(desk_pretrained(0)), seed=0, device=torch.device("cpu")
    ).model.eval()
    boxes = read_json(desk_corpus / "motion_boxes.json")
    rate, correct = cam_localization_rate(model, test, boxes, box_image_size=64)
    assert correct > 0
    assert rate >= 0.70
