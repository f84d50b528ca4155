import pytest
import torch

from conftest import make_clip
from ma2mi.checkpoint import load_checkpoint, save_checkpoint
from ma2mi.data import load_manifest
from ma2mi.exceptions import ConfigError, MissingAnnotationError
from ma2mi.finetune import FinetuneConfig, Finetuner, predict, predict_records, run_finetune, train_classifier
from ma2mi.miacnet import MIACNet
from ma2mi.pretrain import run_pretrain
from ma2mi.utils import read_jsonl


@pytest.fixture
def pretrained(make_run):
    run = make_run(out="pretrain")
    return load_checkpoint(run_pretrain(run, torch.device("cpu")))


def _state(module):
    return {k: v.clone() for k, v in module.state_dict().items()}


def test_finetune_config_validation():
    with pytest.raises(ConfigError):
        FinetuneConfig(num_classes=1).validate()
    with pytest.raises(ConfigError):
        FinetuneConfig(epochs=0).validate()


def test_finetuner_attaches_zero_head():
    model = MIACNet("tiny", cond_dim=8, image_size=32)
    trainer = Finetuner(model, FinetuneConfig(num_classes=4, epochs=1))
    assert trainer.model.head.out_features == 4
    assert torch.count_nonzero(trainer.model.head.weight) == 0


def test_keep_reconstruction_needs_codec_and_reconstructor():
    model = MIACNet("tiny", cond_dim=8, image_size=32)
    with pytest.raises(ConfigError):
        Finetuner(model, FinetuneConfig(keep_reconstruction_task=True, num_classes=3, epochs=1))


def test_scratch_training_returns_a_classifier(make_run, corpus_dir):
    tree = make_run().tree
    records = load_manifest(corpus_dir / "finetune.jsonl", 3)
    result = train_classifier(tree, records, seed=0)
    assert len(result.history) == tree["finetune"]["epochs"]
    prediction = predict(result.model, records[0])
    assert prediction.clip_id == records[0].clip_id
    assert sum(prediction.probs) == pytest.approx(1.0)
    assert prediction.pred == max(range(3), key=lambda i: (prediction.probs[i], -i))


def test_frozen_branches_are_bit_identical(make_run, corpus_dir, pretrained):
    tree = make_run("finetune.tune_action_encoder=false", "finetune.tune_position_encoder=false").tree
    records = load_manifest(corpus_dir / "finetune.jsonl", 3)
    before = pretrained.build_model(with_head=False)
    result = train_classifier(tree, records, pretrained, seed=0)
    for branch in ("action_encoder", "position_encoder"):
        expected, actual = _state(getattr(before, branch)), getattr(result.model, branch).state_dict()
        assert all(torch.equal(expected[k], actual[k]) for k in expected)
    changed = [not torch.equal(a, b) for a, b in zip(before.fusion.state_dict().values(), result.model.fusion.state_dict().values())]
    assert any(changed)


def test_keeping_reconstruction_task_logs_both_losses(make_run, corpus_dir, pretrained):
    tree = make_run("finetune.keep_reconstruction_task=true").tree
    records = load_manifest(corpus_dir / "finetune.jsonl", 3)
    result = train_classifier(tree, records, pretrained, seed=0)
    assert result.reconstructor is not None and result.codec is not None


def test_untrained_head_predicts_class_zero(corpus_dir):
    model = MIACNet("tiny", cond_dim=8, image_size=32)
    model.attach_head(3)
    records = load_manifest(corpus_dir / "finetune.jsonl", 3)
    predictions = predict_records(model, records)
    assert [p.clip_id for p in predictions] == [r.clip_id for r in records]
    assert all(p.pred == 0 and p.probs == pytest.approx([1 / 3] * 3) for p in predictions)


def test_predict_requires_keyframes(tmp_path):
    model = MIACNet("tiny", cond_dim=8, image_size=32)
    model.attach_head(3)
    with pytest.raises(MissingAnnotationError):
        predict(model, make_clip(tmp_path, count=4, onset=0))


def test_training_requires_labels(make_run, tmp_path):
    clip = make_clip(tmp_path, count=4, onset=0, apex=2)
    with pytest.raises(MissingAnnotationError):
        train_classifier(make_run().tree, [clip])


def test_run_finetune_writes_artifacts(make_run, pretrained):
    run = make_run(f"finetune.checkpoint={pretrained.path}", out="finetune")
    checkpoint = load_checkpoint(run_finetune(run, torch.device("cpu")))
    assert checkpoint.stage == "finetune" and checkpoint.head_classes == 3
    header = read_jsonl(run.output_dir / "finetune_log.jsonl")[0]
    assert header["pretrained"] == pretrained.config_hash
    predictions = read_jsonl(run.output_dir / "predictions.jsonl")
    assert len(predictions) == 9
    assert {p["config_hash"] for p in predictions} == {run.config_hash}
    assert checkpoint.build_model(with_head=True).head.out_features == 3


def test_checkpoint_round_trip_preserves_outputs(tmp_path):
    torch.manual_seed(0)
    model = MIACNet("tiny", cond_dim=8, image_size=32).eval()
    model.attach_head(3)
    torch.nn.init.normal_(model.head.weight)
    tree = {
        "model": {"preset": "tiny", "cond_dim": 8, "fusion": "sum", "use_position_encoder": True},
        "data": {"image_size": 32, "mean": model.mean.flatten().tolist(), "std": model.std.flatten().tolist()},
    }
    path = save_checkpoint(tmp_path / "m.pt", model, "finetune", tree, "hash", 3, 0)
    restored = load_checkpoint(path).build_model().eval()
    a, b = torch.rand(2, 3, 32, 32), torch.rand(2, 3, 32, 32)
    assert torch.equal(model.logits(a, b), restored.logits(a, b))
