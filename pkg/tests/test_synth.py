import numpy as np
import pytest

from ma2mi.data import load_manifest
from ma2mi.exceptions import ConfigError
from ma2mi.synth import (
    CLASS_TABLE,
    CorpusConfig,
    MotionScript,
    SceneSpec,
    generate_corpus,
    make_motion,
    motion_box,
    nearest_centroid_accuracy,
    render_clip,
    separability_oracle,
)
from ma2mi.utils import content_hash, file_sha256, read_json


def _corpus(**overrides):
    settings = dict(
        subjects_pretrain=["m0", "m1"],
        subjects_finetune=["u0", "u1"],
        clips_per_subject=3,
        classes=3,
        amplitude_macro=(4.0, 7.0),
        amplitude_micro=(1.0, 2.0),
        frames=10,
        image_size=32,
        seed=0,
    )
    settings.update(overrides)
    return CorpusConfig(**settings)


def test_scene_is_a_function_of_the_subject():
    a, b = SceneSpec.for_subject("s1", 32), SceneSpec.for_subject("s1", 32)
    assert np.array_equal(a.background, b.background)
    assert a.regions == b.regions
    assert not np.array_equal(a.background, SceneSpec.for_subject("s2", 32).background)


def test_motion_profile_rests_at_ends_and_peaks_at_apex():
    motion = make_motion(0, 2.0, 16, np.random.default_rng(0))
    profile = motion.profile()
    assert profile[0] == 0.0 and profile[-1] == 0.0
    assert profile.argmax() == motion.apex
    assert profile.max() == pytest.approx(2.0)


def test_motion_script_checks_keyframe_order():
    with pytest.raises(ConfigError):
        MotionScript("eyes", (1.0, 0.0), 1.0, frames=10, onset=5, apex=3, offset=8, class_id=0)
    with pytest.raises(ConfigError):
        MotionScript("eyes", (1.0, 1.0), 1.0, frames=10, onset=1, apex=3, offset=8, class_id=0)


def test_amplitude_beyond_margin_is_rejected():
    scene = SceneSpec.for_subject("s0", 32)
    motion = make_motion(0, 30.0, 10, np.random.default_rng(0))
    with pytest.raises(ConfigError):
        render_clip(scene, motion, 0.0, np.random.default_rng(0))


def test_zero_amplitude_needs_explicit_permission():
    scene = SceneSpec.for_subject("s0", 32)
    motion = make_motion(1, 0.0, 10, np.random.default_rng(0))
    with pytest.raises(ConfigError):
        render_clip(scene, motion, 0.0, np.random.default_rng(0))
    frames = render_clip(scene, motion, 0.0, np.random.default_rng(0), allow_null_motion=True)
    assert np.array_equal(frames[0], frames[motion.apex])


def test_rendered_motion_is_confined_to_the_box():
    scene = SceneSpec.for_subject("s0", 32)
    motion = make_motion(2, 2.0, 10, np.random.default_rng(3))
    frames = render_clip(scene, motion, 0.0, np.random.default_rng(0))
    change = np.abs(frames[motion.apex] - frames[motion.onset]).sum(axis=-1)
    x0, y0, x1, y1 = motion_box(scene, motion)
    centers = np.arange(32) + 0.5
    inside = ((centers >= y0) & (centers <= y1))[:, None] & ((centers >= x0) & (centers <= x1))[None, :]
    assert change.sum() > 0
    assert change[inside].sum() / change.sum() > 0.9


@pytest.mark.parametrize("overrides", [
    {"subjects_finetune": ["m0", "u1"]},
    {"amplitude_micro": (1.0, 5.0)},
    {"classes": len(CLASS_TABLE) + 1},
    {"frames": 4},
])
def test_invalid_corpus_configs(overrides):
    with pytest.raises(ConfigError):
        _corpus(**overrides).validate()


def test_corpus_layout_and_label_stripping(tmp_path):
    result = generate_corpus(_corpus(), tmp_path)
    pretrain = load_manifest(result.pretrain_manifest)
    maer = load_manifest(result.maer_manifest, 3)
    micro = load_manifest(result.finetune_manifest, 3)
    assert len(pretrain) == len(maer) == len(micro) == 6
    assert all(r.label is None for r in pretrain)
    assert [r.clip_id for r in pretrain] == [r.clip_id for r in maer]
    assert all(r.label is not None and r.onset_idx < r.apex_idx for r in micro)
    assert {r.label for r in micro} == {0, 1, 2}
    assert not {r.subject_id for r in micro} & {r.subject_id for r in pretrain}
    boxes = read_json(result.motion_boxes)
    assert set(boxes) == {r.clip_id for r in pretrain + micro}
    summary = read_json(tmp_path / "corpus.json")
    assert summary["checksums"]["finetune.jsonl"] == file_sha256(result.finetune_manifest)
    assert summary["clips"] == {"macro": 6, "micro": 6}
    assert summary["config_hash"] == summary["corpus_hash"]


def test_corpus_summary_carries_the_run_config_hash(tmp_path):
    result = generate_corpus(_corpus(), tmp_path, config_hash="run-hash")
    assert result.summary["config_hash"] == "run-hash"
    assert read_json(tmp_path / "corpus.json")["corpus_hash"] == content_hash(_corpus().to_dict())


def test_same_seed_gives_identical_files(tmp_path):
    first = generate_corpus(_corpus(), tmp_path / "a")
    second = generate_corpus(_corpus(), tmp_path / "b")
    assert first.summary["checksums"] == second.summary["checksums"]
    frame = "frames/u1_c002/000005.png"
    assert file_sha256(tmp_path / "a" / frame) == file_sha256(tmp_path / "b" / frame)


def test_different_seed_changes_the_corpus(tmp_path):
    first = generate_corpus(_corpus(), tmp_path / "a")
    second = generate_corpus(_corpus(seed=1), tmp_path / "b")
    assert first.summary["checksums"] != second.summary["checksums"]


def test_micro_classes_are_separable_without_noise(tmp_path):
    corpus = _corpus(subjects_finetune=["u0", "u1", "u2", "u3"], clips_per_subject=6, classes=3)
    result = generate_corpus(corpus, tmp_path)
    records = load_manifest(result.finetune_manifest, 3)
    assert separability_oracle(records, 32) >= 0.9
    assert result.summary["oracle_accuracy"] == pytest.approx(separability_oracle(records, 32))


def test_nearest_centroid_accuracy_on_separated_clusters():
    features = np.array([[0.0, 0.0], [0.1, 0.0], [5.0, 5.0], [5.1, 5.0]])
    labels = np.array([0, 0, 1, 1])
    groups = np.array([0, 1, 0, 1])
    assert nearest_centroid_accuracy(features, labels, groups) == 1.0
