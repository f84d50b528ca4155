"""Shared fixtures: the tiny test corpus and config, plus the desk-scale corpus for slow tests."""

from pathlib import Path
from typing import Dict

import numpy as np
import pytest
import torch
from PIL import Image

from ma2mi import config
from ma2mi.data import ClipRecord, list_frames
from ma2mi.pretrain import run_pretrain
from ma2mi.run_config import load_run_config
from ma2mi.synth import CorpusConfig, generate_corpus

REPO_ROOT = Path(__file__).resolve().parents[1]
TEST_CONFIG = REPO_ROOT / "configs" / "test.json"
DESK_CONFIG = REPO_ROOT / "configs" / "desk.json"
DESK_SEEDS = (0, 1, 2)


@pytest.fixture(scope="session")
def test_config_path() -> Path:
    return TEST_CONFIG


@pytest.fixture(scope="session")
def corpus_dir(tmp_path_factory) -> Path:
    """3 macro + 3 micro subjects x 3 clips, 3 classes, 32x32 frames."""
    run = load_run_config(str(TEST_CONFIG))
    root = tmp_path_factory.mktemp("corpus")
    generate_corpus(CorpusConfig.from_dict(run.tree["corpus"]), root)
    return root


@pytest.fixture
def make_run(corpus_dir, tmp_path):
    """Build a RunConfig on the tiny corpus; extra overrides are appended."""
    def _make(*overrides: str, out: str = "run", seed: int = 0):
        manifests = [
            f"data.pretrain_manifest={corpus_dir / 'pretrain.jsonl'}",
            f"data.finetune_manifest={corpus_dir / 'finetune.jsonl'}",
            f"data.maer_manifest={corpus_dir / 'maer.jsonl'}",
        ]
        return load_run_config(
            str(TEST_CONFIG), manifests + list(overrides), seed=seed, output_dir=str(tmp_path / out)
        )
    return _make


@pytest.fixture(scope="session")
def desk_corpus(tmp_path_factory) -> Path:
    """Desk-scale corpus: 10 + 10 subjects x 20 clips, 5 classes, 64x64 frames."""
    run = load_run_config(str(DESK_CONFIG))
    root = tmp_path_factory.mktemp("desk_corpus")
    generate_corpus(CorpusConfig.from_dict(run.tree["corpus"]), root)
    return root


@pytest.fixture(scope="session")
def desk_run(desk_corpus, tmp_path_factory):
    """Build a RunConfig from desk.json on the desk corpus."""
    base = tmp_path_factory.mktemp("desk_runs")

    def _make(*overrides: str, out: str = "run", seed: int = 0):
        manifests = [
            f"data.pretrain_manifest={desk_corpus / 'pretrain.jsonl'}",
            f"data.finetune_manifest={desk_corpus / 'finetune.jsonl'}",
            f"data.maer_manifest={desk_corpus / 'maer.jsonl'}",
        ]
        return load_run_config(
            str(DESK_CONFIG), manifests + list(overrides), seed=seed, output_dir=str(base / out)
        )
    return _make


@pytest.fixture(scope="session")
def desk_pretrained(desk_run):
    """Desk pre-training checkpoint per seed, trained once per session with every step logged."""
    paths: Dict[int, Path] = {}

    def _get(seed: int) -> Path:
        if seed not in paths:
            run = desk_run("schedule.log_every=1", out=f"pretrain_{seed}", seed=seed)
            paths[seed] = run_pretrain(run, torch.device("cpu"))
        return paths[seed]
    return _get


def write_frames(frame_dir: Path, count: int, size: int = 32, seed: int = 0) -> Path:
    """Write `count` random RGB frames named like corpus frames."""
    rng = np.random.default_rng(seed)
    frame_dir.mkdir(parents=True, exist_ok=True)
    for i in range(count):
        array = rng.integers(0, 256, size=(size, size, 3), dtype=np.uint8)
        Image.fromarray(array, mode="RGB").save(frame_dir / config.FRAME_FILENAME.format(i))
    return frame_dir


def make_clip(
    tmp_path: Path,
    clip_id: str = "clip",
    count: int = 6,
    onset=None,
    apex=None,
    label=None,
    subject_id: str = "s0",
    size: int = 32
) -> ClipRecord:
    frame_dir = write_frames(tmp_path / clip_id, count, size=size)
    return ClipRecord(
        clip_id=clip_id,
        subject_id=subject_id,
        frame_dir=frame_dir,
        frames=list_frames(frame_dir),
        fps=30.0,
        onset_idx=onset,
        apex_idx=apex,
        label=label,
    )
