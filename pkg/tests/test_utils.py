import json

import torch

from conftest import write_frames
from ma2mi.cache_manager import FrameCache, LRUCache
from ma2mi.error_tracker import TrainingFailureTracker
from ma2mi.utils import JsonlLog, content_hash, derive_seed, read_jsonl, seed_everything, write_jsonl


def test_derive_seed_is_stable_and_part_sensitive():
    assert derive_seed(0, "pair", 1, 2) == derive_seed(0, "pair", 1, 2)
    assert derive_seed(0, "pair", 1, 2) != derive_seed(0, "pair", 2, 1)
    assert 0 <= derive_seed("x") < 2 ** 63


def test_content_hash_ignores_key_order():
    assert content_hash({"a": 1, "b": [1, 2]}) == content_hash({"b": [1, 2], "a": 1})
    assert content_hash({"a": 1}) != content_hash({"a": 2})


def test_seed_everything_repeats_torch_draws():
    seed_everything(4, deterministic=False)
    first = torch.rand(3)
    seed_everything(4, deterministic=False)
    assert torch.equal(first, torch.rand(3))


def test_jsonl_log_appends_and_resets(tmp_path):
    path = tmp_path / "log.jsonl"
    log = JsonlLog(path)
    log.write({"step": 1})
    JsonlLog(path, append=True).write({"step": 2})
    assert [r["step"] for r in log] == [1, 2]
    JsonlLog(path)
    assert not path.exists()
    assert write_jsonl(path, [{"a": 1}, {"a": 2}]) == 2
    assert read_jsonl(path) == [{"a": 1}, {"a": 2}]


def test_lru_cache_evicts_oldest():
    cache = LRUCache(max_size=2)
    cache.set("a", 1)
    cache.set("b", 2)
    assert cache.get("a") == 1
    cache.set("c", 3)
    assert "b" not in cache and "a" in cache and len(cache) == 2


def test_frame_cache_hits_after_first_load(tmp_path):
    write_frames(tmp_path / "clip", 1, size=16)
    cache = FrameCache(max_size=4)
    path = tmp_path / "clip" / "000000.png"
    first = cache.load(path, 8)
    second = cache.load(path, 8)
    assert first.shape == (3, 8, 8) and torch.equal(first, second)
    assert cache.stats() == {"size": 1, "hits": 1, "misses": 1}


def test_failure_tracker_writes_dump(tmp_path):
    tracker = TrainingFailureTracker(tmp_path)
    path = tracker.record_failure(7, {"l_rec": float("nan"), "l1": 0.5}, ["c0", "c1"], stage="finetune", epoch=2)
    dump = json.loads(path.read_text())
    assert dump["components"] == {"l_rec": "nan", "l1": 0.5}
    assert dump["stage"] == "finetune" and dump["clip_ids"] == ["c0", "c1"]
    assert tracker.get_failed_count() == 1
    tracker.clear()
    assert tracker.get_failed_count() == 0
