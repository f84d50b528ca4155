"""
Clip Data

Dataset manifests, clip records, frame-pair sampling, subject-independent split
generation and paired augmentation shared by pre-training, fine-tuning and
evaluation.

Frames are stored as directories of zero-padded PNG files; everything here is
a pure function of its inputs and an explicit seed, so data-loader workers can
run in parallel without shared state.
"""

import json
import os
import random
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
import torchvision.transforms.v2.functional as TF
from loguru import logger
from PIL import Image
from torch.utils.data import Dataset, Sampler
from torchvision.transforms import InterpolationMode

from . import config
from .cache_manager import FrameCache
from .exceptions import (
    FrameNotFoundError,
    ManifestParseError,
    ManifestValidationError,
    MissingAnnotationError,
    SplitError,
    UnsampleableClipError,
)
from .utils import derive_seed

MANIFEST_FIELDS = ("clip_id", "subject_id", "frame_dir", "fps", "onset", "apex", "offset", "label")

_DEFAULT_CACHE = FrameCache()


# =============================================================================
# Records
# =============================================================================

@dataclass(frozen=True)
class ClipRecord:
    """
    One video clip stored as a directory of frames.

    Attributes:
    -----------
    clip_id, subject_id : str
        Identifiers; subject_id drives subject-independent splitting
    frame_dir : Path
        Resolved directory holding the frame files
    frames : tuple of Path
        Ordered frame files
    fps : float
        Capture rate
    onset_idx, apex_idx, offset_idx : int, optional
        Key-frame indices
    label : int, optional
        Class index
    """
    clip_id: str
    subject_id: str
    frame_dir: Path
    frames: Tuple[Path, ...]
    fps: float
    onset_idx: Optional[int] = None
    apex_idx: Optional[int] = None
    offset_idx: Optional[int] = None
    label: Optional[int] = None

    @property
    def num_frames(self) -> int:
        return len(self.frames)

    def validate(self, num_classes: Optional[int] = None) -> None:
        """
        Check the record invariants.

        Raises:
        -------
        ManifestValidationError
            Fewer than two frames, non-positive fps, key frames out of order or
            out of range, label outside [0, num_classes)
        """
        if self.num_frames < 2:
            raise ManifestValidationError(self.clip_id, f"needs at least 2 frames, found {self.num_frames}")
        if not self.fps > 0:
            raise ManifestValidationError(self.clip_id, f"fps must be positive, got {self.fps}")

        present = [(name, idx) for name, idx in
                   (("onset", self.onset_idx), ("apex", self.apex_idx), ("offset", self.offset_idx))
                   if idx is not None]
        for name, idx in present:
            if not 0 <= idx < self.num_frames:
                raise ManifestValidationError(
                    self.clip_id, f"{name} index {idx} outside [0, {self.num_frames})"
                )
        for (name_a, a), (name_b, b) in zip(present, present[1:]):
            if a > b:
                raise ManifestValidationError(self.clip_id, f"{name_b} index {b} precedes {name_a} index {a}")

        if self.label is not None:
            if self.label < 0 or (num_classes is not None and self.label >= num_classes):
                raise ManifestValidationError(
                    self.clip_id, f"label {self.label} outside [0, {num_classes})"
                )

    def without_label(self) -> "ClipRecord":
        return replace(self, label=None)

    def to_row(self, base_dir: Optional[Path] = None) -> Dict[str, Any]:
        """Manifest row; frame_dir is written relative to base_dir when possible."""
        frame_dir = str(self.frame_dir)
        if base_dir is not None:
            frame_dir = os.path.relpath(self.frame_dir, Path(base_dir).resolve())
        return {
            "clip_id": self.clip_id,
            "subject_id": self.subject_id,
            "frame_dir": frame_dir,
            "fps": self.fps,
            "onset": self.onset_idx,
            "apex": self.apex_idx,
            "offset": self.offset_idx,
            "label": self.label,
        }


@dataclass
class FramePair:
    """
    Two frames of one clip and their interval.

    frame_a is I_t (or the onset frame), frame_b is I_{t+delta} (or the apex).
    delta == 0 is only legal for a degenerate key-frame annotation, which is
    flagged.
    """
    frame_a: torch.Tensor
    frame_b: torch.Tensor
    delta: int
    clip_id: Optional[str] = None
    degenerate: bool = False

    def __post_init__(self):
        if self.frame_a.shape != self.frame_b.shape:
            raise ValueError(
                f"frame shapes differ: {tuple(self.frame_a.shape)} vs {tuple(self.frame_b.shape)}"
            )
        if self.delta < 1 and not (self.delta == 0 and self.degenerate):
            raise ValueError(f"delta must be >= 1, got {self.delta}")


# =============================================================================
# Manifests
# =============================================================================

def list_frames(frame_dir: Path) -> Tuple[Path, ...]:
    """Consecutive frame files 000000.png, 000001.png, ... inside frame_dir."""
    frames = []
    index = 0
    while True:
        path = frame_dir / config.FRAME_FILENAME.format(index)
        if not path.is_file():
            break
        frames.append(path)
        index += 1
    return tuple(frames)


def check_frame_sizes(record: ClipRecord) -> Tuple[int, int]:
    """
    Pixel size (width, height) shared by a clip's frames.

    Only the first, last and key frames are opened (headers only).

    Raises:
    -------
    ManifestValidationError
        Frames of different sizes
    """
    indices = sorted({0, record.num_frames - 1} | {
        i for i in (record.onset_idx, record.apex_idx, record.offset_idx) if i is not None
    })
    sizes = {}
    for i in indices:
        with Image.open(record.frames[i]) as img:
            sizes[i] = img.size
    if len(set(sizes.values())) > 1:
        listed = ", ".join(f"frame {i}: {w}x{h}" for i, (w, h) in sizes.items())
        raise ManifestValidationError(record.clip_id, f"frames differ in size ({listed})")
    return sizes[indices[0]]


def _optional_int(row: Dict[str, Any], key: str, line_number: int) -> Optional[int]:
    value = row.get(key)
    if value is None:
        return None
    if isinstance(value, bool) or not isinstance(value, int):
        raise ManifestParseError(line_number, f"field {key!r} must be an integer or null, got {value!r}")
    return value


def parse_manifest_line(line: str, line_number: int, base_dir: Path) -> Dict[str, Any]:
    """
    Parse one manifest line into record fields (frames not yet listed).

    Raises:
    -------
    ManifestParseError
        Invalid JSON, missing field or wrong field type
    """
    try:
        row = json.loads(line)
    except json.JSONDecodeError as e:
        raise ManifestParseError(line_number, f"invalid JSON ({e.msg})") from e
    if not isinstance(row, dict):
        raise ManifestParseError(line_number, "record must be a JSON object")

    for key in ("clip_id", "subject_id", "frame_dir", "fps"):
        if key not in row:
            raise ManifestParseError(line_number, f"missing field {key!r}")
    for key in ("clip_id", "subject_id", "frame_dir"):
        if not isinstance(row[key], str):
            raise ManifestParseError(line_number, f"field {key!r} must be a string")
    if isinstance(row["fps"], bool) or not isinstance(row["fps"], (int, float)):
        raise ManifestParseError(line_number, "field 'fps' must be a number")

    frame_dir = Path(row["frame_dir"])
    if not frame_dir.is_absolute():
        frame_dir = base_dir / frame_dir
    return {
        "clip_id": row["clip_id"],
        "subject_id": row["subject_id"],
        "frame_dir": frame_dir.resolve(),
        "fps": float(row["fps"]),
        "onset_idx": _optional_int(row, "onset", line_number),
        "apex_idx": _optional_int(row, "apex", line_number),
        "offset_idx": _optional_int(row, "offset", line_number),
        "label": _optional_int(row, "label", line_number),
    }


def load_manifest(
    path: Union[str, Path],
    num_classes: Optional[int] = None
) -> List[ClipRecord]:
    """
    Load and validate a JSON-lines clip manifest.

    Parameters:
    -----------
    path : str or Path
        Manifest file; relative frame_dir entries resolve against its directory
    num_classes : int, optional
        When given, labels must lie in [0, num_classes)

    Returns:
    --------
    list of ClipRecord
        Validated records in file order

    Raises:
    -------
    ManifestParseError
        Malformed line (carries the line number)
    FrameNotFoundError
        frame_dir missing or without frames (carries clip_id)
    ManifestValidationError
        Invariant violation or frames of mixed sizes (carries clip_id)
    """
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"manifest not found: {path}")
    base_dir = path.parent.resolve()

    records = []
    seen = set()
    with open(path, "r", encoding="utf-8") as f:
        for line_number, line in enumerate(f, start=1):
            if not line.strip():
                continue
            fields = parse_manifest_line(line, line_number, base_dir)
            clip_id = fields["clip_id"]
            if clip_id in seen:
                raise ManifestParseError(line_number, f"duplicate clip_id {clip_id!r}")
            seen.add(clip_id)

            if not fields["frame_dir"].is_dir():
                raise FrameNotFoundError(clip_id, f"frame directory not found: {fields['frame_dir']}")
            frames = list_frames(fields["frame_dir"])
            if not frames:
                raise FrameNotFoundError(clip_id, f"no frame files in {fields['frame_dir']}")

            record = ClipRecord(frames=frames, **fields)
            record.validate(num_classes)
            check_frame_sizes(record)
            records.append(record)

    logger.info(f"Loaded {len(records)} clips from {path.name}")
    return records


def write_manifest(records: Iterable[ClipRecord], path: Union[str, Path]) -> Path:
    """
    Write records as a JSON-lines manifest with frame_dir relative to the file.

    Returns:
    --------
    Path
        The written manifest
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    base_dir = path.parent.resolve()
    with open(path, "w", encoding="utf-8") as f:
        for record in records:
            f.write(json.dumps(record.to_row(base_dir)) + "\n")
    return path


# =============================================================================
# Frame access and pair sampling
# =============================================================================

def load_frame(
    clip: ClipRecord,
    index: int,
    image_size: int,
    cache: Optional[FrameCache] = None
) -> torch.Tensor:
    """Decoded frame `index` of a clip as a (3, S, S) tensor in [0, 1]."""
    cache = cache or _DEFAULT_CACHE
    return cache.load(clip.frames[index], image_size)


def sample_frame_pair(
    clip: ClipRecord,
    delta_range: Sequence[int],
    rng: np.random.Generator,
    image_size: int = config.IMAGE_SIZE,
    cache: Optional[FrameCache] = None
) -> FramePair:
    """
    Draw (I_t, I_{t+delta}) from a clip.

    delta is uniform over {a..b} (b clamped to the clip length) and t is
    uniform over {0..len-1-delta}.

    Parameters:
    -----------
    clip : ClipRecord
        Source clip
    delta_range : (int, int)
        Inclusive interval [a, b], 1 <= a <= b
    rng : np.random.Generator
        Seeded random source

    Returns:
    --------
    FramePair

    Raises:
    -------
    UnsampleableClipError
        The clip has fewer than a+1 frames
    """
    lo, hi = int(delta_range[0]), int(delta_range[1])
    if not 1 <= lo <= hi:
        raise ValueError(f"delta range must satisfy 1 <= a <= b, got [{lo}, {hi}]")
    if clip.num_frames < lo + 1:
        raise UnsampleableClipError(
            clip.clip_id, f"{clip.num_frames} frames cannot hold an interval of {lo}"
        )
    hi = min(hi, clip.num_frames - 1)

    delta = int(rng.integers(lo, hi + 1))
    t = int(rng.integers(0, clip.num_frames - delta))
    return FramePair(
        frame_a=load_frame(clip, t, image_size, cache),
        frame_b=load_frame(clip, t + delta, image_size, cache),
        delta=delta,
        clip_id=clip.clip_id
    )


def keyframe_pair(
    clip: ClipRecord,
    image_size: int = config.IMAGE_SIZE,
    cache: Optional[FrameCache] = None
) -> FramePair:
    """
    The (onset, apex) pair of an annotated clip.

    onset == apex is accepted: the pair is returned with delta 0 and the
    degenerate flag set, and a warning is logged.

    Raises:
    -------
    MissingAnnotationError
        onset or apex index absent
    """
    if clip.onset_idx is None or clip.apex_idx is None:
        raise MissingAnnotationError(clip.clip_id, "onset and apex indices are required")
    delta = clip.apex_idx - clip.onset_idx
    degenerate = delta == 0
    if degenerate:
        logger.warning(f"Clip {clip.clip_id}: onset == apex ({clip.onset_idx}); using identical frames")
    return FramePair(
        frame_a=load_frame(clip, clip.onset_idx, image_size, cache),
        frame_b=load_frame(clip, clip.apex_idx, image_size, cache),
        delta=delta,
        clip_id=clip.clip_id,
        degenerate=degenerate
    )


# =============================================================================
# Splits
# =============================================================================

@dataclass
class Fold:
    train: Tuple[str, ...]
    test: Tuple[str, ...]


@dataclass
class SplitPlan:
    """
    Subject-independent cross-validation plan.

    Attributes:
    -----------
    protocol : str
        "LOSO" or "KFOLD"
    folds : list of Fold
        Train/test clip ids per fold
    seed : int
        Seed the plan was generated with
    """
    protocol: str
    folds: List[Fold]
    seed: int

    def to_dict(self) -> Dict[str, Any]:
        return {
            "protocol": self.protocol,
            "seed": self.seed,
            "folds": [{"train": list(f.train), "test": list(f.test)} for f in self.folds],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "SplitPlan":
        return cls(
            protocol=data["protocol"],
            seed=int(data["seed"]),
            folds=[Fold(train=tuple(f["train"]), test=tuple(f["test"])) for f in data["folds"]],
        )

    def save(self, path: Union[str, Path]) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_json() + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: Union[str, Path]) -> "SplitPlan":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))

    def validate(self, records: Sequence[ClipRecord]) -> None:
        """
        Check partition and subject-independence against the records.

        Raises:
        -------
        SplitError
            Any violated plan invariant
        """
        subject_of = {r.clip_id: r.subject_id for r in records}
        all_ids = set(subject_of)
        tested: List[str] = []
        for i, fold in enumerate(self.folds):
            train, test = set(fold.train), set(fold.test)
            unknown = (train | test) - all_ids
            if unknown:
                raise SplitError(f"fold {i} references unknown clips: {sorted(unknown)[:5]}")
            if train & test:
                raise SplitError(f"fold {i}: train and test overlap")
            shared = {subject_of[c] for c in train} & {subject_of[c] for c in test}
            if shared:
                raise SplitError(f"fold {i}: subjects in both train and test: {sorted(shared)}")
            tested.extend(fold.test)
        if len(tested) != len(set(tested)):
            raise SplitError("a clip appears in more than one test fold")
        if set(tested) != all_ids:
            raise SplitError("test folds do not cover every clip")
        if self.protocol == "LOSO":
            subjects = {r.subject_id for r in records}
            if len(self.folds) != len(subjects):
                raise SplitError(f"LOSO plan has {len(self.folds)} folds for {len(subjects)} subjects")


def _fold_from_subjects(records: Sequence[ClipRecord], test_subjects: set) -> Fold:
    return Fold(
        train=tuple(r.clip_id for r in records if r.subject_id not in test_subjects),
        test=tuple(r.clip_id for r in records if r.subject_id in test_subjects),
    )


def make_splits(
    records: Sequence[ClipRecord],
    protocol: str = "LOSO",
    k: int = config.KFOLD_K,
    seed: int = 0
) -> SplitPlan:
    """
    Build a subject-independent split plan.

    LOSO gives one fold per subject (sorted subject ids). KFOLD shuffles the
    subjects with the seed, then bin-packs them largest-first into k groups of
    near-equal clip counts; folds are ordered by their smallest subject id, so
    KFOLD with k == number of subjects coincides with LOSO.

    Parameters:
    -----------
    records : sequence of ClipRecord
        Clips to split
    protocol : str
        "LOSO" or "KFOLD"
    k : int
        Number of folds for KFOLD
    seed : int
        Shuffle seed

    Returns:
    --------
    SplitPlan

    Raises:
    -------
    SplitError
        Unknown protocol, k < 2, or fewer subjects than folds
    """
    clip_counts: Dict[str, int] = {}
    for record in records:
        clip_counts[record.subject_id] = clip_counts.get(record.subject_id, 0) + 1
    subjects = sorted(clip_counts)

    if protocol == "LOSO":
        if len(subjects) < 2:
            raise SplitError(f"LOSO needs at least 2 subjects, found {len(subjects)}")
        groups = [{s} for s in subjects]
    elif protocol == "KFOLD":
        if k < 2:
            raise SplitError(f"KFOLD needs k >= 2, got {k}")
        if len(subjects) < k:
            raise SplitError(f"KFOLD with k={k} needs at least {k} subjects, found {len(subjects)}")
        order = list(subjects)
        random.Random(seed).shuffle(order)
        # stable sort keeps the shuffled order among equal clip counts
        order.sort(key=lambda s: clip_counts[s], reverse=True)
        groups = [set() for _ in range(k)]
        loads = [0] * k
        for subject in order:
            target = min(range(k), key=lambda i: (loads[i], i))
            groups[target].add(subject)
            loads[target] += clip_counts[subject]
        groups.sort(key=min)
    else:
        raise SplitError(f"unknown protocol {protocol!r}")

    plan = SplitPlan(
        protocol=protocol,
        folds=[_fold_from_subjects(records, g) for g in groups],
        seed=seed
    )
    logger.debug(f"Built {protocol} plan with {len(plan.folds)} folds over {len(subjects)} subjects")
    return plan


# =============================================================================
# Augmentation
# =============================================================================

@dataclass
class AugmentationSpec:
    """Probabilities and magnitudes of the training augmentations."""
    crop_p: float = 0.0
    crop_pad: int = 0
    flip_p: float = 0.0
    rotate_p: float = 0.0
    rotate_max_deg: float = 0.0

    @classmethod
    def from_config(cls, section: Dict[str, Any]) -> "AugmentationSpec":
        return cls(
            crop_p=section["crop_p"],
            crop_pad=section["crop_pad"],
            flip_p=section["flip_p"],
            rotate_p=section["rotate_p"],
            rotate_max_deg=section["rotate_max_deg"],
        )


@dataclass
class AugmentationDraw:
    """One concrete set of augmentation parameters."""
    flip: bool = False
    angle: float = 0.0
    crop_offset: Optional[Tuple[int, int]] = None
    crop_pad: int = 0


def _clamp01(p: float) -> float:
    return min(max(float(p), 0.0), 1.0)


def sample_augmentation(spec: AugmentationSpec, rng: np.random.Generator) -> AugmentationDraw:
    """Draw augmentation parameters; degenerate magnitudes become no-ops."""
    draw = AugmentationDraw()
    if spec.crop_pad > 0 and rng.random() < _clamp01(spec.crop_p):
        pad = int(spec.crop_pad)
        draw.crop_pad = pad
        draw.crop_offset = (int(rng.integers(0, 2 * pad + 1)), int(rng.integers(0, 2 * pad + 1)))
    if rng.random() < _clamp01(spec.flip_p):
        draw.flip = True
    if spec.rotate_max_deg > 0 and rng.random() < _clamp01(spec.rotate_p):
        draw.angle = float(rng.uniform(-spec.rotate_max_deg, spec.rotate_max_deg))
    return draw


def apply_augmentation(image: torch.Tensor, draw: AugmentationDraw) -> torch.Tensor:
    """
    Apply a drawn augmentation to a (..., 3, H, W) tensor.

    Order: pad-then-crop, horizontal flip, rotation. Output shape equals input.
    """
    height, width = image.shape[-2:]
    out = image
    if draw.crop_offset is not None and draw.crop_pad > 0:
        pad = draw.crop_pad
        out = TF.pad(out, [pad, pad, pad, pad], padding_mode="reflect")
        top, left = draw.crop_offset
        out = TF.crop(out, top, left, height, width)
    if draw.flip:
        out = TF.horizontal_flip(out)
    if draw.angle != 0.0:
        out = TF.rotate(out, draw.angle, interpolation=InterpolationMode.BILINEAR, fill=0.0)
    return out


def augment(image: torch.Tensor, spec: AugmentationSpec, rng: np.random.Generator) -> torch.Tensor:
    """Augment one image with freshly drawn parameters."""
    return apply_augmentation(image, sample_augmentation(spec, rng))


def augment_pair(pair: FramePair, spec: AugmentationSpec, rng: np.random.Generator) -> FramePair:
    """
    Augment both frames of a pair with the same draw.

    Sharing the draw keeps pixel correspondence between the frames, so the
    difference image still encodes facial motion only.
    """
    draw = sample_augmentation(spec, rng)
    both = apply_augmentation(torch.stack([pair.frame_a, pair.frame_b]), draw)
    return replace(pair, frame_a=both[0], frame_b=both[1])


# =============================================================================
# Torch datasets
# =============================================================================

def subject_index(records: Sequence[ClipRecord]) -> Dict[str, int]:
    """Dense integer ids for subjects, in sorted subject order."""
    return {s: i for i, s in enumerate(sorted({r.subject_id for r in records}))}


class PretrainPairDataset(Dataset):
    """
    Random frame pairs for pre-training.

    Item i of epoch e is a pure function of (seed, e, i). Labels are never read.
    """

    def __init__(
        self,
        records: Sequence[ClipRecord],
        delta_range: Sequence[int],
        image_size: int,
        seed: int,
        pairs_per_clip: int = 1,
        augmentation: Optional[AugmentationSpec] = None,
        cache_size: int = config.FRAME_CACHE_SIZE
    ):
        self.records = list(records)
        self.delta_range = (int(delta_range[0]), int(delta_range[1]))
        self.image_size = image_size
        self.seed = seed
        self.pairs_per_clip = max(1, int(pairs_per_clip))
        self.augmentation = augmentation
        self.subjects = subject_index(self.records)
        self.cache = FrameCache(cache_size)
        self.epoch = 0

        for record in self.records:
            if record.num_frames < self.delta_range[0] + 1:
                raise UnsampleableClipError(
                    record.clip_id, f"{record.num_frames} frames cannot hold an interval of {self.delta_range[0]}"
                )

    def set_epoch(self, epoch: int) -> None:
        self.epoch = epoch

    def __len__(self) -> int:
        return len(self.records) * self.pairs_per_clip

    def __getitem__(self, idx: int) -> Dict[str, Any]:
        record = self.records[idx % len(self.records)]
        rng = np.random.default_rng(derive_seed(self.seed, "pair", self.epoch, idx))
        pair = sample_frame_pair(record, self.delta_range, rng, self.image_size, self.cache)
        if self.augmentation is not None:
            pair = augment_pair(pair, self.augmentation, rng)
        return {
            "frame_a": pair.frame_a,
            "frame_b": pair.frame_b,
            "delta": pair.delta,
            "subject": self.subjects[record.subject_id],
            "clip_id": record.clip_id,
        }


class KeyframeDataset(Dataset):
    """
    Onset/apex pairs with labels for fine-tuning and supervised pre-training.
    """

    def __init__(
        self,
        records: Sequence[ClipRecord],
        image_size: int,
        seed: int = 0,
        augmentation: Optional[AugmentationSpec] = None,
        require_label: bool = True,
        cache_size: int = config.FRAME_CACHE_SIZE
    ):
        self.records = list(records)
        self.image_size = image_size
        self.seed = seed
        self.augmentation = augmentation
        self.require_label = require_label
        self.subjects = subject_index(self.records)
        self.cache = FrameCache(cache_size)
        self.epoch = 0

        for record in self.records:
            if record.onset_idx is None or record.apex_idx is None:
                raise MissingAnnotationError(record.clip_id, "onset and apex indices are required")
            if require_label and record.label is None:
                raise MissingAnnotationError(record.clip_id, "label is required for fine-tuning")

    def set_epoch(self, epoch: int) -> None:
        self.epoch = epoch

    def __len__(self) -> int:
        return len(self.records)

    def __getitem__(self, idx: int) -> Dict[str, Any]:
        record = self.records[idx]
        pair = keyframe_pair(record, self.image_size, self.cache)
        if self.augmentation is not None:
            rng = np.random.default_rng(derive_seed(self.seed, "keyframe", self.epoch, idx))
            pair = augment_pair(pair, self.augmentation, rng)
        return {
            "frame_a": pair.frame_a,
            "frame_b": pair.frame_b,
            "delta": pair.delta,
            "label": -1 if record.label is None else record.label,
            "subject": self.subjects[record.subject_id],
            "clip_id": record.clip_id,
        }


class EpochPermutationSampler(Sampler):
    """
    Visits every index once per epoch in an order fixed by (seed, tag, epoch).

    Resuming at an epoch boundary therefore replays exactly the batches an
    uninterrupted run would have seen.
    """

    def __init__(self, size: int, seed: int, tag: str = "order"):
        self.size = size
        self.seed = seed
        self.tag = tag
        self.epoch = 0

    def set_epoch(self, epoch: int) -> None:
        self.epoch = epoch

    def __len__(self) -> int:
        return self.size

    def __iter__(self):
        rng = np.random.default_rng(derive_seed(self.seed, self.tag, self.epoch))
        return iter(rng.permutation(self.size).tolist())
