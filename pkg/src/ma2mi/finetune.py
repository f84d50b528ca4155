"""
Fine-tuning

Adapts a pre-trained (or randomly initialized) MIACNet to N-class
micro-expression recognition from onset/apex pairs. A fresh zero-initialized
head is attached for every run; either encoder branch may be frozen, and the
reconstruction task may be kept alongside cross-entropy.
"""

from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from loguru import logger
from torch.utils.data import DataLoader
from tqdm import tqdm

from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .codec import LatentCodec
from .data import (
    AugmentationSpec,
    ClipRecord,
    EpochPermutationSampler,
    KeyframeDataset,
    keyframe_pair,
    load_manifest,
)
from .error_tracker import TrainingFailureTracker
from .exceptions import ConfigError, NonFiniteLossError
from .losses import LossValue, cross_entropy, inverse_frequency_weights, l_rec
from .miacnet import MIACNet
from .pretrain import build_optimizer
from .reconstructor import ConditionalReconstructor
from .run_config import RunConfig
from .utils import JsonlLog, resolve_device, seed_everything, write_jsonl

LOG_NAME = "finetune_log.jsonl"
CHECKPOINT_NAME = "finetune.pt"
PREDICTIONS_NAME = "predictions.jsonl"


@dataclass
class FinetuneConfig:
    """
    Fine-tuning strategy and optimization settings.

    At least the head is always trainable; keep_reconstruction_task needs a
    checkpoint carrying a codec and a reconstructor.
    """
    tune_position_encoder: bool = True
    tune_action_encoder: bool = True
    keep_reconstruction_task: bool = False
    num_classes: int = 5
    epochs: int = 80
    batch_size: int = 16
    lr: float = 4e-4
    weight_decay: float = 0.1
    final_lr_ratio: float = 0.01
    w_rec: float = 1.0
    class_weighting: bool = False
    betas: Sequence[float] = (0.9, 0.999)
    rec_reduction: str = "mean"

    @classmethod
    def from_config(cls, tree: Dict[str, Any]) -> "FinetuneConfig":
        section = tree["finetune"]
        return cls(
            tune_position_encoder=section["tune_position_encoder"],
            tune_action_encoder=section["tune_action_encoder"],
            keep_reconstruction_task=section["keep_reconstruction_task"],
            num_classes=section["num_classes"],
            epochs=section["epochs"],
            batch_size=section["batch_size"],
            lr=section["lr"],
            weight_decay=section["weight_decay"],
            final_lr_ratio=section["final_lr_ratio"],
            w_rec=section["w_rec"],
            class_weighting=section["class_weighting"],
            betas=tuple(tree["optim"]["betas"]),
            rec_reduction=tree["loss"]["rec_reduction"],
        )

    def validate(self) -> None:
        if self.num_classes < 2:
            raise ConfigError(f"num_classes must be at least 2, got {self.num_classes}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be positive")


@dataclass
class Prediction:
    clip_id: str
    true: Optional[int]
    pred: int
    probs: List[float]

    def to_dict(self) -> Dict[str, Any]:
        return {"clip_id": self.clip_id, "true": self.true, "pred": self.pred, "probs": self.probs}


@dataclass
class FinetuneResult:
    model: MIACNet
    codec: Optional[LatentCodec] = None
    reconstructor: Optional[ConditionalReconstructor] = None
    history: List[Dict[str, Any]] = field(default_factory=list)


def set_trainable(module: Optional[torch.nn.Module], trainable: bool) -> None:
    if module is None:
        return
    for p in module.parameters():
        p.requires_grad_(trainable)


class Finetuner:
    """
    Owns the model, optional reconstruction task and optimizer of one fine-tuning run.

    Frozen branches get requires_grad=False and stay in eval mode, so their
    weights and normalization statistics are bit-identical after training.
    """

    def __init__(
        self,
        model: MIACNet,
        settings: FinetuneConfig,
        codec: Optional[LatentCodec] = None,
        reconstructor: Optional[ConditionalReconstructor] = None,
        class_weights: Optional[torch.Tensor] = None,
        device: Optional[torch.device] = None,
        tracker: Optional[TrainingFailureTracker] = None
    ):
        settings.validate()
        self.device = device or torch.device("cpu")
        self.settings = settings
        self.model = model.to(self.device)
        self.model.attach_head(settings.num_classes)
        self.tracker = tracker
        self.step = 0
        self.class_weights = class_weights.to(self.device) if class_weights is not None else None

        self.frozen: List[torch.nn.Module] = []
        if not settings.tune_position_encoder and model.position_encoder is not None:
            self.frozen.append(model.position_encoder)
        if not settings.tune_action_encoder:
            self.frozen.append(model.action_encoder)
        for module in self.frozen:
            set_trainable(module, False)

        self.codec = None
        self.reconstructor = None
        if settings.keep_reconstruction_task:
            if codec is None or reconstructor is None:
                raise ConfigError("keep_reconstruction_task needs a checkpoint with codec and reconstructor")
            self.codec = codec.to(self.device).freeze()
            self.reconstructor = reconstructor.to(self.device)

        parameters = [p for p in self.model.parameters() if p.requires_grad]
        if self.reconstructor is not None:
            parameters += list(self.reconstructor.parameters())
        self.optimizer, self.scheduler = build_optimizer(
            parameters, settings.lr, settings.weight_decay, settings.betas, settings.epochs, settings.final_lr_ratio
        )

    @property
    def lr(self) -> float:
        return float(self.optimizer.param_groups[0]["lr"])

    def train_mode(self) -> None:
        self.model.train()
        for module in self.frozen:
            module.eval()
        if self.reconstructor is not None:
            self.reconstructor.train()

    def compute_loss(self, batch: Dict[str, Any]) -> LossValue:
        frame_a = batch["frame_a"].to(self.device)
        frame_b = batch["frame_b"].to(self.device)
        labels = batch["label"].to(self.device)

        output = self.model(frame_a, frame_b)
        ce = cross_entropy(self.model.classify(output.condition), labels, self.class_weights)
        if self.reconstructor is None:
            return ce

        with torch.no_grad():
            z_onset, z_apex = self.codec.encode(frame_a), self.codec.encode(frame_b)
        rec = l_rec(self.reconstructor(z_onset, output.condition), z_apex, self.settings.rec_reduction)
        value = ce.value + self.settings.w_rec * rec.value
        return LossValue(value, {**ce.components, **rec.components, "loss": float(value.detach())})

    def finetune_step(self, batch: Dict[str, Any]) -> LossValue:
        """
        One optimization step on a batch of labelled onset/apex pairs.

        Raises:
        -------
        NonFiniteLossError
            The loss is NaN or infinite
        """
        self.train_mode()
        loss = self.compute_loss(batch)
        if not loss.is_finite():
            if self.tracker is not None:
                self.tracker.record_failure(self.step, loss.components, batch["clip_id"], stage="finetune")
            raise NonFiniteLossError(f"non-finite fine-tuning loss at step {self.step}: {loss.components}")
        self.optimizer.zero_grad(set_to_none=True)
        loss.value.backward()
        self.optimizer.step()
        self.step += 1
        return loss


def train_classifier(
    tree: Dict[str, Any],
    records: Sequence[ClipRecord],
    checkpoint: Optional[Checkpoint] = None,
    seed: int = 0,
    device: Optional[torch.device] = None,
    log: Optional[JsonlLog] = None,
    tracker: Optional[TrainingFailureTracker] = None
) -> FinetuneResult:
    """
    Fine-tune on labelled clips and return the trained model.

    Parameters:
    -----------
    tree : dict
        Config tree; finetune, augment, data and loss sections are read. In
        scratch mode (no checkpoint) the model section defines the network.
    records : sequence of ClipRecord
        Training clips with key frames and labels
    checkpoint : Checkpoint, optional
        Pre-trained weights; None trains from random initialization
    seed : int
        Seeds initialization, batch order and augmentation

    Returns:
    --------
    FinetuneResult

    Raises:
    -------
    MissingAnnotationError
        A clip lacks key frames or a label
    """
    device = device or torch.device("cpu")
    settings = FinetuneConfig.from_config(tree)
    seed_everything(seed)

    codec, reconstructor = None, None
    if checkpoint is None:
        model = MIACNet.from_config(tree)
        logger.info("Fine-tuning from scratch (no pre-trained checkpoint)")
    else:
        if checkpoint.stage == "finetune":
            logger.warning(f"Checkpoint {checkpoint.path} is already fine-tuned; its head is replaced")
        model = checkpoint.build_model(with_head=False)
        if settings.keep_reconstruction_task:
            codec, reconstructor = checkpoint.build_codec(), checkpoint.build_reconstructor()

    image_size = model.image_size or tree["data"]["image_size"]
    dataset = KeyframeDataset(
        records, image_size, seed,
        augmentation=AugmentationSpec.from_config(tree["augment"]),
        require_label=True,
        cache_size=tree["data"]["frame_cache_size"],
    )

    class_weights = None
    if settings.class_weighting:
        class_weights = inverse_frequency_weights([r.label for r in records], settings.num_classes)

    trainer = Finetuner(model, settings, codec, reconstructor, class_weights, device, tracker)
    sampler = EpochPermutationSampler(len(dataset), seed, tag="finetune-order")
    loader = DataLoader(dataset, batch_size=settings.batch_size, sampler=sampler,
                        num_workers=tree["data"]["num_workers"])

    history = []
    for epoch in range(settings.epochs):
        dataset.set_epoch(epoch)
        sampler.set_epoch(epoch)
        total, batches = 0.0, 0
        for batch in tqdm(loader, desc=f"finetune epoch {epoch + 1}/{settings.epochs}", leave=False):
            loss = trainer.finetune_step(batch)
            record = {"step": trainer.step, "epoch": epoch, "lr": trainer.lr, **loss.components}
            if log is not None:
                log.write(record)
            total += loss.item()
            batches += 1
        trainer.scheduler.step()
        history.append({"epoch": epoch, "mean_loss": total / max(batches, 1)})
        logger.debug(f"Fine-tune epoch {epoch + 1}/{settings.epochs}: mean loss {total / max(batches, 1):.4f}")

    return FinetuneResult(trainer.model, trainer.codec, trainer.reconstructor, history)


@torch.no_grad()
def predict(
    model: MIACNet,
    clip: ClipRecord,
    image_size: Optional[int] = None,
    device: Optional[torch.device] = None
) -> Prediction:
    """
    Classify one annotated clip from its onset/apex pair.

    The argmax takes the lowest index on ties; probabilities are a softmax.

    Raises:
    -------
    MissingAnnotationError
        onset or apex absent
    """
    return predict_records(model, [clip], image_size, device)[0]


@torch.no_grad()
def predict_records(
    model: MIACNet,
    records: Sequence[ClipRecord],
    image_size: Optional[int] = None,
    device: Optional[torch.device] = None,
    batch_size: int = 32
) -> List[Prediction]:
    """Eval-mode predictions for many clips, in record order."""
    device = device or next(model.parameters()).device
    image_size = image_size or model.image_size
    model.eval()
    predictions = []
    for start in range(0, len(records), batch_size):
        chunk = records[start:start + batch_size]
        pairs = [keyframe_pair(r, image_size) for r in chunk]
        frame_a = torch.stack([p.frame_a for p in pairs]).to(device)
        frame_b = torch.stack([p.frame_b for p in pairs]).to(device)
        probs = F.softmax(model.logits(frame_a, frame_b).double(), dim=1).cpu()
        preds = probs.argmax(dim=1)
        for record, p, row in zip(chunk, preds.tolist(), probs.tolist()):
            predictions.append(Prediction(record.clip_id, record.label, int(p), row))
    return predictions


def write_predictions(path: Path, predictions: Sequence[Prediction], config_hash: Optional[str] = None) -> Path:
    """One JSON line per prediction, stamped with the producing config hash when given."""
    extra = {} if config_hash is None else {"config_hash": config_hash}
    write_jsonl(path, ({**p.to_dict(), **extra} for p in predictions))
    return Path(path)


def run_finetune(run: RunConfig, device: Optional[torch.device] = None) -> Path:
    """
    Fine-tune on the whole fine-tuning manifest and save a checkpoint with head.

    finetune.checkpoint selects the pre-trained weights (null = scratch).

    Returns:
    --------
    Path
        <output_dir>/finetune.pt
    """
    tree = run.tree
    device = device or resolve_device()
    output_dir = run.output_dir
    output_dir.mkdir(parents=True, exist_ok=True)

    settings = FinetuneConfig.from_config(tree)
    records = load_manifest(tree["data"]["finetune_manifest"], settings.num_classes)
    checkpoint = load_checkpoint(tree["finetune"]["checkpoint"]) if tree["finetune"]["checkpoint"] else None

    log = JsonlLog(output_dir / LOG_NAME)
    log.write({
        "event": "header",
        "config_hash": run.config_hash,
        "lr": settings.lr,
        "batch_size": settings.batch_size,
        "epochs": settings.epochs,
        "seed": run.seed,
        "pretrained": None if checkpoint is None else checkpoint.config_hash,
    })
    result = train_classifier(
        tree, records, checkpoint, run.seed, device, log=log, tracker=TrainingFailureTracker(output_dir)
    )

    predictions = predict_records(result.model, records, device=device)
    write_predictions(output_dir / PREDICTIONS_NAME, predictions, run.config_hash)
    train_accuracy = float(np.mean([p.pred == p.true for p in predictions]))
    logger.info(f"Fine-tuned on {len(records)} clips; training accuracy {train_accuracy:.3f}")

    return save_checkpoint(
        output_dir / CHECKPOINT_NAME, result.model, "finetune",
        checkpoint.config if checkpoint is not None else tree,
        run.config_hash, settings.epochs, run.seed,
        codec=result.codec, reconstructor=result.reconstructor,
    )
