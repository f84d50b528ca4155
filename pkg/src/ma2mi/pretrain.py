"""
Pre-training

The macro-to-micro pre-training stage: MIACNet encodes the action between
I_t and I_{t+delta} into C_delta, a frozen codec maps both frames to latents,
and the conditional reconstructor predicts the future latent from the current
one and C_delta. The position branch is trained by the position losses on the
same batch. Labels are never read.

The MAER baseline (pretrain.mode = "maer") instead trains MIACNet with a
temporary head and cross-entropy on labelled macro clips.
"""

from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
from loguru import logger
from torch.utils.data import DataLoader
from tqdm import tqdm

from .checkpoint import load_checkpoint, save_checkpoint
from .codec import LatentCodec, fit_codec, load_codec, save_codec
from .data import (
    AugmentationSpec,
    ClipRecord,
    EpochPermutationSampler,
    KeyframeDataset,
    PretrainPairDataset,
    load_manifest,
)
from .error_tracker import TrainingFailureTracker
from .exceptions import CheckpointError, ConfigError, NonFiniteLossError
from .losses import (
    LossValue,
    cross_entropy,
    cross_subject_permutation,
    l1_diversity,
    l2_cross_face,
    l3_equivariance,
    l_pos,
    l_pre,
    l_rec,
    sample_transforms,
)
from .miacnet import MIACNet
from .reconstructor import ConditionalReconstructor
from .run_config import RunConfig
from .utils import JsonlLog, derive_seed, resolve_device, seed_everything

LOG_NAME = "pretrain_log.jsonl"
CHECKPOINT_NAME = "pretrain.pt"


@dataclass
class PretrainState:
    """Counters of a pre-training run; epoch is the next epoch to run."""
    epoch: int = 0
    step: int = 0

    def to_dict(self) -> Dict[str, int]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "PretrainState":
        return cls(epoch=int(data["epoch"]), step=int(data["step"]))


def exponential_gamma(epochs: int, final_lr_ratio: float) -> float:
    """
    Per-epoch decay factor so the last epoch runs at lr0 * final_lr_ratio.

    Examples:
    ---------
    >>> round(exponential_gamma(3, 0.01), 6)
    0.1
    """
    if epochs <= 1:
        return 1.0
    return float(final_lr_ratio ** (1.0 / (epochs - 1)))


def build_optimizer(
    parameters: Sequence[torch.nn.Parameter],
    lr: float,
    weight_decay: float,
    betas: Sequence[float],
    epochs: int,
    final_lr_ratio: float
) -> Tuple[torch.optim.AdamW, torch.optim.lr_scheduler.ExponentialLR]:
    """AdamW over the trainable parameters with per-epoch exponential decay."""
    optimizer = torch.optim.AdamW(parameters, lr=lr, weight_decay=weight_decay, betas=tuple(betas))
    scheduler = torch.optim.lr_scheduler.ExponentialLR(optimizer, gamma=exponential_gamma(epochs, final_lr_ratio))
    return optimizer, scheduler


def select_pretrain_subjects(records: Sequence[ClipRecord], max_subjects: Optional[int]) -> List[ClipRecord]:
    """Keep the clips of the first max_subjects subjects in sorted order (None keeps all)."""
    if max_subjects is None:
        return list(records)
    keep = set(sorted({r.subject_id for r in records})[:max_subjects])
    selected = [r for r in records if r.subject_id in keep]
    logger.info(f"Pre-training pool restricted to {len(keep)} subjects ({len(selected)} clips)")
    return selected


class Pretrainer:
    """
    Owns the networks, optimizer and counters of one pre-training run.

    Parameters:
    -----------
    tree : dict
        Full config tree (loss, optim and schedule sections are read)
    model : MIACNet
        Network being pre-trained
    codec : LatentCodec, optional
        Frozen codec (ma2mi mode)
    reconstructor : ConditionalReconstructor, optional
        Trained jointly with the model (ma2mi mode)
    seed : int
        Seeds the per-step equivariance transforms
    tracker : TrainingFailureTracker, optional
        Receives non-finite steps
    mode : str
        "ma2mi" or "maer"
    """

    def __init__(
        self,
        tree: Dict[str, Any],
        model: MIACNet,
        codec: Optional[LatentCodec] = None,
        reconstructor: Optional[ConditionalReconstructor] = None,
        seed: int = 0,
        device: Optional[torch.device] = None,
        tracker: Optional[TrainingFailureTracker] = None,
        mode: str = "ma2mi"
    ):
        self.device = device or torch.device("cpu")
        self.mode = mode
        self.model = model.to(self.device)
        self.codec = codec.to(self.device).freeze() if codec is not None else None
        self.reconstructor = reconstructor.to(self.device) if reconstructor is not None else None
        self.seed = seed
        self.tracker = tracker
        self.loss_cfg = tree["loss"]
        if mode == "ma2mi" and (self.codec is None or self.reconstructor is None):
            raise ValueError("ma2mi pre-training needs a codec and a reconstructor")

        parameters = [p for p in self.model.parameters() if p.requires_grad]
        if self.reconstructor is not None:
            parameters += list(self.reconstructor.parameters())
        optim, schedule = tree["optim"], tree["schedule"]
        self.optimizer, self.scheduler = build_optimizer(
            parameters, optim["lr"], optim["weight_decay"], optim["betas"],
            schedule["epochs"], schedule["final_lr_ratio"]
        )
        self.state = PretrainState()

    @property
    def lr(self) -> float:
        return float(self.optimizer.param_groups[0]["lr"])

    def train_mode(self) -> None:
        self.model.train()
        if self.reconstructor is not None:
            self.reconstructor.train()
        if self.codec is not None:
            self.codec.eval()

    def position_loss(self, images: torch.Tensor, fp: torch.Tensor, subjects: Sequence[int]) -> LossValue:
        """L1 + L2 + L3 on clean I_t; L2 pairs each sample with the next one of another subject."""
        l1 = l1_diversity(fp)
        if fp.shape[0] >= 2:
            l2 = l2_cross_face(fp, fp[cross_subject_permutation(list(subjects))])
        else:
            l2 = LossValue(fp.new_zeros(()), {"l2": 0.0})
        rng = np.random.default_rng(derive_seed(self.seed, "l3", self.state.step))
        transforms = sample_transforms(
            images.shape[0],
            self.loss_cfg["l3_transforms"],
            rng,
            self.loss_cfg["l3_max_rotation_deg"],
            self.loss_cfg["l3_max_shift_cells"],
        )
        l3 = l3_equivariance(
            self.model.encode_position, images, transforms, self.model.stride, self.loss_cfg["l3_reduction"]
        )
        return l_pos(l1, l2, l3)

    def compute_loss(self, batch: Dict[str, Any]) -> LossValue:
        frame_a = batch["frame_a"].to(self.device)
        frame_b = batch["frame_b"].to(self.device)

        if self.mode == "maer":
            logits = self.model.logits(frame_a, frame_b)
            return cross_entropy(logits, batch["label"].to(self.device))

        output = self.model(frame_a, frame_b)
        w_rec, w_pos = self.loss_cfg["w_rec"], self.loss_cfg["w_pos"]

        rec = None
        if w_rec != 0:
            with torch.no_grad():
                z_t = self.codec.encode(frame_a)
                z_target = self.codec.encode(frame_b)
            z_hat = self.reconstructor(z_t, output.condition)
            rec = l_rec(z_hat, z_target, self.loss_cfg["rec_reduction"])

        pos = None
        if w_pos != 0 and output.position is not None:
            pos = self.position_loss(frame_a, output.position, batch["subject"].tolist())

        if rec is None and pos is None:
            raise ValueError("both loss weights are zero (or zero w_rec without a position branch)")
        return l_pre(rec, pos, w_rec, w_pos)

    def pretrain_step(self, batch: Dict[str, Any]) -> LossValue:
        """
        One optimization step on a batch of frame pairs.

        Raises:
        -------
        NonFiniteLossError
            The loss is NaN or infinite; a diagnostic dump is written first
        """
        self.train_mode()
        loss = self.compute_loss(batch)
        if not loss.is_finite():
            if self.tracker is not None:
                self.tracker.record_failure(
                    self.state.step, loss.components, batch["clip_id"], stage="pretrain", epoch=self.state.epoch
                )
            raise NonFiniteLossError(f"non-finite pre-training loss at step {self.state.step}: {loss.components}")

        self.optimizer.zero_grad(set_to_none=True)
        loss.value.backward()
        self.optimizer.step()
        self.state.step += 1
        return loss

    def end_epoch(self) -> None:
        self.scheduler.step()
        self.state.epoch += 1

    def training_state(self) -> Dict[str, Any]:
        return {
            "state": self.state.to_dict(),
            "optimizer": self.optimizer.state_dict(),
            "scheduler": self.scheduler.state_dict(),
            "torch_rng": torch.get_rng_state(),
        }

    def restore(self, training_state: Dict[str, Any]) -> None:
        self.optimizer.load_state_dict(training_state["optimizer"])
        self.scheduler.load_state_dict(training_state["scheduler"])
        self.state = PretrainState.from_dict(training_state["state"])
        torch.set_rng_state(training_state["torch_rng"])


@torch.no_grad()
def conditioning_gap(
    model: MIACNet,
    codec: LatentCodec,
    reconstructor: ConditionalReconstructor,
    loader: DataLoader,
    device: Optional[torch.device] = None,
    max_batches: Optional[int] = None
) -> Tuple[float, float]:
    """
    Mean L_rec with the true condition and with the condition rolled by one
    position within each batch.

    Returns:
    --------
    (float, float)
        (true-condition loss, shuffled-condition loss)
    """
    device = device or torch.device("cpu")
    model.eval()
    reconstructor.eval()
    codec.eval()
    true_total, shuffled_total, batches = 0.0, 0.0, 0
    for i, batch in enumerate(loader):
        if max_batches is not None and i >= max_batches:
            break
        frame_a, frame_b = batch["frame_a"].to(device), batch["frame_b"].to(device)
        if frame_a.shape[0] < 2:
            continue
        condition = model(frame_a, frame_b).condition
        z_t, z_target = codec.encode(frame_a), codec.encode(frame_b)
        true_total += l_rec(reconstructor(z_t, condition), z_target).item()
        shuffled_total += l_rec(reconstructor(z_t, condition.roll(1, dims=0)), z_target).item()
        batches += 1
    if batches == 0:
        raise ValueError("no batch with at least two samples")
    return true_total / batches, shuffled_total / batches


def prepare_codec(
    tree: Dict[str, Any],
    records: Sequence[ClipRecord],
    seed: int,
    device: Optional[torch.device] = None
) -> LatentCodec:
    """
    Codec for pre-training: identity, loaded from codec.checkpoint, or pre-fit now.

    An unfitted conv-ae codec is returned as-is when auto_fit is off; its first
    encode raises CodecNotFittedError.
    """
    section = tree["codec"]
    if section["kind"] == "identity":
        return LatentCodec("identity")
    if section["checkpoint"]:
        codec = load_codec(section["checkpoint"])
        logger.info(f"Loaded pre-fit codec from {section['checkpoint']}")
        return codec
    codec = LatentCodec.from_config(section)
    if section["auto_fit"]:
        fit_codec(
            codec, records, tree["data"]["image_size"],
            epochs=section["fit_epochs"],
            lr=section["fit_lr"],
            batch_size=section["fit_batch_size"],
            seed=seed,
            psnr_threshold=section["psnr_threshold"],
            device=device,
        )
    return codec


def run_fit_codec(run: RunConfig, device: Optional[torch.device] = None) -> Path:
    """
    Pre-fit the conv-ae codec on the pre-training manifest and save it.

    Returns:
    --------
    Path
        <output_dir>/codec.pt, usable as codec.checkpoint
    """
    tree = run.tree
    section = tree["codec"]
    if section["kind"] == "identity":
        raise ConfigError("the identity codec has nothing to fit")
    device = device or resolve_device()
    seed_everything(run.seed)
    records = load_manifest(tree["data"]["pretrain_manifest"])
    records = select_pretrain_subjects(records, tree["data"]["max_pretrain_subjects"])
    codec = LatentCodec.from_config(section)
    result = fit_codec(
        codec, records, tree["data"]["image_size"],
        epochs=section["fit_epochs"],
        lr=section["fit_lr"],
        batch_size=section["fit_batch_size"],
        seed=run.seed,
        psnr_threshold=section["psnr_threshold"],
        device=device,
    )
    return save_codec(run.output_dir / "codec.pt", codec, result, run.config_hash)


def run_pretrain(run: RunConfig, device: Optional[torch.device] = None) -> Path:
    """
    Full pre-training loop.

    Writes <output_dir>/pretrain_log.jsonl (a header line, then one line per
    step), periodic checkpoints under <output_dir>/checkpoints/, and the final
    <output_dir>/pretrain.pt.

    Parameters:
    -----------
    run : RunConfig
        Resolved configuration
    device : torch.device, optional
        Defaults to CUDA when available

    Returns:
    --------
    Path
        Final checkpoint
    """
    tree = run.tree
    device = device or resolve_device()
    seed_everything(run.seed)
    output_dir = run.output_dir
    output_dir.mkdir(parents=True, exist_ok=True)

    mode = tree["pretrain"]["mode"]
    data_cfg, schedule = tree["data"], tree["schedule"]
    augmentation = AugmentationSpec.from_config(tree["augment"]) if tree["augment"]["pretrain"] else None

    if mode == "maer":
        num_classes = tree["finetune"]["num_classes"]
        records = load_manifest(data_cfg["maer_manifest"], num_classes)
        records = select_pretrain_subjects(records, data_cfg["max_pretrain_subjects"])
        dataset = KeyframeDataset(
            records, data_cfg["image_size"], run.seed, augmentation,
            require_label=True, cache_size=data_cfg["frame_cache_size"]
        )
        model = MIACNet.from_config(tree)
        model.attach_head(num_classes)
        codec, reconstructor = None, None
    else:
        records = load_manifest(data_cfg["pretrain_manifest"])
        records = select_pretrain_subjects(records, data_cfg["max_pretrain_subjects"])
        dataset = PretrainPairDataset(
            records, data_cfg["delta_range"], data_cfg["image_size"], run.seed,
            pairs_per_clip=data_cfg["pairs_per_clip"],
            augmentation=augmentation,
            cache_size=data_cfg["frame_cache_size"],
        )
        model = MIACNet.from_config(tree)
        codec = prepare_codec(tree, records, run.seed, device)
        codec.require_fitted()
        latent_shape = codec.latent_shape(data_cfg["image_size"])
        reconstructor = ConditionalReconstructor.from_config(tree, latent_shape)

    tracker = TrainingFailureTracker(output_dir)
    trainer = Pretrainer(tree, model, codec, reconstructor, seed=run.seed, device=device, tracker=tracker, mode=mode)

    resume = schedule["resume"]
    if resume:
        checkpoint = load_checkpoint(resume)
        if checkpoint.training_state is None:
            raise CheckpointError(f"{resume} has no training state to resume from")
        trainer.model.load_state_dict(checkpoint.build_model(with_head=False).state_dict(), strict=False)
        if mode == "maer" and checkpoint.training_state.get("head") is not None:
            trainer.model.head.load_state_dict(checkpoint.training_state["head"])
        if reconstructor is not None:
            trainer.reconstructor.load_state_dict(checkpoint.build_reconstructor().state_dict())
        trainer.restore(checkpoint.training_state)
        logger.info(f"Resumed pre-training from {resume} at epoch {trainer.state.epoch}, step {trainer.state.step}")

    sampler = EpochPermutationSampler(len(dataset), run.seed, tag="pretrain-order")
    loader = DataLoader(
        dataset,
        batch_size=tree["optim"]["batch_size"],
        sampler=sampler,
        num_workers=data_cfg["num_workers"],
    )

    log = JsonlLog(output_dir / LOG_NAME, append=bool(resume))
    if not resume:
        log.write({
            "event": "header",
            "config_hash": run.config_hash,
            "mode": mode,
            "lr": tree["optim"]["lr"],
            "batch_size": tree["optim"]["batch_size"],
            "epochs": schedule["epochs"],
            "seed": run.seed,
            "clips": len(records),
        })

    logger.info(
        f"Pre-training ({mode}) on {len(records)} clips, {len(dataset)} items/epoch, "
        f"{schedule['epochs']} epochs, lr {trainer.lr:g}"
    )

    def save(path: Path) -> Path:
        training_state = trainer.training_state()
        if mode == "maer":
            training_state["head"] = trainer.model.head.state_dict()
        return save_checkpoint(
            path, trainer.model, "pretrain", tree, run.config_hash, trainer.state.epoch, run.seed,
            codec=codec, reconstructor=trainer.reconstructor,
            training_state=training_state, include_head=False,
        )

    max_steps = schedule["max_steps"]
    stopped = False
    while trainer.state.epoch < schedule["epochs"] and not stopped:
        epoch = trainer.state.epoch
        dataset.set_epoch(epoch)
        sampler.set_epoch(epoch)
        epoch_total, epoch_batches = 0.0, 0
        for batch in tqdm(loader, desc=f"pretrain epoch {epoch + 1}/{schedule['epochs']}", leave=False):
            loss = trainer.pretrain_step(batch)
            log.write({"step": trainer.state.step, "epoch": epoch, "lr": trainer.lr, **loss.components})
            epoch_total += loss.item()
            epoch_batches += 1
            if trainer.state.step % schedule["log_every"] == 0:
                logger.debug(f"step {trainer.state.step}: {loss.components}")
            if max_steps is not None and trainer.state.step >= max_steps:
                stopped = True
                break
        if stopped:
            break
        trainer.end_epoch()
        logger.info(f"Epoch {epoch + 1}/{schedule['epochs']}: mean loss {epoch_total / max(epoch_batches, 1):.4f}")
        every = schedule["checkpoint_every"]
        if every and trainer.state.epoch % every == 0 and trainer.state.epoch < schedule["epochs"]:
            save(output_dir / "checkpoints" / f"pretrain_epoch_{trainer.state.epoch:03d}.pt")

    if stopped:
        logger.info(f"Stopped after max_steps={max_steps}")
    final = save(output_dir / CHECKPOINT_NAME)
    logger.info(f"Pre-training finished at step {trainer.state.step}; checkpoint {final}")
    return final
