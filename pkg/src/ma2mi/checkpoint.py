"""
Checkpoints

A checkpoint is one torch archive holding named parameter groups
(position_encoder, action_encoder, fusion, normalization, and optionally head,
codec, reconstructor), a metadata block {config_hash, epoch, seed, stage}, the
producing config tree, and optionally the training state needed to resume.
"""

from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Optional, Union

import torch
import torch.nn as nn
from loguru import logger

from .codec import LatentCodec
from .exceptions import CheckpointError
from .miacnet import MIACNet
from .reconstructor import ConditionalReconstructor

FORMAT_VERSION = 1
STAGES = ("pretrain", "finetune")
MODEL_GROUPS = ("position_encoder", "action_encoder", "fusion", "head")


def split_model_state(model: MIACNet) -> Dict[str, Dict[str, torch.Tensor]]:
    """Group a MIACNet state dict by top-level submodule; root buffers form "normalization"."""
    groups: Dict[str, Dict[str, torch.Tensor]] = {}
    for key, value in model.state_dict().items():
        if "." in key:
            group, rest = key.split(".", 1)
        else:
            group, rest = "normalization", key
        groups.setdefault(group, {})[rest] = value.detach().cpu().clone()
    return groups


@dataclass
class Checkpoint:
    """
    A loaded checkpoint.

    Attributes:
    -----------
    metadata : dict
        {"config_hash", "epoch", "seed", "stage"}
    config : dict
        Config tree of the producing run (defines the architecture)
    groups : dict
        Group name -> state dict
    head_classes : int, optional
        Output size of the stored head
    training_state : dict, optional
        Optimizer, scheduler and counters for resuming
    """
    metadata: Dict[str, Any]
    config: Dict[str, Any]
    groups: Dict[str, Dict[str, torch.Tensor]]
    head_classes: Optional[int] = None
    training_state: Optional[Dict[str, Any]] = None
    path: Optional[Path] = field(default=None, compare=False)

    @property
    def stage(self) -> str:
        return self.metadata["stage"]

    @property
    def config_hash(self) -> str:
        return self.metadata["config_hash"]

    def has(self, group: str) -> bool:
        return group in self.groups

    def require(self, *groups: str) -> None:
        missing = [g for g in groups if g not in self.groups]
        if missing:
            raise CheckpointError(f"checkpoint {self.path} lacks parameter groups: {', '.join(missing)}")

    def build_model(self, with_head: bool = True) -> MIACNet:
        """MIACNet with the stored architecture and weights (head attached when stored)."""
        self.require("action_encoder", "fusion", "normalization")
        model = MIACNet.from_config(self.config)
        if with_head and self.head_classes is not None:
            model.attach_head(self.head_classes)
        state = {}
        for group, tensors in self.groups.items():
            if group not in MODEL_GROUPS and group != "normalization":
                continue
            if group == "head" and not (with_head and self.head_classes is not None):
                continue
            prefix = "" if group == "normalization" else f"{group}."
            state.update({f"{prefix}{k}": v for k, v in tensors.items()})
        try:
            model.load_state_dict(state, strict=True)
        except RuntimeError as e:
            raise CheckpointError(f"checkpoint {self.path} does not match its config: {e}") from e
        return model

    def build_codec(self) -> LatentCodec:
        self.require("codec")
        codec = LatentCodec.from_config(self.config["codec"])
        _load_group(codec, self.groups["codec"], "codec", self.path)
        return codec

    def build_reconstructor(self) -> ConditionalReconstructor:
        self.require("reconstructor")
        codec_section = self.config["codec"]
        shape = LatentCodec.from_config(codec_section).latent_shape(self.config["data"]["image_size"])
        reconstructor = ConditionalReconstructor.from_config(self.config, shape)
        _load_group(reconstructor, self.groups["reconstructor"], "reconstructor", self.path)
        return reconstructor


def _load_group(module: nn.Module, state: Dict[str, torch.Tensor], name: str, path: Optional[Path]) -> None:
    try:
        module.load_state_dict(state, strict=True)
    except RuntimeError as e:
        raise CheckpointError(f"{name} group of {path} does not match its config: {e}") from e


def save_checkpoint(
    path: Union[str, Path],
    model: MIACNet,
    stage: str,
    config_tree: Dict[str, Any],
    config_hash: str,
    epoch: int,
    seed: int,
    codec: Optional[LatentCodec] = None,
    reconstructor: Optional[ConditionalReconstructor] = None,
    training_state: Optional[Dict[str, Any]] = None,
    include_head: bool = True
) -> Path:
    """
    Write a checkpoint archive.

    Parameters:
    -----------
    path : str or Path
        Destination file
    model : MIACNet
        Network to store
    stage : str
        "pretrain" or "finetune"
    config_tree, config_hash : producing configuration
    epoch, seed : int
        Recorded in the metadata block
    codec, reconstructor : optional modules stored as their own groups
    training_state : dict, optional
        Resume state (optimizer, scheduler, counters, RNG)
    include_head : bool
        Store the classification head when attached

    Returns:
    --------
    Path
        The written file
    """
    if stage not in STAGES:
        raise ValueError(f"stage must be one of {STAGES}, got {stage!r}")
    groups = split_model_state(model)
    head_classes = None
    if include_head and model.head is not None:
        head_classes = model.head.out_features
    else:
        groups.pop("head", None)
    if codec is not None:
        groups["codec"] = {k: v.detach().cpu().clone() for k, v in codec.state_dict().items()}
    if reconstructor is not None:
        groups["reconstructor"] = {k: v.detach().cpu().clone() for k, v in reconstructor.state_dict().items()}

    archive = {
        "format": FORMAT_VERSION,
        "metadata": {"config_hash": config_hash, "epoch": int(epoch), "seed": int(seed), "stage": stage},
        "config": config_tree,
        "groups": groups,
        "head_classes": head_classes,
        "training_state": training_state,
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(archive, path)
    logger.debug(f"Saved {stage} checkpoint (epoch {epoch}) to {path}")
    return path


def load_checkpoint(path: Union[str, Path], map_location: str = "cpu") -> Checkpoint:
    """
    Read a checkpoint archive.

    Raises:
    -------
    CheckpointError
        Missing file, unreadable archive or unknown format
    """
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint not found: {path}")
    try:
        archive = torch.load(path, map_location=map_location, weights_only=True)
    except Exception as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from e
    if not isinstance(archive, dict) or archive.get("format") != FORMAT_VERSION:
        raise CheckpointError(f"{path} is not a checkpoint of format {FORMAT_VERSION}")
    return Checkpoint(
        metadata=archive["metadata"],
        config=archive["config"],
        groups=archive["groups"],
        head_classes=archive.get("head_classes"),
        training_state=archive.get("training_state"),
        path=path,
    )
