"""
MIACNet

The two-branch micro-action network: a facial position encoder over I_t, a
facial action encoder over the frame difference I_{t+delta} - I_t, and a fusion
of both spatial features into the condition vector C_delta. A zero-initialized
linear head turns C_delta into class logits during fine-tuning.
"""

from dataclasses import dataclass
from typing import Dict, Iterator, Optional, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F
import torchvision
from loguru import logger
from torchvision.models.resnet import BasicBlock

from . import config
from .exceptions import HeadNotAttachedError

TINY_WIDTHS = (16, 32, 64, 128)
TINY_STRIDES = (1, 2, 2, 2)
FUSIONS = ("sum", "concat", "gated")


@dataclass(frozen=True)
class EncoderConfig:
    """
    Shape contract of one encoder branch.

    Attributes:
    -----------
    preset : str
        "tiny" (4 BasicBlock stages, widths 16/32/64/128, stride 16) or
        "resnet18" (torchvision ResNet-18 trunk, stride 32)
    input_channels : int
        Always 3 (RGB frame or RGB difference image)
    """
    preset: str = config.ENCODER_PRESET
    input_channels: int = 3

    def __post_init__(self):
        if self.preset not in ("tiny", "resnet18"):
            raise ValueError(f"unknown encoder preset {self.preset!r}")

    @property
    def feature_channels(self) -> int:
        return TINY_WIDTHS[-1] if self.preset == "tiny" else 512

    @property
    def stride(self) -> int:
        return 16 if self.preset == "tiny" else 32

    def grid_size(self, image_size: int) -> int:
        """
        Side of the output feature grid for a square input.

        Examples:
        ---------
        >>> EncoderConfig("resnet18").grid_size(256)
        8
        >>> EncoderConfig("tiny").grid_size(64)
        4
        """
        if image_size % self.stride:
            raise ValueError(f"image size {image_size} is not a multiple of the {self.preset} stride {self.stride}")
        return image_size // self.stride


def _tiny_stage(in_channels: int, out_channels: int, stride: int) -> nn.Sequential:
    downsample = None
    if stride != 1 or in_channels != out_channels:
        downsample = nn.Sequential(
            nn.Conv2d(in_channels, out_channels, kernel_size=1, stride=stride, bias=False),
            nn.BatchNorm2d(out_channels),
        )
    return nn.Sequential(
        BasicBlock(in_channels, out_channels, stride=stride, downsample=downsample),
        BasicBlock(out_channels, out_channels),
    )


class ResidualEncoder(nn.Module):
    """
    Residual CNN trunk returning the last spatial feature map (no pooling, no fc).

    Both presets expose `.stem` and `.stages` so heat maps can hook the last stage.
    """

    def __init__(self, encoder_config: EncoderConfig):
        super().__init__()
        self.config = encoder_config
        if encoder_config.preset == "resnet18":
            trunk = torchvision.models.resnet18(weights=None)
            self.stem = nn.Sequential(trunk.conv1, trunk.bn1, trunk.relu, trunk.maxpool)
            self.stages = nn.Sequential(trunk.layer1, trunk.layer2, trunk.layer3, trunk.layer4)
        else:
            self.stem = nn.Sequential(
                nn.Conv2d(encoder_config.input_channels, TINY_WIDTHS[0], kernel_size=3, stride=2, padding=1, bias=False),
                nn.BatchNorm2d(TINY_WIDTHS[0]),
                nn.ReLU(inplace=True),
            )
            stages = []
            in_channels = TINY_WIDTHS[0]
            for width, stride in zip(TINY_WIDTHS, TINY_STRIDES):
                stages.append(_tiny_stage(in_channels, width, stride))
                in_channels = width
            self.stages = nn.Sequential(*stages)

    @property
    def stride(self) -> int:
        return self.config.stride

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.stages(self.stem(x))


class Fusion(nn.Module):
    """
    Fuse position and action features into C_delta.

    sum:    Linear(GAP(F_a + conv1x1(F_p)))
    concat: Linear([GAP(F_a), GAP(F_p)])
    gated:  Linear(GAP(F_a * sigmoid(conv1x1(F_p))))

    Without a position branch the condition is Linear(GAP(F_a)).
    """

    def __init__(self, channels: int, cond_dim: int, kind: str = "sum", use_position: bool = True):
        super().__init__()
        if kind not in FUSIONS:
            raise ValueError(f"unknown fusion {kind!r}; choose from {FUSIONS}")
        self.kind = kind
        self.channels = channels
        self.use_position = use_position
        self.position_proj = None
        if use_position and kind in ("sum", "gated"):
            self.position_proj = nn.Conv2d(channels, channels, kernel_size=1)
        pooled = 2 * channels if (use_position and kind == "concat") else channels
        self.projection = nn.Linear(pooled, cond_dim)

    def forward(self, fp: Optional[torch.Tensor], fa: torch.Tensor) -> torch.Tensor:
        if fa.shape[1] != self.channels:
            raise ValueError(f"action feature has {fa.shape[1]} channels, fusion expects {self.channels}")
        if not self.use_position or fp is None:
            return self.projection(fa.mean(dim=(2, 3)))
        if fp.shape != fa.shape:
            raise ValueError(f"position feature {tuple(fp.shape)} and action feature {tuple(fa.shape)} differ")

        if self.kind == "sum":
            pooled = (fa + self.position_proj(fp)).mean(dim=(2, 3))
        elif self.kind == "gated":
            pooled = (fa * torch.sigmoid(self.position_proj(fp))).mean(dim=(2, 3))
        else:
            pooled = torch.cat([fa.mean(dim=(2, 3)), fp.mean(dim=(2, 3))], dim=1)
        return self.projection(pooled)


@dataclass
class MIACOutput:
    condition: torch.Tensor
    position: Optional[torch.Tensor]
    action: torch.Tensor


class MIACNet(nn.Module):
    """
    Two-branch encoder producing the condition vector C_delta.

    Inputs are (B, 3, H, W) frames in [0, 1]; per-channel normalization is
    applied inside the network, so the action branch sees
    norm(I_b) - norm(I_a) = (I_b - I_a) / std.

    Parameters:
    -----------
    preset : str
        Encoder preset for both branches ("tiny" or "resnet18")
    cond_dim : int
        Dimension D of C_delta
    fusion : str
        "sum", "concat" or "gated"
    use_position_encoder : bool
        Build the position branch (False is the position-free ablation)
    image_size : int, optional
        Expected input side; checked on every call when given
    mean, std : sequence of float
        Per-channel normalization
    """

    def __init__(
        self,
        preset: str = config.ENCODER_PRESET,
        cond_dim: int = config.CONDITION_DIM,
        fusion: str = config.FUSION,
        use_position_encoder: bool = True,
        image_size: Optional[int] = None,
        mean: Sequence[float] = config.IMAGENET_MEAN,
        std: Sequence[float] = config.IMAGENET_STD
    ):
        super().__init__()
        self.encoder_config = EncoderConfig(preset)
        self.cond_dim = cond_dim
        self.image_size = image_size
        if image_size is not None:
            self.encoder_config.grid_size(image_size)

        self.position_encoder = ResidualEncoder(self.encoder_config) if use_position_encoder else None
        self.action_encoder = ResidualEncoder(self.encoder_config)
        self.fusion = Fusion(self.encoder_config.feature_channels, cond_dim, fusion, use_position_encoder)
        self.head: Optional[nn.Linear] = None

        self.register_buffer("mean", torch.tensor(mean, dtype=torch.float32).view(1, 3, 1, 1))
        self.register_buffer("std", torch.tensor(std, dtype=torch.float32).view(1, 3, 1, 1))

    @classmethod
    def from_config(cls, tree: Dict) -> "MIACNet":
        """Build from a full config tree (model and data sections)."""
        model = tree["model"]
        data = tree["data"]
        return cls(
            preset=model["preset"],
            cond_dim=model["cond_dim"],
            fusion=model["fusion"],
            use_position_encoder=model["use_position_encoder"],
            image_size=data["image_size"],
            mean=data["mean"],
            std=data["std"],
        )

    @property
    def has_position_encoder(self) -> bool:
        return self.position_encoder is not None

    @property
    def stride(self) -> int:
        return self.encoder_config.stride

    def _check_images(self, images: torch.Tensor, name: str) -> None:
        if images.dim() != 4 or images.shape[1] != 3:
            raise ValueError(f"{name} must have shape (B, 3, H, W), got {tuple(images.shape)}")
        if self.image_size is not None and tuple(images.shape[-2:]) != (self.image_size, self.image_size):
            raise ValueError(
                f"{name} is {tuple(images.shape[-2:])}, network configured for {self.image_size}x{self.image_size}"
            )
        if images.shape[-1] % self.stride or images.shape[-2] % self.stride:
            raise ValueError(f"{name} side {tuple(images.shape[-2:])} is not a multiple of stride {self.stride}")

    def normalize(self, images: torch.Tensor) -> torch.Tensor:
        return (images - self.mean) / self.std

    def encode_position(self, images: torch.Tensor) -> torch.Tensor:
        """F^p = E_p(norm(I)), shape (B, C, H/stride, W/stride)."""
        if self.position_encoder is None:
            raise RuntimeError("this network was built without a position encoder")
        self._check_images(images, "position input")
        return self.position_encoder(self.normalize(images))

    def action_input(self, frame_a: torch.Tensor, frame_b: torch.Tensor) -> torch.Tensor:
        """Normalized difference image norm(I_b) - norm(I_a)."""
        if frame_a.shape != frame_b.shape:
            raise ValueError(f"pair frames differ in shape: {tuple(frame_a.shape)} vs {tuple(frame_b.shape)}")
        self._check_images(frame_a, "action input")
        return (frame_b - frame_a) / self.std

    def encode_action(self, frame_a: torch.Tensor, frame_b: torch.Tensor) -> torch.Tensor:
        """F^a = E_a(I_b - I_a), shape (B, C, H/stride, W/stride)."""
        return self.action_encoder(self.action_input(frame_a, frame_b))

    def fuse(self, fp: Optional[torch.Tensor], fa: torch.Tensor) -> torch.Tensor:
        return self.fusion(fp, fa)

    def forward(self, frame_a: torch.Tensor, frame_b: torch.Tensor) -> MIACOutput:
        fp = self.encode_position(frame_a) if self.has_position_encoder else None
        fa = self.encode_action(frame_a, frame_b)
        return MIACOutput(condition=self.fuse(fp, fa), position=fp, action=fa)

    def attach_head(self, num_classes: int) -> nn.Linear:
        """Attach a fresh zero-initialized linear head with num_classes outputs."""
        head = nn.Linear(self.cond_dim, num_classes)
        nn.init.zeros_(head.weight)
        nn.init.zeros_(head.bias)
        self.head = head.to(self.mean.device)
        logger.debug(f"Attached zero-initialized head ({self.cond_dim} -> {num_classes})")
        return self.head

    def detach_head(self) -> None:
        self.head = None

    def classify(self, condition: torch.Tensor) -> torch.Tensor:
        """Logits (B, N) from C_delta."""
        if self.head is None:
            raise HeadNotAttachedError("no classification head attached; call attach_head first")
        return self.head(condition)

    def logits(self, frame_a: torch.Tensor, frame_b: torch.Tensor) -> torch.Tensor:
        return self.classify(self(frame_a, frame_b).condition)

    def branch_parameters(self, branch: str) -> Iterator[nn.Parameter]:
        """Parameters of "position_encoder", "action_encoder", "fusion" or "head"."""
        module = getattr(self, branch)
        if module is None:
            return iter(())
        return module.parameters()


def feature_energy(features: torch.Tensor) -> torch.Tensor:
    """Per-cell L2 norm of a (B, C, H, W) feature map, shape (B, H, W)."""
    return features.norm(dim=1)


def upsample_map(maps: torch.Tensor, size: int) -> torch.Tensor:
    """Bilinearly resize (B, H, W) maps to (B, size, size)."""
    return F.interpolate(maps.unsqueeze(1), size=(size, size), mode="bilinear", align_corners=False)[:, 0]
