"""
Latent Codec

Maps frames to smaller spatial latents for reconstruction. The conv-ae codec is
a small convolutional autoencoder pre-fit on corpus frames and then frozen; the
identity codec keeps reconstruction in pixel space.
"""

from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from loguru import logger
from torch.utils.data import DataLoader, Dataset
from tqdm import tqdm

from . import config
from .cache_manager import FrameCache
from .data import ClipRecord, load_frame
from .exceptions import CheckpointError, CodecNotFittedError, ConfigError
from .utils import derive_seed

CODEC_KINDS = ("conv-ae", "identity")


class LatentCodec(nn.Module):
    """
    Frame <-> latent codec.

    Parameters:
    -----------
    kind : str
        "conv-ae" or "identity"
    downsample : int
        Spatial factor f (power of two; forced to 1 for identity)
    latent_channels : int
        Latent channels C_z (forced to 3 for identity)
    """

    def __init__(
        self,
        kind: str = config.CODEC_KIND,
        downsample: int = config.CODEC_DOWNSAMPLE,
        latent_channels: int = config.CODEC_LATENT_CHANNELS
    ):
        super().__init__()
        if kind not in CODEC_KINDS:
            raise ConfigError(f"unknown codec kind {kind!r}")
        self.kind = kind
        self.register_buffer("fitted", torch.tensor(kind == "identity"))

        if kind == "identity":
            self.downsample, self.latent_channels = 1, 3
            self.encoder = nn.Identity()
            self.decoder = nn.Identity()
            return

        if downsample < 2 or downsample & (downsample - 1):
            raise ConfigError(f"conv-ae downsample must be a power of two >= 2, got {downsample}")
        self.downsample, self.latent_channels = downsample, latent_channels

        levels = int(np.log2(downsample))
        widths = [min(32 * 2 ** i, 256) for i in range(levels)]
        encoder: List[nn.Module] = []
        in_channels = 3
        for width in widths:
            encoder += [nn.Conv2d(in_channels, width, 3, stride=2, padding=1), nn.ReLU(inplace=True)]
            in_channels = width
        encoder.append(nn.Conv2d(in_channels, latent_channels, 3, padding=1))
        self.encoder = nn.Sequential(*encoder)

        decoder: List[nn.Module] = [nn.Conv2d(latent_channels, widths[-1], 3, padding=1), nn.ReLU(inplace=True)]
        for i in reversed(range(levels)):
            out_channels = widths[i - 1] if i > 0 else 32
            decoder += [
                nn.ConvTranspose2d(widths[i], out_channels, 3, stride=2, padding=1, output_padding=1),
                nn.ReLU(inplace=True),
            ]
        decoder += [nn.Conv2d(32, 3, 3, padding=1), nn.Sigmoid()]
        self.decoder = nn.Sequential(*decoder)

    @classmethod
    def from_config(cls, section: Dict[str, Any]) -> "LatentCodec":
        return cls(section["kind"], section["downsample"], section["latent_channels"])

    @property
    def is_fitted(self) -> bool:
        return bool(self.fitted)

    def latent_shape(self, image_size: int) -> Tuple[int, int, int]:
        """
        (C_z, H/f, W/f) for a square input.

        Examples:
        ---------
        >>> LatentCodec("conv-ae", 4, 4).latent_shape(64)
        (4, 16, 16)
        """
        if image_size % self.downsample:
            raise ConfigError(f"image size {image_size} not divisible by codec downsample {self.downsample}")
        side = image_size // self.downsample
        return self.latent_channels, side, side

    def require_fitted(self) -> None:
        if not self.is_fitted:
            raise CodecNotFittedError(
                "conv-ae codec has not been pre-fit; run `ma2mi fit-codec` or set codec.auto_fit=true"
            )

    def encode(self, images: torch.Tensor) -> torch.Tensor:
        """(B, 3, H, W) in [0, 1] -> (B, C_z, H/f, W/f)."""
        self.require_fitted()
        return self.encoder(images)

    def decode(self, latents: torch.Tensor) -> torch.Tensor:
        self.require_fitted()
        return self.decoder(latents)

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        return self.decoder(self.encoder(images))

    def mark_fitted(self) -> None:
        self.fitted.fill_(True)

    def freeze(self) -> "LatentCodec":
        """Disable gradients and keep the codec in eval mode."""
        for p in self.parameters():
            p.requires_grad_(False)
        return self.eval()


def psnr(reference: torch.Tensor, estimate: torch.Tensor, peak: float = 1.0) -> float:
    """
    Peak signal-to-noise ratio in dB over all elements.

    Examples:
    ---------
    >>> psnr(torch.zeros(4), torch.full((4,), 0.1))
    20.0
    """
    mse = float(F.mse_loss(estimate.double(), reference.double()))
    if mse == 0:
        return float("inf")
    return 10.0 * float(np.log10(peak ** 2 / mse))


class CodecFrameDataset(Dataset):
    """A fixed subset of frames from each clip, evenly spaced."""

    def __init__(
        self,
        records: Sequence[ClipRecord],
        image_size: int,
        frames_per_clip: int = 8,
        cache_size: int = config.FRAME_CACHE_SIZE
    ):
        self.image_size = image_size
        self.cache = FrameCache(cache_size)
        self.items: List[Tuple[ClipRecord, int]] = []
        for record in records:
            step = max(1, record.num_frames // frames_per_clip)
            self.items.extend((record, i) for i in range(0, record.num_frames, step))

    def __len__(self) -> int:
        return len(self.items)

    def __getitem__(self, idx: int) -> torch.Tensor:
        record, index = self.items[idx]
        return load_frame(record, index, self.image_size, self.cache)


@dataclass
class CodecFitResult:
    train_loss: float
    held_out_psnr: float
    frames: int


def split_held_out(records: Sequence[ClipRecord], fraction: float, seed: int) -> Tuple[List[ClipRecord], List[ClipRecord]]:
    """Deterministic clip-level train / held-out split (at least one clip held out)."""
    ranked = sorted(records, key=lambda r: derive_seed(seed, "codec-holdout", r.clip_id))
    n_held = max(1, int(round(len(ranked) * fraction))) if len(ranked) > 1 else 0
    held = {r.clip_id for r in ranked[:n_held]}
    return [r for r in records if r.clip_id not in held], [r for r in records if r.clip_id in held]


def fit_codec(
    codec: LatentCodec,
    records: Sequence[ClipRecord],
    image_size: int,
    epochs: int = 10,
    lr: float = 1e-3,
    batch_size: int = 32,
    seed: int = 0,
    psnr_threshold: float = config.CODEC_PSNR_THRESHOLD,
    device: Optional[torch.device] = None,
    held_out_fraction: float = 0.1
) -> CodecFitResult:
    """
    Pre-fit a conv-ae codec on corpus frames with an MSE objective.

    The codec is marked fitted afterwards; held-out PSNR below the threshold
    is logged as a warning, not an error.

    Parameters:
    -----------
    codec : LatentCodec
        conv-ae codec to fit (identity codecs return immediately)
    records : sequence of ClipRecord
        Clips providing training frames
    image_size : int
        Frame side
    epochs, lr, batch_size : training budget
    seed : int
        Controls the held-out split and batch order

    Returns:
    --------
    CodecFitResult
    """
    if codec.kind == "identity":
        return CodecFitResult(train_loss=0.0, held_out_psnr=float("inf"), frames=0)
    device = device or torch.device("cpu")
    codec.to(device).train()

    train_records, held_records = split_held_out(records, held_out_fraction, seed)
    train_set = CodecFrameDataset(train_records or held_records, image_size)
    generator = torch.Generator().manual_seed(derive_seed(seed, "codec-order") % (2 ** 63))
    loader = DataLoader(train_set, batch_size=batch_size, shuffle=True, generator=generator)
    optimizer = torch.optim.Adam(codec.parameters(), lr=lr)

    logger.info(f"Fitting {codec.kind} codec (f={codec.downsample}, C_z={codec.latent_channels}) "
                f"on {len(train_set)} frames for {epochs} epochs")
    running = 0.0
    for epoch in range(epochs):
        total, count = 0.0, 0
        for frames in tqdm(loader, desc=f"codec epoch {epoch + 1}/{epochs}", leave=False):
            frames = frames.to(device)
            loss = F.mse_loss(codec(frames), frames)
            optimizer.zero_grad(set_to_none=True)
            loss.backward()
            optimizer.step()
            total += float(loss.detach()) * frames.shape[0]
            count += frames.shape[0]
        running = total / max(count, 1)
        logger.debug(f"Codec epoch {epoch + 1}: mse {running:.6f}")

    codec.mark_fitted()
    codec.eval()
    held_set = CodecFrameDataset(held_records or train_records, image_size)
    with torch.no_grad():
        frames = torch.stack([held_set[i] for i in range(len(held_set))]).to(device)
        value = psnr(frames, codec.decode(codec.encode(frames)))

    if value < psnr_threshold:
        logger.warning(f"Codec held-out PSNR {value:.2f} dB below threshold {psnr_threshold:.1f} dB")
    else:
        logger.info(f"Codec held-out PSNR {value:.2f} dB")
    return CodecFitResult(train_loss=running, held_out_psnr=value, frames=len(train_set))


def save_codec(path: Union[str, Path], codec: LatentCodec, result: Optional[CodecFitResult] = None,
               config_hash: Optional[str] = None) -> Path:
    """Write a standalone codec file (produced by `fit-codec`)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save({
        "format": 1,
        "kind": codec.kind,
        "downsample": codec.downsample,
        "latent_channels": codec.latent_channels,
        "state": {k: v.detach().cpu().clone() for k, v in codec.state_dict().items()},
        "held_out_psnr": None if result is None else result.held_out_psnr,
        "config_hash": config_hash,
    }, path)
    return path


def load_codec(path: Union[str, Path]) -> LatentCodec:
    """
    Read a codec file written by save_codec.

    Raises:
    -------
    CheckpointError
        Missing or unreadable file
    """
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"codec file not found: {path}")
    try:
        archive = torch.load(path, map_location="cpu", weights_only=True)
        codec = LatentCodec(archive["kind"], archive["downsample"], archive["latent_channels"])
        codec.load_state_dict(archive["state"], strict=True)
    except (KeyError, RuntimeError) as e:
        raise CheckpointError(f"cannot read codec file {path}: {e}") from e
    return codec
