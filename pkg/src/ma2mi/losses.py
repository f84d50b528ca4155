"""
Losses

Training objectives: the three position losses (diversity, cross-face
consistency, spatial equivariance) and their sum, the latent reconstruction
loss, the pre-training total and the fine-tuning cross-entropy.

Every function returns a LossValue carrying the differentiable scalar and
detached float components for the training log.
"""

import math
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from . import config

# Warped-mask values below this mark cells whose footprint left the grid.
VALID_THRESHOLD = 1.0 - 1e-4
TRANSFORM_KINDS = ("identity", "hflip", "translate", "rotate")


@dataclass
class LossValue:
    """
    A differentiable scalar plus named components for logging.

    Attributes:
    -----------
    value : torch.Tensor
        0-dim tensor
    components : dict
        Name -> detached float
    """
    value: torch.Tensor
    components: Dict[str, float] = field(default_factory=dict)

    def item(self) -> float:
        return float(self.value.detach())

    def is_finite(self) -> bool:
        return bool(torch.isfinite(self.value.detach()).all())


def _cells(features: torch.Tensor) -> torch.Tensor:
    """(B, C, H, W) or (C, H, W) -> (B, H*W, C)."""
    if features.dim() == 3:
        features = features.unsqueeze(0)
    if features.dim() != 4:
        raise ValueError(f"expected a (B, C, H, W) feature map, got {tuple(features.shape)}")
    b, c, h, w = features.shape
    if h * w < 2:
        raise ValueError(f"feature grid {h}x{w} has fewer than 2 cells")
    return features.flatten(2).transpose(1, 2)


def _unit_cells(cells: torch.Tensor, eps: float) -> torch.Tensor:
    return F.normalize(cells, p=2, dim=-1, eps=eps)


def _near_zero(cells: torch.Tensor, eps: float) -> float:
    return float((cells.detach().norm(dim=-1) < eps).sum())


# =============================================================================
# Position losses
# =============================================================================

def l1_diversity(features: torch.Tensor, eps: float = config.COSINE_EPS) -> LossValue:
    """
    Mean pairwise cosine similarity between distinct cells of one feature map.

    sum_{i != j} cos(F(i), F(j)) / (HW (HW - 1)), averaged over the batch.

    Parameters:
    -----------
    features : torch.Tensor
        (B, C, H, W) position features
    eps : float
        Cosine denominator floor; cells below it are counted in the
        "l1_zero_cells" component

    Returns:
    --------
    LossValue
        Value in [-1, 1]
    """
    cells = _cells(features)
    n = cells.shape[1]
    unit = _unit_cells(cells, eps)
    gram = unit @ unit.transpose(1, 2)
    off_diagonal = 1.0 - torch.eye(n, dtype=gram.dtype, device=gram.device)
    per_sample = (gram * off_diagonal).sum(dim=(1, 2)) / (n * (n - 1))
    value = per_sample.mean()
    return LossValue(value, {"l1": float(value.detach()), "l1_zero_cells": _near_zero(cells, eps)})


def l2_cross_face(
    features_1: torch.Tensor,
    features_2: torch.Tensor,
    eps: float = config.COSINE_EPS
) -> LossValue:
    """
    Cross-face consistency between position features of two different faces.

    For each cell i of the first map, j* is its best-matching cell in the
    second (lowest index on ties, held constant under differentiation). The
    loss is the mean similarity to every other cell minus the mean best-match
    similarity.

    Returns:
    --------
    LossValue
        Value in [-2, 2]
    """
    if features_1.shape != features_2.shape:
        raise ValueError(f"feature maps differ in shape: {tuple(features_1.shape)} vs {tuple(features_2.shape)}")
    cells_1, cells_2 = _cells(features_1), _cells(features_2)
    n = cells_1.shape[1]
    sim = _unit_cells(cells_1, eps) @ _unit_cells(cells_2, eps).transpose(1, 2)

    best = sim.detach().argmax(dim=-1)
    match = F.one_hot(best, n).to(sim.dtype)
    matched = (sim * match).sum(dim=(1, 2)) / n
    unmatched = (sim * (1.0 - match)).sum(dim=(1, 2)) / (n * (n - 1))
    value = (unmatched - matched).mean()
    return LossValue(value, {
        "l2": float(value.detach()),
        "l2_zero_cells": _near_zero(cells_1, eps) + _near_zero(cells_2, eps),
    })


def cross_subject_permutation(subjects: Sequence[int]) -> List[int]:
    """
    Partner index for each batch position: the next position in cyclic order
    whose subject differs (plain i+1 when every sample shares one subject).

    Examples:
    ---------
    >>> cross_subject_permutation([0, 0, 1, 1])
    [2, 2, 0, 0]
    >>> cross_subject_permutation([3, 3, 3])
    [1, 2, 0]
    """
    b = len(subjects)
    partners = []
    for i in range(b):
        partner = (i + 1) % b
        for step in range(1, b):
            j = (i + step) % b
            if subjects[j] != subjects[i]:
                partner = j
                break
        partners.append(partner)
    return partners


@dataclass(frozen=True)
class SpatialTransform:
    """
    One transform from the equivariance family.

    Attributes:
    -----------
    kind : str
        "identity", "hflip", "translate" or "rotate"
    shift_cells : (int, int)
        Translation in feature cells (x right, y down)
    angle_deg : float
        Counter-clockwise rotation about the image center
    """
    kind: str = "identity"
    shift_cells: tuple = (0, 0)
    angle_deg: float = 0.0

    def __post_init__(self):
        if self.kind not in TRANSFORM_KINDS:
            raise ValueError(f"transform {self.kind!r} is not representable on the feature grid")

    @property
    def is_flip(self) -> bool:
        return self.kind == "hflip"

    @property
    def needs_warp(self) -> bool:
        return self.kind in ("translate", "rotate")

    def theta(self, cell_size: int, side: int) -> torch.Tensor:
        """
        Affine matrix (2, 3) mapping output to input normalized coordinates.

        cell_size is the number of pixels per feature cell on this tensor
        (the encoder stride for images, 1 for feature grids).
        """
        a = math.radians(self.angle_deg)
        inverse = torch.tensor([[math.cos(a), math.sin(a)], [-math.sin(a), math.cos(a)]], dtype=torch.float64)
        shift = torch.tensor(
            [2.0 * self.shift_cells[0] * cell_size / side, 2.0 * self.shift_cells[1] * cell_size / side],
            dtype=torch.float64,
        )
        return torch.cat([inverse, -(inverse @ shift).unsqueeze(1)], dim=1)


def sample_transforms(
    batch_size: int,
    family: Sequence[str],
    rng: np.random.Generator,
    max_rotation_deg: float = config.L3_MAX_ROTATION_DEG,
    max_shift_cells: int = config.L3_MAX_SHIFT_CELLS
) -> List[SpatialTransform]:
    """Draw one transform per sample, uniformly over the configured kinds."""
    transforms = []
    for _ in range(batch_size):
        kind = family[int(rng.integers(0, len(family)))]
        if kind == "translate" and max_shift_cells > 0:
            shift = (0, 0)
            while shift == (0, 0):
                shift = tuple(int(v) for v in rng.integers(-max_shift_cells, max_shift_cells + 1, size=2))
            transforms.append(SpatialTransform("translate", shift_cells=shift))
        elif kind == "rotate" and max_rotation_deg > 0:
            angle = float(rng.uniform(-max_rotation_deg, max_rotation_deg))
            transforms.append(SpatialTransform("rotate", angle_deg=angle))
        elif kind == "hflip":
            transforms.append(SpatialTransform("hflip"))
        else:
            transforms.append(SpatialTransform("identity"))
    return transforms


def apply_transforms(
    x: torch.Tensor,
    transforms: Sequence[SpatialTransform],
    cell_size: int = 1
):
    """
    Apply one transform per sample to a (B, C, H, W) tensor.

    Flip and identity are exact; translation and rotation use bilinear
    resampling with zero padding.

    Returns:
    --------
    (torch.Tensor, torch.Tensor)
        Transformed tensor and a (B, 1, H, W) validity mask (1 where every
        sample came from inside the source grid)
    """
    if len(transforms) != x.shape[0]:
        raise ValueError(f"{len(transforms)} transforms for a batch of {x.shape[0]}")
    b, _, h, w = x.shape
    view = (b, 1, 1, 1)
    flip = torch.tensor([t.is_flip for t in transforms], device=x.device).view(view)
    warp = torch.tensor([t.needs_warp for t in transforms], device=x.device).view(view)

    out = torch.where(flip, x.flip(-1), x)
    mask = torch.ones((b, 1, h, w), dtype=x.dtype, device=x.device)
    if not bool(warp.any()):
        return out, mask

    theta = torch.stack([t.theta(cell_size, w) for t in transforms]).to(dtype=x.dtype, device=x.device)
    grid = F.affine_grid(theta, [b, x.shape[1], h, w], align_corners=False)
    warped = F.grid_sample(out, grid, mode="bilinear", padding_mode="zeros", align_corners=False)
    coverage = F.grid_sample(mask, grid, mode="bilinear", padding_mode="zeros", align_corners=False)
    out = torch.where(warp, warped, out)
    mask = torch.where(warp, (coverage >= VALID_THRESHOLD).to(x.dtype), mask)
    return out, mask


def l3_equivariance(
    encoder: Callable[[torch.Tensor], torch.Tensor],
    images: torch.Tensor,
    transforms: Sequence[SpatialTransform],
    stride: int,
    reduction: str = "norm"
) -> LossValue:
    """
    Spatial equivariance of the position encoder: || E(tau(I)) - tau(E(I)) ||_2.

    Parameters:
    -----------
    encoder : callable
        Maps (B, 3, H, W) images to (B, C, H/stride, W/stride) features
    images : torch.Tensor
        Input batch
    transforms : sequence of SpatialTransform
        One per sample
    stride : int
        Pixels per feature cell
    reduction : str
        "norm" (per-sample 2-norm over valid cells, batch mean) or "rms"
        (the same norm divided by the square root of the valid element count)

    Returns:
    --------
    LossValue
        Non-negative value
    """
    if reduction not in ("norm", "rms"):
        raise ValueError(f"unknown l3 reduction {reduction!r}")
    transformed_images, _ = apply_transforms(images, transforms, cell_size=stride)
    features_of_transformed = encoder(transformed_images)
    transformed_features, mask = apply_transforms(encoder(images), transforms, cell_size=1)

    diff = ((features_of_transformed - transformed_features) * mask).flatten(1)
    per_sample = torch.linalg.vector_norm(diff, ord=2, dim=1)
    if reduction == "rms":
        valid = mask.flatten(1).sum(dim=1) * features_of_transformed.shape[1]
        per_sample = per_sample / valid.clamp_min(1.0).sqrt()
    value = per_sample.mean()
    return LossValue(value, {
        "l3": float(value.detach()),
        "l3_valid_fraction": float(mask.detach().mean()),
    })


def l_pos(l1: LossValue, l2: LossValue, l3: LossValue) -> LossValue:
    """L1 + L2 + L3 with every component kept."""
    value = l1.value + l2.value + l3.value
    return LossValue(value, {**l1.components, **l2.components, **l3.components, "l_pos": float(value.detach())})


# =============================================================================
# Reconstruction, total and classification
# =============================================================================

def l_rec(z_hat: torch.Tensor, z_target: torch.Tensor, reduction: str = "mean") -> LossValue:
    """
    Absolute reconstruction error between predicted and target latents.

    reduction "mean" averages over every element; "sum" is the raw 1-norm
    averaged over the batch.
    """
    if z_hat.shape != z_target.shape:
        raise ValueError(f"latent shapes differ: {tuple(z_hat.shape)} vs {tuple(z_target.shape)}")
    error = (z_hat - z_target).abs()
    if reduction == "mean":
        value = error.mean()
    elif reduction == "sum":
        value = error.flatten(1).sum(dim=1).mean()
    else:
        raise ValueError(f"unknown reconstruction reduction {reduction!r}")
    return LossValue(value, {"l_rec": float(value.detach())})


def l_pre(
    rec: Optional[LossValue],
    pos: Optional[LossValue],
    w_rec: float = 1.0,
    w_pos: float = 1.0
) -> LossValue:
    """
    Pre-training total w_rec * L_rec + w_pos * L_pos.

    A term that is None or has weight 0 contributes nothing (and is not
    evaluated by the caller).
    """
    terms = []
    components: Dict[str, float] = {}
    for loss, weight in ((rec, w_rec), (pos, w_pos)):
        if loss is None or weight == 0:
            continue
        terms.append(weight * loss.value)
        components.update(loss.components)
    if not terms:
        raise ValueError("pre-training loss has no active term")
    value = torch.stack(terms).sum() if len(terms) > 1 else terms[0]
    components["l_pre"] = float(value.detach())
    return LossValue(value, components)


def cross_entropy(
    logits: torch.Tensor,
    labels: torch.Tensor,
    class_weights: Optional[torch.Tensor] = None
) -> LossValue:
    """Softmax cross-entropy, mean over the batch (weighted mean with class weights)."""
    value = F.cross_entropy(logits, labels, weight=class_weights)
    return LossValue(value, {"ce": float(value.detach())})


def inverse_frequency_weights(labels: Sequence[int], num_classes: int) -> torch.Tensor:
    """
    Class weights proportional to 1 / count, normalized to mean 1; absent classes get 0.

    Examples:
    ---------
    >>> inverse_frequency_weights([0, 0, 1], 2).tolist()
    [0.6666666865348816, 1.3333333730697632]
    """
    counts = np.bincount(np.asarray(labels, dtype=np.int64), minlength=num_classes).astype(np.float64)
    weights = np.where(counts > 0, 1.0 / np.maximum(counts, 1.0), 0.0)
    present = weights > 0
    weights[present] *= present.sum() / weights[present].sum()
    return torch.tensor(weights, dtype=torch.float32)
