"""
Visualization

Reconstruction grids (I_t, I_{t+delta}, reconstruction, difference) and
Grad-CAM heat maps over the action encoder's last stage.

Images are written as PNG with fixed encoder settings and carry the producing
config hash as a text chunk, so identical runs produce identical files.
"""

from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn.functional as F
from loguru import logger
from matplotlib import colormaps
from PIL import Image
from PIL.PngImagePlugin import PngInfo

from .checkpoint import Checkpoint, load_checkpoint
from .data import ClipRecord, FramePair, keyframe_pair, load_manifest, sample_frame_pair
from .exceptions import CheckpointError, ConfigError
from .miacnet import MIACNet
from .run_config import RunConfig
from .utils import derive_seed, read_json, resolve_device, write_json

OVERLAY_ALPHA = 0.5
NORMALIZE_EPS = 1e-12


def to_uint8(image: torch.Tensor) -> np.ndarray:
    """(3, H, W) tensor in [0, 1] -> (H, W, 3) uint8 array."""
    array = image.detach().float().clamp(0.0, 1.0).permute(1, 2, 0).cpu().numpy()
    return np.round(array * 255.0).astype(np.uint8)


def save_png(array: np.ndarray, path: Union[str, Path], config_hash: Optional[str] = None) -> Path:
    """Write an (H, W, 3) uint8 array with deterministic PNG settings."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    info = PngInfo()
    if config_hash is not None:
        info.add_text("config_hash", config_hash)
    Image.fromarray(array, mode="RGB").save(path, format="PNG", optimize=False, compress_level=6, pnginfo=info)
    return path


def normalize_map(maps: torch.Tensor) -> torch.Tensor:
    """
    Min-max normalize each (H, W) map of a (B, H, W) batch to [0, 1].

    A constant map has no defined normalization and becomes all zeros.
    """
    flat = maps.flatten(1)
    lo = flat.min(dim=1).values.view(-1, 1, 1)
    span = (flat.max(dim=1).values - flat.min(dim=1).values).view(-1, 1, 1)
    scaled = (maps - lo) / span.clamp_min(NORMALIZE_EPS)
    return torch.where(span > NORMALIZE_EPS, scaled, torch.zeros_like(maps))


def box_energy_ratio(energy: np.ndarray, box: Sequence[float]) -> float:
    """
    Share of a non-negative (H, W) energy map inside the pixel box (x0, y0, x1, y1).

    Pixels count as inside when their centre lies in the box. 0 for an all-zero map.
    """
    h, w = energy.shape
    x0, y0, x1, y1 = box
    xs = np.arange(w) + 0.5
    ys = np.arange(h) + 0.5
    inside = ((ys >= y0) & (ys <= y1))[:, None] & ((xs >= x0) & (xs <= x1))[None, :]
    total = float(energy.sum())
    if total <= 0.0:
        return 0.0
    return float(energy[inside].sum()) / total


# =============================================================================
# Grad-CAM
# =============================================================================

@dataclass
class CamResult:
    """
    Attributes:
    -----------
    maps : torch.Tensor
        (B, S, S) heat maps in [0, 1], upsampled to the input size
    grid : torch.Tensor
        (B, h, w) normalized maps at feature resolution
    class_ids : list of int
        Explained class per sample
    logits : torch.Tensor
        (B, N) logits of the forward pass
    """
    maps: torch.Tensor
    grid: torch.Tensor
    class_ids: List[int]
    logits: torch.Tensor


class GradCAM:
    """
    Gradient-weighted class activation maps over the action encoder's final
    stage of a MIACNet with an attached head.

    The activation of the target layer is captured by a forward hook, which
    also registers a tensor hook on it to receive the gradient of the target
    logit. The model is kept in eval mode.
    """

    def __init__(self, model: MIACNet):
        if model.head is None:
            raise CheckpointError("Grad-CAM needs a fine-tuned model with a classification head")
        self.model = model.eval()
        self.num_classes = model.head.out_features
        self.target_layer = model.action_encoder.stages[-1]
        self.activations: Optional[torch.Tensor] = None
        self.gradients: Optional[torch.Tensor] = None
        self.handle = self.target_layer.register_forward_hook(self._save_activations)

    def _save_activations(self, module, inp, out):
        self.activations = out
        out.register_hook(self._save_gradients)

    def _save_gradients(self, grad):
        self.gradients = grad

    def close(self) -> None:
        self.handle.remove()

    def __enter__(self) -> "GradCAM":
        return self

    def __exit__(self, *exc) -> None:
        self.close()

    def __call__(
        self,
        frame_a: torch.Tensor,
        frame_b: torch.Tensor,
        class_ids: Optional[Union[int, Sequence[int]]] = None
    ) -> CamResult:
        """
        Heat maps for a batch of (onset, apex) frames.

        Parameters:
        -----------
        frame_a, frame_b : torch.Tensor
            (B, 3, S, S) frames in [0, 1]
        class_ids : int or sequence of int, optional
            Class to explain per sample (one int for the whole batch);
            the predicted class when omitted

        Raises:
        -------
        ValueError
            A class index outside [0, N)
        """
        batch = frame_a.shape[0]
        self.model.zero_grad(set_to_none=True)
        with torch.enable_grad():
            logits = self.model.logits(frame_a, frame_b)
            if class_ids is None:
                targets = logits.argmax(dim=1).tolist()
            elif isinstance(class_ids, int):
                targets = [class_ids] * batch
            else:
                targets = [int(c) for c in class_ids]
            for c in targets:
                if not 0 <= c < self.num_classes:
                    raise ValueError(f"class index {c} outside [0, {self.num_classes})")
            score = logits[torch.arange(batch), torch.tensor(targets, device=logits.device)].sum()
            score.backward()

        weights = self.gradients.mean(dim=(2, 3), keepdim=True)
        cam = F.relu((weights * self.activations).sum(dim=1)).detach()
        grid = normalize_map(cam)
        size = frame_a.shape[-1]
        maps = F.interpolate(cam.unsqueeze(1), size=(size, size), mode="bilinear", align_corners=False)[:, 0]
        self.model.zero_grad(set_to_none=True)
        return CamResult(maps=normalize_map(maps), grid=grid, class_ids=targets, logits=logits.detach())


def overlay_heatmap(image: torch.Tensor, heatmap: torch.Tensor, alpha: float = OVERLAY_ALPHA) -> np.ndarray:
    """Blend a jet-coloured (S, S) heat map over a (3, S, S) frame; uint8 (S, S, 3)."""
    colours = colormaps["jet"](heatmap.detach().cpu().numpy())[..., :3]
    base = image.detach().float().clamp(0.0, 1.0).permute(1, 2, 0).cpu().numpy()
    blended = (1.0 - alpha) * base + alpha * colours
    return np.round(np.clip(blended, 0.0, 1.0) * 255.0).astype(np.uint8)


def argmax_cell_center(grid: torch.Tensor, image_size: int) -> Tuple[float, float]:
    """Pixel (x, y) of the centre of the hottest cell of an (h, w) map."""
    h, w = grid.shape
    index = int(grid.flatten().argmax())
    row, col = divmod(index, w)
    return (col + 0.5) * image_size / w, (row + 0.5) * image_size / h


def argmax_cell_box(grid: torch.Tensor, image_size: int) -> Tuple[float, float, float, float]:
    """Pixel footprint (x0, y0, x1, y1) of the hottest cell of an (h, w) map."""
    h, w = grid.shape
    row, col = divmod(int(grid.flatten().argmax()), w)
    cell_w, cell_h = image_size / w, image_size / h
    return col * cell_w, row * cell_h, (col + 1) * cell_w, (row + 1) * cell_h


def boxes_overlap(a: Sequence[float], b: Sequence[float]) -> bool:
    """True when two (x0, y0, x1, y1) boxes share interior area."""
    return a[0] < b[2] and b[0] < a[2] and a[1] < b[3] and b[1] < a[3]


def viz_cam(
    model: MIACNet,
    clip: ClipRecord,
    path: Union[str, Path],
    target_class: Optional[int] = None,
    image_size: Optional[int] = None,
    config_hash: Optional[str] = None
) -> Dict[str, Any]:
    """
    Write the Grad-CAM overlay of a clip's onset/apex pair onto its onset frame.

    Returns:
    --------
    dict
        {"path", "clip_id", "class", "probs", "argmax_xy"}
    """
    image_size = image_size or model.image_size
    device = model.mean.device
    pair = keyframe_pair(clip, image_size)
    frame_a = pair.frame_a.unsqueeze(0).to(device)
    frame_b = pair.frame_b.unsqueeze(0).to(device)
    with GradCAM(model) as cam:
        result = cam(frame_a, frame_b, target_class)
    written = save_png(overlay_heatmap(pair.frame_a, result.maps[0]), path, config_hash)
    probs = F.softmax(result.logits[0].double(), dim=0).cpu().tolist()
    logger.info(f"Grad-CAM for {clip.clip_id} (class {result.class_ids[0]}) written to {written}")
    return {
        "path": str(written),
        "clip_id": clip.clip_id,
        "class": result.class_ids[0],
        "probs": probs,
        "argmax_xy": list(argmax_cell_center(result.grid[0], image_size)),
    }


def cam_localization_rate(
    model: MIACNet,
    records: Sequence[ClipRecord],
    boxes: Dict[str, Sequence[float]],
    image_size: Optional[int] = None,
    box_image_size: Optional[int] = None,
    batch_size: int = 16
) -> Tuple[float, int]:
    """
    Fraction of correctly classified clips whose Grad-CAM argmax cell
    footprint overlaps the clip's motion box.

    Parameters:
    -----------
    boxes : dict
        clip_id -> (x0, y0, x1, y1) in pixels of box_image_size
    box_image_size : int, optional
        Frame side the boxes were measured on (default: image_size)

    Returns:
    --------
    (float, int)
        (localization rate, number of correctly classified clips); the rate
        is 0.0 when no clip is classified correctly
    """
    image_size = image_size or model.image_size
    scale = image_size / (box_image_size or image_size)
    device = model.mean.device
    hits, correct = 0, 0
    with GradCAM(model) as cam:
        for start in range(0, len(records), batch_size):
            chunk = [r for r in records[start:start + batch_size] if r.label is not None]
            if not chunk:
                continue
            pairs = [keyframe_pair(r, image_size) for r in chunk]
            frame_a = torch.stack([p.frame_a for p in pairs]).to(device)
            frame_b = torch.stack([p.frame_b for p in pairs]).to(device)
            result = cam(frame_a, frame_b)
            for record, predicted, grid in zip(chunk, result.class_ids, result.grid):
                if predicted != record.label:
                    continue
                correct += 1
                box = [v * scale for v in boxes[record.clip_id]]
                hits += int(boxes_overlap(argmax_cell_box(grid, image_size), box))
    rate = hits / correct if correct else 0.0
    logger.info(f"Grad-CAM argmax cell on the motion box for {hits}/{correct} correctly classified clips")
    return rate, correct


# =============================================================================
# Reconstruction grid
# =============================================================================

@torch.no_grad()
def viz_recon(
    checkpoint: Checkpoint,
    pair: FramePair,
    path: Union[str, Path],
    box: Optional[Sequence[float]] = None,
    device: Optional[torch.device] = None
) -> Dict[str, Any]:
    """
    Write a 4-pane grid: I_t, I_{t+delta}, decode(reconstruct(encode(I_t), C_delta))
    and |reconstruction - I_t| scaled to its maximum.

    Parameters:
    -----------
    checkpoint : Checkpoint
        Must hold codec and reconstructor groups
    pair : FramePair
        Frames at the checkpoint's image size
    box : sequence of float, optional
        Motion box (x0, y0, x1, y1); adds the in-box share of the difference energy

    Returns:
    --------
    dict
        {"path", "clip_id", "delta", "in_box_energy"}

    Raises:
    -------
    CheckpointError
        The checkpoint has no reconstructor or codec
    """
    if not (checkpoint.has("reconstructor") and checkpoint.has("codec")):
        raise CheckpointError(
            f"{checkpoint.path} holds no reconstructor/codec (stage {checkpoint.stage}); "
            f"reconstruction grids need a pre-training checkpoint"
        )
    device = device or torch.device("cpu")
    model = checkpoint.build_model(with_head=False).to(device).eval()
    codec = checkpoint.build_codec().to(device).eval()
    reconstructor = checkpoint.build_reconstructor().to(device).eval()

    frame_a = pair.frame_a.unsqueeze(0).to(device)
    frame_b = pair.frame_b.unsqueeze(0).to(device)
    condition = model(frame_a, frame_b).condition
    recon = codec.decode(reconstructor(codec.encode(frame_a), condition)).clamp(0.0, 1.0)[0]

    difference = (recon - pair.frame_a.to(device)).abs()
    energy = difference.pow(2).sum(dim=0)
    peak = float(difference.max())
    diff_pane = difference / peak if peak > 0 else difference

    grid = np.concatenate(
        [to_uint8(pair.frame_a), to_uint8(pair.frame_b), to_uint8(recon), to_uint8(diff_pane)], axis=1
    )
    written = save_png(grid, path, checkpoint.config_hash)
    in_box = box_energy_ratio(energy.cpu().numpy(), box) if box is not None else None
    if in_box is not None:
        logger.info(f"Reconstruction grid for {pair.clip_id}: in-box difference energy {in_box:.3f}")
    logger.info(f"Reconstruction grid written to {written}")
    return {"path": str(written), "clip_id": pair.clip_id, "delta": pair.delta, "in_box_energy": in_box}


# =============================================================================
# Command entry points
# =============================================================================

def _viz_inputs(run: RunConfig) -> Tuple[Checkpoint, List[ClipRecord], Path]:
    section = run.tree["viz"]
    if not section["checkpoint"]:
        raise ConfigError("viz.checkpoint must name a checkpoint file")
    checkpoint = load_checkpoint(section["checkpoint"])
    manifest = Path(section["manifest"] or run.tree["data"]["finetune_manifest"])
    records = load_manifest(manifest)
    if section["clip_id"] is not None:
        records = [r for r in records if r.clip_id == section["clip_id"]]
        if not records:
            raise ConfigError(f"clip {section['clip_id']!r} not found in {manifest}")
    if not records:
        raise ConfigError(f"manifest {manifest} lists no clips")
    return checkpoint, records, manifest


def _motion_boxes(manifest: Path) -> Optional[Dict[str, List[float]]]:
    path = manifest.parent / "motion_boxes.json"
    return read_json(path) if path.is_file() else None


def _corpus_image_size(manifest: Path) -> Optional[int]:
    path = manifest.parent / "corpus.json"
    if not path.is_file():
        return None
    return read_json(path)["config"]["image_size"]


def run_viz_recon(run: RunConfig, device: Optional[torch.device] = None) -> Path:
    """Reconstruction grid for viz.clip_id (default: first clip) of viz.manifest."""
    device = device or resolve_device()
    checkpoint, records, manifest = _viz_inputs(run)
    clip = records[0]
    image_size = checkpoint.config["data"]["image_size"]
    if clip.onset_idx is not None and clip.apex_idx is not None and clip.apex_idx > clip.onset_idx:
        pair = keyframe_pair(clip, image_size)
    else:
        rng = np.random.default_rng(derive_seed(run.seed, "viz", clip.clip_id))
        pair = sample_frame_pair(clip, checkpoint.config["data"]["delta_range"], rng, image_size)

    box = None
    boxes = _motion_boxes(manifest)
    if boxes is not None and clip.clip_id in boxes:
        scale = image_size / (_corpus_image_size(manifest) or image_size)
        box = [v * scale for v in boxes[clip.clip_id]]

    info = viz_recon(checkpoint, pair, run.output_dir / f"recon_{clip.clip_id}.png", box, device)
    write_json(run.output_dir / f"recon_{clip.clip_id}.json", {**info, "config_hash": checkpoint.config_hash})
    return Path(info["path"])


def run_viz_cam(run: RunConfig, device: Optional[torch.device] = None) -> Path:
    """
    Grad-CAM overlay for viz.clip_id (default: first clip) of viz.manifest.

    With viz.localization the localization rate over the whole manifest is
    measured against the corpus motion boxes and written to cam_localization.json.
    """
    device = device or resolve_device()
    section = run.tree["viz"]
    checkpoint, records, manifest = _viz_inputs(run)
    if checkpoint.head_classes is None:
        raise CheckpointError(f"{checkpoint.path} has no classification head; Grad-CAM needs a fine-tuned checkpoint")
    model = checkpoint.build_model(with_head=True).to(device).eval()

    clip = records[0]
    info = viz_cam(
        model, clip, run.output_dir / f"cam_{clip.clip_id}.png",
        section["target_class"], config_hash=checkpoint.config_hash
    )
    write_json(run.output_dir / f"cam_{clip.clip_id}.json", {**info, "config_hash": checkpoint.config_hash})

    if section["localization"]:
        boxes = _motion_boxes(manifest)
        if boxes is None:
            raise ConfigError(f"viz.localization needs motion_boxes.json next to {manifest}")
        everything = load_manifest(manifest)
        rate, correct = cam_localization_rate(
            model, everything, boxes, box_image_size=_corpus_image_size(manifest)
        )
        write_json(run.output_dir / "cam_localization.json", {
            "rate": rate,
            "correct": correct,
            "clips": len(everything),
            "config_hash": checkpoint.config_hash,
        })
    return Path(info["path"])
