"""
Configuration constants for the MA2MI pipeline.

Contains the default hyperparameters of the full-scale setting and the default
configuration tree every command starts from. Desk-scale runs override these
through the JSON files under configs/.
"""

import copy
from typing import Any, Dict

# Input frames
IMAGE_SIZE = 256  # frames are resized to 256x256
FRAME_FILENAME = "{:06d}.png"  # zero-padded frame files inside a clip's frame_dir
IMAGENET_MEAN = [0.485, 0.456, 0.406]
IMAGENET_STD = [0.229, 0.224, 0.225]

# Frame-pair sampling
DELTA_RANGE = [3, 8]  # sample interval, inclusive on both ends
PAIRS_PER_CLIP = 1

# Frame cache (decoded frames kept in memory per process)
FRAME_CACHE_SIZE = 2048

# Model
ENCODER_PRESET = "resnet18"  # "resnet18" or "tiny"
CONDITION_DIM = 256
FUSION = "sum"  # "sum", "concat" or "gated"

# Cosine stabilization
COSINE_EPS = 1e-8

# Position loss transforms
L3_TRANSFORMS = ["hflip", "translate", "rotate"]
L3_MAX_ROTATION_DEG = 15.0
L3_MAX_SHIFT_CELLS = 1

# Pre-training optimization
PRETRAIN_LR = 4e-4
PRETRAIN_BATCH_SIZE = 32
PRETRAIN_EPOCHS = 80
PRETRAIN_WEIGHT_DECAY = 0.05
ADAM_BETAS = [0.9, 0.999]
FINAL_LR_RATIO = 0.01  # exponential decay reaches lr0 * 0.01 at the last epoch

# Fine-tuning optimization
FINETUNE_LR = 4e-4
FINETUNE_BATCH_SIZE = 16
FINETUNE_EPOCHS = 80
FINETUNE_WEIGHT_DECAY = 0.1
NUM_CLASSES = 5

# Latent codec
CODEC_KIND = "conv-ae"  # "conv-ae" or "identity"
CODEC_DOWNSAMPLE = 8
CODEC_LATENT_CHANNELS = 4
CODEC_PSNR_THRESHOLD = 30.0  # dB on held-out frames after pre-fit

# Conditional reconstructor
RECON_PATCH_SIZE = 2
RECON_DIM = 384
RECON_DEPTH = 6
RECON_HEADS = 6

# Evaluation
KFOLD_K = 5

# Training log / diagnostics
LOG_EVERY = 10  # steps between console summaries
DIAGNOSTICS_DIR = "diagnostics"

# Environment switch for deterministic kernels
DETERMINISTIC_ENV = "MA2MI_DETERMINISTIC"


DEFAULT_CONFIG: Dict[str, Any] = {
    "seed": 0,
    "output_dir": "runs/default",
    "data": {
        "pretrain_manifest": "data/synth/pretrain.jsonl",
        "finetune_manifest": "data/synth/finetune.jsonl",
        "maer_manifest": "data/synth/maer.jsonl",
        "image_size": IMAGE_SIZE,
        "delta_range": list(DELTA_RANGE),
        "pairs_per_clip": PAIRS_PER_CLIP,
        "max_pretrain_subjects": None,
        "mean": list(IMAGENET_MEAN),
        "std": list(IMAGENET_STD),
        "num_workers": 0,
        "frame_cache_size": FRAME_CACHE_SIZE,
    },
    "augment": {
        "crop_p": 0.5,
        "crop_pad": 16,
        "flip_p": 0.5,
        "rotate_p": 0.5,
        "rotate_max_deg": 10.0,
        "pretrain": False,
    },
    "model": {
        "preset": ENCODER_PRESET,
        "cond_dim": CONDITION_DIM,
        "fusion": FUSION,
        "use_position_encoder": True,
    },
    "codec": {
        "kind": CODEC_KIND,
        "downsample": CODEC_DOWNSAMPLE,
        "latent_channels": CODEC_LATENT_CHANNELS,
        "auto_fit": True,
        "fit_epochs": 10,
        "fit_lr": 1e-3,
        "fit_batch_size": 32,
        "psnr_threshold": CODEC_PSNR_THRESHOLD,
        "checkpoint": None,
    },
    "reconstructor": {
        "patch_size": RECON_PATCH_SIZE,
        "dim": RECON_DIM,
        "depth": RECON_DEPTH,
        "heads": RECON_HEADS,
        "mlp_ratio": 4.0,
    },
    "loss": {
        "w_rec": 1.0,
        "w_pos": 1.0,
        "rec_reduction": "mean",
        "l3_transforms": list(L3_TRANSFORMS),
        "l3_max_rotation_deg": L3_MAX_ROTATION_DEG,
        "l3_max_shift_cells": L3_MAX_SHIFT_CELLS,
        "l3_reduction": "norm",
    },
    "optim": {
        "lr": PRETRAIN_LR,
        "weight_decay": PRETRAIN_WEIGHT_DECAY,
        "betas": list(ADAM_BETAS),
        "batch_size": PRETRAIN_BATCH_SIZE,
    },
    "schedule": {
        "epochs": PRETRAIN_EPOCHS,
        "final_lr_ratio": FINAL_LR_RATIO,
        "checkpoint_every": 1,
        "log_every": LOG_EVERY,
        "max_steps": None,
        "resume": None,
    },
    "pretrain": {
        "mode": "ma2mi",  # "ma2mi" or "maer"
    },
    "finetune": {
        "checkpoint": None,
        "num_classes": NUM_CLASSES,
        "tune_position_encoder": True,
        "tune_action_encoder": True,
        "keep_reconstruction_task": False,
        "w_rec": 1.0,
        "epochs": FINETUNE_EPOCHS,
        "batch_size": FINETUNE_BATCH_SIZE,
        "lr": FINETUNE_LR,
        "weight_decay": FINETUNE_WEIGHT_DECAY,
        "final_lr_ratio": FINAL_LR_RATIO,
        "class_weighting": False,
    },
    "evaluate": {
        "protocol": "LOSO",
        "k": KFOLD_K,
        "report_a": None,
        "report_b": None,
    },
    "corpus": {
        "subjects_pretrain": 10,
        "subjects_finetune": 10,
        "clips_per_subject": 20,
        "classes": 5,
        "amplitude_macro": [8.0, 16.0],
        "amplitude_micro": [1.0, 3.0],
        "noise": 0.0,
        "frames": 24,
        "image_size": 64,
        "seed": 0,
        "root": "data/synth",
    },
    "viz": {
        "checkpoint": None,
        "clip_id": None,
        "target_class": None,
        "manifest": None,
        "localization": False,
    },
}


def default_config() -> Dict[str, Any]:
    """Return a fresh deep copy of the default configuration tree."""
    return copy.deepcopy(DEFAULT_CONFIG)
