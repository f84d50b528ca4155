"""
MA2MI Package

Macro-to-micro transfer learning for micro-expression recognition: a two-branch
micro-action encoder pre-trained by conditional latent reconstruction on
unlabeled macro-expression video, fine-tuned on onset/apex pairs and evaluated
with subject-independent cross-validation.
"""

# Data and corpus
from .data import ClipRecord, FramePair, SplitPlan, load_manifest, make_splits, sample_frame_pair, keyframe_pair
from .synth import CorpusConfig, generate_corpus

# Models and losses
from .miacnet import MIACNet
from .codec import LatentCodec
from .reconstructor import ConditionalReconstructor
from .losses import l1_diversity, l2_cross_face, l3_equivariance, l_pos, l_rec, l_pre, cross_entropy

# Stages
from .pretrain import Pretrainer, run_pretrain
from .finetune import FinetuneConfig, predict, train_classifier, run_finetune
from .evaluate import ConfusionMatrix, FoldResult, accuracy, uf1, run_protocol, compare_runs
from .checkpoint import save_checkpoint, load_checkpoint

# Configuration and errors
from .run_config import RunConfig, load_run_config
from .exceptions import MA2MIError

__version__ = "0.1.0"

__all__ = [
    # Data
    'ClipRecord',
    'FramePair',
    'SplitPlan',
    'load_manifest',
    'make_splits',
    'sample_frame_pair',
    'keyframe_pair',
    'CorpusConfig',
    'generate_corpus',

    # Models
    'MIACNet',
    'LatentCodec',
    'ConditionalReconstructor',

    # Losses
    'l1_diversity',
    'l2_cross_face',
    'l3_equivariance',
    'l_pos',
    'l_rec',
    'l_pre',
    'cross_entropy',

    # Stages
    'Pretrainer',
    'run_pretrain',
    'FinetuneConfig',
    'predict',
    'train_classifier',
    'run_finetune',
    'ConfusionMatrix',
    'FoldResult',
    'accuracy',
    'uf1',
    'run_protocol',
    'compare_runs',
    'save_checkpoint',
    'load_checkpoint',

    # Configuration
    'RunConfig',
    'load_run_config',
    'MA2MIError',
]
