"""Weakly supervised segmentation with transformer CAMs and gradient clipping.

Modules
-------
numerics       reverse-mode autodiff tensors and gradient checking
vit            plain vision transformer encoder with class tokens
cam            coarse/fine CAM generation with adaptive attention fusion
decoder        segmentation decoder and per-pixel gradient clipping
synthetic      procedural shape dataset with exact masks
optim          AdamW, momentum SGD, LR schedules
metrics        split-level IoU / precision / recall
training       two-phase pipeline orchestration and checkpoints
serialization  WTT1 tensors, PGM heatmaps, checkpoint directories
"""

from .cam import AafConfig, WeakTrCam
from .decoder import DecoderConfig, SegDecoder
from .metrics import EvalReport, evaluate
from .numerics import Parameter, Tensor, check_gradient
from .synthetic import DataConfig, generate_sample, generate_split
from .training import SeedConfig, TrainConfig, retrain, train_cam
from .vit import EncoderConfig, VitEncoder

__version__ = "0.1.0"

__all__ = [
    "AafConfig", "WeakTrCam", "DecoderConfig", "SegDecoder", "EvalReport", "evaluate",
    "Parameter", "Tensor", "check_gradient", "DataConfig", "generate_sample",
    "generate_split", "SeedConfig", "TrainConfig", "retrain", "train_cam",
    "EncoderConfig", "VitEncoder",
]
