"""Language-referred 3D point-cloud segmentation, from scratch on numpy.

The package covers the full loop: reverse-mode autodiff, a sparse voxel
backbone with per-stage word fusion, a recurrent text encoder, a
query-based mask decoder, losses, metrics, a procedural scene corpus,
an Adam trainer with binary checkpoints, and a CLI/HTTP service on top.
"""

from .autodiff import Tape, Tensor
from .config import TrainConfig, load_train_config, save_train_config
from .errors import (CheckpointError, ContractError, DegenerateInputError,
                     GenerationError, IndexRangeError, LabelError, ModelError,
                     RefSegError, ShapeError, TrainingError)
from .head import HeadConfig, Prediction
from .losses import LossConfig
from .metrics import EvalResult, iou, miou
from .model import ReferringSegmentationModel
from .scenes import SceneSpec, generate_corpus, load_corpus, split_samples
from .trainer import TrainResult, evaluate_checkpoint, evaluate_model, train

__all__ = [
    "CheckpointError", "ContractError", "DegenerateInputError", "EvalResult",
    "GenerationError", "HeadConfig", "IndexRangeError", "LabelError",
    "LossConfig", "ModelError", "Prediction", "RefSegError",
    "ReferringSegmentationModel", "SceneSpec", "ShapeError", "Tape", "Tensor",
    "TrainConfig", "TrainResult", "TrainingError", "evaluate_checkpoint",
    "evaluate_model", "generate_corpus", "iou", "load_corpus",
    "load_train_config", "miou", "save_train_config", "split_samples",
    "train",
]
