"""Keyframe-centric human-object interaction detection in video."""

from .data import KeyframeSample, Taxonomy
from .evaluation import Detection, EvalReport, evaluate
from .geometry import Box, PairProposal, Trajectory, fill_trajectory, iou, union_box
from .model import HOIDetector, ModelConfig
from .optim import TrainConfig
from .synthetic import SyntheticSpec, generate_synthetic

__version__ = "0.1.0"

__all__ = [
    "Box",
    "Detection",
    "EvalReport",
    "HOIDetector",
    "KeyframeSample",
    "ModelConfig",
    "PairProposal",
    "SyntheticSpec",
    "Taxonomy",
    "TrainConfig",
    "Trajectory",
    "evaluate",
    "fill_trajectory",
    "generate_synthetic",
    "iou",
    "union_box",
    "__version__",
]
