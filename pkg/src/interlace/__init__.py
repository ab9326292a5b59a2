"""Triplet-based layer pruning with freeze-anchored recovery fine-tuning,
on a small decoder-only transformer with a synthetic feature prefix."""

from .errors import InterlaceError
from .model import ModelConfig, TransformerModel, forward_with_taps
from .planner import PruningPlan, make_plan
from .similarity import SimilarityReport, score
from .surgery import SurgeryRecord, apply_plan
from .taskgen import TaskSpec, generate
from .trainer import TrainConfig, TrainLog

__version__ = "0.1.0"

__all__ = [
    "InterlaceError", "ModelConfig", "TransformerModel", "forward_with_taps", "PruningPlan", "make_plan",
    "SimilarityReport", "score", "SurgeryRecord", "apply_plan", "TaskSpec", "generate", "TrainConfig", "TrainLog",
]
