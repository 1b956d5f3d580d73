"""Diversified ranking toolkit: an interest-aware greedy re-ranking
teacher distilled into a point-wise student that scores each candidate
independently at serving time.
"""

from .backbone import ConfigError, TrainConfig, VocabError
from .data import DataError, Dataset, SyntheticSpec, generate_synthetic, load_jsonl, save_jsonl
from .distill import CDMModel, CheckpointError, TrainingDiverged, load_checkpoint, save_checkpoint, train
from .evaluation import MetricReport, RankedList, evaluate_model, fused_rank, latency_bench
from .teacher import TeacherLabeling, mmr_select

__version__ = "0.1.0"

__all__ = [
    "CDMModel", "CheckpointError", "ConfigError", "DataError", "Dataset",
    "MetricReport", "RankedList", "SyntheticSpec", "TeacherLabeling",
    "TrainConfig", "TrainingDiverged", "VocabError", "evaluate_model",
    "fused_rank", "generate_synthetic", "latency_bench", "load_checkpoint",
    "load_jsonl", "mmr_select", "save_checkpoint", "save_jsonl", "train",
]
