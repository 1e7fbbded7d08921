"""Toy end-to-end line detector built around deformable line attention."""

from .config import PUBLISHED_SETTINGS, PRESETS, DetectorConfig, LossWeights, get_preset
from .loss import LossResult, compute_loss, focal_loss
from .matching import Assignment, bipartite_match
from .model import DecoderLayer, DetectorOutput, LineDetector, QuerySelector, QuerySet, decoder_layer, select_queries
from .train import AdamW, TrainingDiverged, TrainResult, detection_loss, evaluate_model, train_toy

__all__ = [
    "PUBLISHED_SETTINGS", "PRESETS", "DetectorConfig", "LossWeights", "get_preset",
    "LossResult", "compute_loss", "focal_loss", "Assignment", "bipartite_match",
    "DecoderLayer", "DetectorOutput", "LineDetector", "QuerySelector", "QuerySet", "decoder_layer",
    "select_queries", "AdamW", "TrainingDiverged", "TrainResult", "detection_loss", "evaluate_model", "train_toy",
]
