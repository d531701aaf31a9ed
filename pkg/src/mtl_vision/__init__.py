"""Multi-task vision: detection, instance and semantic segmentation, and captioning on one backbone."""
from .augment import AugConfig, make_views
from .cocodata import DatasetIndex, Vocabulary, build_vocab, load_coco
from .core import Box, Detection, InstanceAnnotation, LabeledBox, Sample
from .estimator import MultiTaskEstimator
from .losses import LossWeights
from .metrics import MetricReport, bleu4, coco_ap, segmentation_iou
from .network import ModelConfig, MultiTaskNet
from .trainer import EvalConfig, OptimizerConfig, TrainConfig, evaluate_all, train

__version__ = "0.1.0"

__all__ = [
    "AugConfig", "make_views", "DatasetIndex", "Vocabulary", "build_vocab", "load_coco", "Box", "Detection",
    "InstanceAnnotation", "LabeledBox", "Sample", "MultiTaskEstimator", "LossWeights", "MetricReport", "bleu4",
    "coco_ap", "segmentation_iou", "ModelConfig", "MultiTaskNet", "EvalConfig", "OptimizerConfig",
    "TrainConfig", "evaluate_all", "train",
]
