"""Desk-scale refinement of noisy soiling segmentation annotations.

Pipeline: synthesize scenes with simulated coarse annotations and a stack of
nine candidate labelings, train the two-stage ensemble refiner, emit refined
per-pixel annotations, and evaluate them against ground truth plus a blinded
human AB review workflow.
"""

__version__ = "0.1.0"

from .core import (
    IGNORE,
    Image,
    LabelMap,
    ProbMap,
    PseudoLabelStack,
    Sample,
    SoilingClass,
)
from .evaluation import (
    ConfusionMatrix,
    EvalReport,
    SplitAssignment,
    intersection_set,
    label_quality,
    metrics,
    predict_map,
    refine,
    stratified_split,
    three_way_eval,
)
from .experiment import ExperimentResult, run_experiment
from .synth import SceneSpec, generate_dataset
from .tinynet import Architecture, NetParams, load_checkpoint, save_checkpoint
from .trainer import (
    StageReport,
    TrainConfig,
    train_downstream,
    train_stage1,
    train_stage2,
)

__all__ = [
    "IGNORE",
    "Architecture",
    "ConfusionMatrix",
    "EvalReport",
    "ExperimentResult",
    "Image",
    "LabelMap",
    "NetParams",
    "ProbMap",
    "PseudoLabelStack",
    "Sample",
    "SceneSpec",
    "SoilingClass",
    "SplitAssignment",
    "StageReport",
    "TrainConfig",
    "generate_dataset",
    "intersection_set",
    "label_quality",
    "load_checkpoint",
    "metrics",
    "predict_map",
    "refine",
    "run_experiment",
    "save_checkpoint",
    "stratified_split",
    "three_way_eval",
    "train_downstream",
    "train_stage1",
    "train_stage2",
]
