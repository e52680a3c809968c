"""Learned space and shape segmentation of deformable objects in grayscale images."""
from .config import PipelineConfig, desk_preset, load_config, paper_preset
from .exceptions import (DegenerateInputError, DeformsegError, DimensionError, DivergenceError,
                         MissingDetectorError)
from .metrics import EvalReport, acd, acd_shapes, dsc, jaccard, pearson_r
from .nn import DeepClassifier, NetworkModel
from .pipeline import DeformableSegmenter, SegmentationResult
from .shape_model import PointDistributionModel, ShapeModel, SpaceParams, build_ssm, procrustes_align
from .space import SpaceEstimator

__version__ = "0.1.0"

__all__ = [
    "DeepClassifier", "DeformableSegmenter", "DegenerateInputError", "DeformsegError",
    "DimensionError", "DivergenceError", "EvalReport", "MissingDetectorError", "NetworkModel",
    "PipelineConfig", "PointDistributionModel", "SegmentationResult", "ShapeModel", "SpaceEstimator",
    "SpaceParams", "acd", "acd_shapes", "build_ssm", "desk_preset", "dsc", "jaccard", "load_config",
    "paper_preset", "pearson_r", "procrustes_align",
]
