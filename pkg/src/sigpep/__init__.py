"""Signal peptide classification, cleavage-site tagging, and metagenomic
screening, on a small self-contained numpy autodiff engine."""

from .autodiff import Graph, ParameterStore, Tensor, finite_difference_gradient
from .loss import LossConfig, cb_weights, joint_loss, ldam_loss, ldam_margins
from .model import ModelConfig, Prediction, forward, init_params, load_checkpoint, save_checkpoint
from .seqio import (AnnotatedRecord, ClassCounts, EncodedExample, OrganismGroup,
                    RegionLabel, SpType, class_counts, encode,
                    parse_annotated_fasta, parse_plain_fasta, serialize_annotated)
from .trainer import TrainConfig, TrainResult, adam_step, train

__version__ = "0.1.0"

__all__ = [
    "AnnotatedRecord", "ClassCounts", "EncodedExample", "Graph", "LossConfig",
    "ModelConfig", "OrganismGroup", "ParameterStore", "Prediction",
    "RegionLabel", "SpType", "Tensor", "TrainConfig", "TrainResult",
    "adam_step", "cb_weights", "class_counts", "encode",
    "finite_difference_gradient", "forward", "init_params", "joint_loss",
    "ldam_loss", "ldam_margins", "load_checkpoint", "parse_annotated_fasta",
    "parse_plain_fasta", "save_checkpoint", "serialize_annotated", "train",
]
