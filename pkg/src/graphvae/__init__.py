"""Variational autoencoder for small attributed graphs (molecules), in numpy."""

from .autodiff import Adam, BatchNorm, Tensor
from .chem import BONDS, QM9_ATOMS, ZINC_ATOMS, MoleculeRecord, canonical_key, check_valid
from .data import ExperimentConfig, load_records, parse_sdf, split, synthetic_dataset
from .evaluate import interpolate_line, matching_robustness, quality_metrics, traverse_plane
from .graph import DiscreteGraph, GraphLabel, ProbabilisticGraph, label_of, point_estimate
from .matching import match, max_pool_match
from .model import DecoderConfig, EncoderConfig, GraphVAE, LossWeights, make_trainer, train_step

__version__ = "0.1.0"

__all__ = [
    "Adam", "BatchNorm", "Tensor", "BONDS", "QM9_ATOMS", "ZINC_ATOMS", "MoleculeRecord", "canonical_key",
    "check_valid", "ExperimentConfig", "load_records", "parse_sdf", "split", "synthetic_dataset",
    "interpolate_line", "matching_robustness", "quality_metrics", "traverse_plane", "DiscreteGraph",
    "GraphLabel", "ProbabilisticGraph", "label_of", "point_estimate", "match", "max_pool_match",
    "DecoderConfig", "EncoderConfig", "GraphVAE", "LossWeights", "make_trainer", "train_step",
]
