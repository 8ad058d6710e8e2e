"""Hierarchical convolutional network for pixel-wise crack segmentation."""
from .bayes import GaussianCrackClassifier, GaussianCrackModel
from .checkpoint import load_checkpoint, save_checkpoint
from .data import AugmentConfig, Sample, augment, load_pairs, synth_crack
from .estimators import HCNNSegmenter
from .metrics import ConfusionCounts, EvalReport, confusion, evaluate_dir, f_score, q_measure
from .network import Network, NetworkConfig, SideOutputs, build_network
from .training import OptimizerState, grad_check, image_loss, pixel_bce, sgd_step, train

__version__ = "0.1.0"

__all__ = [
    "AugmentConfig", "ConfusionCounts", "EvalReport", "GaussianCrackClassifier",
    "GaussianCrackModel", "HCNNSegmenter", "Network", "NetworkConfig", "OptimizerState",
    "Sample", "SideOutputs", "augment", "build_network", "confusion", "evaluate_dir",
    "f_score", "grad_check", "image_loss", "load_checkpoint", "load_pairs", "pixel_bce",
    "q_measure", "save_checkpoint", "sgd_step", "synth_crack", "train",
]
