"""Generalized category discovery on long-tailed, precomputed embeddings."""

from .classifier import PrototypeSet, TrainConfig, init_prototypes, predict, train
from .density import compute_density, find_peaks, iouk, nmds
from .estimation import EstimationConfig, estimate_k
from .evaluation import clustering_acc, gcd_report, hungarian
from .knn import KnnGraph, build_knn
from .selection import SelectionConfig, resample_epoch
from .store import EmbeddingSet, LabelInfo, generate_synthetic, load_dataset, split_labelled

__version__ = "0.1.0"

__all__ = [
    "EmbeddingSet", "LabelInfo", "generate_synthetic", "load_dataset", "split_labelled",
    "KnnGraph", "build_knn",
    "compute_density", "find_peaks", "iouk", "nmds",
    "SelectionConfig", "resample_epoch",
    "PrototypeSet", "TrainConfig", "init_prototypes", "predict", "train",
    "EstimationConfig", "estimate_k",
    "clustering_acc", "gcd_report", "hungarian",
]
