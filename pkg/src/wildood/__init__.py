"""Out-of-distribution scoring and evaluation over precomputed embeddings and logits."""

from .featstore import FeatureRecord, FeatureTable, Manifest, filter_split, load_feature_table, save_feature_table
from .heads import HeadParams, TrainConfig, init_heads, train_heads
from .metrics import MetricsSummary, aupr, auroc, autc, roc_curve, summarize, youden_threshold
from .prototypes import KnnIndex, PrototypeSet, build_knn_index, fit_class_means
from .scorers import Artifacts, ScoreRecord, ScoreReport, agreement_score, score_dataset
from .synthgen import SynthConfig, gen_gaussian_benchmark

__version__ = "0.1.0"

__all__ = [
    "Artifacts",
    "FeatureRecord",
    "FeatureTable",
    "HeadParams",
    "KnnIndex",
    "Manifest",
    "MetricsSummary",
    "PrototypeSet",
    "ScoreRecord",
    "ScoreReport",
    "SynthConfig",
    "TrainConfig",
    "agreement_score",
    "aupr",
    "auroc",
    "autc",
    "build_knn_index",
    "filter_split",
    "fit_class_means",
    "gen_gaussian_benchmark",
    "init_heads",
    "load_feature_table",
    "roc_curve",
    "save_feature_table",
    "score_dataset",
    "summarize",
    "train_heads",
    "youden_threshold",
]
