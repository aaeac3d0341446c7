"""Query-based blackbox attacks on deep clustering models, with metrics, defenses and a mock service."""

from .attack import (AttackConfig, QueryLedger, TrainedGenerator, attack_loss, constraint_loss,
                     epsilon_sweep, gan_loss, generate_adversarial, train_attack)
from .clustering import (ClusterModel, LabelOnlyModel, ToyDeepClusterer, kmeans_baseline,
                         load_cluster_model, save_cluster_model, train_toy_clusterer)
from .data import Dataset, ImageBatch, make_synthetic_image_dataset, resolve_dataset
from .metrics import MetricsReport, acc, ari, nmi, report

__version__ = "0.1.0"

__all__ = [
    "AttackConfig", "ClusterModel", "Dataset", "ImageBatch", "LabelOnlyModel", "MetricsReport",
    "QueryLedger", "ToyDeepClusterer", "TrainedGenerator", "acc", "ari", "attack_loss",
    "constraint_loss", "epsilon_sweep", "gan_loss", "generate_adversarial", "kmeans_baseline",
    "load_cluster_model", "make_synthetic_image_dataset", "nmi", "report", "resolve_dataset",
    "save_cluster_model", "train_attack", "train_toy_clusterer",
]
