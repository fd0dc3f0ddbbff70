"""FedSiKD: federated learning with statistics-based client clustering and
per-cluster teacher/student knowledge distillation, plus FedAvg,
RandomCluster and FL+HC baselines, on a small numpy neural-network kernel."""

from .clustering import agglomerative_cluster, kmeans, select_k
from .data import Dataset, PartitionSpec, compute_client_stats, dirichlet_partition, load_dataset
from .federation import STRATEGIES, FederationConfig, run_experiment
from .metrics import RoundMetrics, variance_diagnostics, write_metrics
from .tensor_nn import Architecture, TrainConfig, build_model, reference_architectures, sgd_train

__version__ = "0.1.0"

__all__ = [
    "Architecture",
    "Dataset",
    "FederationConfig",
    "PartitionSpec",
    "RoundMetrics",
    "STRATEGIES",
    "TrainConfig",
    "agglomerative_cluster",
    "build_model",
    "compute_client_stats",
    "dirichlet_partition",
    "kmeans",
    "load_dataset",
    "reference_architectures",
    "run_experiment",
    "select_k",
    "sgd_train",
    "variance_diagnostics",
    "write_metrics",
]
