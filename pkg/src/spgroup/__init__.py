"""Unsupervised 3D semantic pseudo-labels by superpoint growing and spectral grouping."""
from .data import IGNORE, FeatureSet, LabelAssignment, PointCloud, SuperpointPartition
from .geometry import InitConfig, init_superpoints
from .growing import grow_superpoints, growth_schedule, superpoint_mean_features
from .kmeans import KMeans, KMeansConfig, kmeans_fit
from .metrics import compute_metrics, hungarian_match, superpoint_purity
from .pipeline import PipelineConfig, run_pipeline
from .spectral import GlobalPatternGrouping

__version__ = "0.1.0"

__all__ = [
    "IGNORE", "FeatureSet", "LabelAssignment", "PointCloud", "SuperpointPartition",
    "InitConfig", "init_superpoints", "grow_superpoints", "growth_schedule", "superpoint_mean_features",
    "KMeans", "KMeansConfig", "kmeans_fit", "compute_metrics", "hungarian_match", "superpoint_purity",
    "PipelineConfig", "run_pipeline", "GlobalPatternGrouping",
]
