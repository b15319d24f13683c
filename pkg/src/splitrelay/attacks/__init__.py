"""Adversaries against the relay: clustering, inversion and extraction."""

from .clustering import ClusterOutcome, dbscan, kmeans_auto, perfect_cluster_accuracy
from .extraction import ExtractionOutcome, extraction_attack, jitter_probes
from .inversion import InversionDiverged, InversionOutcome, ssim, unsplit_invert

__all__ = [
    "ClusterOutcome", "ExtractionOutcome", "InversionDiverged", "InversionOutcome",
    "dbscan", "extraction_attack", "jitter_probes", "kmeans_auto",
    "perfect_cluster_accuracy", "ssim", "unsplit_invert",
]
