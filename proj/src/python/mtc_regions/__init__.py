"""Urban region embeddings from mobile traffic."""

from ._core import (
    Aggregator,
    Error,
    TcnAutoencoder,
    adjusted_mutual_information,
    downsample_sum,
    pipeline_stages,
    run_pipeline,
    synthesize_city,
    triplet_loss,
    ward_cluster,
    weighted_entropy,
    weighted_mutual_information,
)

__all__ = [
    "Aggregator",
    "Error",
    "TcnAutoencoder",
    "adjusted_mutual_information",
    "downsample_sum",
    "pipeline_stages",
    "run_pipeline",
    "synthesize_city",
    "triplet_loss",
    "ward_cluster",
    "weighted_entropy",
    "weighted_mutual_information",
]
