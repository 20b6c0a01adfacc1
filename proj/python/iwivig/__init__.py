"""Self-interpretable window vision GNN."""

from ._iwivig import (
    ConfigError,
    DataError,
    Model,
    NumericError,
    cli,
    generate_planted_dataset,
    info_loss,
    knn_edges,
    load_image,
    pq_sparsity,
    random_inclusion_probability,
    render_overlay,
    top_percentile_subgraph,
)

__all__ = [
    "ConfigError",
    "DataError",
    "Model",
    "NumericError",
    "cli",
    "generate_planted_dataset",
    "info_loss",
    "knn_edges",
    "load_image",
    "pq_sparsity",
    "random_inclusion_probability",
    "render_overlay",
    "top_percentile_subgraph",
]
