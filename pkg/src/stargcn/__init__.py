"""Stacked graph-convolutional matrix completion with masked-embedding
reconstruction, for transductive and cold-start rating prediction on
bipartite user-item graphs."""

from .graph import (
    ITEM,
    USER,
    EdgeMaskView,
    RatingGraph,
    RatingLevels,
    build_graph,
    mask_edges,
    neighbors,
    subgraph_from_edges,
)
from .tape import RngStream, Tape, Tensor

__all__ = [
    "ITEM",
    "USER",
    "EdgeMaskView",
    "RatingGraph",
    "RatingLevels",
    "RngStream",
    "Tape",
    "Tensor",
    "build_graph",
    "mask_edges",
    "neighbors",
    "subgraph_from_edges",
]

__version__ = "0.1.0"
