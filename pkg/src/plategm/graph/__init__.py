"""Chain graphs with plates and the structural operations on them."""

from plategm.graph.ops import (
    Diagnostic,
    chain_components,
    deterministic_islands,
    eliminate_deterministic,
    expand_plates,
    instantiate_optional,
    markov_blanket,
    maximal_cliques,
    merge_clique_component,
    prune_given,
    remove_barren,
    reverse_arc,
    validate_graph,
)
from plategm.graph.tables import Factor, conditional, joint_factor
from plategm.graph.types import (
    Arc,
    ChainComponentPartition,
    ChainGraphWithPlates,
    GraphError,
    Plate,
    VariableNode,
)

__all__ = [
    "Arc",
    "ChainComponentPartition",
    "ChainGraphWithPlates",
    "Diagnostic",
    "Factor",
    "GraphError",
    "Plate",
    "VariableNode",
    "chain_components",
    "conditional",
    "deterministic_islands",
    "eliminate_deterministic",
    "expand_plates",
    "instantiate_optional",
    "joint_factor",
    "markov_blanket",
    "maximal_cliques",
    "merge_clique_component",
    "prune_given",
    "remove_barren",
    "reverse_arc",
    "validate_graph",
]
